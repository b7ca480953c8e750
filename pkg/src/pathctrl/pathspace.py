"""Discrete canonical path space.

Paths live on a fixed :class:`TimeGrid`.  A :class:`Path` covers the indices
``start..N``; a :class:`PathPrefix` covers ``0..k`` and is the only object
handed to adapted rules (controls, coefficients, partitions), so a rule can
never see values past its cut index.

Both types accept leading batch dimensions: ``values`` has shape
``batch + (length, d)``.  All operations broadcast over the batch.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


class PathError(ValueError):
    """Grid/dimension mismatch or an index outside the grid."""


def _frozen(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.flags.writeable:
        a = a.view()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Time nodes ``0 = t_0 < ... < t_N = T``."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = _frozen(np.array(self.nodes, dtype=float))
        if nodes.ndim != 1 or nodes.size < 2:
            raise PathError("a grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise PathError("grid must start at 0")
        if not np.all(np.diff(nodes) > 0):
            raise PathError("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if T <= 0 or int(N) != N or N < 1:
            raise PathError(f"need T > 0 and integer N >= 1, got T={T}, N={N}")
        nodes = np.linspace(0.0, T, int(N) + 1)
        nodes[-1] = T
        return cls(nodes)

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def is_uniform(self) -> bool:
        s = self.steps
        return bool(np.allclose(s, s[0], rtol=1e-12, atol=0.0))

    @property
    def dt(self) -> float:
        """Uniform step size; raises on non-uniform grids."""
        if not self.is_uniform:
            raise PathError("grid is not uniform")
        return self.T / self.N

    def check_index(self, k: int) -> int:
        if int(k) != k or not 0 <= k <= self.N:
            raise PathError(f"index {k} outside 0..{self.N}")
        return int(k)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())


@dataclass(frozen=True, eq=False)
class Path:
    """Trajectory on ``grid`` over indices ``start..N``.

    ``start == 0`` is a full path; ``start > 0`` is a path-from-k such as the
    output of :func:`shift` or an SDE solved from a later time.
    """

    grid: TimeGrid
    values: np.ndarray
    start: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        check_values(v, self.grid.N - self.start + 1, "path")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "start", self.grid.check_index(self.start))

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[:-2]

    def at(self, j: int) -> np.ndarray:
        j = self.grid.check_index(j)
        if j < self.start:
            raise PathError(f"path starts at {self.start}, index {j} requested")
        return self.values[..., j - self.start, :]

    def segment(self, lo: int, hi: int) -> np.ndarray:
        """Values at indices ``lo..hi`` inclusive."""
        if lo < self.start or hi > self.grid.N or lo > hi:
            raise PathError(f"segment {lo}..{hi} not inside {self.start}..{self.grid.N}")
        return self.values[..., lo - self.start:hi - self.start + 1, :]

    def __getitem__(self, idx) -> "Path":
        """Select batch members; the time axis is untouched."""
        if not self.batch_shape:
            raise PathError("path has no batch dimension")
        return Path(self.grid, self.values[idx], self.start)

    def __len__(self):
        return self.batch_shape[0] if self.batch_shape else 1


@dataclass(frozen=True, eq=False)
class PathPrefix:
    """Values at indices ``0..k`` of a trajectory; nothing beyond ``k`` exists."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim < 2 or v.shape[-2] < 1 or v.shape[-2] > self.grid.N + 1:
            raise PathError(f"prefix length {v.shape} does not fit grid with N={self.grid.N}")
        check_values(v, v.shape[-2], "prefix")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def start(cls, grid: TimeGrid, x, batch: tuple = ()) -> "PathPrefix":
        """Prefix at index 0 holding the initial value ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(grid, np.broadcast_to(x, tuple(batch) + (1, x.size)))

    @property
    def k(self) -> int:
        return self.values.shape[-2] - 1

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[:-2]

    @property
    def last(self) -> np.ndarray:
        """State at the cut index, shape ``batch + (d,)``."""
        return self.values[..., -1, :]

    @property
    def t(self) -> float:
        return float(self.grid.nodes[self.k])

    def restrict(self, j: int) -> "PathPrefix":
        if int(j) != j or not 0 <= j <= self.k:
            raise PathError(f"cannot restrict prefix at {self.k} to {j}")
        return PathPrefix(self.grid, self.values[..., :j + 1, :])

    def extend(self, x) -> "PathPrefix":
        """Append one point (broadcast over the batch)."""
        if self.k >= self.grid.N:
            raise PathError("prefix already covers the whole grid")
        x = np.broadcast_to(np.asarray(x, dtype=float), self.batch_shape + (self.dim,))
        return PathPrefix(self.grid, np.concatenate([self.values, x[..., None, :]], axis=-2))

    def as_path(self) -> Path:
        if self.k != self.grid.N:
            raise PathError("only a prefix cut at N is a full path")
        return Path(self.grid, self.values)

    def __getitem__(self, idx) -> "PathPrefix":
        if not self.batch_shape:
            raise PathError("prefix has no batch dimension")
        return PathPrefix(self.grid, self.values[idx])

    def key(self) -> bytes:
        """Exact identity of an unbatched prefix, used for node tables."""
        if self.batch_shape:
            raise PathError("key() needs an unbatched prefix")
        return np.ascontiguousarray(self.values).tobytes()


def check_values(v: np.ndarray, length: int, what: str):
    if v.ndim < 2 or v.shape[-2] != length:
        raise PathError(f"{what} needs {length} time points, got shape {v.shape}")
    if v.shape[-1] < 1:
        raise PathError(f"{what} dimension must be >= 1")
    if not np.all(np.isfinite(v)):
        raise PathError(f"{what} values must be finite")


def _same_space(a, b):
    if a.grid != b.grid:
        raise PathError("grid mismatch")
    if a.dim != b.dim:
        raise PathError(f"dimension mismatch: {a.dim} vs {b.dim}")


def concat(prefix: PathPrefix, continuation: Path) -> Path:
    """Follow ``prefix`` up to its cut ``k``, then the increments of ``continuation``."""
    _same_space(prefix, continuation)
    k = prefix.k
    if continuation.start > k:
        raise PathError(f"continuation starts at {continuation.start}, after cut {k}")
    tail = continuation.segment(k, prefix.grid.N)
    tail = prefix.last[..., None, :] + (tail[..., 1:, :] - tail[..., :1, :])
    head = prefix.values
    shape = np.broadcast_shapes(head.shape[:-2], tail.shape[:-2])
    head = np.broadcast_to(head, shape + head.shape[-2:])
    tail = np.broadcast_to(tail, shape + tail.shape[-2:])
    return Path(prefix.grid, np.concatenate([head, tail], axis=-2))


def shift(path: Path, k: int) -> Path:
    """Path from ``k`` measured relative to its value at ``k``."""
    k = path.grid.check_index(k)
    seg = path.segment(k, path.grid.N)
    return Path(path.grid, seg - seg[..., :1, :], start=k)


def restrict(path: Path, k: int) -> PathPrefix:
    k = path.grid.check_index(k)
    if path.start != 0:
        raise PathError("restriction needs a path starting at index 0")
    return PathPrefix(path.grid, path.values[..., :k + 1, :])


def _upto_values(p, upto):
    if isinstance(p, PathPrefix):
        if upto > p.k:
            raise PathError(f"prefix cut at {p.k} is not defined through {upto}")
        return p.values[..., :upto + 1, :]
    return p.segment(p.start, upto) if p.start == 0 else _raise_start(p)


def _raise_start(p):
    raise PathError(f"sup_distance needs paths from index 0, got start {p.start}")


def sup_distance(a, b, upto: int) -> np.ndarray | float:
    """``max_{j <= upto} |a_j - b_j|`` with the Euclidean norm on values."""
    _same_space(a, b)
    upto = a.grid.check_index(upto)
    d = np.linalg.norm(_upto_values(a, upto) - _upto_values(b, upto), axis=-1).max(axis=-1)
    return float(d) if np.ndim(d) == 0 else d


def path_to_csv(path: Path | PathPrefix) -> str:
    """Columns ``step,t,x_0,...``; one row per grid index."""
    v = path.values
    if v.ndim != 2:
        raise PathError("CSV export takes a single (unbatched) path")
    start = getattr(path, "start", 0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "t"] + [f"x_{i}" for i in range(v.shape[1])])
    for j, row in enumerate(v):
        step = start + j
        w.writerow([step, fmt(path.grid.nodes[step])] + [fmt(x) for x in row])
    return buf.getvalue()


def path_from_csv(text: str, grid: TimeGrid) -> Path:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if header[:2] != ["step", "t"]:
        raise PathError("expected header step,t,x_0,...")
    steps = [int(r[0]) for r in body]
    vals = np.array([[float(x) for x in r[2:]] for r in body])
    return Path(grid, vals, start=steps[0])


def fmt(x) -> str:
    """Deterministic 17-significant-digit formatting."""
    return format(float(x), ".17g")


def concat_prefix(history: PathPrefix, continuation: PathPrefix) -> PathPrefix:
    """Prefix version of :func:`concat` used by conditioned rules.

    ``history`` is cut at ``k``; the result is cut at ``continuation.k``.  When
    the continuation ends before ``k`` the history itself is restricted there.
    """
    _same_space(history, continuation)
    k, r = history.k, continuation.k
    shape = np.broadcast_shapes(history.batch_shape, continuation.batch_shape)
    head = history.values[..., :min(r, k) + 1, :]
    head = np.broadcast_to(head, shape + head.shape[-2:])
    if r <= k:
        return PathPrefix(history.grid, head)
    tail = continuation.values[..., k:, :]
    tail = history.last[..., None, :] + (tail[..., 1:, :] - tail[..., :1, :])
    tail = np.broadcast_to(tail, shape + tail.shape[-2:])
    return PathPrefix(history.grid, np.concatenate([head, tail], axis=-2))
