"""Feedback controls, finite control families and pasting.

A control is a rule ``(k, prefix) -> u`` evaluated on batched state
prefixes.  Pasted controls decide their continuation from the prefix frozen
at the switching index, never from later values.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .pathspace import PathPrefix, TimeGrid
from .sde import ControlSet


class ControlError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ControlProcess:
    rule: Callable
    id: str

    def __call__(self, k: int, prefix: PathPrefix) -> np.ndarray:
        return np.asarray(self.rule(k, prefix), dtype=float)


@dataclass(frozen=True, eq=False)
class ControlFamily:
    controls: tuple
    provenance: str = "explicit"

    def __post_init__(self):
        controls = tuple(self.controls)
        if not controls:
            raise ControlError("a control family must be nonempty")
        ids = [c.id for c in controls]
        if len(set(ids)) != len(ids):
            raise ControlError(f"duplicate control ids in family: {ids}")
        object.__setattr__(self, "controls", controls)

    def __len__(self):
        return len(self.controls)

    def __iter__(self):
        return iter(self.controls)

    def __getitem__(self, i):
        return self.controls[i]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.controls]


@dataclass(frozen=True, eq=False)
class PartitionRule:
    """Map a prefix cut at ``k`` to a cell index in ``0..n_cells-1``."""

    rule: Callable
    k: int
    n_cells: int

    def __call__(self, prefix: PathPrefix) -> np.ndarray:
        if prefix.k != self.k:
            raise ControlError(f"partition at {self.k} evaluated on a prefix cut at {prefix.k}")
        cells = np.asarray(self.rule(prefix))
        cells = np.broadcast_to(cells, prefix.batch_shape).astype(int)
        if np.any((cells < 0) | (cells >= self.n_cells)):
            raise ControlError(f"cell index out of range 0..{self.n_cells - 1}")
        return cells


@dataclass(frozen=True, eq=False)
class StoppingRule:
    """First-hit rule ``prefix -> stop?`` capped at index ``cap``."""

    rule: Callable
    cap: int

    def __call__(self, prefix: PathPrefix) -> np.ndarray:
        hit = np.broadcast_to(np.asarray(self.rule(prefix), dtype=bool), prefix.batch_shape)
        return hit | (prefix.k >= self.cap)

    def first_hit(self, prefix: PathPrefix) -> np.ndarray:
        """Stopping index per batch member, or -1 if not stopped by ``prefix.k``."""
        tau = np.full(prefix.batch_shape, -1)
        for j in range(prefix.k + 1):
            hit = self(prefix.restrict(j)) & (tau < 0)
            tau = np.where(hit, j, tau)
        return tau


def constant_control(u, id: str | None = None) -> ControlProcess:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return ControlProcess(lambda k, p: np.broadcast_to(u, p.batch_shape + u.shape),
                          id or f"const:{','.join(format(x, 'g') for x in u)}")


def _blocks_of(N: int, blocks: int) -> np.ndarray:
    return (np.arange(N) * blocks) // N


def make_grid_family(controls: ControlSet, kind: str = "constants", grid: TimeGrid | None = None,
                     blocks: int = 2, thresholds: Sequence[float] = (0.0,),
                     cap: int = 10_000) -> ControlFamily:
    """Enumerate a finite control family over the points of ``controls``.

    ``constants`` gives one control per point, ``piecewise`` one per
    assignment of points to ``blocks`` contiguous time blocks (requires
    ``grid``), ``threshold`` the rules ``a if x_k[0] >= theta else b``.
    """
    pts = controls.points
    n = len(pts)
    if kind == "constants":
        size = n
    elif kind == "piecewise":
        if grid is None:
            raise ControlError("piecewise family needs the time grid")
        if not 1 <= blocks <= grid.N:
            raise ControlError(f"blocks must be in 1..{grid.N}")
        size = n ** blocks
    elif kind == "threshold":
        size = n * n * len(thresholds)
    else:
        raise ControlError(f"unknown family kind {kind!r}")
    if size > cap:
        raise ControlError(f"family of size {size} exceeds cap {cap}")

    if kind == "constants":
        fam = [constant_control(pts[i], f"const:{i}") for i in range(n)]
    elif kind == "piecewise":
        block_of = _blocks_of(grid.N, blocks)
        fam = []
        for combo in itertools.product(range(n), repeat=blocks):
            table = pts[np.asarray(combo)[block_of]]

            def rule(k, p, table=table):
                return np.broadcast_to(table[k], p.batch_shape + table[k].shape)
            fam.append(ControlProcess(rule, "pw:" + ".".join(map(str, combo))))
    else:
        fam = []
        for i, j, l in itertools.product(range(n), range(n), range(len(thresholds))):
            a, b, theta = pts[i], pts[j], float(thresholds[l])

            def rule(k, p, a=a, b=b, theta=theta):
                up = (p.last[..., 0] >= theta)[..., None]
                return np.where(up, a, b)
            fam.append(ControlProcess(rule, f"thr:a{i}b{j}t{l}"))
    return ControlFamily(tuple(fam), provenance=f"grid:{kind}")


def _select(controls: Sequence[ControlProcess], cells: np.ndarray, j: int, prefix: PathPrefix):
    us = []
    for c in controls:
        u = c(j, prefix)
        us.append(np.broadcast_to(u, prefix.batch_shape + u.shape[-1:]))
    cells = np.broadcast_to(cells, prefix.batch_shape)
    return np.take_along_axis(np.stack(us), cells[None, ..., None], axis=0)[0]


def paste(base: ControlProcess, k: int, partition: PartitionRule,
          continuations: Sequence[ControlProcess], id: str | None = None) -> ControlProcess:
    """Follow ``base`` before ``k``; from ``k`` on follow the continuation of
    the cell that the prefix frozen at ``k`` falls into."""
    continuations = list(continuations)
    if partition.k != k:
        raise ControlError(f"partition is cut at {partition.k}, pasting at {k}")
    if partition.n_cells != len(continuations):
        raise ControlError(f"{partition.n_cells} cells but {len(continuations)} continuations")

    def rule(j, prefix):
        if j < k:
            return base(j, prefix)
        cells = partition(prefix.restrict(k))
        return _select(continuations, cells, j, prefix)

    return ControlProcess(rule, id or f"paste({base.id}@{k}:{'|'.join(c.id for c in continuations)})")


def paste_at_stop(base: ControlProcess, stop: StoppingRule, selector: Callable,
                  continuations: Sequence[ControlProcess], id: str | None = None) -> ControlProcess:
    """Pasting at the first hit ``tau`` of ``stop``.

    ``selector(prefix)`` maps the prefix frozen at ``tau`` to a cell index.
    """
    continuations = list(continuations)
    n = len(continuations)

    def rule(j, prefix):
        tau = stop.first_hit(prefix)
        u_base = base(j, prefix)
        u_base = np.broadcast_to(u_base, prefix.batch_shape + u_base.shape[-1:])
        if np.all(tau < 0):
            return u_base
        cells = np.zeros(prefix.batch_shape, dtype=int)
        for t in np.unique(tau[tau >= 0]):
            pre_t = prefix.restrict(int(t))
            c = np.broadcast_to(np.asarray(selector(pre_t)), prefix.batch_shape).astype(int)
            if np.any((c < 0) | (c >= n)):
                raise ControlError(f"cell index out of range 0..{n - 1}")
            cells = np.where(tau == t, c, cells)
        u_cont = _select(continuations, cells, j, prefix)
        return np.where((tau >= 0)[..., None], u_cont, u_base)

    return ControlProcess(rule, id or f"paste_at_stop({base.id}:{'|'.join(c.id for c in continuations)})")

