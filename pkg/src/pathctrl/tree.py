"""Exact Rademacher trees for one-dimensional models.

Each step moves the state by ``mu dt + sigma eps sqrt(dt)`` with
``eps = +1, -1`` equally likely, using the same Euler step as the Monte
Carlo engine.  Two kinds of tree are built level by level:

* the *closed-loop* tree branches over every ``u`` in U at every node and
  takes the max, so a node value is the value function of that prefix;
* the *fixed-control* tree follows one control rule and averages, giving
  exact expectations under that control.

Nodes of a level are stored as one batched prefix array; the children of
alive node ``i`` occupy a contiguous slice of the next level.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .control import ControlFamily, StoppingRule
from .pathspace import PathPrefix, TimeGrid
from .payoffs import Payoff
from .sde import CoefficientSpec, SDEError, euler_step

EPS = (1.0, -1.0)


class TreeCapError(RuntimeError):
    """The tree would exceed its node cap."""


@dataclass(frozen=True, eq=False)
class TreeModel:
    grid: TimeGrid
    coeff: CoefficientSpec
    payoff: Payoff
    family: ControlFamily | None = None
    node_cap: int = 2_000_000

    def __post_init__(self):
        if self.coeff.dim != 1:
            raise ValueError("tree models are one-dimensional")
        if not self.grid.is_uniform:
            raise ValueError("tree models need a uniform grid")

    def root(self, x0: float = 0.0) -> PathPrefix:
        return PathPrefix.start(self.grid, x0)

    def node_count(self, k0: int = 0, terminal: int | None = None, branching: int | None = None) -> int:
        terminal = self.grid.N if terminal is None else terminal
        b = 2 * len(self.coeff.controls) if branching is None else branching
        return sum(b ** j for j in range(terminal - k0 + 1))


@dataclass(eq=False)
class Level:
    k: int
    prefixes: np.ndarray        # (n, k+1, 1)
    parent: np.ndarray          # (n,) index into the previous level, -1 at the root
    branch: np.ndarray          # (n,) child slot within the parent (u-major, then eps)
    controls: np.ndarray | None = None   # (n, c, m) control values expanded at this node
    stopped: np.ndarray | None = None    # (n,) leaf before the terminal index
    child_start: np.ndarray | None = None
    value: np.ndarray | None = None
    q: np.ndarray | None = None           # (n, c) branch averages per control; nan at leaves
    argmax: np.ndarray | None = None      # (n,) best control slot; -1 at leaves

    @property
    def n(self) -> int:
        return self.prefixes.shape[0]


@dataclass(eq=False)
class TreeResult:
    grid: TimeGrid
    k0: int
    terminal: int
    levels: list
    kind: str                   # "closed-loop" or "fixed:<control id>"
    control_points: np.ndarray | None = None
    _table: dict | None = field(default=None, repr=False)

    @property
    def value(self) -> float:
        return float(self.levels[0].value[0])

    @property
    def root_argmax(self) -> int:
        return int(self.levels[0].argmax[0])

    def level(self, k: int) -> Level:
        return self.levels[k - self.k0]

    def batch(self, k: int) -> PathPrefix:
        return PathPrefix(self.grid, self.level(k).prefixes)

    @property
    def table(self) -> dict:
        """``{prefix bytes: (value, argmax slot)}`` over all nodes."""
        if self._table is None:
            tab = {}
            for lev in self.levels:
                v = np.ascontiguousarray(lev.prefixes)
                for i in range(lev.n):
                    tab.setdefault(v[i].tobytes(), (float(lev.value[i]), int(lev.argmax[i])))
            self._table = tab
        return self._table

    def lookup(self, prefix) -> float:
        v = np.ascontiguousarray(getattr(prefix, "values", prefix), dtype=float)
        return self.table[v.tobytes()][0]

    def rows(self):
        """Node-table rows ``(prefix hash, step, value, argmax u)``."""
        for lev in self.levels:
            v = np.ascontiguousarray(lev.prefixes)
            for i in range(lev.n):
                h = hashlib.sha1(v[i].tobytes()).hexdigest()[:16]
                a = int(lev.argmax[i])
                u = float(lev.controls[i, a, 0]) if a >= 0 and lev.controls is not None else float("nan")
                yield h, lev.k, float(lev.value[i]), u


def _leaf_values(fn: Callable, grid: TimeGrid, prefixes: np.ndarray) -> np.ndarray:
    out = np.asarray(fn(PathPrefix(grid, prefixes)), dtype=float)
    out = np.broadcast_to(out, prefixes.shape[:1])
    if not np.all(np.isfinite(out)):
        raise SDEError("non-finite leaf value")
    return out


def build_tree(model: TreeModel, controls_at: Callable, k0: int, history: PathPrefix,
               terminal: int, terminal_value: Callable, stop: StoppingRule | None = None,
               stop_value: Callable | None = None, kind: str = "closed-loop") -> TreeResult:
    """Generic forward build and backward max-of-averages.

    ``controls_at(k, batch)`` returns the controls to branch over at each
    node, shape ``(n, c, m)``; ``c = 1`` gives a fixed-control tree.
    """
    grid = history.grid
    coeff = model.coeff
    if history.k != k0 or history.batch_shape:
        raise ValueError(f"history must be a single prefix cut at {k0}")
    if not k0 <= terminal <= grid.N:
        raise ValueError(f"terminal {terminal} outside {k0}..{grid.N}")
    sq = np.sqrt(grid.dt)
    levels = [Level(k0, np.asarray(history.values)[None], np.array([-1]), np.array([0]))]
    total = 1
    for k in range(k0, terminal + 1):
        lev = levels[-1]
        batch = PathPrefix(grid, lev.prefixes)
        lev.stopped = stop(batch) if (stop is not None and k < terminal) else np.zeros(lev.n, bool)
        if k == terminal:
            break
        alive = np.flatnonzero(~lev.stopped)
        if alive.size == 0:
            break
        sub = PathPrefix(grid, lev.prefixes[alive])
        us = np.asarray(controls_at(k, sub), dtype=float)
        if not np.all(coeff.controls.contains(us)):
            raise SDEError(f"control value outside U at step {k}")
        c = us.shape[1]
        lev.controls = np.full((lev.n,) + us.shape[1:], np.nan)
        lev.controls[alive] = us
        nb = 2 * c
        total += alive.size * nb
        if total > model.node_cap:
            raise TreeCapError(f"tree exceeds node cap {model.node_cap} at step {k + 1}")
        nxt = np.empty((alive.size, c, 2, 1))
        for j in range(c):
            for e, eps in enumerate(EPS):
                dw = np.full((alive.size, 1), eps * sq)
                nxt[:, j, e] = euler_step(coeff, k, sub, us[:, j], dw)
        child = np.concatenate([np.repeat(sub.values, nb, axis=0),
                                nxt.reshape(alive.size * nb, 1, 1)], axis=1)
        lev.child_start = np.full(lev.n, -1)
        lev.child_start[alive] = np.arange(alive.size) * nb
        levels.append(Level(k + 1, child, np.repeat(alive, nb), np.tile(np.arange(nb), alive.size)))

    # backward pass
    last = levels[-1]
    leaf_fn = terminal_value if last.k == terminal else (stop_value or terminal_value)
    last.value = _leaf_values(leaf_fn, grid, last.prefixes)
    last.argmax = np.full(last.n, -1)
    last.q = np.full((last.n, 1), np.nan)
    for lev, child in zip(levels[-2::-1], levels[:0:-1]):
        value = np.full(lev.n, np.nan)
        alive = np.flatnonzero(~lev.stopped)
        c = lev.controls.shape[1]
        cv = child.value.reshape(alive.size, c, 2)
        q = 0.5 * (cv[..., 0] + cv[..., 1])
        value[alive] = q.max(axis=1)
        lev.q = np.full((lev.n, c), np.nan)
        lev.q[alive] = q
        lev.argmax = np.full(lev.n, -1)
        lev.argmax[alive] = q.argmax(axis=1)
        if lev.stopped.any():
            st = np.flatnonzero(lev.stopped)
            value[st] = _leaf_values(stop_value or terminal_value, grid, lev.prefixes[st])
        lev.value = value
    return TreeResult(grid, k0, terminal, levels, kind, coeff.controls.points)


def closed_loop(model: TreeModel, k0: int = 0, history: PathPrefix | None = None,
                terminal: int | None = None, terminal_value: Callable | None = None,
                stop: StoppingRule | None = None, stop_value: Callable | None = None) -> TreeResult:
    """Value function by per-node maximisation over U."""
    history = model.root() if history is None else history
    terminal = model.grid.N if terminal is None else terminal
    terminal_value = model.payoff if terminal_value is None else terminal_value
    pts = model.coeff.controls.points
    est = model.node_count(k0, terminal)
    if stop is None and est > model.node_cap:
        raise TreeCapError(f"closed-loop tree needs {est} nodes, cap is {model.node_cap}")
    at = lambda k, b: np.broadcast_to(pts, (b.batch_shape[0],) + pts.shape)
    return build_tree(model, at, k0, history, terminal, terminal_value, stop, stop_value)


def fixed_control(model: TreeModel, control, k0: int = 0, history: PathPrefix | None = None,
                  terminal: int | None = None, terminal_value: Callable | None = None,
                  stop: StoppingRule | None = None, stop_value: Callable | None = None) -> TreeResult:
    """Exact expectation of the payoff under one control rule."""
    history = model.root() if history is None else history
    terminal = model.grid.N if terminal is None else terminal
    terminal_value = model.payoff if terminal_value is None else terminal_value
    m = model.coeff.controls.m

    def at(k, b):
        u = np.broadcast_to(control(k, b), b.batch_shape + (m,))
        return u[:, None, :]

    return build_tree(model, at, k0, history, terminal, terminal_value, stop, stop_value,
                      kind=f"fixed:{getattr(control, 'id', '?')}")


def leaf_paths(result: TreeResult) -> np.ndarray:
    """All leaf prefixes of a fixed-control tree, shape ``(2^n, N+1, 1)``."""
    return result.levels[-1].prefixes


def node_path_index(result: TreeResult, k: int) -> np.ndarray:
    """For each leaf, the index of its ancestor at level ``k``."""
    idx = np.arange(result.levels[-1].n)
    for lev in result.levels[:k - result.k0:-1]:
        idx = lev.parent[idx]
    return idx
