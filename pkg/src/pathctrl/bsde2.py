"""Decomposition of the value process under one fixed control.

Along the paths of a control P, the optimal value ``Y`` (always the global
value function, never the value of P itself) splits as

    Y_{k+1} - Y_k = Z_k dM_k - dK_k,      dM_k = dX_k - mu dt,

with ``K`` nondecreasing.  On a binomial tree the two branches determine
``Z`` and ``dK`` exactly.  Minimality: over continuations pasted at ``k``,
the smallest expected remaining increase of ``K`` is zero.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tree
from .control import ControlFamily, ControlProcess, PartitionRule, paste
from .pathspace import PathPrefix
from .sde import CoefficientSpec, SDEError
from .value import ValuePath, tree_Y

TREE_TOL = 1e-10


class BSDEError(RuntimeError):
    """Contract violation, e.g. a decreasing K beyond tolerance."""


@dataclass
class TreeStep:
    """One level of the decomposition; arrays are per alive node of the level."""

    k: int
    nodes: np.ndarray         # indices into the level
    Y: np.ndarray
    Z: np.ndarray             # nan where the branches do not separate
    dM: np.ndarray            # (n, 2) branch increments, eps = +1 then -1
    dY: np.ndarray            # (n, 2)
    dK: np.ndarray
    identity: np.ndarray      # (n, 2) |dY - (Z dM - dK)|
    K: np.ndarray             # K_k at the node (K at the root is 0)


@dataclass
class BSDEDecomposition:
    control_id: str
    steps: list
    terminal_Y: np.ndarray
    terminal_error: float     # max |Y_N - xi|
    value_path: ValuePath = field(repr=False, default=None)

    @property
    def min_dK(self) -> float:
        return min((float(s.dK.min()) for s in self.steps if s.dK.size), default=0.0)

    @property
    def max_identity(self) -> float:
        vals = [np.nanmax(s.identity) for s in self.steps if s.identity.size and np.isfinite(s.identity).any()]
        return float(max(vals, default=0.0))

    @property
    def degenerate(self) -> int:
        return int(sum(np.isnan(s.Z).sum() for s in self.steps))

    def check(self, tol: float = TREE_TOL):
        if self.min_dK < -tol:
            raise BSDEError(f"K decreases by {-self.min_dK:.3g} under {self.control_id}")
        return self

    def rows(self, minimality: dict | None = None):
        """``(step, node hash, Y, Z, dK, K, minimality residual)`` per node."""
        fixed = self.value_path.fixed
        for s in self.steps:
            pre = np.ascontiguousarray(fixed.level(s.k).prefixes)
            for i, n in enumerate(s.nodes):
                h = hashlib.sha1(pre[n].tobytes()).hexdigest()[:16]
                res = float("nan") if minimality is None else minimality.get((s.k, h), float("nan"))
                yield s.k, h, float(s.Y[i]), float(s.Z[i]), float(s.dK[i]), float(s.K[i]), res


def _branch_increments(model: tree.TreeModel, fixed: tree.TreeResult, k: int):
    """Martingale increments ``dX - mu dt`` to the two children of each node."""
    lev, child = fixed.level(k), fixed.level(k + 1)
    alive = np.flatnonzero(~lev.stopped)
    batch = PathPrefix(model.grid, lev.prefixes[alive])
    u = lev.controls[alive, 0]
    drift = model.coeff.mu(k, batch, u)[:, 0] * model.grid.dt
    start = lev.child_start[alive]
    x0 = lev.prefixes[alive, -1, 0]
    dM = np.stack([child.prefixes[start + e, -1, 0] - x0 - drift for e in (0, 1)], axis=1)
    return alive, start, dM


def estimate_Z(model: tree.TreeModel, vp: ValuePath, k: int):
    """Difference quotient of ``Y`` against ``dM`` across the two branches.

    Returns ``(alive nodes, Z, dM, dY)``; ``Z`` is nan where the branches
    coincide (zero diffusion at the node).
    """
    alive, start, dM = _branch_increments(model, vp.fixed, k)
    y = vp.level_Y[k - vp.k0]
    y_next = vp.level_Y[k + 1 - vp.k0]
    dY = np.stack([y_next[start + e] - y[alive] for e in (0, 1)], axis=1)
    den = dM[:, 0] - dM[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        Z = np.where(den != 0, (dY[:, 0] - dY[:, 1]) / np.where(den != 0, den, 1.0), np.nan)
    return alive, Z, dM, dY


def decompose_K(model: tree.TreeModel, vp: ValuePath) -> BSDEDecomposition:
    """Exact tree decomposition along the fixed-control tree of ``vp``."""
    if vp.fixed is None:
        raise ValueError("decompose_K needs a tree value path")
    if not model.coeff.diffusion_invertible:
        raise SDEError(f"model {model.coeff.name} is not declared with invertible diffusion")
    fixed = vp.fixed
    steps = []
    K_prev = np.zeros(1)
    for k in range(vp.k0, fixed.terminal):
        lev = fixed.level(k)
        if k > vp.k0:
            prev = fixed.level(k - 1)
            # K_k = K_{k-1} + dK_{k-1} of the parent
            parent_K = np.full(prev.n, np.nan)
            parent_K[steps[-1].nodes] = steps[-1].K + steps[-1].dK
            K_level = parent_K[lev.parent]
        else:
            K_level = K_prev
        alive, Z, dM, dY = estimate_Z(model, vp, k)
        if alive.size == 0:
            break
        y = vp.level_Y[k - vp.k0][alive]
        y_next = y[:, None] + dY
        dK = y - y_next.mean(axis=1)
        zdm = np.where(np.isnan(Z), 0.0, Z)[:, None] * dM
        identity = np.abs(dY - (zdm - dK[:, None]))
        steps.append(TreeStep(k, alive, y, Z, dM, dY, dK, identity, K_level[alive]))
    last = fixed.levels[-1]
    xi = model.payoff(last.prefixes) if last.k == model.grid.N else np.full(last.n, np.nan)
    yN = vp.level_Y[-1]
    err = float(np.nanmax(np.abs(yN - xi))) if last.k == model.grid.N else float("nan")
    return BSDEDecomposition(vp.control_id, steps, yN, err, vp)


def optimal_feedback(model: tree.TreeModel, closed: tree.TreeResult, id: str = "optimal") -> ControlProcess:
    """Feedback rule reading the argmax control of each prefix off the
    closed-loop tree."""
    pts = model.coeff.controls.points
    table = closed.table

    def rule(k, p):
        v = np.ascontiguousarray(p.values)
        flat = v.reshape((-1,) + v.shape[-2:])
        idx = np.array([max(table[row.tobytes()][1], 0) for row in flat])
        return pts[idx].reshape(p.batch_shape + pts.shape[1:])

    return ControlProcess(rule, id)


def expected_remaining_K(dec: BSDEDecomposition, k: int) -> tuple[np.ndarray, np.ndarray]:
    """``E[K_T - K_k | node]`` for each node of level ``k``; returns
    ``(prefixes, values)``."""
    fixed = dec.value_path.fixed
    by_k = {s.k: s for s in dec.steps}
    S = np.zeros(fixed.levels[-1].n)
    for j in range(fixed.terminal - 1, k - 1, -1):
        lev = fixed.level(j)
        s = by_k[j]
        out = np.zeros(lev.n)           # stopped nodes contribute nothing further
        kids = lev.child_start[s.nodes]
        out[s.nodes] = s.dK + 0.5 * (S[kids] + S[kids + 1])
        S = out
    return fixed.level(k).prefixes, S


@dataclass
class MinimalityReport:
    k: int
    node_hashes: list
    infimum: np.ndarray       # per node of level k
    attaining: list           # continuation id per node
    residual: float           # max over nodes of the infimum
    lower_bound_only: bool


def minimality_residual(model: tree.TreeModel, base: ControlProcess, k: int,
                        continuations: ControlFamily | list, closed: tree.TreeResult | None = None,
                        include_optimal: bool = True, tol: float = TREE_TOL) -> MinimalityReport:
    """Per node of level ``k``: min over continuations ``c`` pasted onto
    ``base`` at ``k`` of ``E[K_T - K_k]`` under ``base (x)_k c``.

    With ``include_optimal`` the optimal feedback rule is added to the
    continuations, so the tree contract is a residual of exactly zero.  A
    positive residual marks the report as a lower bound only.
    """
    closed = tree.closed_loop(model) if closed is None else closed
    conts = list(continuations)
    if include_optimal:
        conts.append(optimal_feedback(model, closed))
    whole = PartitionRule(lambda p: np.zeros(p.batch_shape, int), k, 1)
    best = None
    for c in conts:
        pasted = paste(base, k, whole, [c], id=f"{base.id}@{k}:{c.id}")
        vp = _value_path(model, pasted, closed)
        pre, S = expected_remaining_K(decompose_K(model, vp), k)
        if best is None:
            keys = [p.tobytes() for p in np.ascontiguousarray(pre)]
            best, arg = S.copy(), [c.id] * len(S)
            hashes = [hashlib.sha1(b).hexdigest()[:16] for b in keys]
        else:
            idx = {p.tobytes(): i for i, p in enumerate(np.ascontiguousarray(pre))}
            order = np.array([idx[b] for b in keys])
            S = S[order]
            better = S < best
            for i in np.flatnonzero(better):
                arg[i] = c.id
            best = np.minimum(best, S)
    resid = float(best.max())
    return MinimalityReport(k, hashes, best, arg, resid, resid > tol)


def _value_path(model, control, closed) -> ValuePath:
    fixed = tree.fixed_control(model, control)
    level_Y = [tree_Y(closed, model, lev.prefixes) for lev in fixed.levels]
    return ValuePath(control.id, 0, None, None, "tree", None, fixed, closed, level_Y)


def minimal_solution_check(dec: BSDEDecomposition, model: tree.TreeModel,
                           alternative) -> float:
    """Largest ``Y - Y_alt`` over the nodes of the decomposition, where
    ``alternative(prefix batch)`` is another solution's Y.  Minimality of
    the optimal value means this is ``<= 0``."""
    fixed = dec.value_path.fixed
    worst = -np.inf
    for lev, y in zip(fixed.levels, dec.value_path.level_Y):
        alt = np.asarray(alternative(PathPrefix(model.grid, lev.prefixes)), dtype=float)
        worst = max(worst, float(np.max(y - alt)))
    return worst


# ---------------------------------------------------------------------------
# Monte Carlo side

def _martingale_increments(coeff: CoefficientSpec, control, full: np.ndarray, k0: int, grid):
    """``dM_k = X_{k+1} - X_k - mu dt`` and ``sigma sigma^T dt`` along each path."""
    M, n1, d = full.shape
    dM = np.empty((M, grid.N - k0, d))
    cov = np.empty((M, grid.N - k0, d, d))
    for k in range(k0, grid.N):
        pre = PathPrefix(grid, full[:, :k + 1])
        u = np.broadcast_to(control(k, pre), (M, coeff.controls.m))
        dt = grid.steps[k]
        dM[:, k - k0] = full[:, k + 1] - full[:, k] - coeff.mu(k, pre, u) * dt
        sig = coeff.sigma(k, pre, u)
        cov[:, k - k0] = np.einsum("nij,nkj->nik", sig, sig) * dt
    return dM, cov


@dataclass
class DriftReport:
    mean_z: np.ndarray        # per step and coordinate: mean(dM) / SE
    second_moment_z: np.ndarray   # per step and coordinate: mean(dM^2 - (sigma sigma^T dt)_ii) / SE

    @property
    def ok(self) -> bool:
        return bool(np.all(np.abs(self.mean_z) <= 3) and np.all(np.abs(self.second_moment_z) <= 3))


def drift_identification(coeff: CoefficientSpec, control, ensemble) -> DriftReport:
    """Under a fixed control the martingale increments have mean zero and
    conditional variance ``sigma sigma^T dt``; both as z-scores per step."""
    full = ensemble.full().values
    dM, cov = _martingale_increments(coeff, control, full, ensemble.k0, ensemble.paths.grid)
    M = dM.shape[0]
    mean_z = dM.mean(axis=0) / (dM.std(axis=0, ddof=1) / np.sqrt(M))
    diag = np.diagonal(cov, axis1=-2, axis2=-1)
    e = dM ** 2 - diag
    sm_z = e.mean(axis=0) / (e.std(axis=0, ddof=1) / np.sqrt(M))
    return DriftReport(mean_z, sm_z)


@dataclass
class MCStep:
    k: int
    bucket_edges: np.ndarray
    Z: np.ndarray             # (n_buckets, d)
    dK_mean: np.ndarray       # (n_buckets,)
    dK_se: np.ndarray
    counts: np.ndarray


@dataclass
class MCDecomposition:
    control_id: str
    steps: list
    n_buckets: int
    scheme: str = "quantile buckets on X_k"

    def min_z(self) -> float:
        """Smallest ``dK_mean / dK_se`` over buckets with a finite SE."""
        zs = [s.dK_mean / s.dK_se for s in self.steps]
        zs = np.concatenate(zs) if zs else np.zeros(0)
        zs = zs[np.isfinite(zs)]
        return float(zs.min()) if zs.size else 0.0


def decompose_mc(coeff: CoefficientSpec, control, vp: ValuePath, n_buckets: int = 4) -> MCDecomposition:
    """Per step and quantile bucket of ``X_k[0]``: least squares of ``dY`` on
    ``(1, dM)``; the slope estimates ``Z`` and ``-intercept`` estimates ``dK``."""
    full = vp.paths.values
    grid = vp.paths.grid
    dM, _ = _martingale_increments(coeff, control, full, vp.k0, grid)
    dY = np.diff(vp.Y, axis=1)
    d = coeff.dim
    steps = []
    for i, k in enumerate(range(vp.k0, grid.N)):
        x = full[:, k, 0]
        edges = np.quantile(x, np.linspace(0, 1, n_buckets + 1))
        b = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_buckets - 1)
        Z = np.full((n_buckets, d), np.nan)
        mean, se, cnt = np.full(n_buckets, np.nan), np.full(n_buckets, np.nan), np.zeros(n_buckets, int)
        for j in range(n_buckets):
            sel = b == j
            cnt[j] = sel.sum()
            if cnt[j] <= d + 2:
                continue
            A = np.column_stack([np.ones(cnt[j]), dM[sel, i]])
            coef, *_ = np.linalg.lstsq(A, dY[sel, i], rcond=None)
            Z[j] = coef[1:]
            dk = -(dY[sel, i] - dM[sel, i] @ coef[1:])
            mean[j] = dk.mean()
            se[j] = dk.std(ddof=1) / np.sqrt(cnt[j])
        steps.append(MCStep(k, edges, Z, mean, se, cnt))
    return MCDecomposition(vp.control_id, steps, n_buckets)


def remaining_K_mc(vp: ValuePath, k: int) -> tuple[float, float]:
    """Mean and SE of ``K_T - K_k = Y_k - xi - int_k^T Z dM`` over the paths;
    the stochastic integral has mean zero, leaving ``Y_k - Y_N``."""
    r = vp.Y[:, k - vp.k0] - vp.Y[:, -1]
    return float(r.mean()), float(r.std(ddof=1) / np.sqrt(r.size))

