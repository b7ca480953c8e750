"""Value function estimation, dynamic programming residuals and the value
process along the paths of one fixed control.

Two routes to the supremum over controls:

* :func:`value_tree` -- exact backward induction on a Rademacher tree, either
  closed-loop over U (the full discrete control space) or as a max over a
  finite family;
* :func:`value_mc` -- Monte Carlo means over a finite family with common
  random numbers, plus an out-of-sample revaluation of the winner.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import rng, tree
from .control import ControlFamily, ControlProcess, StoppingRule
from .pathspace import Path, PathPrefix, sup_distance
from .payoffs import Payoff
from .sde import CoefficientSpec, ensemble_noise, euler_step, gronwall_constant, simulate_ensemble


class BudgetError(RuntimeError):
    """Nested Monte Carlo would exceed the configured budget."""


@dataclass
class ValueEstimate:
    value: float
    stderr: float
    n_samples: int
    argmax_id: str
    method: str                       # "tree" or "mc"
    revalue: float = float("nan")
    revalue_stderr: float = float("nan")
    per_control: dict = field(default_factory=dict)


def value_tree(model: tree.TreeModel, k0: int = 0, history: PathPrefix | None = None):
    """Exact value from ``history``; returns ``(estimate, results)``.

    Without a family the closed-loop tree is used and ``results`` is its
    :class:`~pathctrl.tree.TreeResult`; with a family ``results`` maps each
    control id to its fixed-control tree.
    """
    history = model.root() if history is None else history
    n_leaves = 2 ** (model.grid.N - k0)
    if model.family is None:
        res = tree.closed_loop(model, k0, history)
        return ValueEstimate(res.value, 0.0, n_leaves, f"u:{res.root_argmax}", "tree"), res
    results = {c.id: tree.fixed_control(model, c, k0, history) for c in model.family}
    vals = np.array([r.value for r in results.values()])
    best = int(np.argmax(vals))
    est = ValueEstimate(float(vals[best]), 0.0, n_leaves, model.family[best].id, "tree",
                        per_control={i: r.value for i, r in results.items()})
    return est, results


def _payoff_means(payoff, coeff, family, k0, history, M, seed, noise, stream, threads):
    dw = ensemble_noise(history.grid, k0, M, coeff.dim, seed, noise, stream, threads)
    means, ses = [], []
    for c in family:
        ens = simulate_ensemble(coeff, c, k0, history, M, seed, noise, stream, threads,
                                store_noise=False, dw=dw)
        x = payoff(ens.full())
        means.append(float(np.mean(x)))
        ses.append(float(np.std(x, ddof=1) / np.sqrt(M)) if M > 1 else float("inf"))
    return np.array(means), np.array(ses)


def value_mc(coeff: CoefficientSpec, payoff: Payoff, k0: int, history: PathPrefix,
             family: ControlFamily, M: int, seed: int, noise: str = rng.GAUSSIAN,
             stream: int = 0, threads: int = 1, revalue: bool = True) -> ValueEstimate:
    """Max over ``family`` of MC means; ties go to the lowest family index.

    All controls share the increments of stream ``(seed, stream)``; the
    revaluation of the winner uses the disjoint stream ``stream + 2**20``.
    """
    means, ses = _payoff_means(payoff, coeff, family, k0, history, M, seed, noise, stream, threads)
    best = int(np.argmax(means))
    est = ValueEstimate(float(means[best]), float(ses[best]), M, family[best].id, "mc",
                        per_control=dict(zip(family.ids, means.tolist())))
    if revalue:
        fresh = ControlFamily((family[best],))
        rv, rs = _payoff_means(payoff, coeff, fresh, k0, history, M, seed, noise,
                               stream + 2 ** 20, threads)
        est.revalue, est.revalue_stderr = float(rv[0]), float(rs[0])
    return est


# ---------------------------------------------------------------------------
# dynamic programming residuals

@dataclass
class DPPReport:
    direct: float
    composed: float
    residual: float
    worst_node: float          # max |direct node value - independent inner value| (trees)
    stderr: float = 0.0        # combined standard error (MC)
    method: str = "tree"
    split: str = ""


class _InnerValue:
    """Value function at a prefix, each prefix solved by its own tree."""

    def __init__(self, model: tree.TreeModel):
        self.model = model
        self.cache = {}

    def one(self, values: np.ndarray) -> float:
        key = np.ascontiguousarray(values).tobytes()
        if key not in self.cache:
            p = PathPrefix(self.model.grid, values)
            self.cache[key] = tree.closed_loop(self.model, p.k, p).value
        return self.cache[key]

    def __call__(self, batch: PathPrefix) -> np.ndarray:
        return np.array([self.one(v) for v in batch.values])


def dpp_residual_tree(model: tree.TreeModel, k0: int = 0, history: PathPrefix | None = None,
                      split: int | None = None, stop: StoppingRule | None = None) -> DPPReport:
    """Direct closed-loop value against the composition through an
    intermediate value function at ``split`` (or at the first hit of ``stop``).

    The intermediate values are computed by independent trees rooted at each
    prefix, not read off the direct tree.
    """
    history = model.root() if history is None else history
    N = model.grid.N
    if (split is None) == (stop is None):
        raise ValueError("give exactly one of split or stop")
    if split is not None and not k0 <= split <= N:
        raise ValueError(f"split {split} outside {k0}..{N}")
    direct = tree.closed_loop(model, k0, history)
    inner = _InnerValue(model)
    if split is not None:
        outer = tree.closed_loop(model, k0, history, terminal=split,
                                 terminal_value=model.payoff if split == N else inner)
        label = f"j={split}"
    else:
        outer = tree.closed_loop(model, k0, history, stop=stop, stop_value=inner)
        label = "stop"
    worst = 0.0
    for lev in outer.levels:
        leaf = lev.stopped | (lev.k == outer.terminal)
        for i in np.flatnonzero(leaf):
            worst = max(worst, abs(direct.lookup(lev.prefixes[i]) - lev.value[i]))
    return DPPReport(direct.value, outer.value, abs(direct.value - outer.value), worst, split=label)


def dpp_residual_mc(coeff: CoefficientSpec, payoff: Payoff, k0: int, history: PathPrefix,
                    family: ControlFamily, M: int, M_inner: int, seed: int,
                    split: int | None = None, stop: StoppingRule | None = None,
                    noise: str = rng.GAUSSIAN, threads: int = 1, budget: float = 5e7) -> DPPReport:
    """MC version: inner values by nested :func:`value_mc` at the split or
    stopping index of each outer path."""
    grid = history.grid
    N = grid.N
    if (split is None) == (stop is None):
        raise ValueError("give exactly one of split or stop")
    cost = float(len(family)) ** 2 * M * M_inner * (N - k0)
    if cost > budget:
        raise BudgetError(f"nested estimate needs ~{cost:.3g} step evaluations, budget {budget:.3g}")
    direct = value_mc(coeff, payoff, k0, history, family, M, seed, noise, threads=threads,
                      revalue=False)
    dw = ensemble_noise(grid, k0, M, coeff.dim, seed, noise, 0, threads)
    means, ses = [], []
    for c in family:
        full = simulate_ensemble(coeff, c, k0, history, M, seed, noise, dw=dw, threads=threads).full()
        if split is not None:
            tau = np.full(M, split)
        else:
            tau = stop.first_hit(PathPrefix(grid, full.values))
            tau = np.where((tau < 0) | (tau < k0), N, np.maximum(tau, k0))
        vals = np.empty(M)
        for i in range(M):
            t = int(tau[i])
            if t == N:
                vals[i] = float(payoff(full.values[i]))
            else:
                pre = PathPrefix(grid, full.values[i, :t + 1])
                vals[i] = value_mc(coeff, payoff, t, pre, family, M_inner, seed, noise,
                                   stream=1 + i, revalue=False).value
        means.append(vals.mean())
        ses.append(vals.std(ddof=1) / np.sqrt(M))
    best = int(np.argmax(means))
    se = float(np.hypot(direct.stderr, ses[best]))
    return DPPReport(direct.value, float(means[best]), float(abs(direct.value - means[best])), float("nan"),
                     stderr=se, method="mc", split=f"j={split}" if split is not None else "stop")


# ---------------------------------------------------------------------------
# value process along one control

@dataclass
class ValuePath:
    """Value function evaluated along the paths of one fixed control.

    ``Y`` has shape ``(n_paths, N - k0 + 1)`` with ``Y[:, -1]`` the payoff.
    Tree value paths also keep the fixed-control and closed-loop trees so
    node-level quantities can be read without path duplication.
    """

    control_id: str
    k0: int
    paths: Path
    Y: np.ndarray
    method: str
    weights: np.ndarray
    fixed: tree.TreeResult | None = None
    closed: tree.TreeResult | None = None
    level_Y: list | None = None
    ensemble: object = None


def tree_Y(closed: tree.TreeResult, model: tree.TreeModel, prefixes: np.ndarray) -> np.ndarray:
    """Closed-loop values at a batch of prefixes (fresh trees for unseen prefixes)."""
    inner = _InnerValue(model)
    out = np.empty(prefixes.shape[0])
    for i, v in enumerate(prefixes):
        try:
            out[i] = closed.lookup(v)
        except KeyError:
            out[i] = inner.one(v)
    return out


def value_process_tree(model: tree.TreeModel, control: ControlProcess, k0: int = 0,
                       history: PathPrefix | None = None) -> ValuePath:
    history = model.root() if history is None else history
    closed = tree.closed_loop(model, k0, history)
    fixed = tree.fixed_control(model, control, k0, history)
    level_Y = [tree_Y(closed, model, lev.prefixes) for lev in fixed.levels]
    leaves = fixed.levels[-1].prefixes
    Y = np.stack([level_Y[k - k0][tree.node_path_index(fixed, k)]
                  for k in range(k0, model.grid.N + 1)], axis=1)
    n = leaves.shape[0]
    return ValuePath(control.id, k0, Path(model.grid, leaves), Y, "tree", np.full(n, 1.0 / n),
                     fixed, closed, level_Y)


def value_process_mc(coeff: CoefficientSpec, payoff: Payoff, control: ControlProcess,
                     family: ControlFamily, k0: int, history: PathPrefix, M: int, M_inner: int,
                     seed: int, budget: float = 5e7, noise: str = rng.GAUSSIAN,
                     threads: int = 1) -> ValuePath:
    """Nested MC: ``Y_k`` on each outer path is a fresh :func:`value_mc` from
    its prefix at ``k``; ``Y_N`` is the payoff."""
    N = history.grid.N
    cost = M * (N - k0) * len(family) * M_inner * N
    if cost > budget:
        raise BudgetError(f"nested estimate needs ~{cost:.3g} step evaluations, budget {budget:.3g}")
    ens = simulate_ensemble(coeff, control, k0, history, M, seed, noise, threads=threads)
    full = ens.full().values
    Y = np.empty((M, N - k0 + 1))
    Y[:, -1] = payoff(full)
    for i in range(M):
        for k in range(k0, N):
            pre = PathPrefix(history.grid, full[i, :k + 1])
            Y[i, k - k0] = value_mc(coeff, payoff, k, pre, family, M_inner, seed, noise,
                                    stream=1 + i * (N + 1) + k, revalue=False).value
    return ValuePath(control.id, k0, Path(history.grid, full), Y, "mc-nested",
                     np.full(M, 1.0 / M), ensemble=ens)


# ---------------------------------------------------------------------------
# property checks on closed-loop trees

@dataclass
class SupermartingaleReport:
    control_id: str
    min_gap: float              # min over nodes of V_k - E_u[V_{k+1}]
    max_gap_at_argmax: float    # max |gap| where the rule's u attains the max
    n_nodes: int
    n_argmax_nodes: int


def supermartingale_check(model: tree.TreeModel, closed: tree.TreeResult,
                          rules) -> list[SupermartingaleReport]:
    """At every non-leaf node of ``closed``: recompute the two successors
    under each rule, look their values up and compare with the node value."""
    U = model.coeff.controls
    sq = np.sqrt(model.grid.dt)
    out = []
    for rule in rules:
        gaps, at_max = [], []
        for lev in closed.levels[:-1]:
            alive = np.flatnonzero(~lev.stopped)
            batch = PathPrefix(model.grid, lev.prefixes[alive])
            u = np.broadcast_to(rule(lev.k, batch), batch.batch_shape + (U.m,))
            avg = np.zeros(alive.size)
            for eps in tree.EPS:
                nxt = euler_step(model.coeff, lev.k, batch, u, np.full((alive.size, 1), eps * sq))
                kids = np.concatenate([batch.values, nxt[:, None, :]], axis=1)
                avg += 0.5 * np.array([closed.lookup(v) for v in kids])
            gap = lev.value[alive] - avg
            slot = U.index_of(u)
            attains = lev.q[alive, slot] == lev.q[alive].max(axis=1)
            gaps.append(gap)
            at_max.append(np.abs(gap[attains]))
        gaps = np.concatenate(gaps)
        am = np.concatenate(at_max)
        out.append(SupermartingaleReport(rule.id, float(gaps.min()),
                                         float(am.max()) if am.size else 0.0, gaps.size, am.size))
    return out


def lipschitz_extension_check(model: tree.TreeModel, xi: Payoff, psi: Payoff, p: float = 1.0,
                              k0: int = 0, history: PathPrefix | None = None) -> dict:
    """Terms of ``|V(xi) - V(psi)|^p <= V(|xi - psi|)^p <= V(|xi - psi|^p)``."""
    def v(f):
        return tree.closed_loop(tree.TreeModel(model.grid, model.coeff, f, None, model.node_cap),
                                k0, history).value
    diff = abs(xi - psi)
    powered = Payoff(lambda a: np.abs(xi.fn(a) - psi.fn(a)) ** p, f"|{xi.name}-{psi.name}|^{p:g}")
    return {"gap": abs(v(xi) - v(psi)) ** p, "value_of_abs": v(diff) ** p,
            "value_of_abs_p": v(powered)}


def modulus_check(model: tree.TreeModel, closed: tree.TreeResult, k: int) -> dict:
    """Worst ratio ``|V_k(w) - V_k(w')| / ||w - w'||_k`` over all pairs of
    level-``k`` prefixes, against ``L (1 + sqrt(C))``."""
    if model.payoff.lipschitz is None:
        raise ValueError(f"payoff {model.payoff.name} has no declared Lipschitz constant")
    lev = closed.level(k)
    pre = PathPrefix(model.grid, lev.prefixes)
    a, b = np.triu_indices(lev.n, 1)
    dist = sup_distance(pre[a], pre[b], k) if a.size else np.zeros(0)
    dv = np.abs(lev.value[a] - lev.value[b])
    keep = dist > 0
    ratio = float((dv[keep] / dist[keep]).max()) if keep.any() else 0.0
    _, C = gronwall_constant(model.coeff.lipschitz, model.grid.T)
    return {"ratio": ratio, "bound": model.payoff.lipschitz * (1 + np.sqrt(C)), "pairs": int(a.size),
            "exact_ties_violated": int(np.sum((~keep) & (dv > 0)))}
