"""Volatility-band expectations and uncertainty sets.

With zero drift and ``sigma = u`` for ``u`` in a band, the value function is
the sublinear expectation over all volatility scenarios in the band.  The
band is gridded; on trees the grid is refined by doubling its intervals
until the value settles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng, tree
from .control import make_grid_family
from .pathspace import PathPrefix, TimeGrid
from .payoffs import Payoff
from .sde import CoefficientSpec, ControlSet
from .value import ValueEstimate, value_mc, value_tree


class GSpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GSpec:
    """Volatility band ``[sigma_low, sigma_high]`` per dimension, optionally
    with a drift interval (default the single point 0)."""

    sigma_low: np.ndarray
    sigma_high: np.ndarray
    grid: TimeGrid
    payoff: Payoff
    drift_low: np.ndarray | None = None
    drift_high: np.ndarray | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.sigma_low, dtype=float))
        hi = np.atleast_1d(np.asarray(self.sigma_high, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise GSpecError("sigma_low and sigma_high need one entry per dimension")
        if np.any(lo <= 0) or np.any(hi < lo):
            raise GSpecError(f"need 0 < sigma_low <= sigma_high, got {lo} and {hi}")
        dl = np.zeros_like(lo) if self.drift_low is None else np.atleast_1d(self.drift_low).astype(float)
        dh = np.zeros_like(lo) if self.drift_high is None else np.atleast_1d(self.drift_high).astype(float)
        if dl.shape != lo.shape or dh.shape != lo.shape or np.any(dh < dl):
            raise GSpecError("drift interval needs drift_low <= drift_high per dimension")
        for name, v in (("sigma_low", lo), ("sigma_high", hi), ("drift_low", dl), ("drift_high", dh)):
            object.__setattr__(self, name, v)

    @property
    def dim(self) -> int:
        return self.sigma_low.size

    @property
    def has_drift(self) -> bool:
        return bool(np.any(self.drift_high > self.drift_low))

    def controls(self, count: int) -> ControlSet:
        """Grid of ``count`` points per nondegenerate axis; a control is
        ``(sigma_1..sigma_d, drift_1..drift_d)``."""
        lo = np.concatenate([self.sigma_low, self.drift_low])
        hi = np.concatenate([self.sigma_high, self.drift_high])
        return ControlSet.box(lo, hi, np.where(hi > lo, count, 1))

    def coefficients(self, count: int) -> CoefficientSpec:
        d = self.dim
        U = self.controls(count)
        return CoefficientSpec(
            drift=lambda k, p, u: np.asarray(u)[..., d:],
            diffusion=lambda k, p, u: np.asarray(u)[..., :d, None] * np.eye(d),
            lipschitz=0.0, controls=U, dim=d, diffusion_invertible=True,
            drift_uncontrolled=not self.has_drift, translation_invariant=True,
            name="volatility_band", nondegeneracy="positive-definite",
            params={"sigma_low": self.sigma_low.tolist(), "sigma_high": self.sigma_high.tolist()})


def _start(spec: GSpec, k0: int, history: PathPrefix | None) -> PathPrefix:
    return PathPrefix.start(spec.grid, np.zeros(spec.dim)) if history is None else history


def g_value(spec: GSpec, k0: int = 0, history: PathPrefix | None = None, method: str = "tree",
            M: int = 100_000, seed: int = 0, count: int = 2, tol: float = 1e-9,
            max_count: int = 65, noise: str = rng.GAUSSIAN, threads: int = 1,
            node_cap: int = 2_000_000) -> ValueEstimate:
    """Upper value of the payoff over the band.

    ``tree``: closed-loop tree on ``count`` band points, doubling the number
    of intervals (so grids are nested) until two successive values differ by
    less than ``tol`` or the node cap / ``max_count`` is reached.
    ``mc``: max over constant controls on the ``count``-point grid.
    """
    history = _start(spec, k0, history)
    if method == "mc":
        coeff = spec.coefficients(count)
        fam = make_grid_family(coeff.controls, "constants")
        return value_mc(coeff, spec.payoff, k0, history, fam, M, seed, noise, threads=threads)
    if method != "tree":
        raise GSpecError(f"unknown method {method!r}")
    prev = None
    while True:
        model = tree.TreeModel(spec.grid, spec.coefficients(count), spec.payoff, node_cap=node_cap)
        est, _ = value_tree(model, k0, history)
        if prev is not None and abs(est.value - prev.value) < tol:
            return est
        nxt = 2 * count - 1
        if nxt > max_count or model.node_count(k0, branching=2 * nxt) > node_cap:
            est.method = "tree-unconverged" if prev is not None else est.method
            return est
        prev, count = est, nxt


def g_pair(spec: GSpec, payoff: Payoff | None = None, **kw) -> tuple[float, float]:
    """``(upper, lower)`` with ``lower(f) = -upper(-f)``."""
    f = spec.payoff if payoff is None else payoff
    upper = g_value(GSpec(spec.sigma_low, spec.sigma_high, spec.grid, f,
                          spec.drift_low, spec.drift_high), **kw).value
    lower = 0.0 - g_value(GSpec(spec.sigma_low, spec.sigma_high, spec.grid, -f,
                               spec.drift_low, spec.drift_high), **kw).value
    return upper, lower


@dataclass(frozen=True, eq=False)
class UncertaintySet:
    """Set-valued rule ``(k, prefix) -> {(mu(k, prefix, u), sigma(k, prefix, u)) : u in U}``."""

    coeff: CoefficientSpec

    def __call__(self, k: int, prefix: PathPrefix) -> tuple[np.ndarray, np.ndarray]:
        """Drift images ``(n_u, d)`` and diffusion images ``(n_u, d, d)`` at one prefix."""
        if prefix.batch_shape:
            raise GSpecError("uncertainty set is evaluated at a single prefix")
        pts = self.coeff.controls.points
        batch = PathPrefix(prefix.grid, np.broadcast_to(prefix.values, (len(pts),) + prefix.values.shape))
        return self.coeff.mu(k, batch, pts).copy(), self.coeff.sigma(k, batch, pts).copy()


def uncertainty_report(coeff: CoefficientSpec, prefixes) -> list[dict]:
    """Image of U under the coefficients at each prefix, with a flag telling
    whether it differs from the image at the first prefix."""
    D = UncertaintySet(coeff)
    rows = []
    ref = None
    for p in prefixes:
        mu, sig = D(p.k, p)
        if ref is None:
            ref = (mu, sig)
        rows.append({"step": p.k, "drift": mu, "diffusion": sig,
                     "drift_differs": not np.array_equal(mu, ref[0]),
                     "diffusion_differs": not np.array_equal(sig, ref[1])})
    return rows
