"""Controlled path-dependent SDE engine.

Coefficients are evaluated on the state prefix up to the left endpoint of
each step (explicit Euler), so the solution from a later time with the
realised history as input reproduces the solution from an earlier time
exactly.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import rng
from .pathspace import Path, PathPrefix, TimeGrid, concat_prefix, restrict, sup_distance


class SDEError(ValueError):
    """Raised for non-finite coefficients, controls outside U, or bad noise."""


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite control set U as an array of points of shape ``(n, m)``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise SDEError("control set must be a nonempty list of points")
        if not np.all(np.isfinite(pts)):
            raise SDEError("control points must be finite")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @classmethod
    def box(cls, low, high, counts) -> "ControlSet":
        """Axis-aligned box gridded with ``counts`` points per axis (endpoints included)."""
        low, high = np.atleast_1d(low).astype(float), np.atleast_1d(high).astype(float)
        counts = np.broadcast_to(np.atleast_1d(counts), low.shape)
        if np.any(high < low) or np.any(counts < 1):
            raise SDEError("box needs low <= high and counts >= 1")
        axes = [np.linspace(lo, hi, int(c)) if c > 1 else np.array([lo])
                for lo, hi, c in zip(low, high, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(np.stack([m.ravel() for m in mesh], axis=-1))

    def __len__(self):
        return self.points.shape[0]

    @property
    def m(self) -> int:
        return self.points.shape[1]

    def index_of(self, u) -> np.ndarray:
        """Index of each control value in U; -1 where it is not a member."""
        u = np.asarray(u, dtype=float)
        close = np.all(np.abs(u[..., None, :] - self.points) <= 1e-12 * (1 + np.abs(self.points)),
                       axis=-1)
        return np.where(close.any(axis=-1), close.argmax(axis=-1), -1)

    def contains(self, u) -> np.ndarray:
        return self.index_of(u) >= 0


@dataclass(frozen=True, eq=False)
class CoefficientSpec:
    """Drift and diffusion rules ``(k, prefix, u)`` with Lipschitz metadata.

    ``drift`` returns ``batch + (d,)`` and ``diffusion`` returns
    ``batch + (d, d)``; scalars are broadcast.  ``lipschitz`` is the constant
    K of ``|mu - mu'| + |sigma - sigma'| <= K ||w - w'||_k``.
    """

    drift: Callable
    diffusion: Callable
    lipschitz: float
    controls: ControlSet
    dim: int = 1
    diffusion_invertible: bool = False
    drift_uncontrolled: bool = False
    translation_invariant: bool = False
    name: str = "custom"
    # "positive-definite" when the nondegeneracy sufficient condition holds, else "user-attested"
    nondegeneracy: str = "user-attested"
    params: dict = field(default_factory=dict)

    def mu(self, k: int, prefix: PathPrefix, u) -> np.ndarray:
        out = np.broadcast_to(np.asarray(self.drift(k, prefix, u), dtype=float),
                              prefix.batch_shape + (self.dim,))
        if not np.all(np.isfinite(out)):
            raise SDEError(f"non-finite drift at step {k} in model {self.name}")
        return out

    def sigma(self, k: int, prefix: PathPrefix, u) -> np.ndarray:
        d = self.dim
        out = np.broadcast_to(np.asarray(self.diffusion(k, prefix, u), dtype=float),
                              prefix.batch_shape + (d, d))
        if not np.all(np.isfinite(out)):
            raise SDEError(f"non-finite diffusion at step {k} in model {self.name}")
        if self.diffusion_invertible:
            det = out[..., 0, 0] if d == 1 else np.linalg.det(out)
            if np.any(det == 0):
                raise SDEError(f"diffusion declared invertible but singular at step {k}")
        return out


def euler_step(coeff: CoefficientSpec, k: int, prefix: PathPrefix, u, dw) -> np.ndarray:
    """One left-point Euler step from the prefix cut at ``k``."""
    dt = prefix.grid.steps[k]
    mu = coeff.mu(k, prefix, u)
    sig = coeff.sigma(k, prefix, u)
    return prefix.last + mu * dt + np.einsum("...ij,...j->...i", sig, dw)


def _check_control(coeff, u, k):
    u = np.asarray(u, dtype=float)
    if not np.all(coeff.controls.contains(u)):
        raise SDEError(f"control value outside U at step {k}")
    return u


def euler_solve(coeff: CoefficientSpec, control, k0: int, history: PathPrefix, noise) -> Path:
    """Solve from ``k0`` with frozen ``history`` and increments ``noise``.

    ``noise`` has shape ``batch + (N - k0, d)``.  Returns the path from ``k0``
    (batched like ``noise``/``history``).
    """
    grid = history.grid
    N = grid.N
    if history.k != k0:
        raise SDEError(f"history is cut at {history.k}, expected {k0}")
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-2:] != (N - k0, coeff.dim):
        raise SDEError(f"noise must have shape (..., {N - k0}, {coeff.dim}), got {noise.shape}")
    batch = np.broadcast_shapes(history.batch_shape, noise.shape[:-2])
    buf = np.empty(batch + (N + 1, coeff.dim))
    buf[..., :k0 + 1, :] = history.values
    for k in range(k0, N):
        prefix = PathPrefix(grid, buf[..., :k + 1, :])
        u = _check_control(coeff, control(k, prefix), k)
        buf[..., k + 1, :] = euler_step(coeff, k, prefix, u, noise[..., k - k0, :])
    if not np.all(np.isfinite(buf)):
        raise SDEError("solution became non-finite")
    return Path(grid, buf[..., k0:, :], start=k0)


def conditioned_coefficients(coeff: CoefficientSpec, k: int, history: PathPrefix) -> CoefficientSpec:
    """Coefficients with the history up to ``k`` frozen.

    The returned rules evaluate the originals on ``concat(history, prefix)``;
    the declared Lipschitz constant doubles.
    """
    if history.k != k:
        raise SDEError(f"history is cut at {history.k}, expected {k}")

    def drift(r, prefix, u):
        return coeff.drift(r, concat_prefix(history, prefix), u)

    def diffusion(r, prefix, u):
        return coeff.diffusion(r, concat_prefix(history, prefix), u)

    return replace(coeff, drift=drift, diffusion=diffusion, lipschitz=2.0 * coeff.lipschitz,
                   name=f"{coeff.name}|cond@{k}")


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Simulated paths from ``k0`` sharing the history ``history``."""

    k0: int
    history: PathPrefix
    paths: Path
    noise: np.ndarray | None
    seed: int
    stream: int
    noise_model: str
    control_id: str = ""

    @property
    def M(self) -> int:
        return self.paths.values.shape[0]

    def full(self) -> Path:
        """Member paths with the history prepended (indices ``0..N``)."""
        hist = np.broadcast_to(self.history.values[:self.k0], (self.M, self.k0, self.paths.dim))
        return Path(self.paths.grid, np.concatenate([hist, self.paths.values], axis=1))

    def terminal(self) -> np.ndarray:
        return self.paths.values[:, -1, :]


def ensemble_noise(grid: TimeGrid, k0: int, M: int, dim: int, seed: int,
                   noise: str = rng.GAUSSIAN, stream: int = 0, threads: int = 1) -> np.ndarray:
    """Increments for steps ``k0..N-1`` of paths ``0..M-1`` in stream ``(seed, stream)``."""
    dw = rng.increments(seed, M, grid.steps, dim, noise, stream=stream, threads=threads)
    return dw[:, k0:, :]


def simulate_ensemble(coeff: CoefficientSpec, control, k0: int, history: PathPrefix, M: int,
                      seed: int, noise: str = rng.GAUSSIAN, stream: int = 0, threads: int = 1,
                      store_noise: bool = True, dw: np.ndarray | None = None) -> Ensemble:
    """``M`` Euler paths from ``history`` under ``control``.

    Pass ``dw`` to reuse increments (common random numbers); otherwise they
    are drawn from the ``(seed, stream)`` substreams.
    """
    if M < 1:
        raise SDEError("M must be >= 1")
    if history.batch_shape:
        raise SDEError("simulate_ensemble takes one (unbatched) history")
    grid = history.grid
    if dw is None:
        dw = ensemble_noise(grid, k0, M, coeff.dim, seed, noise, stream, threads)
    elif dw.shape[0] != M:
        raise SDEError(f"dw holds {dw.shape[0]} paths, M={M}")
    chunks = [slice(i, min(i + rng.BLOCK, M)) for i in range(0, M, rng.BLOCK)]
    solve = lambda sl: euler_solve(coeff, control, k0, history, dw[sl]).values
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(solve, chunks))
    else:
        parts = [solve(sl) for sl in chunks]
    paths = Path(grid, np.concatenate(parts, axis=0), start=k0)
    return Ensemble(k0, history, paths, dw if store_noise else None, seed, stream, noise,
                    getattr(control, "id", ""))


def flow_consistency_check(coeff: CoefficientSpec, control, s: int, t: int,
                           history: PathPrefix, noise) -> float:
    """Max distance on ``[t, N]`` between the solution from ``s`` and the
    solution restarted at ``t`` from its own realised history."""
    grid = history.grid
    if not 0 <= s <= t <= grid.N:
        raise SDEError(f"need 0 <= s <= t <= N, got s={s}, t={t}")
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-2] != grid.N - s:
        raise SDEError(f"noise length {noise.shape[-2]} != N - s = {grid.N - s}")
    first = euler_solve(coeff, control, s, history, noise)
    full = np.concatenate([history.values[..., :s, :], first.values], axis=-2)
    restarted_hist = restrict(Path(grid, full), t)
    second = euler_solve(coeff, control, t, restarted_hist, noise[..., t - s:, :])
    diff = np.linalg.norm(first.segment(t, grid.N) - second.values, axis=-1)
    return float(diff.max())


def gronwall_constant(K: float, T: float) -> tuple[float, float]:
    """``(C0, C)`` with ``C = C0 exp(C0 T)`` from the SDE stability estimate.

    The martingale part contributes ``8K^2 T`` (history) and ``8K^2``
    (integral) and the drift part ``2K^2 T^2`` and ``2K^2 T``; the factor 2
    comes from ``|a + b|^2 <= 2|a|^2 + 2|b|^2``.
    """
    K2 = K * K
    c0 = 2.0 * max(8 * K2 * T + 2 * K2 * T * T, 8 * K2 + 2 * K2 * T)
    return c0, c0 * np.exp(c0 * T)


def stability_ratio(coeff: CoefficientSpec, control, k: int, hist_a: PathPrefix,
                    hist_b: PathPrefix, M: int, seed: int, threads: int = 1) -> tuple[float, float]:
    """MC mean of ``||X^t - Xbar^t||^2`` on ``[t, T]`` and ``||w - wbar||_t^2``.

    Both solutions share noise and control; ``X^t`` is the solution minus its
    starting value.
    """
    dw = ensemble_noise(hist_a.grid, k, M, coeff.dim, seed, threads=threads)
    a = simulate_ensemble(coeff, control, k, hist_a, M, seed, dw=dw, threads=threads)
    b = simulate_ensemble(coeff, control, k, hist_b, M, seed, dw=dw, threads=threads)
    xa = a.paths.values - a.paths.values[:, :1]
    xb = b.paths.values - b.paths.values[:, :1]
    lhs = float(np.mean(np.linalg.norm(xa - xb, axis=-1).max(axis=-1) ** 2))
    return lhs, sup_distance(hist_a, hist_b, k) ** 2


def lipschitz_ratio(coeff: CoefficientSpec, k: int, a: PathPrefix, b: PathPrefix, u) -> np.ndarray:
    """``(|mu_a - mu_b| + |sigma_a - sigma_b|) / ||a - b||_k`` per batch member."""
    dmu = np.linalg.norm(coeff.mu(k, a, u) - coeff.mu(k, b, u), axis=-1)
    dsig = np.linalg.norm(coeff.sigma(k, a, u) - coeff.sigma(k, b, u), axis=(-2, -1))
    dist = sup_distance(a, b, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(dist > 0, (dmu + dsig) / np.where(dist > 0, dist, 1.0), 0.0)
