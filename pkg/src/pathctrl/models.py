"""Built-in coefficient models, looked up by name.

Every model takes a scalar control ``u`` from a finite set built from
``u_low``/``u_high``/``u_count`` (or an explicit ``u_points`` list) and
works in any dimension ``dim`` with ``sigma = u * (...) * I``.
"""
from __future__ import annotations

import numpy as np

from .sde import CoefficientSpec, ControlSet


class RegistryError(KeyError):
    pass


def control_set(params: dict) -> ControlSet:
    if "u_points" in params:
        return ControlSet(np.asarray(params["u_points"], dtype=float))
    return ControlSet.box(params.get("u_low", 0.5), params.get("u_high", 1.0),
                          params.get("u_count", 2))


def _eye(d):
    return np.eye(d)


def controlled_vol(dim=1, **params) -> CoefficientSpec:
    """``mu = 0``, ``sigma = u``."""
    U = control_set(params)
    pos = bool(np.all(U.points > 0))
    return CoefficientSpec(
        drift=lambda k, p, u: np.zeros(p.batch_shape + (dim,)),
        diffusion=lambda k, p, u: np.asarray(u)[..., :1, None] * _eye(dim),
        lipschitz=0.0, controls=U, dim=dim, diffusion_invertible=pos,
        drift_uncontrolled=True, translation_invariant=True, name="controlled_vol",
        nondegeneracy="positive-definite" if pos else "user-attested", params=dict(params))


def lagged_vol(dim=1, lag=1, c=1.0, cap=1.0, **params) -> CoefficientSpec:
    """``sigma = u (1 + c min(|w_{k-lag}|, cap))``; the lag is clipped at index 0."""
    U = control_set(params)

    def diffusion(k, p, u):
        x = p.values[..., max(k - lag, 0), :]
        scale = 1.0 + c * np.minimum(np.linalg.norm(x, axis=-1), cap)
        return (np.asarray(u)[..., 0] * scale)[..., None, None] * _eye(dim)

    pos = bool(np.all(U.points > 0)) and c >= 0
    return CoefficientSpec(
        drift=lambda k, p, u: np.zeros(p.batch_shape + (dim,)),
        diffusion=diffusion, lipschitz=abs(c) * float(np.abs(U.points).max()) * np.sqrt(dim),
        controls=U, dim=dim, diffusion_invertible=pos, drift_uncontrolled=True,
        name="lagged_vol", nondegeneracy="positive-definite" if pos else "user-attested",
        params=dict(params, lag=lag, c=c, cap=cap))


def runningmax_drift(dim=1, a=1.0, cap=1.0, **params) -> CoefficientSpec:
    """``mu = a clip(max_{j<=k} w_j, -cap, cap)`` per coordinate, ``sigma = u``."""
    U = control_set(params)

    def drift(k, p, u):
        return a * np.clip(p.values.max(axis=-2), -cap, cap)

    pos = bool(np.all(U.points > 0))
    return CoefficientSpec(
        drift=drift, diffusion=lambda k, p, u: np.asarray(u)[..., :1, None] * _eye(dim),
        lipschitz=abs(a) * np.sqrt(dim), controls=U, dim=dim, diffusion_invertible=pos,
        drift_uncontrolled=True, name="runningmax_drift",
        nondegeneracy="positive-definite" if pos else "user-attested",
        params=dict(params, a=a, cap=cap))


def uncontrolled_drift_controlled_vol(dim=1, theta=1.0, **params) -> CoefficientSpec:
    """Mean reversion ``mu = -theta w_k`` with ``sigma = u``."""
    U = control_set(params)
    pos = bool(np.all(U.points > 0))
    return CoefficientSpec(
        drift=lambda k, p, u: -theta * p.last,
        diffusion=lambda k, p, u: np.asarray(u)[..., :1, None] * _eye(dim),
        lipschitz=abs(theta), controls=U, dim=dim, diffusion_invertible=pos,
        drift_uncontrolled=True, translation_invariant=(theta == 0),
        name="uncontrolled_drift_controlled_vol",
        nondegeneracy="positive-definite" if pos else "user-attested",
        params=dict(params, theta=theta))


MODELS = {
    "controlled_vol": controlled_vol,
    "lagged_vol": lagged_vol,
    "runningmax_drift": runningmax_drift,
    "uncontrolled_drift_controlled_vol": uncontrolled_drift_controlled_vol,
}


def make_model(name: str, **params) -> CoefficientSpec:
    try:
        factory = MODELS[name]
    except KeyError:
        raise RegistryError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
    return factory(**params)
