"""Path functionals and their registry.

A payoff maps path values of shape ``batch + (N+1, d)`` to ``batch``.
Payoffs compose with ``+``, ``-``, scalar ``*`` and ``abs``; declared
Lipschitz constants (w.r.t. the sup-norm over the grid) and bounds are
propagated where they stay valid.

``nodes_only`` records whether the functional reads nothing but the grid
node values.  Every registry payoff does; a user payoff that interpolates
between nodes should set it to False, since the grid sup-distance then
understates the distance its Lipschitz constant refers to.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class PayoffError(ValueError):
    pass


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=float)


def _add_opt(a, b):
    return None if a is None or b is None else a + b


@dataclass(frozen=True, eq=False)
class Payoff:
    fn: Callable
    name: str
    lipschitz: float | None = None
    bound: float | None = None
    nodes_only: bool = True

    def __call__(self, path) -> np.ndarray:
        out = np.asarray(self.fn(_values(path)), dtype=float)
        if not np.all(np.isfinite(out)):
            raise PayoffError(f"payoff {self.name} is non-finite on some path")
        return out

    def __add__(self, other):
        if isinstance(other, Payoff):
            return Payoff(lambda v: self.fn(v) + other.fn(v), f"({self.name}+{other.name})",
                          _add_opt(self.lipschitz, other.lipschitz), _add_opt(self.bound, other.bound),
                          self.nodes_only and other.nodes_only)
        c = float(other)
        return Payoff(lambda v: self.fn(v) + c, f"({self.name}+{c:g})", self.lipschitz,
                      None if self.bound is None else self.bound + abs(c), self.nodes_only)

    __radd__ = __add__

    def __mul__(self, c):
        c = float(c)
        return Payoff(lambda v: c * self.fn(v), f"{c:g}*{self.name}",
                      None if self.lipschitz is None else abs(c) * self.lipschitz,
                      None if self.bound is None else abs(c) * self.bound, self.nodes_only)

    __rmul__ = __mul__

    def __neg__(self):
        out = self * -1.0
        return Payoff(out.fn, f"-{self.name}", out.lipschitz, out.bound, self.nodes_only)

    def __sub__(self, other):
        return self + (-other)

    def __abs__(self):
        return Payoff(lambda v: np.abs(self.fn(v)), f"|{self.name}|", self.lipschitz, self.bound,
                      self.nodes_only)


def constant(c: float = 0.0) -> Payoff:
    c = float(c)
    return Payoff(lambda v: np.full(v.shape[:-2], c), f"const({c:g})", 0.0, abs(c))


def linear(coord: int = 0, scale: float = 1.0) -> Payoff:
    return Payoff(lambda v: scale * v[..., -1, coord], "linear", abs(scale))


def square(scale: float = 1.0) -> Payoff:
    return Payoff(lambda v: scale * np.sum(v[..., -1, :] ** 2, axis=-1), "square")


def power(p: float = 2.0, scale: float = 1.0) -> Payoff:
    if p <= 0:
        raise PayoffError("power payoff needs p > 0")
    return Payoff(lambda v: scale * np.linalg.norm(v[..., -1, :], axis=-1) ** p, f"power({p:g})",
                  abs(scale) if p == 1 else None)


def lookback(coord: int = 0, scale: float = 1.0) -> Payoff:
    """Running maximum of one coordinate over the grid nodes."""
    return Payoff(lambda v: scale * v[..., coord].max(axis=-1), "lookback", abs(scale))


def asian(coord: int = 0, scale: float = 1.0) -> Payoff:
    """Average of one coordinate over all grid nodes."""
    return Payoff(lambda v: scale * v[..., coord].mean(axis=-1), "asian", abs(scale))


def call(strike: float = 0.0, coord: int = 0, scale: float = 1.0) -> Payoff:
    return Payoff(lambda v: scale * np.maximum(v[..., -1, coord] - strike, 0.0), "call", abs(scale))


def digital_barrier(barrier: float = 1.0, coord: int = 0, scale: float = 1.0) -> Payoff:
    """``scale`` if ``|w_j|`` reaches ``barrier`` at some node; not Lipschitz."""
    return Payoff(lambda v: scale * (np.abs(v[..., coord]).max(axis=-1) >= barrier).astype(float),
                  "digital_barrier", None, abs(scale))


PAYOFFS = {
    "constant": constant,
    "linear": linear,
    "square": square,
    "power": power,
    "lookback": lookback,
    "asian": asian,
    "call": call,
    "digital_barrier": digital_barrier,
}


def make_payoff(name: str, **params) -> Payoff:
    try:
        factory = PAYOFFS[name]
    except KeyError:
        raise PayoffError(f"unknown payoff {name!r}; known: {sorted(PAYOFFS)}") from None
    return factory(**params)
