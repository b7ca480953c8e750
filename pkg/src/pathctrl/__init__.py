"""Value functions of controlled path-dependent SDEs on a discrete grid.

Monte Carlo estimates over control families, exact Rademacher-tree oracles,
dynamic programming checks, volatility-band expectations and the
decomposition of the value process under fixed controls.
"""
__version__ = "0.1.0"

from .pathspace import Path, PathPrefix, TimeGrid, concat, restrict, shift, sup_distance
from .sde import CoefficientSpec, ControlSet, euler_solve, simulate_ensemble
from .control import ControlFamily, ControlProcess, StoppingRule, constant_control, make_grid_family
from .models import make_model
from .payoffs import Payoff, make_payoff
from .tree import TreeModel, closed_loop, fixed_control
from .value import ValueEstimate, value_mc, value_tree

__all__ = [
    "Path", "PathPrefix", "TimeGrid", "concat", "restrict", "shift", "sup_distance",
    "CoefficientSpec", "ControlSet", "euler_solve", "simulate_ensemble",
    "ControlFamily", "ControlProcess", "StoppingRule", "constant_control", "make_grid_family",
    "make_model", "Payoff", "make_payoff", "TreeModel", "closed_loop", "fixed_control",
    "ValueEstimate", "value_mc", "value_tree",
]
