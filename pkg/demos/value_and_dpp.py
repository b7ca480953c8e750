"""
Worst-case values on a binomial tree
====================================

A volatility chosen from {0.5, 1} at every step, a square payoff at T = 1.
The closed-loop tree picks the largest volatility everywhere and the value
is exactly 1.  Splitting the horizon at any step and valuing the inner
problem first gives the same number.
"""
import numpy as np

from pathctrl import tree, value
from pathctrl.control import make_grid_family
from pathctrl.models import make_model
from pathctrl.pathspace import PathPrefix, TimeGrid
from pathctrl.payoffs import lookback, square

grid = TimeGrid.uniform(1.0, 4)
coeff = make_model("controlled_vol")
model = tree.TreeModel(grid, coeff, square())

closed = tree.closed_loop(model)
print("closed-loop value of the square payoff:", closed.value)
print("root control index:", closed.root_argmax)

# Restricting to constant controls happens to lose nothing here
est, per_control = value.value_tree(tree.TreeModel(grid, coeff, square(), make_grid_family(coeff.controls)))
print("best constant control:", est.argmax_id, {k: r.value for k, r in per_control.items()})

# Dynamic programming: value the inner problem at every node of the split step first
for j in range(1, grid.N):
    r = value.dpp_residual_tree(model, split=j)
    print(f"split at step {j}: direct {r.direct:.15f} composed {r.composed:.15f}")

# The lagged-volatility model has a genuinely path-dependent optimum
lagged = tree.TreeModel(grid, make_model("lagged_vol"), lookback())
print("lagged_vol lookback value:", tree.closed_loop(lagged).value)

# Monte Carlo over the family of constants, with an out-of-sample revalue
mc = value.value_mc(coeff, square(), 0, PathPrefix.start(grid, 0.0),
                    make_grid_family(coeff.controls), M=50_000, seed=1)
print(f"MC value {mc.value:.4f} +/- {mc.stderr:.4f}, revalued {mc.revalue:.4f}")
print("within three standard errors of 1:", bool(np.abs(mc.value - 1.0) <= 3 * mc.stderr))
