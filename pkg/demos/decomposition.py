"""
Martingale part and increasing part of the value
================================================

Under the constant low-volatility control, the value process of the square
payoff drifts down at rate 0.75, so every step of length 0.25 adds 0.1875
to the increasing process.  Under the optimal rule nothing is added.
"""
import numpy as np

from pathctrl import bsde2, tree, value
from pathctrl.control import constant_control
from pathctrl.models import make_model
from pathctrl.pathspace import TimeGrid
from pathctrl.payoffs import square

grid = TimeGrid.uniform(1.0, 4)
model = tree.TreeModel(grid, make_model("controlled_vol"), square())
closed = tree.closed_loop(model)
low = constant_control(0.5, "low")

dec = bsde2.decompose_K(model, value.value_process_tree(model, low))
for step in dec.steps:
    print(f"step {step.k}: dK {np.unique(step.dK)} Z range [{step.Z.min():.3f}, {step.Z.max():.3f}]")
print("largest identity residual:", dec.max_identity)

opt = bsde2.optimal_feedback(model, closed)
dec_opt = bsde2.decompose_K(model, value.value_process_tree(model, opt))
print("largest |dK| under the optimal rule:", max(np.abs(s.dK).max() for s in dec_opt.steps))

# Switching to a better continuation drives the expected remaining K to zero
for k in range(grid.N):
    rep = bsde2.minimality_residual(model, low, k, [low], closed)
    print(f"from step {k}: infimum of remaining K {rep.residual:.3g}, attained by {sorted(set(rep.attaining))}")
