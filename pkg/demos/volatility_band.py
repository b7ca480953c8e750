"""
Sublinear expectation under a volatility band
=============================================

Only the volatility is uncertain, inside [0.5, 1].  Convex payoffs are
priced at the top of the band and concave ones at the bottom; the gap
between the upper and lower value measures the model uncertainty.
"""
from pathctrl import gexp
from pathctrl.pathspace import TimeGrid
from pathctrl.payoffs import digital_barrier, linear, lookback, square

grid = TimeGrid.uniform(1.0, 4)

for name, f in [("square", square()), ("linear", linear()), ("lookback", lookback())]:
    upper, lower = gexp.g_pair(gexp.GSpec(0.5, 1.0, grid, f))
    print(f"{name:>9}: upper {upper:.6f} lower {lower:.6f}")

# A digital payoff is neither convex nor concave, so the band gets refined
est = gexp.g_value(gexp.GSpec(0.5, 1.0, grid, digital_barrier(0.9)))
print(f"digital barrier: {est.value:.6f} ({est.n_samples} grid points, {est.method})")

mc = gexp.g_value(gexp.GSpec(0.5, 1.0, grid, square()), method="mc", M=100_000, seed=3)
print(f"square by Monte Carlo: {mc.value:.4f} +/- {mc.stderr:.4f}")
