import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracle
from pathctrl import tree
from pathctrl.control import constant_control, make_grid_family
from pathctrl.models import make_model
from pathctrl.pathspace import PathPrefix, TimeGrid
from pathctrl.payoffs import PAYOFFS, PayoffError, make_payoff
from pathctrl.sde import euler_solve

GRID = TimeGrid.uniform(1.0, 4)

# closed-loop values, U = {0.5, 1}, x0 = 0, T = 1; frozen from tests/oracle.py
REFERENCE = {
    ("controlled_vol", "lookback", 3): 0.5773502691896257,
    ("controlled_vol", "lookback", 4): 0.59375,
    ("lagged_vol", "square", 3): 1.4960112905708616,
    ("lagged_vol", "square", 4): 1.6875,
    ("lagged_vol", "lookback", 4): 0.78125,
    ("lagged_vol", "lookback", 5): 0.8352998834186884,
    ("runningmax_drift", "square", 4): 1.47705078125,
    ("runningmax_drift", "lookback", 3): 0.71524198072123,
    ("runningmax_drift", "asian", 4): 0.09843750000000004,
}


def test_payoff_registry_and_arithmetic():
    v = np.array([[0.0], [1.0], [-2.0], [3.0], [0.5]])
    assert make_payoff("square")(v) == 0.25
    assert make_payoff("lookback")(v) == 3.0
    assert make_payoff("asian")(v) == pytest.approx(0.5)
    assert make_payoff("call", strike=0.2)(v) == pytest.approx(0.3)
    assert make_payoff("digital_barrier", barrier=2.0)(v) == 1.0
    assert make_payoff("digital_barrier").lipschitz is None
    f = 2 * make_payoff("lookback") - make_payoff("asian") + 1.0
    assert f(v) == pytest.approx(2 * 3.0 - 0.5 + 1.0)
    assert f.lipschitz == 3.0
    assert abs(-make_payoff("linear"))(v) == 0.5
    with pytest.raises(PayoffError):
        make_payoff("unknown")


def test_bound_and_node_flags_propagate():
    from pathctrl.payoffs import Payoff
    assert make_payoff("square").bound is None
    assert (2 * make_payoff("digital_barrier") - 1.0).bound == 3.0
    assert all(f().nodes_only for f in PAYOFFS.values())
    smooth = Payoff(lambda v: v[..., -1, 0], "interpolated", 1.0, nodes_only=False)
    assert not (smooth + make_payoff("lookback")).nodes_only
    assert not abs(-smooth).nodes_only


@settings(max_examples=60)
@given(arrays(float, (5, 1), elements=st.floats(-5, 5)), arrays(float, (5, 1), elements=st.floats(-5, 5)))
def test_declared_lipschitz_bounds_difference_quotients(a, b):
    d = np.abs(a - b).max()
    for name, f in PAYOFFS.items():
        p = f()
        if p.lipschitz is None:
            continue
        assert abs(p(a) - p(b)) <= p.lipschitz * d + 1e-12, name


@pytest.mark.parametrize("key", sorted(REFERENCE))
def test_closed_loop_matches_frozen_reference(key):
    model_name, payoff, N = key
    g = TimeGrid.uniform(1.0, N)
    m = tree.TreeModel(g, make_model(model_name), make_payoff(payoff))
    assert abs(tree.closed_loop(m).value - REFERENCE[key]) <= 1e-12


@pytest.mark.parametrize("model_name", ["controlled_vol", "lagged_vol", "runningmax_drift"])
@pytest.mark.parametrize("payoff", ["square", "lookback", "asian", "neg_square"])
def test_closed_loop_matches_brute_force(model_name, payoff):
    pay = -make_payoff("square") if payoff == "neg_square" else make_payoff(payoff)
    m = tree.TreeModel(GRID, make_model(model_name), pay)
    ref = oracle.value(oracle.MODELS[model_name], oracle.PAYOFFS[payoff], [0.0], 4, 1.0, [0.5, 1.0])
    assert abs(tree.closed_loop(m).value - ref) <= 1e-12


def test_hand_values_square():
    for N in (1, 2, 3, 5):
        g = TimeGrid.uniform(1.0, N)
        m = tree.TreeModel(g, make_model("controlled_vol"), make_payoff("square"))
        assert abs(tree.closed_loop(m).value - 1.0) <= 1e-12
        assert abs(tree.closed_loop(tree.TreeModel(g, m.coeff, -m.payoff)).value + 0.25) <= 1e-12
    m = tree.TreeModel(GRID, make_model("controlled_vol"), make_payoff("linear"))
    assert tree.closed_loop(m, 0, PathPrefix.start(GRID, 0.3)).value == pytest.approx(0.3, abs=1e-15)


def test_fixed_control_equals_exhaustive_rademacher_mc():
    # all 2^N sign sequences through the Euler engine reproduce the tree expectation
    m = tree.TreeModel(GRID, make_model("lagged_vol"), make_payoff("lookback"))
    ctl = make_grid_family(m.coeff.controls, "threshold")[1]
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=4)))[..., None] * np.sqrt(GRID.dt)
    x = euler_solve(m.coeff, ctl, 0, m.root(), signs)
    mc = float(np.mean(m.payoff(x.values)))
    assert abs(tree.fixed_control(m, ctl).value - mc) <= 1e-14
    np.testing.assert_array_equal(np.sort(tree.leaf_paths(tree.fixed_control(m, ctl))[:, :, 0], axis=0),
                                  np.sort(x.values[:, :, 0], axis=0))
    ref = oracle.expectation(oracle.lagged_vol, oracle.PAYOFFS["lookback"], [0.0], 4, 1.0,
                             lambda k, xs: 0.5 if xs[-1] >= 0 else 1.0)
    assert abs(tree.fixed_control(m, ctl).value - ref) <= 1e-12


def test_node_table_and_argmax():
    m = tree.TreeModel(GRID, make_model("controlled_vol"), make_payoff("square"))
    r = tree.closed_loop(m)
    assert len(r.table) == len(list(r.rows())) == m.node_count()
    assert r.root_argmax == 1
    rows = list(r.rows())
    assert rows[0][1] == 0 and rows[0][3] == 1.0
    assert r.lookup(PathPrefix(GRID, [0.0, 0.5])) == pytest.approx(0.25 + 0.75, abs=1e-15)


def test_ties_go_to_lowest_index():
    m = tree.TreeModel(GRID, make_model("controlled_vol"), make_payoff("linear"))
    r = tree.closed_loop(m)
    assert all(lev.argmax[lev.argmax >= 0].max() == 0 for lev in r.levels[:-1])


def test_node_cap():
    m = tree.TreeModel(TimeGrid.uniform(1.0, 12), make_model("controlled_vol"), make_payoff("square"))
    with pytest.raises(tree.TreeCapError):
        tree.closed_loop(m)
    with pytest.raises(ValueError):
        tree.TreeModel(GRID, make_model("controlled_vol", dim=2), make_payoff("square"))


def test_stopped_tree_uses_stop_value():
    from pathctrl.control import StoppingRule
    m = tree.TreeModel(GRID, make_model("controlled_vol"), make_payoff("square"))
    stop = StoppingRule(lambda p: np.abs(p.last[..., 0]) >= 0.5, cap=4)
    r = tree.fixed_control(m, constant_control(1.0), stop=stop, stop_value=lambda b: np.full(b.batch_shape, 7.0))
    assert r.levels[1].stopped.all()
    assert r.value == 7.0
