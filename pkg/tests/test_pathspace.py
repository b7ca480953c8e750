import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pathctrl.pathspace import (Path, PathError, PathPrefix, TimeGrid, concat, path_from_csv,
                                path_to_csv, restrict, shift, sup_distance)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def paths(N=5, d=2):
    return arrays(float, (N + 1, d), elements=finite)


GRID = TimeGrid.uniform(1.0, 5)


def test_grid_validation():
    with pytest.raises(PathError):
        TimeGrid([0.0, 0.5, 0.5])
    with pytest.raises(PathError):
        TimeGrid([0.1, 0.5])
    g = TimeGrid.uniform(2.0, 4)
    assert g.N == 4 and g.T == 2.0 and g.dt == 0.5 and g.is_uniform
    with pytest.raises(PathError):
        TimeGrid([0.0, 0.1, 1.0]).dt


def test_concat_hand_value():
    g = TimeGrid.uniform(1.0, 2)
    pre = PathPrefix(g, [0.0, 1.0])
    cont = Path(g, [1.0, 3.0], start=1)
    np.testing.assert_array_equal(concat(pre, cont).values[:, 0], [0.0, 1.0, 3.0])


def test_concat_translation_at_zero():
    g = TimeGrid.uniform(1.0, 3)
    cont = Path(g, [0.0, 1.0, -1.0, 2.0])
    out = concat(PathPrefix(g, [5.0]), cont)
    np.testing.assert_array_equal(out.values[:, 0], [5.0, 6.0, 4.0, 7.0])


def test_shift_hand_value():
    g = TimeGrid.uniform(1.0, 2)
    s = shift(Path(g, [2.0, 5.0, 4.0]), 1)
    assert s.start == 1
    np.testing.assert_array_equal(s.values[:, 0], [0.0, -1.0])


def test_shift_of_constant_path_is_zero():
    s = shift(Path(GRID, np.full(6, 3.0)), 2)
    assert np.all(s.values == 0.0)


def test_sup_distance_hand_value():
    g = TimeGrid.uniform(1.0, 2)
    assert sup_distance(Path(g, [0.0, 1.0, 2.0]), Path(g, [0.0, 0.0, 4.0]), 2) == 2.0
    assert sup_distance(Path(g, [0.0, 1.0, 2.0]), Path(g, [0.0, 0.0, 4.0]), 1) == 1.0


def test_sup_distance_translation():
    a = Path(GRID, np.zeros((6, 2)))
    b = Path(GRID, np.zeros((6, 2)) + [3.0, 4.0])
    assert sup_distance(a, b, 5) == pytest.approx(5.0, abs=0)


def test_restrict_ends():
    p = Path(GRID, np.arange(6.0))
    assert restrict(p, 0).values.shape == (1, 1)
    np.testing.assert_array_equal(restrict(p, 5).values, p.values)
    with pytest.raises(PathError):
        restrict(p, 6)


def test_prefix_exposes_nothing_beyond_cut():
    pre = restrict(Path(GRID, np.arange(6.0)), 2)
    assert pre.k == 2 and pre.values.shape[0] == 3
    with pytest.raises(PathError):
        pre.restrict(3)
    assert not pre.values.flags.writeable


def test_mismatch_errors():
    other = TimeGrid.uniform(2.0, 5)
    with pytest.raises(PathError):
        sup_distance(Path(GRID, np.zeros(6)), Path(other, np.zeros(6)), 1)
    with pytest.raises(PathError):
        concat(PathPrefix(GRID, np.zeros((2, 2))), Path(GRID, np.zeros((6, 1))))
    with pytest.raises(PathError):
        Path(GRID, [0.0, np.nan, 0, 0, 0, 0])


def test_csv_round_trip():
    p = Path(GRID, np.array([[0.1, 1 / 3]] * 6) * np.arange(6)[:, None])
    text = path_to_csv(p)
    assert text.splitlines()[0] == "step,t,x_0,x_1"
    back = path_from_csv(text, GRID)
    np.testing.assert_array_equal(back.values, p.values)


dyadic = st.integers(-64, 64).map(lambda i: i / 8)


@given(arrays(float, (6, 2), elements=dyadic), st.integers(0, 5))
def test_self_concatenation_identity_exact(v, k):
    # dyadic values keep x_k + (x_j - x_k) free of rounding
    p = Path(GRID, v)
    np.testing.assert_array_equal(concat(restrict(p, k), p).values, p.values)


@given(paths(), st.integers(0, 5))
def test_self_concatenation_identity(v, k):
    p = Path(GRID, v)
    np.testing.assert_allclose(concat(restrict(p, k), p).values, p.values, rtol=0, atol=1e-14 * 20)


@given(paths(), paths(), st.integers(0, 5))
def test_restrict_after_concat(v, w, k):
    pre = restrict(Path(GRID, v), k)
    out = concat(pre, Path(GRID, w))
    np.testing.assert_array_equal(restrict(out, k).values, pre.values)


@given(paths(), paths(), st.integers(0, 5), arrays(float, (2,), elements=finite))
def test_shift_sees_only_increments(v, w, k, c):
    pre = restrict(Path(GRID, v), k)
    a = shift(concat(pre, Path(GRID, w)), k)
    b = shift(concat(pre, Path(GRID, w + c)), k)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


@given(paths(), paths(), paths(), st.integers(0, 5))
def test_sup_distance_is_pseudometric(a, b, c, upto):
    A, B, C = (Path(GRID, x) for x in (a, b, c))
    assert sup_distance(A, A, upto) == 0.0
    assert sup_distance(A, B, upto) == sup_distance(B, A, upto)
    assert sup_distance(A, C, upto) <= sup_distance(A, B, upto) + sup_distance(B, C, upto) + 1e-12


@settings(max_examples=50)
@given(paths(), paths(), paths(), st.integers(0, 5), st.integers(0, 5))
def test_concat_associative(a, b, c, k, m):
    k, m = min(k, m), max(k, m)
    A, B, C = (Path(GRID, x) for x in (a, b, c))
    # paste at k then at m ...
    first = concat(restrict(concat(restrict(A, k), B), m), C)
    # ... equals pasting at k a continuation already switched to C at m
    inner = concat(restrict(B, m), C)
    second = concat(restrict(A, k), inner)
    np.testing.assert_allclose(first.values, second.values, atol=1e-9)


def test_batched_concat_broadcasts():
    pre = PathPrefix(GRID, np.zeros((3, 3, 1)))
    cont = Path(GRID, np.arange(6.0))
    assert concat(pre, cont).values.shape == (3, 6, 1)
