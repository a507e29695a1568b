import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supconv.jets import (Jet, JetError, factorials, index_of, jet_add, jet_compose_univariate, jet_constant,
                          jet_mul, jet_scale, jet_variable, multi_indices, series_mul, uni_exp, uni_mul,
                          uni_recip, uni_variable)

coords = st.floats(-2.0, 2.0, allow_nan=False)


def test_multi_indices_graded_lex():
    assert multi_indices(2, 2) == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
    assert len(multi_indices(3, 3)) == math.comb(6, 3)
    assert index_of(2, 2)[(1, 1)] == 4
    assert list(factorials(2, 2)) == [1, 1, 1, 2, 1, 2]


def test_shape_checks():
    with pytest.raises(JetError):
        multi_indices(0, 1)
    with pytest.raises(JetError):
        Jet(1, 2, np.zeros(2))
    with pytest.raises(JetError):
        Jet(1, 1, np.array([np.nan, 0.0]))
    with pytest.raises(JetError):
        jet_add(jet_constant(1.0, 1, 2), jet_constant(1.0, 2, 2))


@settings(max_examples=50, deadline=None)
@given(coords, coords)
def test_product_of_variables_matches_polynomial(x, y):
    # f = x^2 y at (x, y): derivatives from the closed form
    X, Y = jet_variable([x, y], 0, 3), jet_variable([x, y], 1, 3)
    f = jet_mul(jet_mul(X, X), Y)
    assert f.value == pytest.approx(x * x * y, abs=1e-12)
    assert f.derivative((1, 0)) == pytest.approx(2 * x * y, abs=1e-12)
    assert f.derivative((0, 1)) == pytest.approx(x * x, abs=1e-12)
    assert f.derivative((2, 1)) == pytest.approx(2.0, abs=1e-12)
    assert f.derivative((0, 2)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(coords, min_size=4, max_size=4), st.lists(coords, min_size=4, max_size=4))
def test_univariate_mul_is_truncated_convolution(a, b):
    want = np.convolve(a, b)[:4]
    np.testing.assert_allclose(uni_mul(np.array(a), np.array(b)), want, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3))
def test_exp_and_reciprocal_series(x):
    e = uni_exp(uni_variable(np.array(x), 5))
    want = [math.exp(x) / math.factorial(k) for k in range(6)]
    np.testing.assert_allclose(e, want, rtol=1e-12)
    r = uni_recip(uni_variable(np.array(x + 5.0), 4))
    np.testing.assert_allclose(r, [(-1) ** k / (x + 5.0) ** (k + 1) for k in range(5)], rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(coords, coords)
def test_composition_chain_rule(x, y):
    # sin(x y) via its univariate series at x y
    inner = jet_mul(jet_variable([x, y], 0, 2), jet_variable([x, y], 1, 2))
    u = inner.value
    outer = [math.sin(u), math.cos(u), -math.sin(u) / 2]
    g = jet_compose_univariate(outer, inner)
    assert g.derivative((1, 0)) == pytest.approx(y * math.cos(u), abs=1e-12)
    assert g.derivative((1, 1)) == pytest.approx(math.cos(u) - x * y * math.sin(u), abs=1e-12)
    assert g.derivative((2, 0)) == pytest.approx(-y * y * math.sin(u), abs=1e-12)


def test_linear_operations():
    a = jet_variable([1.0], 0, 2)
    b = jet_scale(a, 3.0)
    c = jet_add(a, b)
    assert c.as_dict() == {(0,): 4.0, (1,): 4.0, (2,): 0.0}
    assert np.allclose(series_mul(a.coeffs, a.coeffs, 1, 2), [1.0, 2.0, 1.0])
