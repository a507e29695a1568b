import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supconv.jets import multi_indices
from supconv.localpoly import (CellError, averaged_taylor, c2_constant, cell_center, cell_count, cell_interval,
                               eval_piecewise_jet, exp_target, local_piecewise, locate_cells, piecewise_target,
                               polynomial_target, sin_pi_target, target_by_name)
from supconv.metrics import fit_order, make_grid, sobolev_error, sobolev_norm


def test_target_jets():
    f = sin_pi_target(1)
    x = np.array([[0.3]])
    jets = f.jets(x, 2)[0]
    assert jets[0] == pytest.approx(math.sin(0.3 * math.pi))
    assert jets[1] == pytest.approx(math.pi * math.cos(0.3 * math.pi))
    assert jets[2] == pytest.approx(-math.pi ** 2 * math.sin(0.3 * math.pi) / 2)
    g = exp_target(2).jets(np.array([[0.1, 0.2]]), 1)[0]
    np.testing.assert_allclose(g, [math.exp(0.3)] * 3)
    with pytest.raises(KeyError):
        target_by_name("nope")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_averaged_taylor_reproduces_polynomials(d, n, seed):
    rng = np.random.default_rng(seed)
    coeffs = {a: float(rng.uniform(-2, 2)) for a in multi_indices(d, n - 1)}
    f = polynomial_target(coeffs, d)
    avg = averaged_taylor(f, rng.uniform(0.2, 0.8, d), 0.05, n)
    want = np.array([coeffs[a] for a in multi_indices(d, n - 1)])
    np.testing.assert_allclose(avg.coefficients, want, atol=1e-8)
    pts = rng.random((20, d))
    np.testing.assert_allclose(avg(pts), f.jets(pts, 0)[:, 0], atol=1e-8)


@pytest.mark.parametrize("name", ["sin_pi", "exp", "x2y"])
def test_coefficient_bound(name):
    f = target_by_name(name)
    n, J = 3, 4
    grid = make_grid([(0.0, 1.0)] * f.dim, n_uniform=65 if f.dim == 1 else 17, n_random=0)
    bound = c2_constant(n, f.dim) * sobolev_norm(f, n - 1, grid)
    for pattern in [(1,) * f.dim, (2,) * f.dim]:
        poly = local_piecewise(f, J, pattern, n)
        assert np.max(np.abs(poly.table)) <= bound


def test_cell_layout():
    assert cell_count(4, 1) == 4 and cell_count(4, 2) == 5
    assert cell_interval(0, 4, 2) == (0.0, 0.0625)
    assert cell_center(1, 4, 1) == pytest.approx(0.25 + 3 / 32)
    idx = locate_cells(np.array([0.0, 0.1, 0.2, 0.9, 0.99]), 4, 1)
    assert list(idx) == [0, 0, -1, 3, -1]


def test_piecewise_jets_and_cell_errors():
    f = sin_pi_target(1)
    poly = local_piecewise(f, 8, (1,), 3, 1)
    jet = eval_piecewise_jet(poly, 0.05, 1)
    assert jet.value == pytest.approx(math.sin(0.05 * math.pi), abs=2e-3)
    with pytest.raises(CellError):
        eval_piecewise_jet(poly, 0.1, 1)
    with pytest.raises(ValueError):
        local_piecewise(f, 8, (3,), 3)


@pytest.mark.parametrize("s,want", [(0, 2.7), (1, 1.7)])
def test_local_orders(s, want):
    f = sin_pi_target(1)
    Js, errs = [4, 8, 16, 32, 64], []
    grid = make_grid([(0.0, 1.0)], n_random=0)
    for J in Js:
        worst = 0.0
        for pattern in [(1,), (2,)]:
            poly = local_piecewise(f, J, pattern, 3, s)
            keep = locate_cells(grid.points[:, 0], J, pattern[0]) >= 0
            worst = max(worst, sobolev_error(f, piecewise_target(poly), s, grid.restrict(keep, "cells")).combined)
        errs.append(worst)
    slope, _ = fit_order(Js, errs)
    assert -slope >= want
