import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supconv.activations import get_activation
from supconv.constructions import (BuildRequest, ConstructionError, build_monomial, build_primitive,
                                   build_relu_power, build_relu_unit, build_sawtooth, build_staircase, cell_gate,
                                   convert_relu_network, fit_points, fit_points_budget, monomial_budget,
                                   nonlinearity_witness, product_network, relu_from_relu_power, resolver,
                                   square_network, staircase_budget)
from supconv.localpoly import polynomial_target, relu_power_target
from supconv.metrics import make_grid, sobolev_error
from supconv.network import evaluate_jets

GELU = get_activation("gelu")
TANH = get_activation("tanh")


def test_build_request_validation():
    with pytest.raises(ValueError):
        BuildRequest(GELU, M=-1.0, target_eps=1e-3)
    with pytest.raises(ValueError):
        BuildRequest(GELU, target_eps=1e-3, K=10.0)
    with pytest.raises(ValueError):
        BuildRequest(GELU, K=10.0, mode="sloppy")
    with pytest.raises(ConstructionError):
        nonlinearity_witness(get_activation("relu"))


@pytest.mark.parametrize("act", [GELU, TANH], ids=lambda a: a.key)
def test_square_error_decays_like_inverse_scale(act):
    grid = make_grid([(-1.0, 1.0)], n_uniform=513, n_random=0)
    target = polynomial_target({(2,): 1.0})
    e1 = sobolev_error(target, square_network(act, 100.0), 2, grid).combined
    e2 = sobolev_error(target, square_network(act, 1000.0), 2, grid).combined
    # the leading error term is c/K, or c/K^2 for a symmetric odd-free template
    assert e2 < e1 / 9


@pytest.mark.parametrize("kind,alpha", [("square", (2,)), ("product", (1, 1)), ("identity", (1,))])
def test_primitive_meets_requested_accuracy(kind, alpha):
    net = build_primitive(kind, BuildRequest(GELU, 1.0, 1e-3, 2))
    err = sobolev_error(polynomial_target({alpha: 1.0}), net, 2, box=[(-1.0, 1.0)] * len(alpha))
    assert err.combined <= 1e-3
    assert net.provenance["measured_error"] == pytest.approx(err.combined)


def test_product_range_scaling():
    net = product_network(GELU, 2000.0, 3.0)
    x = np.array([[2.5, -1.5], [-3.0, 3.0], [0.1, 0.2]])
    np.testing.assert_allclose(net(x).ravel(), x[:, 0] * x[:, 1], atol=1e-2)


@pytest.mark.parametrize("alpha", [(3,), (1, 2), (2, 2), (1, 1, 1)])
def test_monomial_budget_and_accuracy(alpha):
    net = build_monomial(GELU, alpha, 1.0, 2, 1e-3)
    w, d = monomial_budget(alpha)
    assert net.width <= w and net.depth <= d
    assert net.provenance["measured_error"] <= 1e-3


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0))
def test_sawtooth_is_distance_to_lattice(x):
    J = 16
    net = build_sawtooth(3, 1, J)
    want = abs(x - round(x * J / 2) * 2 / J)
    assert float(net(x)[0]) == pytest.approx(want, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 15), st.floats(0.0, 1.0))
def test_staircase_plateaus(k, frac):
    J, delta = 16, 1.0 / 48
    net = build_staircase(J, delta, 2, 2)
    x = k / J + frac * (1.0 / J - delta)
    assert float(net(x)[0]) == pytest.approx(k, abs=1e-9)
    w, d = staircase_budget(2, 2)
    assert net.width <= w and net.depth <= d


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_fit_points_bound(N, L, s, seed):
    P = N * N * L * L
    xi = np.random.default_rng(seed).random(P)
    net = fit_points(xi, N, L, s)
    err = np.max(np.abs(net(np.arange(P, dtype=float)) - xi))
    assert err <= 2.0 * (N * L) ** (-2 * s)
    g = net(np.linspace(-2, P + 2, 801))
    assert g.min() >= 0 and g.max() <= 2
    w, d = fit_points_budget(N, L, s)
    assert net.width <= w and net.depth <= d


def test_fit_points_rejects_out_of_range_values():
    with pytest.raises(ValueError):
        fit_points([0.5, 1.5, 0.0, 0.1], 1, 2, 1)
    with pytest.raises(ValueError):
        fit_points([0.5], 1, 2, 1)


def test_conversion_of_exact_relu_block():
    relu_net = build_sawtooth(2, 1, 8)
    net = convert_relu_network(relu_net, GELU, 2.0 ** 30, M=1.0)
    x = np.linspace(0, 1, 1001)
    np.testing.assert_allclose(net(x), relu_net(x), atol=1e-7)


def test_resolver_is_an_exact_identity_for_gelu():
    net = resolver(GELU, 2)
    x = np.random.default_rng(0).uniform(-3, 3, (200, 2))
    np.testing.assert_allclose(net(x), x, atol=1e-12)
    jets = evaluate_jets(net, x[:10], 1)
    np.testing.assert_allclose(jets[:, :, 1:], np.broadcast_to(np.eye(2), (10, 2, 2)), atol=1e-9)


def test_cell_gate_passes_cells_and_zeroes_gaps():
    gate = cell_gate(1, value_bound=2.0, spill_bound=50.0)
    v = np.linspace(-50, 50, 21)
    on = np.stack([v, np.zeros_like(v)], axis=1)
    off = np.stack([v, -0.25 * np.ones_like(v)], axis=1)
    np.testing.assert_allclose(gate(on).ravel(), v)
    np.testing.assert_array_equal(gate(off).ravel(), 0.0)
    conv = convert_relu_network(gate, GELU, 2.0 ** 30, M=55.0)
    deep = np.stack([v, -0.3 * np.ones_like(v)], axis=1)
    jets = evaluate_jets(conv, deep, 1)
    assert np.max(np.abs(jets)) == 0.0


def test_finite_difference_relu():
    x = np.linspace(0, 1, 2001)
    for t in (1e-2, 1e-3):
        net = relu_from_relu_power(1, t)
        assert np.max(np.abs(net(x) - np.maximum(x, 0))) == pytest.approx(t / 2, abs=1e-12)
    with pytest.raises(ValueError):
        relu_from_relu_power(1, 0.0)


def test_relu_unit_and_power_converge():
    grid = make_grid([(-1.0, 1.0)], n_uniform=1025, n_random=0)
    errs = [sobolev_error(relu_power_target(2), build_relu_power(GELU, 1, K), 1, grid).combined
            for K in (1e2, 1e3, 1e4)]
    assert errs[0] > errs[1] > errs[2]
    unit = build_relu_unit(get_activation("softsign"), 1e4)
    x = np.linspace(-1, 1, 101)
    assert np.max(np.abs(unit(x) - np.maximum(x, 0))) < 1e-3
    assert math.isclose(unit.provenance["K"], 1e4)
