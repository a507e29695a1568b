import math

import numpy as np
import pytest
from scipy.stats import qmc

from supconv.activations import get_activation
from supconv.assembler import (AssemblyPlan, build_full_approx, build_local_approx, full_budget, global_error,
                               local_budget, local_error)
from supconv.constructions import ConstructionError
from supconv.localpoly import local_piecewise, sin_pi_target
from supconv.metrics import make_grid, sobolev_norm

GELU = get_activation("gelu")


@pytest.fixture(scope="module")
def small_assembly():
    return build_full_approx(AssemblyPlan(GELU, sin_pi_target(1), 3, 1, 1, 2))


def test_plan_guards():
    f = sin_pi_target(1)
    with pytest.raises(ValueError):
        AssemblyPlan(GELU, f, 3, 1, 1, 1)  # N L >= 2
    with pytest.raises(ValueError):
        AssemblyPlan(GELU, f, 3, 1, 8, 2)  # log2 N <= L
    with pytest.raises(ValueError):
        AssemblyPlan(GELU, f, 3, 3, 1, 2)  # m < n
    with pytest.raises(ValueError):
        AssemblyPlan(GELU, sin_pi_target(4), 6, 1, 64, 8)  # desk-scale width guard


@pytest.mark.parametrize("name", ["tanh", "softplus", "relu", "relu2"])
def test_unsupported_activations_are_refused(name):
    plan = AssemblyPlan(get_activation(name), sin_pi_target(1), 3, 1, 1, 2)
    with pytest.raises(ConstructionError):
        build_full_approx(plan)


def test_budgets_hold_as_integer_inequalities(small_assembly):
    plan = small_assembly.plan
    assert plan.ledger and all(e.ok for e in plan.ledger)
    w, d = full_budget(plan.n, plan.d, plan.N, plan.L)
    net = small_assembly.network
    assert net.width <= math.floor(w) and net.depth <= math.floor(d)
    lw, ld = local_budget(plan.n, plan.d, plan.N, plan.L)
    for entry in plan.ledger:
        if entry.name.startswith("local"):
            assert entry.width <= math.floor(lw) and entry.depth <= math.floor(ld)


def test_global_values_stay_near_target(small_assembly):
    pts = qmc.Halton(1, scramble=True, seed=0).random(10_000)
    vals = small_assembly.network(pts).ravel()
    f = small_assembly.plan.target.jets(pts, 0)[:, 0]
    bound = sobolev_norm(small_assembly.plan.target, 0, make_grid([(0.0, 1.0)], n_random=0)) + 1.0
    assert np.all(np.isfinite(vals))
    assert np.max(np.abs(vals - f)) <= bound


def test_recombination_identity(small_assembly):
    pts = np.linspace(0, 1, 2001).reshape(-1, 1)
    assert small_assembly.recombination_gap(pts) < 1e-6


def test_global_error_is_small(small_assembly):
    assert global_error(small_assembly, 0) < 1e-3
    assert global_error(small_assembly, 1) < 5e-2


def test_local_network_tracks_piecewise_polynomial():
    plan = AssemblyPlan(GELU, sin_pi_target(1), 3, 1, 2, 2)
    poly = local_piecewise(plan.target, plan.J, (2,), 3, 1)
    net = build_local_approx(plan, (2,), poly)
    to_target, to_poly = local_error(plan, (2,), net, poly)
    assert to_poly < 1e-6
    assert to_target < 5e-2
    summary = plan.summary()
    assert summary["J"] == 16 and summary["ledger"][0]["ok"]
