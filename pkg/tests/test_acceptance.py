"""Acceptance suite: one test and one PASS/FAIL line per criterion."""
import itertools
import math
import time

import numpy as np
from scipy.stats import qmc

from acceptance_log import record
from network_factory import random_constructed
from supconv.activations import catalog, get_activation, table_group
from supconv.assembler import AssemblyPlan, build_full_approx, full_budget, global_error
from supconv.constructions import (PRIMITIVE_BUDGETS, BuildRequest, build_monomial, build_primitive,
                                   build_relu_power, build_relu_unit, fit_points, fit_points_budget,
                                   monomial_budget, relu_from_relu_power)
from supconv.jets import multi_indices
from supconv.localpoly import (averaged_taylor, c2_constant, local_piecewise, locate_cells, piecewise_target,
                               polynomial_target, relu_power_target, sin_pi_target, target_by_name)
from supconv.metrics import fit_order, kink_free, make_grid, sobolev_error, sobolev_norm
from supconv.network import deserialize, networks_equal, serialize
from supconv.partition import partition_sum, patterns, solve_sm, support_violations


def test_criterion_01_sm_suite():
    t0 = time.perf_counter()
    ok = True
    x = np.linspace(0, 1, 1000)
    for m in range(1, 6):
        S = solve_sm(m)
        ok &= S.exact(0) == 0 and S.exact(1) == 1
        ok &= all(S.exact(0, p) == 0 and S.exact(1, p) == 0 for p in range(1, m + 1))
        ok &= bool(np.max(np.abs(S(x) + S(1 - x) - 1)) <= 1e-10)
    ok &= solve_sm(1).coefficients == (0, 0, 3, -2)
    ok &= solve_sm(2).coefficients == (0, 0, 0, 10, -15, 6)
    dt = time.perf_counter() - t0
    ok = bool(ok) and dt < 1.0
    record(1, ok, f"S_m boundary/symmetry/oracles for m=1..5 in {dt:.2f}s")
    assert ok


def test_criterion_02_partition_of_unity():
    t0 = time.perf_counter()
    worst, violations = 0.0, 0
    for d, J, m in itertools.product((1, 2), (2, 4, 8), (1, 2)):
        pts = qmc.Halton(d, scramble=True, seed=0).random(10_000)
        worst = max(worst, float(np.max(np.abs(partition_sum(pts, J, m) - 1))))
        violations += sum(support_violations(vm, pts, J, m) for vm in patterns(d))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and violations == 0 and dt < 10
    record(2, ok, f"max |sum - 1| = {worst:.1e}, {violations} support violations, {dt:.1f}s")
    assert ok


def _monomials_up_to_four():
    out = []
    for d in (1, 2):
        for a in multi_indices(d, 4):
            if sum(a) >= 2 and a not in ((2,), (1, 1)):
                out.append(a)
    return out


def test_criterion_03_primitives():
    t0 = time.perf_counter()
    worst, budget_ok, failures = 0.0, True, []
    for name in ("gelu", "tanh", "softplus", "silu"):
        act = get_activation(name)
        for kind, alpha in (("square", (2,)), ("product", (1, 1)), ("identity", (1,))):
            net = build_primitive(kind, BuildRequest(act, 1.0, 1e-3, 2))
            w, d = PRIMITIVE_BUDGETS[kind]
            budget_ok &= net.width <= w and net.depth <= d
            grid = make_grid([(-1.0, 1.0)] * len(alpha), seed=1)
            err = sobolev_error(polynomial_target({alpha: 1.0}), net, 2, grid).combined
            worst = max(worst, err)
            if err > 1e-3:
                failures.append((name, kind, err))
        for alpha in _monomials_up_to_four():
            net = build_monomial(act, alpha, 1.0, 2, 1e-3)
            w, d = monomial_budget(alpha)
            budget_ok &= net.width <= w and net.depth <= d
            grid = make_grid([(-1.0, 1.0)] * len(alpha), seed=1)
            err = sobolev_error(polynomial_target({alpha: 1.0}, len(alpha)), net, 2, grid).combined
            worst = max(worst, err)
            if err > 1e-3:
                failures.append((name, alpha, err))
    dt = time.perf_counter() - t0
    ok = not failures and bool(budget_ok) and dt < 60
    record(3, ok, f"worst replayed W2 error {worst:.2e} (eps 1e-3), budgets {'ok' if budget_ok else 'broken'}, "
                  f"{dt:.1f}s {failures or ''}")
    assert ok


def test_criterion_04_relu_unit_slopes():
    t0 = time.perf_counter()
    Ks = [1e2, 1e3, 1e4, 1e5, 1e6]
    grid = make_grid([(-1.0, 1.0)])
    dense = np.linspace(-1.0, 1.0, 2_000_001).reshape(-1, 1)
    away = grid.restrict(kink_free(grid.points, [0.0], 0.1), "|x| >= 0.1")
    target = relu_power_target(1)
    parts, ok = [], True
    for name in ("gelu", "softsign"):
        act = get_activation(name)
        # dense grid resolves the 1/K layer at the kink that a coarse grid steps over
        sup = [float(np.max(np.abs(build_relu_unit(act, K)(dense).ravel() - np.maximum(dense.ravel(), 0))))
               for K in Ks]
        w1 = [sobolev_error(target, build_relu_unit(act, K), 1, away).combined for K in Ks]
        s_sup = fit_order(Ks, sup)[0] if min(sup) > 0 else -math.inf
        s_w1 = fit_order(Ks, w1)[0] if min(w1) > 0 else -math.inf
        good = -0.7 <= s_sup <= -0.3 and s_w1 <= -0.8
        ok &= good
        parts.append(f"{name}: sup slope {s_sup:.2f}, W1 slope {s_w1:.2f} ({'ok' if good else 'out of range'})")
    dt = time.perf_counter() - t0
    ok = bool(ok) and dt < 60
    record(4, ok, "; ".join(parts) + f"; {dt:.1f}s")
    assert ok


def test_criterion_05_relu_power_surrogate():
    t0 = time.perf_counter()
    act = get_activation("gelu")
    grid = make_grid([(-1.0, 1.0)])
    Ks = [1e2, 1e3, 1e4, 1e5]
    errs = [sobolev_error(relu_power_target(2), build_relu_power(act, 1, K), 1, grid).combined for K in Ks]
    monotone = all(a > b for a, b in zip(errs, errs[1:]))
    dt = time.perf_counter() - t0
    ok = monotone and min(errs) <= 1e-2 and dt < 60
    record(5, ok, f"W1 errors {', '.join(f'{e:.1e}' for e in errs)} for K=1e2..1e5, "
                  f"{'monotone' if monotone else 'not monotone'}, {dt:.1f}s")
    assert ok


def test_criterion_06_finite_difference_relu():
    t0 = time.perf_counter()
    x = np.linspace(0, 1, 100_001)
    gaps = []
    for t in (1e-2, 1e-3):
        err = float(np.max(np.abs(relu_from_relu_power(1, t)(x) - x)))
        gaps.append(abs(err - t / 2))
    xs = np.linspace(0.05, 1, 20_001)
    e2 = [float(np.max(np.abs(relu_from_relu_power(2, t)(xs) - xs))) for t in (1e-2, 1e-3)]
    ratio = e2[0] / e2[1]
    dt = time.perf_counter() - t0
    ok = max(gaps) <= 1e-12 and 5.0 <= ratio <= 20.0 and dt < 5
    record(6, ok, f"m=1 |err - t/2| <= {max(gaps):.1e}; m=2 error ratio for t 1e-2 -> 1e-3 is {ratio:.2f}; {dt:.2f}s")
    assert ok


def test_criterion_07_fit_points():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, range_ok, budget_ok = 0.0, True, True
    for N, L, s in itertools.product((1, 2, 3), repeat=3):
        P = N * N * L * L
        grid = np.linspace(-2, P + 2, 2001)
        wcap, dcap = fit_points_budget(N, L, s)
        for _ in range(100):
            xi = rng.random(P)
            net = fit_points(xi, N, L, s)
            err = float(np.max(np.abs(net(np.arange(P, dtype=float)) - xi)))
            worst = max(worst, err / (2.0 * (N * L) ** (-2 * s)))
            g = net(grid)
            range_ok &= bool(g.min() >= 0 and g.max() <= 2)
            budget_ok &= net.width <= wcap and net.depth <= dcap
    dt = time.perf_counter() - t0
    ok = worst <= 1 and range_ok and budget_ok and dt < 120
    record(7, ok, f"worst error / bound = {worst:.3f}, range {'ok' if range_ok else 'broken'}, budgets "
                  f"{'ok' if budget_ok else 'broken'}, {dt:.1f}s")
    assert ok


def test_criterion_08_averaged_taylor():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    repro = 0.0
    for d, n in itertools.product((1, 2), (1, 2, 3, 4)):
        for _ in range(5):
            coeffs = {a: float(rng.uniform(-2, 2)) for a in multi_indices(d, n - 1)}
            avg = averaged_taylor(polynomial_target(coeffs, d), rng.uniform(0.2, 0.8, d), 0.05, n)
            want = np.array([coeffs[a] for a in multi_indices(d, n - 1)])
            repro = max(repro, float(np.max(np.abs(avg.coefficients - want))))
    bound_ok = True
    for name in ("sin_pi", "exp", "x2y"):
        f = target_by_name(name)
        grid = make_grid([(0.0, 1.0)] * f.dim, n_uniform=65 if f.dim == 1 else 17, n_random=0)
        for n in (2, 3, 4):
            C = c2_constant(n, f.dim) * sobolev_norm(f, n - 1, grid)
            for vm in patterns(f.dim):
                bound_ok &= bool(np.max(np.abs(local_piecewise(f, 4, vm, n).table)) <= C)
    dt = time.perf_counter() - t0
    ok = repro <= 1e-8 and bound_ok and dt < 60
    record(8, ok, f"reproduction error {repro:.1e}, coefficient bound {'holds' if bound_ok else 'broken'}, {dt:.1f}s")
    assert ok


def test_criterion_09_local_orders():
    t0 = time.perf_counter()
    f = sin_pi_target(1)
    Js = [4, 8, 16, 32, 64]
    grid = make_grid([(0.0, 1.0)])
    orders = {}
    for s in (0, 1):
        errs = []
        for J in Js:
            worst = 0.0
            for vm in patterns(1):
                poly = local_piecewise(f, J, vm, 3, s)
                keep = locate_cells(grid.points[:, 0], J, vm[0]) >= 0
                rep = sobolev_error(f, piecewise_target(poly), s, grid.restrict(keep, "cells"))
                worst = max(worst, rep.combined)
            errs.append(worst)
        orders[s] = -fit_order(Js, errs)[0]
    dt = time.perf_counter() - t0
    ok = orders[0] >= 2.7 and orders[1] >= 1.7 and dt < 60
    record(9, ok, f"fitted orders {orders[0]:.2f} (s=0) and {orders[1]:.2f} (s=1), {dt:.1f}s")
    assert ok


def test_criterion_10_end_to_end():
    t0 = time.perf_counter()
    act = get_activation("gelu")
    Js, w1, w0, budgets_ok = [], [], [], True
    for N, L in ((1, 2), (2, 2), (2, 4), (3, 6)):
        plan = AssemblyPlan(act, sin_pi_target(1), 3, 1, N, L)
        assembly = build_full_approx(plan)
        wcap, dcap = full_budget(plan.n, plan.d, N, L)
        net = assembly.network
        budgets_ok &= all(e.ok for e in plan.ledger)
        budgets_ok &= net.width <= math.floor(wcap) and net.depth <= math.floor(dcap)
        Js.append(plan.J)
        w1.append(global_error(assembly, 1))
        w0.append(global_error(assembly, 0))
    o1, o0 = -fit_order(Js, w1)[0], -fit_order(Js, w0)[0]
    monotone = all(a > b for a, b in zip(w1, w1[1:]))
    dt = time.perf_counter() - t0
    ok = monotone and o1 >= 1.5 and o0 >= 2.5 and bool(budgets_ok) and dt < 300
    record(10, ok, f"J={Js}: W1 {', '.join(f'{e:.1e}' for e in w1)} (order {o1:.2f}, "
                   f"{'monotone' if monotone else 'not monotone'}); W0 order {o0:.2f}; budgets "
                   f"{'ok' if budgets_ok else 'broken'}; {dt:.0f}s")
    assert ok


# classification read off the summary table: activation key -> derivative range
TABLE_ONE = {
    "m<=max(1,n-1)": ["relu", "leakyrelu", "hardtanh", "hardsigmoid", "elu(alpha=0.5)", "selu(alpha=1.67326)"],
    "m<=max(2,n-1)": ["softsign", "celu", "elu(alpha=1)", "selu(alpha=1)"],
    "0<=m<n": ["sigmoid", "tanh", "arctan", "dsilu", "srs", "softplus", "silu", "mish", "gelu"],
}


def test_criterion_11_audit_matrix():
    t0 = time.perf_counter()
    expected = {key: group for group, keys in TABLE_ONE.items() for key in keys}
    acts = {a.key: a for a in catalog()}
    mismatches = [k for k, g in expected.items() if table_group(acts[k]) != g]
    dt = time.perf_counter() - t0
    ok = not mismatches and dt < 30
    record(11, ok, f"{len(expected) - len(mismatches)}/{len(expected)} classifications reproduced, {dt:.1f}s"
                   + (f", mismatches {mismatches}" if mismatches else ""))
    assert ok


def test_criterion_12_serialization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(12)
    exact = 0
    for _ in range(100):
        net = random_constructed(rng)
        again = deserialize(serialize(net))
        exact += networks_equal(net, again) and serialize(again) == serialize(net)
    dt = time.perf_counter() - t0
    ok = exact == 100 and dt < 5
    record(12, ok, f"{exact}/100 bit-exact round trips, {dt:.2f}s")
    assert ok
