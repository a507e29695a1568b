"""End-to-end assembly of the local approximants and the global approximant.

On every cell of a region ``Omega_vm`` the target is replaced by its averaged
Taylor polynomial ``sum_alpha g_alpha(cell) x^alpha``.  The network reads the
cell index with staircases, looks the coefficients up with bit-extraction
point fitting, and multiplies them onto monomial blocks.  The global
approximant weights the ``2^d`` local approximants by the partition networks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .activations import Activation, check_condition2
from .constructions import (ConstructionError, best_product_scale, build_staircase, cell_gate, convert_relu_network,
                            fit_points, fit_points_bits, monomial_network, padder, product_network, relu_mode, resolver,
                            require_decay, surrogate_leak)
from .jets import multi_indices
from .localpoly import (PiecewisePoly, TargetFunction, c2_constant, cell_count, local_piecewise,
                        piecewise_target)
from .metrics import make_grid, sobolev_error, sobolev_norm
from .network import (Network, affine_network, affine_post, affine_pre, compose, evaluate, linear_combination,
                      parallel)
from .partition import build_pou_network, in_omega, offset_network, partition_J, patterns

DESK_WIDTH_LIMIT = 1e5
LOOKUP_SCALE = 2.0 ** 10
POU_SCALE = 2.0 ** 30


def local_budget(n: int, d: int, N: int, L: int) -> tuple[float, float]:
    width = 192 * n ** (d + 1) * (N + 1) * math.log2(8 * N)
    depth = 10 * (L + 2) * math.log2(4 * L) + 8 * L + n + 11
    return width, depth


def full_budget(n: int, d: int, N: int, L: int) -> tuple[float, float]:
    width = 2 ** d * 192 * n ** (d + 1) * (N + 1) * math.log2(8 * N)
    depth = 10 * (L + 2) * math.log2(4 * L) + 8 * L + n + d + 12
    return width, depth


@dataclass
class BudgetEntry:
    name: str
    width: int
    depth: int
    width_cap: float | None = None
    depth_cap: float | None = None

    @property
    def ok(self) -> bool:
        return ((self.width_cap is None or self.width <= self.width_cap)
                and (self.depth_cap is None or self.depth <= self.depth_cap))


@dataclass
class AssemblyPlan:
    activation: Activation
    target: TargetFunction
    n: int
    m: int
    N: int
    L: int
    carry: str = "exact_skip"
    bits_order: int | None = None
    coefficient_product_scale: float | None = None
    eps_schedule: dict = field(default_factory=dict)
    ledger: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.N < 1 or self.L < 1:
            raise ValueError("N and L must be positive")
        if math.log2(self.N) > self.L:
            raise ValueError("requires log2 N <= L")
        if self.N * self.L < 2:
            raise ValueError("requires N L >= 2")
        if not 0 <= self.m < self.n:
            raise ValueError("requires 0 <= m < n")
        d = self.d
        if 2 ** d * self.n ** (d + 1) * self.N * math.log2(8 * self.N) > DESK_WIDTH_LIMIT:
            raise ValueError("plan exceeds the desk-scale width guard")

    @property
    def d(self) -> int:
        return self.target.dim

    @property
    def J(self) -> int:
        return partition_J(self.N, self.L, self.d)

    @property
    def s(self) -> int:
        """Bit-order of the coefficient lookup: quantization stays below ``0.1 J^{-n}`` in total."""
        if self.bits_order:
            return self.bits_order
        C = coefficient_scale(self)
        ncoef = len(multi_indices(self.d, self.n - 1))
        eps = 0.1 * float(self.J) ** (-self.n) / ncoef
        s = math.ceil(math.log(4 * C / eps) / (2 * math.log(self.N * self.L)))
        self.eps_schedule["lookup"] = 4 * C * float(self.N * self.L) ** (-2 * max(s, self.n)) * ncoef
        return max(s, self.n)

    def record(self, name: str, net: Network, width_cap=None, depth_cap=None) -> BudgetEntry:
        entry = BudgetEntry(name, net.width, net.depth, width_cap, depth_cap)
        self.ledger.append(entry)
        return entry

    def summary(self) -> dict:
        return {"activation": self.activation.key, "target": self.target.name, "n": self.n, "m": self.m,
                "d": self.d, "N": self.N, "L": self.L, "J": self.J, "s": self.s, "carry": self.carry,
                "eps_schedule": dict(self.eps_schedule),
                "ledger": [dict(asdict(e), ok=e.ok) for e in self.ledger]}


LEAK_TOLERANCE = 1e-13


def _audit(plan: AssemblyPlan) -> None:
    act = plan.activation
    if not check_condition2(act).passed:
        raise ConstructionError(f"{act.key} fails the nonlinearity audit")
    require_decay(act, max(plan.m, 1))
    leak = surrogate_leak(act, POU_SCALE)
    if leak > LEAK_TOLERANCE:
        raise ConstructionError(f"{act.key}: the ReLU surrogate leaks {leak:.1e} per neuron, above the "
                                f"{LEAK_TOLERANCE:g} the converted exact blocks tolerate in float64")


def coefficient_scale(plan: AssemblyPlan) -> float:
    """``C_2(n, d) ||f||_{W^{n-1,inf}}``, the bound used to encode coefficients into ``[0, 1]``."""
    grid = make_grid([(0.0, 1.0)] * plan.d, n_uniform=65 if plan.d == 1 else 17)
    norm = sobolev_norm(plan.target, plan.n - 1, grid)
    return c2_constant(plan.n, plan.d) * norm if norm > 0 else 1.0


def _index_network(plan: AssemblyPlan, vm: Sequence[int]) -> tuple[Network, list[int]]:
    """ReLU map from ``x`` to the flat cell index ``sum_j i_j prod_{k<j} count_k``."""
    J, d = plan.J, plan.d
    counts = [cell_count(J, v) for v in vm]
    parts = []
    for j, v in enumerate(vm):
        row = np.zeros((1, d))
        row[0, j] = 1.0
        if v == 1:
            stair = build_staircase(J, 1.0 / (4 * J), plan.N, plan.L, d)
            parts.append(affine_pre(stair, row))
        else:
            # pattern 2 has J + 1 cells; rescale so they become plateaus of a (J+1)-level staircase
            Jp = J + 1
            stair = build_staircase(Jp, 1.0 / (4 * Jp))
            parts.append(affine_pre(stair, row * (J / Jp), [0.5 / Jp]))
    net = parallel(parts)
    strides = np.cumprod([1] + counts[:-1]).astype(float)
    return affine_post(net, strides.reshape(1, -1)), counts


def build_local_approx(plan: AssemblyPlan, vm: Sequence[int], poly: PiecewisePoly | None = None) -> Network:
    """Network for the piecewise polynomial of pattern ``vm`` (accurate on ``Omega_vm``)."""
    _audit(plan)
    vm = tuple(int(v) for v in vm)
    act, d, n = plan.activation, plan.d, plan.n
    poly = poly or local_piecewise(plan.target, plan.J, vm, n, plan.m)
    C = coefficient_scale(plan)
    table = poly.table
    if np.max(np.abs(table)) > C * (1 + 1e-12):
        raise ConstructionError("coefficient exceeds the encoding bound")
    index, counts = _index_network(plan, vm)
    total = int(np.prod(counts))
    alphas = multi_indices(d, n - 1)
    flat = table.reshape(total, len(alphas), order="F")
    lookups = []
    for k in range(len(alphas)):
        xi = np.clip((flat[:, k] + C) / (2 * C), 0.0, 1.0)
        net = fit_points(xi, plan.N, plan.L, plan.s, count=total)
        lookups.append(affine_post(net, [[2 * C]], [-C]))
    relu_lookup = compose(parallel(lookups), index)
    lookup = convert_relu_network(relu_lookup, act, LOOKUP_SCALE, M=1.0)
    pK = best_product_scale(act)
    monos = []
    for alpha in alphas:
        if sum(alpha) == 0:
            monos.append(None)
        else:
            monos.append(monomial_network(act, alpha, pK, 1.0, plan.carry))
    const_idx = [k for k, a in enumerate(alphas) if sum(a) == 0]
    mono_nets = [mn for mn in monos if mn is not None]
    pad = padder(act, pK, max(C, 1.0), plan.carry)
    stacked = parallel([lookup] + mono_nets, pad=pad) if mono_nets else lookup
    # products g_alpha * x^alpha; the constant term passes straight through.  The block is scaled to
    # the coefficients actually stored, not to the encoding bound: its rounding grows with the scale
    # while its truncation error only matters on the cells, where |g_alpha| <= max |table|.
    R = max(float(np.max(np.abs(table))), 1.0)
    prod = product_network(act, plan.coefficient_product_scale or pK, R)
    nk = len(alphas)
    terms, coeffs = [], []
    mono_pos = {}
    pos = nk
    for k, mn in enumerate(monos):
        if mn is not None:
            mono_pos[k] = pos
            pos += 1
    width_in = stacked.output_dim
    for k in range(nk):
        sel = np.zeros((2, width_in))
        sel[0, k] = 1.0
        if k in mono_pos:
            sel[1, mono_pos[k]] = 1.0
            terms.append(affine_pre(prod, sel))
        else:
            terms.append(pad(affine_network(sel[:1], [0.0], act), 1))
        coeffs.append(1.0)
    head = linear_combination(terms, coeffs, pad=pad)
    net = compose(head, stacked)
    wcap, dcap = local_budget(n, d, plan.N, plan.L)
    prov = {"construction": "local_approx", "vm": list(vm), "J": plan.J, "n": n, "m": plan.m,
            "coefficient_scale": C, "bits": fit_points_bits(plan.N, plan.L, plan.s), "carry": plan.carry,
            "surrogate": relu_mode(act), "index_counts": counts, "const_terms": const_idx}
    net = net.with_meta(prov, net.width, net.depth)
    entry = plan.record(f"local{''.join(map(str, vm))}", net, wcap, dcap)
    if not entry.ok:
        raise ConstructionError(f"local budget violated: {entry}")
    return net


@dataclass
class Assembly:
    plan: AssemblyPlan
    network: Network
    locals: dict
    partitions: dict
    polys: dict

    def recombination_gap(self, points) -> float:
        """Largest ``|sum psi_vm phi_vm - phi|`` with the products taken in floating point."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.plan.d)
        exact = sum(evaluate(self.partitions[vm], pts).reshape(-1) * evaluate(self.locals[vm], pts).reshape(-1)
                    for vm in self.locals)
        return float(np.max(np.abs(exact - evaluate(self.network, pts).reshape(-1))))


def value_bound(plan: AssemblyPlan) -> float:
    """Bound on the local approximants over their cells, with slack for the approximation error."""
    grid = make_grid([(0.0, 1.0)] * plan.d, n_uniform=65 if plan.d == 1 else 17)
    return 1.25 * sobolev_norm(plan.target, 0, grid) + 0.25


def gate_local(plan: AssemblyPlan, vm: Sequence[int], local: Network, pou_scale: float = POU_SCALE) -> Network:
    """Local approximant forced to exactly zero where its cell index is in transition.

    Between cells the index staircases are fractional and the coefficient lookup
    becomes very steep; the partition network is tiny there but not exactly zero,
    so the product would leak.  The gate reuses the partition's cell offsets.
    """
    act, d = plan.activation, plan.d
    C = coefficient_scale(plan)
    spill = 1.1 * max(C * sum(1 for _ in multi_indices(d, plan.n - 1)), 1.0)
    offsets = offset_network(act, vm, plan.N, plan.L, max(plan.m, 1), J=plan.J, K=pou_scale, carry=plan.carry)
    gate = convert_relu_network(cell_gate(d, value_bound(plan), spill), act, pou_scale, M=spill)
    pK = best_product_scale(act)
    return compose(gate, parallel([local, offsets], pad=padder(act, pK, spill, plan.carry)))


def build_full_approx(plan: AssemblyPlan, pou_scale: float = POU_SCALE) -> Assembly:
    """``phi = sum_vm product(gate(phi_vm), psi_vm)`` over all ``2^d`` patterns."""
    _audit(plan)
    act, d = plan.activation, plan.d
    pK = best_product_scale(act)
    locals_, parts, polys = {}, {}, {}
    for vm in patterns(d):
        polys[vm] = local_piecewise(plan.target, plan.J, vm, plan.n, plan.m)
        locals_[vm] = gate_local(plan, vm, build_local_approx(plan, vm, polys[vm]), pou_scale)
        pou = build_pou_network(act, vm, plan.N, plan.L, max(plan.m, 1), J=plan.J, K=pou_scale, carry=plan.carry)
        plan.record(f"pou{''.join(map(str, vm))}", pou)
        # the partition output feeds a product block, so hand it over as a clean value
        parts[vm] = compose(resolver(act), pou)
    bound = value_bound(plan)
    pad = padder(act, pK, bound, plan.carry)
    members = []
    for vm in patterns(d):
        members += [locals_[vm], parts[vm]]
    stacked = parallel(members, pad=pad)
    prod = product_network(act, pK, bound)
    terms = []
    for k in range(len(patterns(d))):
        sel = np.zeros((2, stacked.output_dim))
        sel[0, 2 * k] = 1.0
        sel[1, 2 * k + 1] = 1.0
        terms.append(affine_pre(prod, sel))
    head = linear_combination(terms, [1.0] * len(terms))
    net = compose(head, stacked)
    wcap, dcap = full_budget(plan.n, d, plan.N, plan.L)
    prov = {"construction": "full_approx", "plan": {k: v for k, v in plan.summary().items() if k != "ledger"}}
    net = net.with_meta(prov, net.width, net.depth)
    entry = plan.record("full", net, wcap, dcap)
    if not entry.ok:
        raise ConstructionError(f"global budget violated: {entry}")
    return Assembly(plan, net, locals_, parts, polys)


def local_error(plan: AssemblyPlan, vm: Sequence[int], net: Network, poly: PiecewisePoly) -> tuple[float, float]:
    """W^{m,inf} error on ``Omega_vm`` of the network against the target and against the piecewise polynomial."""
    grid = make_grid([(0.0, 1.0)] * plan.d)
    inside = grid.restrict(in_omega(grid.points, plan.J, vm), "omega")
    return (sobolev_error(plan.target, net, plan.m, inside).combined,
            sobolev_error(piecewise_target(poly), net, plan.m, inside).combined)


def global_error(assembly: Assembly, m: int | None = None) -> float:
    plan = assembly.plan
    grid = make_grid([(0.0, 1.0)] * plan.d)
    return sobolev_error(plan.target, assembly.network, plan.m if m is None else m, grid).combined
