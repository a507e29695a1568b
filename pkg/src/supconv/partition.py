"""Smoothstep polynomials, the bump partition of unity and its network realization.

The univariate bump ``s`` rises by ``S_m`` on ``[0, 1]``, equals 1 on
``[1, 2]`` and falls by ``S_m(3 - t)`` on ``[2, 3]``.  Pattern 1 places one
bump on each cell ``[i/J, i/J + 3/(4J)]`` (``s_1(x) = sum_i s(4J x - 4i)``);
pattern 2 is the same family shifted left by ``1/(2J)``.  Their sum is 1.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .activations import Activation
from .constructions import (ConstructionError, best_product_scale, build_relu_power, build_sawtooth,
                            convert_relu_network, padder, product_ladder, relu_mode, resolver)
from .jets import multi_indices
from .localpoly import TargetFunction, locate_cells
from .metrics import make_grid, sobolev_error
from .network import Network, affine_post, affine_pre, compose, linear_combination, parallel

MAX_M = 8
DEFAULT_RELU_SCALE = 2.0 ** 30


# ---------------------------------------------------------------------------
# S_m polynomials
# ---------------------------------------------------------------------------

def _poly_derivative(coeffs: Sequence, p: int) -> list:
    out = list(coeffs)
    for _ in range(p):
        out = [k * c for k, c in enumerate(out)][1:] or [0 * coeffs[0]]
    return out


def _poly_value(coeffs: Sequence, x):
    acc = 0 * x
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def _solve_exact(A: list[list[Fraction]], b: list[Fraction]) -> list[Fraction]:
    n = len(b)
    M = [row[:] + [rhs] for row, rhs in zip(A, b)]
    for col in range(n):
        piv = next((r for r in range(col, n) if M[r][col] != 0), None)
        if piv is None:
            raise ArithmeticError("singular smoothstep system")
        M[col], M[piv] = M[piv], M[col]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col] / M[col][col]
                M[r] = [a - f * c for a, c in zip(M[r], M[col])]
    return [M[i][n] / M[i][i] for i in range(n)]


@dataclass(frozen=True)
class SmPolynomial:
    """``S_m`` on ``[0, 1]`` with exact rational coefficients (ascending powers)."""

    m: int
    coefficients: tuple[Fraction, ...]

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def float_coefficients(self) -> np.ndarray:
        return np.array([float(c) for c in self.coefficients])

    def exact(self, x, p: int = 0) -> Fraction:
        return _poly_value(_poly_derivative(self.coefficients, p), Fraction(x))

    def __call__(self, x, p: int = 0) -> np.ndarray:
        c = [float(v) for v in _poly_derivative(self.coefficients, p)]
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), c)


@lru_cache(maxsize=None)
def solve_sm(m: int) -> SmPolynomial:
    """Odd ``P_m`` with ``P(1) = 1`` and ``P^(p)(1) = 0`` for ``p <= m``; ``S_m(x) = (P_m(2x - 1) + 1)/2``."""
    if not 1 <= m <= MAX_M:
        raise ValueError(f"m must lie in 1..{MAX_M}")
    powers = [2 * k + 1 for k in range(m + 1)]
    A, b = [], []
    for p in range(m + 1):
        A.append([Fraction(math.perm(e, p)) for e in powers])
        b.append(Fraction(1 if p == 0 else 0))
    a = _solve_exact(A, b)
    # expand (P(2x - 1) + 1) / 2 in powers of x
    deg = 2 * m + 1
    coeffs = [Fraction(0)] * (deg + 1)
    for ak, e in zip(a, powers):
        for j in range(e + 1):
            coeffs[j] += ak * math.comb(e, j) * Fraction(2) ** j * Fraction(-1) ** (e - j)
    coeffs = [c / 2 for c in coeffs]
    coeffs[0] += Fraction(1, 2)
    return SmPolynomial(m, tuple(coeffs))


# ---------------------------------------------------------------------------
# bump, its ReLU^j spline form and the families s_1, s_2
# ---------------------------------------------------------------------------

def bump_series(t: np.ndarray, m: int, order: int) -> np.ndarray:
    """Normalized series of the bump template in its own variable, shape ``(order+1,) + t.shape``."""
    S = solve_sm(m)
    t = np.asarray(t, dtype=float)
    out = np.zeros((order + 1,) + t.shape)
    rise = (t >= 0) & (t <= 1)
    flat = (t > 1) & (t < 2)
    fall = (t >= 2) & (t <= 3)
    for k in range(order + 1):
        fk = math.factorial(k)
        out[k] = np.where(rise, S(np.clip(t, 0, 1), k) / fk, 0.0)
        out[k] += np.where(fall, (-1) ** k * S(np.clip(3 - t, 0, 1), k) / fk, 0.0)
        if k == 0:
            out[k] += flat
    return out


def spline_coefficients(m: int) -> dict[tuple[int, int], float]:
    """``{(knot, j): c}`` with ``R(z) = sum c ReLU^j(z - knot)`` equal to 0, ``S_m``, 1 on the three pieces."""
    S = solve_sm(m)
    out = {}
    for j in range(m + 1, 2 * m + 2):
        out[(0, j)] = float(S.coefficients[j])
        out[(1, j)] = -float(S.exact(1, j)) / math.factorial(j)
    for j in range(m + 1):
        if S.coefficients[j] != 0:
            raise ArithmeticError("S_m has low-order terms; the spline form needs them to vanish")
    return out


def spline_eval(z: np.ndarray, m: int) -> np.ndarray:
    """The ramp ``R`` through its ReLU^j expansion."""
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    for (knot, j), c in spline_coefficients(m).items():
        out += c * np.maximum(z - knot, 0.0) ** j
    return out


def _pattern_shift(J: int, pattern: int) -> float:
    if pattern not in (1, 2):
        raise ValueError("pattern must be 1 or 2")
    return 0.0 if pattern == 1 else 0.5 / J


def family_series(x: np.ndarray, J: int, m: int, pattern: int, order: int) -> np.ndarray:
    """Series of ``s_pattern`` in ``x``, shape ``(order+1, npoints)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("partition functions are defined on [0, 1]")
    u = J * (x + _pattern_shift(J, pattern))
    t = 4.0 * (u - np.floor(u))
    ser = bump_series(t, m, order)
    scale = (4.0 * J) ** np.arange(order + 1)
    return ser * scale[:, None]


def partition_jets(vm: Sequence[int], points, J: int, m: int, order: int) -> np.ndarray:
    """Normalized jets of ``s_vm`` at points, shape ``(npoints, ncoef)``."""
    vm = tuple(int(v) for v in vm)
    d = len(vm)
    pts = np.asarray(points, dtype=float).reshape(-1, d)
    per = [family_series(pts[:, j], J, m, v, order) for j, v in enumerate(vm)]
    mids = multi_indices(d, order)
    out = np.ones((pts.shape[0], len(mids)))
    for k, alpha in enumerate(mids):
        for j, a in enumerate(alpha):
            out[:, k] *= per[j][a]
    return out


def eval_partition(vm: Sequence[int], x, J: int, m: int) -> float | np.ndarray:
    """Value of ``s_vm`` at one point (scalar) or at rows of points."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim <= 1
    vals = partition_jets(vm, pts.reshape(-1, len(vm)), J, m, 0)[:, 0]
    return float(vals[0]) if single and vals.size == 1 else vals


def partition_target(vm: Sequence[int], J: int, m: int) -> TargetFunction:
    vm = tuple(int(v) for v in vm)
    return TargetFunction(f"s_{''.join(map(str, vm))}(J={J},m={m})", len(vm),
                          lambda pts, order: partition_jets(vm, pts, J, m, order))


def patterns(d: int) -> list[tuple[int, ...]]:
    return list(itertools.product((1, 2), repeat=d))


# ---------------------------------------------------------------------------
# region geometry
# ---------------------------------------------------------------------------

def omega_cells(points, J: int, vm: Sequence[int]) -> np.ndarray:
    """Cell multi-index of each point in ``Omega_vm``; rows with ``-1`` lie outside."""
    pts = np.asarray(points, dtype=float).reshape(-1, len(vm))
    cols = [locate_cells(pts[:, j], J, v) for j, v in enumerate(vm)]
    idx = np.stack(cols, axis=1)
    idx[np.any(idx < 0, axis=1)] = -1
    return idx


def in_omega(points, J: int, vm: Sequence[int]) -> np.ndarray:
    return omega_cells(points, J, vm)[:, 0] >= 0


def support_violations(vm: Sequence[int], points, J: int, m: int, tol: float = 0.0) -> int:
    """Points outside ``Omega_vm`` where ``s_vm`` is nonzero."""
    pts = np.asarray(points, dtype=float).reshape(-1, len(vm))
    vals = partition_jets(vm, pts, J, m, 0)[:, 0]
    return int(np.sum((np.abs(vals) > tol) & ~in_omega(pts, J, vm)))


def partition_sum(points, J: int, m: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    d = pts.shape[1]
    return sum(partition_jets(vm, pts, J, m, 0)[:, 0] for vm in patterns(d))


# ---------------------------------------------------------------------------
# network realization
# ---------------------------------------------------------------------------

def partition_J(N: int, L: int, d: int) -> int:
    return int(math.floor(N ** (1.0 / d) + 1e-12)) ** 2 * int(math.floor(L ** (2.0 / d) + 1e-12))


def pou_budget(N: int, L: int, m: int, d: int) -> tuple[int, int]:
    return d * (2 * N + 120 * m + 200), 3 * L + 2 * m + d - 1


def sawtooth_plan(J: int, max_base: int) -> tuple[int, int]:
    """Fewest folds (and base teeth) whose sawtooth covers ``J + 2`` teeth within the width cap."""
    need = J + 2
    for folds in range(0, 64):
        base = -(-need // 2 ** folds)
        if base <= max_base:
            return folds, base
    raise ConstructionError("no sawtooth plan fits the width cap")


def _distance_network(act: Activation, J: int, pattern: int, max_base: int, K: float, carry: str) -> Network:
    """``x -> dist(x - c_0 + shift, (1/J) Z)`` with ``c_0 = 3/(8J)``, converted to the activation."""
    folds, base = sawtooth_plan(J, max_base)
    extent = 1.0 + 2.0 / J
    saw = build_sawtooth(folds, base, 2 * J, extent)
    offset = _pattern_shift(J, pattern) - 3.0 / (8 * J) + 1.0 / J
    relu_net = affine_pre(saw, [[1.0]], [offset])
    return convert_relu_network(relu_net, act, K, M=1.0, carry=carry)


def _unit_row(d: int, j: int) -> np.ndarray:
    row = np.zeros((1, d))
    row[0, j] = 1.0
    return row


def _offset_parts(act: Activation, vm: Sequence[int], J: int, max_base: int, K: float, carry: str) -> list[Network]:
    """Scalar networks ``x_j -> 1.5 - 4 J dist_j``: the ramp argument, positive exactly on the cells."""
    return [affine_post(_distance_network(act, J, v, max_base, K, carry), [[-4.0 * J]], [1.5]) for v in vm]


def offset_network(act: Activation, vm: Sequence[int], N: int, L: int, m: int = 1, J: int | None = None,
                   K: float = DEFAULT_RELU_SCALE, carry: str = "strict") -> Network:
    """``x -> (z_1, ..., z_d)`` with ``z_j >= 0`` on the cells of pattern ``vm`` and ``z_j <= -1/2`` mid-gap."""
    vm = tuple(int(v) for v in vm)
    d = len(vm)
    J = J or partition_J(N, L, d)
    max_base = (pou_budget(N, L, m, d)[0] // d) // 2
    parts = [affine_pre(z, _unit_row(d, j)) for j, z in enumerate(_offset_parts(act, vm, J, max_base, K, carry))]
    return parallel(parts, pad=padder(act, best_product_scale(act), 2.0, carry))


def ramp_network(act: Activation, m: int, K: float, carry: str = "strict",
                 product_K: float | None = None, resolve: bool = True) -> Network:
    """``R(z)`` on ``[-0.5, 1.5]`` from ReLU^j surrogates at knots 0 and 1."""
    product_K = product_K or best_product_scale(act)
    nets, coeffs = [], []
    for (knot, j), c in spline_coefficients(m).items():
        unit = build_relu_power(act, j - 1, K, M=1.5, carry=carry, product_K=product_K, resolve=resolve)
        nets.append(affine_pre(unit, [[1.0]], [-float(knot)]))
        coeffs.append(c)
    return linear_combination(nets, coeffs, pad=padder(act, product_K, 1.5 ** (2 * m + 1), carry))


def _pou_layers(act: Activation, vm: Sequence[int], J: int, max_base: int, m: int, K: float, carry: str,
                product_K: float, resolve: bool) -> Network:
    d = len(vm)
    ramp = ramp_network(act, m, K, carry, product_K, resolve)
    coords = [affine_pre(compose(ramp, z), _unit_row(d, j))
              for j, z in enumerate(_offset_parts(act, vm, J, max_base, K, carry))]
    net = parallel(coords, pad=padder(act, product_K, 1.1, carry))
    if d > 1:
        if resolve:
            net = compose(resolver(act, d), net)
        net = compose(product_ladder(act, d, list(range(d)), product_K, 1.1, carry, resolve=resolve), net)
    return net


def build_pou_network(act: Activation, vm: Sequence[int], N: int, L: int, m: int,
                      target_eps: float | None = None, J: int | None = None, K: float = DEFAULT_RELU_SCALE,
                      carry: str = "strict", check_budget: bool = True,
                      product_K: float | None = None) -> Network:
    """Network for ``s_vm`` on ``[0, 1]^d``: sawtooth distance, ramp, then a coordinate product."""
    vm = tuple(int(v) for v in vm)
    d = len(vm)
    if math.log2(N) > L:
        raise ConstructionError("requires log2 N <= L")
    J = J or partition_J(N, L, d)
    width_cap, depth_cap = pou_budget(N, L, m, d)
    max_base = (width_cap // d) // 2
    product_K = product_K or best_product_scale(act)
    net = None
    for resolve in (True, False):
        # resolved ladders are more accurate; drop them only if the depth budget is too tight
        net = _pou_layers(act, vm, J, max_base, m, K, carry, product_K, resolve)
        if net.depth <= depth_cap or not check_budget:
            break
    prov = {"construction": "pou", "vm": list(vm), "J": J, "m": m, "N": N, "L": L, "K": float(K),
            "carry": carry, "surrogate": relu_mode(act)}
    net = net.with_meta(prov, net.width, net.depth)
    if check_budget and (net.width > width_cap or net.depth > depth_cap):
        raise ConstructionError(f"budget violated: width {net.width}/{width_cap}, depth {net.depth}/{depth_cap}")
    if target_eps is not None:
        grid = make_grid([(0.0, 1.0)] * d)
        err = sobolev_error(partition_target(vm, J, m), net, m, grid).combined
        if err > target_eps:
            raise ConstructionError(f"measured error {err:.3g} exceeds {target_eps:g}")
        prov["measured_error"] = err
        net = net.with_meta(prov)
    return net

