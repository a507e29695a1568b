"""Target functions, averaged Taylor polynomials and the per-cell local approximant.

Cells follow the bump-region geometry: along a coordinate with pattern 1 the
cells are ``[i/J, i/J + 3/(4J)]``; with pattern 2 they are shifted left by
``1/(2J)`` and clipped to ``[0, 1]``.  On each cell the target is replaced by
its Taylor polynomial averaged over the ball of radius ``1/(4J)`` centred in
the cell, written in the monomial basis about the origin.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .jets import MAX_ORDER, Jet, factorials, multi_indices, series_compose, series_mul

# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def coordinate_jets(points: np.ndarray, order: int) -> np.ndarray:
    """Jets of the coordinate functions, shape ``(ncoef, dim, npoints)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dim = pts.shape[1]
    mids = multi_indices(dim, order)
    out = np.zeros((len(mids), dim, pts.shape[0]))
    out[0] = pts.T
    if order:
        for i in range(dim):
            out[mids.index(tuple(int(k == i) for k in range(dim))), i] = 1.0
    return out


@dataclass(frozen=True)
class TargetFunction:
    """A closed-form function known through its jets at arbitrary points.

    ``jet_fn(points, order)`` returns normalized Taylor coefficients with shape
    ``(npoints, ncoef)``.
    """

    name: str
    dim: int
    jet_fn: Callable[[np.ndarray, int], np.ndarray]

    def jets(self, points, order: int) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return self.jet_fn(pts, order)

    def __call__(self, points) -> np.ndarray:
        return self.jets(points, 0)[:, 0]

    def derivative(self, x: Sequence[float], alpha: Sequence[int]) -> float:
        order = sum(alpha)
        c = self.jets(np.asarray(x, dtype=float).reshape(1, -1), order)[0]
        k = multi_indices(self.dim, order).index(tuple(alpha))
        return float(c[k] * math.prod(math.factorial(a) for a in alpha))


def _polynomial_jets(coeffs: dict, dim: int) -> Callable:
    terms = [(tuple(a), float(c)) for a, c in coeffs.items() if c != 0.0]

    def jet_fn(pts, order):
        x = coordinate_jets(pts, order)
        out = np.zeros((x.shape[0], pts.shape[0]))
        for alpha, c in terms:
            term = np.zeros((x.shape[0], pts.shape[0]))
            term[0] = 1.0
            for j, p in enumerate(alpha):
                for _ in range(p):
                    term = series_mul(term, x[:, j], dim, order)
            out += c * term
        return out.T

    return jet_fn


def polynomial_target(coeffs: dict, dim: int | None = None, name: str = "polynomial") -> TargetFunction:
    """``sum_alpha c_alpha x^alpha`` from a ``{alpha: c}`` map."""
    if dim is None:
        dim = len(next(iter(coeffs)))
    return TargetFunction(name, dim, _polynomial_jets(coeffs, dim))


def constant_target(c: float, dim: int = 1) -> TargetFunction:
    return polynomial_target({(0,) * dim: c}, dim, name=f"constant({c:g})")


def _sin_series(x0: np.ndarray, order: int, freq: float) -> np.ndarray:
    return np.array([freq ** k * np.sin(freq * x0 + k * math.pi / 2) / math.factorial(k)
                     for k in range(order + 1)])


def _exp_series(x0: np.ndarray, order: int) -> np.ndarray:
    e = np.exp(x0)
    return np.array([e / math.factorial(k) for k in range(order + 1)])


def separable_target(name: str, factors: Sequence[Callable[[np.ndarray, int], np.ndarray]]) -> TargetFunction:
    """``prod_j g_j(x_j)`` from univariate series callables ``g_j(x0, order)``."""
    dim = len(factors)

    def jet_fn(pts, order):
        x = coordinate_jets(pts, order)
        out = None
        for j, g in enumerate(factors):
            piece = series_compose(g(pts[:, j], order), x[:, j], dim, order)
            out = piece if out is None else series_mul(out, piece, dim, order)
        return out.T

    return TargetFunction(name, dim, jet_fn)


def sin_pi_target(dim: int = 1) -> TargetFunction:
    return separable_target("sin_pi", [lambda x, n: _sin_series(x, n, math.pi)] * dim)


def exp_target(dim: int = 1) -> TargetFunction:
    return separable_target("exp", [_exp_series] * dim)


def relu_power_target(power: int = 1) -> TargetFunction:
    """``max(x, 0)^power`` in one variable; jets at the kink are taken from the right."""

    def jet_fn(pts, order):
        x = pts[:, 0]
        pos = x >= 0
        xp = np.where(pos, x, 0.0)
        out = np.zeros((pts.shape[0], order + 1))
        for k in range(min(order, power) + 1):
            out[:, k] = math.comb(power, k) * xp ** (power - k) * pos
        return out

    return TargetFunction(f"relu^{power}", 1, jet_fn)


def target_by_name(name: str) -> TargetFunction:
    key = name.lower()
    table = {
        "sin_pi": lambda: sin_pi_target(1),
        "sin_pi_2d": lambda: sin_pi_target(2),
        "exp": lambda: exp_target(1),
        "x2y": lambda: polynomial_target({(2, 1): 1.0}, 2, "x2y"),
        "square": lambda: polynomial_target({(2,): 1.0}, 1, "square"),
        "cubic": lambda: polynomial_target({(3,): 1.0, (1,): -0.5, (0,): 0.25}, 1, "cubic"),
        "zero": lambda: constant_target(0.0, 1),
        "relu": lambda: relu_power_target(1),
        "relu2": lambda: relu_power_target(2),
    }
    if key not in table:
        raise KeyError(f"unknown target {name!r}")
    return table[key]()


TARGET_NAMES = ("sin_pi", "sin_pi_2d", "exp", "x2y", "square", "cubic", "zero", "relu", "relu2")


# ---------------------------------------------------------------------------
# averaged Taylor polynomials
# ---------------------------------------------------------------------------

def c2_constant(n: int, d: int) -> float:
    """``sum_{|alpha+beta| <= n-1} 1/(alpha! beta!)``."""
    total = 0.0
    for gamma in multi_indices(d, n - 1):
        total += 2.0 ** sum(gamma) / math.prod(math.factorial(g) for g in gamma)
    return total


class QuadratureError(RuntimeError):
    pass


def _bump(rho2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rho2)
    inside = rho2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - rho2[inside]))
    return out


def _ball_rule(center: np.ndarray, r: float, nodes: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Points and normalized bump weights on the ball; also the raw bump mass (unit ball)."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    d = center.size
    grids = np.meshgrid(*([t] * d), indexing="ij")
    unit = np.stack([g.reshape(-1) for g in grids], axis=1)
    wt = np.ones(unit.shape[0])
    for k, wk in enumerate(np.meshgrid(*([w] * d), indexing="ij")):
        wt = wt * wk.reshape(-1)
    b = _bump(np.sum(unit ** 2, axis=1)) * wt
    keep = b > 0
    mass = float(b.sum())
    return center + r * unit[keep], b[keep] / mass, mass


@dataclass(frozen=True)
class AveragedTaylor:
    center: np.ndarray
    radius: float
    order: int
    coefficients: np.ndarray  # over multi_indices(d, order-1), monomial basis about the origin
    nodes: int

    @property
    def dim(self) -> int:
        return self.center.size

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        mids = multi_indices(self.dim, self.order - 1)
        return sum(c * np.prod(pts ** np.array(a), axis=1) for a, c in zip(mids, self.coefficients))


def _expansion_matrix(d: int, deg: int, ys: np.ndarray) -> np.ndarray:
    """Map from normalized jets at ``y`` to origin-based monomial coefficients.

    ``sum_beta f_beta(y) (x - y)^beta = sum_gamma x^gamma * sum_{beta >= gamma} f_beta C(beta, gamma) (-y)^(beta-gamma)``.
    Returns shape ``(npoints, ncoef_gamma, ncoef_beta)``.
    """
    mids = multi_indices(d, deg)
    out = np.zeros((ys.shape[0], len(mids), len(mids)))
    for gi, g in enumerate(mids):
        for bi, b in enumerate(mids):
            if all(bb >= gg for bb, gg in zip(b, g)):
                comb = math.prod(math.comb(bb, gg) for bb, gg in zip(b, g))
                out[:, gi, bi] = comb * np.prod((-ys) ** (np.array(b) - np.array(g)), axis=1)
    return out


def averaged_taylor(f: TargetFunction, x0, r: float, n: int, quad_nodes: int | None = None,
                    tol: float = 1e-8, max_nodes: int = 512) -> AveragedTaylor:
    """Taylor polynomial of order ``n`` (degree ``n-1``) averaged over ``B(x0, r)``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if n < 1 or n - 1 > MAX_ORDER:
        raise ValueError("order n must satisfy 1 <= n <= MAX_ORDER + 1")
    if quad_nodes is None:
        nodes, prev = 16, None
        while True:
            _, _, mass = _ball_rule(x0, r, nodes)
            if prev is not None and abs(mass - prev) <= tol * abs(mass):
                break
            if nodes >= max_nodes:
                raise QuadratureError("bump normalization did not settle")
            prev, nodes = mass, nodes * 2
    else:
        nodes = int(quad_nodes)
    ys, weights, _ = _ball_rule(x0, r, nodes)
    jets = f.jets(ys, n - 1)  # (npoints, ncoef)
    expand = _expansion_matrix(x0.size, n - 1, ys)
    coeffs = np.einsum("p,pgb,pb->g", weights, expand, jets)
    return AveragedTaylor(x0, float(r), n, coeffs, nodes)


def local_sobolev_norm(f: TargetFunction, x0, r: float, order: int, samples: int = 41) -> float:
    """Grid estimate of ``||f||_{W^{order,inf}(B(x0, r))}``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    t = np.linspace(-1.0, 1.0, samples)
    grids = np.meshgrid(*([t] * x0.size), indexing="ij")
    unit = np.stack([g.reshape(-1) for g in grids], axis=1)
    unit = unit[np.sum(unit ** 2, axis=1) <= 1.0]
    jets = f.jets(x0 + r * unit, order)
    return float(np.max(np.abs(jets * factorials(x0.size, order))))


# ---------------------------------------------------------------------------
# cells and the piecewise polynomial
# ---------------------------------------------------------------------------

def cell_count(J: int, pattern: int) -> int:
    return J if pattern == 1 else J + 1


def cell_interval(i: int, J: int, pattern: int) -> tuple[float, float]:
    """Closed cell ``[lo, hi]`` clipped to ``[0, 1]``."""
    lo = i / J - (0.0 if pattern == 1 else 0.5 / J)
    return max(lo, 0.0), min(lo + 0.75 / J, 1.0)


def cell_center(i: int, J: int, pattern: int) -> float:
    return (8 * i + 3) / (8 * J) - (0.0 if pattern == 1 else 0.5 / J)


def locate_cells(x: np.ndarray, J: int, pattern: int, strict: bool = False) -> np.ndarray:
    """Cell index per coordinate value, ``-1`` in the gaps (and on boundaries when ``strict``)."""
    x = np.asarray(x, dtype=float)
    shift = 0.0 if pattern == 1 else 0.5
    u = x * J + shift
    i = np.floor(u).astype(int)
    frac = u - i
    inside = frac <= 0.75
    if strict:
        inside = (frac > 0) & (frac < 0.75)
        edge = ((x <= 0.0) | (x >= 1.0))
        inside &= ~edge
    inside &= (x >= 0.0) & (x <= 1.0) & (i < cell_count(J, pattern))
    return np.where(inside, i, -1)


@dataclass(frozen=True)
class PiecewisePoly:
    """Per-cell coefficient table of the local approximant."""

    J: int
    n: int
    pattern: tuple[int, ...]
    table: np.ndarray  # shape (cells_1, ..., cells_d, ncoef) over multi_indices(d, n-1)
    centers: tuple

    @property
    def dim(self) -> int:
        return len(self.pattern)

    def cell_of(self, points: np.ndarray, strict: bool = False) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        cols = [locate_cells(pts[:, j], self.J, p, strict) for j, p in enumerate(self.pattern)]
        return np.stack(cols, axis=1)

    def coefficients_at(self, points: np.ndarray) -> np.ndarray:
        idx = self.cell_of(points)
        bad = np.any(idx < 0, axis=1)
        safe = np.where(idx < 0, 0, idx)
        out = self.table[tuple(safe.T)]
        out[bad] = np.nan
        return out


def local_piecewise(f: TargetFunction, J: int, pattern: Sequence[int], n: int, m: int = 0,
                    quad_nodes: int | None = None) -> PiecewisePoly:
    """Averaged Taylor polynomials on every cell of the region selected by ``pattern``."""
    pattern = tuple(int(p) for p in pattern)
    if len(pattern) != f.dim or any(p not in (1, 2) for p in pattern):
        raise ValueError("pattern must be a vector over {1, 2} of the target's dimension")
    if n < max(2, m):
        raise ValueError(f"order n={n} must be at least max(2, m={m})")
    r = 1.0 / (4 * J)
    counts = [cell_count(J, p) for p in pattern]
    ncoef = len(multi_indices(f.dim, n - 1))
    table = np.zeros(tuple(counts) + (ncoef,))
    centers = {}
    nodes = quad_nodes
    for idx in itertools.product(*[range(c) for c in counts]):
        x0 = np.array([cell_center(i, J, p) for i, p in zip(idx, pattern)])
        avg = averaged_taylor(f, x0, r, n, quad_nodes=nodes)
        nodes = avg.nodes  # every ball is a scaled copy, so one settled rule fits all
        table[idx] = avg.coefficients
        centers[idx] = x0
    return PiecewisePoly(J, n, pattern, table, tuple(centers.items()))


class CellError(ValueError):
    pass


def eval_piecewise_jets(p: PiecewisePoly, points, order: int) -> np.ndarray:
    """Jets of the active cell polynomial, shape ``(npoints, ncoef)``; NaN rows outside cells."""
    pts = np.asarray(points, dtype=float).reshape(-1, p.dim)
    coeffs = p.coefficients_at(pts)
    mids = multi_indices(p.dim, p.n - 1)
    x = coordinate_jets(pts, order)
    nc = x.shape[0]
    out = np.zeros((nc, pts.shape[0]))
    for k, alpha in enumerate(mids):
        term = np.zeros((nc, pts.shape[0]))
        term[0] = 1.0
        for j, e in enumerate(alpha):
            for _ in range(e):
                term = series_mul(term, x[:, j], p.dim, order)
        out += term * coeffs[:, k]
    return out.T


def eval_piecewise_jet(p: PiecewisePoly, x, order: int):
    """Jet of the local approximant at a cell-interior point."""
    pts = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    if np.any(p.cell_of(pts, strict=True) < 0):
        raise CellError(f"{x} is not inside a cell")
    return Jet(p.dim, order, eval_piecewise_jets(p, pts, order)[0])


def piecewise_target(p: PiecewisePoly) -> TargetFunction:
    return TargetFunction(f"piecewise(J={p.J})", p.dim, lambda pts, order: eval_piecewise_jets(p, pts, order))
