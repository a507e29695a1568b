"""Truncated multivariate Taylor arithmetic (jets).

Coefficients are stored in normalized form ``D^alpha f(x) / alpha!`` so that
multiplication is a plain truncated convolution.  Multi-indices are enumerated
in graded lexicographic order.

Besides the immutable :class:`Jet` value type, the module exposes batched
helpers working on coefficient arrays whose leading axis indexes the
multi-indices.  Network evaluation uses those to push many jets at once.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

MAX_ORDER = 8
MAX_DIM = 4


class JetError(ValueError):
    """Raised on inconsistent jet dimensions, orders or indices."""


def _check_shape(dim: int, order: int) -> None:
    if not 1 <= dim <= MAX_DIM:
        raise JetError(f"dimension {dim} outside 1..{MAX_DIM}")
    if not 0 <= order <= MAX_ORDER:
        raise JetError(f"order {order} outside 0..{MAX_ORDER}")


@lru_cache(maxsize=None)
def multi_indices(dim: int, order: int) -> tuple[tuple[int, ...], ...]:
    """All multi-indices with ``|alpha| <= order`` in graded lexicographic order."""
    _check_shape(dim, order)
    out = []
    for total in range(order + 1):
        level = [a for a in itertools.product(range(total + 1), repeat=dim) if sum(a) == total]
        out.extend(sorted(level, reverse=True))
    return tuple(out)


@lru_cache(maxsize=None)
def index_of(dim: int, order: int) -> dict[tuple[int, ...], int]:
    return {a: k for k, a in enumerate(multi_indices(dim, order))}


@lru_cache(maxsize=None)
def degrees(dim: int, order: int) -> np.ndarray:
    """Total degree ``|alpha|`` of each slot."""
    return np.array([sum(a) for a in multi_indices(dim, order)])


@lru_cache(maxsize=None)
def factorials(dim: int, order: int) -> np.ndarray:
    """``alpha!`` for each slot, used to convert to raw derivatives."""
    return np.array([math.prod(math.factorial(k) for k in a) for a in multi_indices(dim, order)], dtype=float)


@lru_cache(maxsize=None)
def product_table(dim: int, order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Triples ``(i, j, k)`` with ``alpha_i + alpha_j = alpha_k`` and ``|alpha_k| <= order``."""
    idx = index_of(dim, order)
    mids = multi_indices(dim, order)
    ii, jj, kk = [], [], []
    for i, a in enumerate(mids):
        for j, b in enumerate(mids):
            c = tuple(x + y for x, y in zip(a, b))
            if sum(c) <= order:
                ii.append(i)
                jj.append(j)
                kk.append(idx[c])
    return np.array(ii), np.array(jj), np.array(kk)


# ---------------------------------------------------------------------------
# batched coefficient arrays: axis 0 indexes multi-indices
# ---------------------------------------------------------------------------

def series_mul(a: np.ndarray, b: np.ndarray, dim: int, order: int, skip_constant_a: bool = False) -> np.ndarray:
    """Truncated product of two batched jets (coefficient axis first)."""
    ii, jj, kk = product_table(dim, order)
    out = np.zeros(np.broadcast_shapes(a.shape, b.shape), dtype=float)
    for i, j, k in zip(ii, jj, kk):
        if skip_constant_a and i == 0:
            continue
        out[k] += a[i] * b[j]
    return out


def series_compose(outer: np.ndarray, inner: np.ndarray, dim: int, order: int) -> np.ndarray:
    """Substitute a batched jet into batched univariate series.

    ``outer`` has shape ``(order+1, ...)`` and holds the normalized Taylor
    coefficients of ``g`` at the value slot of ``inner``.  Horner's scheme on
    ``inner - inner(x)`` keeps everything truncated at ``order``.
    """
    if outer.shape[0] < order + 1:
        raise JetError("outer series is shorter than the requested order")
    shift = inner.copy()
    shift[0] = 0.0
    out = np.zeros(inner.shape, dtype=float)
    out[0] = outer[order]
    for k in range(order - 1, -1, -1):
        out = series_mul(shift, out, dim, order, skip_constant_a=True)
        out[0] = out[0] + outer[k]
    return out


# univariate helpers: shape (order+1, ...) ------------------------------------

def uni_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    out = np.zeros(np.broadcast_shapes(a.shape, b.shape))
    for k in range(n):
        for i in range(k + 1):
            out[k] = out[k] + a[i] * b[k - i]
    return out


def uni_recip(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v, dtype=float)
    inv = 1.0 / v[0]
    out[0] = inv
    for k in range(1, v.shape[0]):
        acc = np.zeros_like(v[0], dtype=float)
        for j in range(1, k + 1):
            acc = acc + v[j] * out[k - j]
        out[k] = -inv * acc
    return out


def uni_ode(u: np.ndarray, y0: np.ndarray, rate) -> np.ndarray:
    """Solve ``y' = g u'`` coefficientwise, where ``g = rate(y, n)`` gives the n-th coefficient of g.

    ``rate`` may use ``y[:n+1]`` only.  This is the standard Taylor-mode
    recurrence ``y_k = (1/k) sum_j j u_j g_{k-j}``.
    """
    n = u.shape[0]
    y = np.zeros(u.shape, dtype=float)
    y[0] = y0
    g = []
    for k in range(1, n):
        g.append(rate(y, k - 1))
        acc = np.zeros_like(u[0], dtype=float)
        for j in range(1, k + 1):
            acc = acc + j * u[j] * g[k - j]
        y[k] = acc / k
    return y


def uni_exp(u: np.ndarray) -> np.ndarray:
    return uni_ode(u, np.exp(u[0]), lambda y, n: y[n])


def uni_variable(x: np.ndarray, order: int) -> np.ndarray:
    """Series of the identity at ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros((order + 1,) + x.shape)
    out[0] = x
    if order >= 1:
        out[1] = 1.0
    return out


# ---------------------------------------------------------------------------
# value type
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Jet:
    """Normalized Taylor coefficients of a function at a point."""

    dim: int
    order: int
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        _check_shape(self.dim, self.order)
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (len(multi_indices(self.dim, self.order)),):
            raise JetError("coefficient vector has the wrong length")
        if not np.all(np.isfinite(c)):
            raise JetError("non-finite jet coefficient")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    @property
    def value(self) -> float:
        return float(self.coeffs[0])

    def coefficient(self, alpha: Sequence[int]) -> float:
        return float(self.coeffs[index_of(self.dim, self.order)[tuple(alpha)]])

    def derivative(self, alpha: Sequence[int]) -> float:
        """Raw partial derivative ``D^alpha f``."""
        return self.coefficient(alpha) * math.prod(math.factorial(k) for k in alpha)

    def derivatives(self) -> np.ndarray:
        return self.coeffs * factorials(self.dim, self.order)

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {a: float(c) for a, c in zip(multi_indices(self.dim, self.order), self.coeffs)}


def _same_shape(a: Jet, b: Jet) -> None:
    if a.dim != b.dim or a.order != b.order:
        raise JetError(f"jet mismatch: dim {a.dim}/{b.dim}, order {a.order}/{b.order}")


def jet_constant(c: float, dim: int, order: int) -> Jet:
    coeffs = np.zeros(len(multi_indices(dim, order)))
    coeffs[0] = c
    return Jet(dim, order, coeffs)


def jet_variable(x: Sequence[float], i: int, order: int) -> Jet:
    """Jet of the coordinate function ``x_i`` at ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    dim = x.size
    if not 0 <= i < dim:
        raise JetError(f"coordinate {i} out of range for dimension {dim}")
    coeffs = np.zeros(len(multi_indices(dim, order)))
    coeffs[0] = x[i]
    if order >= 1:
        unit = tuple(int(k == i) for k in range(dim))
        coeffs[index_of(dim, order)[unit]] = 1.0
    return Jet(dim, order, coeffs)


def jet_add(a: Jet, b: Jet) -> Jet:
    _same_shape(a, b)
    return Jet(a.dim, a.order, a.coeffs + b.coeffs)


def jet_scale(a: Jet, c: float) -> Jet:
    return Jet(a.dim, a.order, c * a.coeffs)


def jet_mul(a: Jet, b: Jet) -> Jet:
    _same_shape(a, b)
    return Jet(a.dim, a.order, series_mul(a.coeffs, b.coeffs, a.dim, a.order))


def jet_compose_univariate(outer: Sequence[float], inner: Jet) -> Jet:
    """Jet of ``g(f)`` from the Taylor coefficients of ``g`` at ``f(x)``."""
    outer = np.asarray(outer, dtype=float)
    if outer.ndim != 1 or outer.size < inner.order + 1:
        raise JetError("outer series must have at least order+1 coefficients")
    return Jet(inner.dim, inner.order, series_compose(outer, inner.coeffs, inner.dim, inner.order))
