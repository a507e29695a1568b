"""Closed-form weight constructions for the network building blocks.

Smooth-activation blocks (square, product, identity, monomials, polynomial
combinations, ReLU surrogates) take a scale ``K``; in ``target_eps`` mode the
scale doubles from ``K_MIN`` until the measured grid error passes.  ReLU
blocks (sawtooth, staircase, point fitting) are exact piecewise linear maps.

Pass-through channels come in two flavours: ``strict`` realizes them with the
identity-approximation block, ``exact_skip`` uses lossless skip channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .activations import Activation, check_condition1, check_condition2, get_activation
from .localpoly import TargetFunction, polynomial_target
from .metrics import Grid, make_grid, sobolev_error
from .network import (AffineLayer, Network, affine_network, affine_post, affine_pre, compose, evaluate_jets,
                      linear_combination, pad_skip, parallel)

K_MIN = 1e2
K_MAX = 1e12
MODES = ("strict", "exact_skip")


class ConstructionError(RuntimeError):
    """A construction could not meet its contract (missing witness, unreachable accuracy, budget)."""


@dataclass(frozen=True)
class BuildRequest:
    activation: Activation
    M: float = 1.0
    target_eps: float | None = None
    m: int = 2
    K: float | None = None
    mode: str = "strict"

    def __post_init__(self) -> None:
        if self.M <= 0:
            raise ValueError("M must be positive")
        if (self.target_eps is None) == (self.K is None):
            raise ValueError("give exactly one of target_eps and K")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")


# ---------------------------------------------------------------------------
# witnesses and audits
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _witness_cached(name: str, params: tuple) -> tuple[float, float]:
    act = get_activation(name, **dict(params))
    rep = check_condition2(act)
    if not rep.passed:
        raise ConstructionError(f"{act.key} has no point with a nonzero second derivative")
    return rep.witness["a"], rep.witness["radius"]


def nonlinearity_witness(act: Activation) -> tuple[float, float]:
    """Point ``a`` with ``sigma''(a) != 0`` and the radius of its smooth neighborhood."""
    return _witness_cached(act.name, tuple(sorted(act.params.items())))


@lru_cache(maxsize=None)
def _decay_cached(name: str, params: tuple, m: int) -> bool:
    act = get_activation(name, **dict(params))
    return check_condition1(act, min(m, int(min(act.smoothness, 8)))).passed


def require_decay(act: Activation, m: int) -> None:
    if not _decay_cached(act.name, tuple(sorted(act.params.items())), m):
        raise ConstructionError(f"{act.key} fails the quasi-decay audit at order {m}")


def relu_mode(act: Activation, mode: str = "auto") -> str:
    if mode == "auto":
        return "sigma_over_x" if act.decay_target == "sigma_over_x" else "x_times_sigma"
    if mode not in ("sigma_over_x", "x_times_sigma"):
        raise ValueError(f"unknown surrogate mode {mode}")
    return mode


# ---------------------------------------------------------------------------
# square, product and identity primitives
# ---------------------------------------------------------------------------

def _second_order_terms(act: Activation, a: float) -> tuple[list[tuple[float, float]], float]:
    """Terms ``(weight, scale)`` with ``f2(x) = sum w f1(scale x)`` and its ``x^2`` coefficient.

    ``f1(x) = sigma(x + a) - sigma(a)`` has Taylor coefficients ``a11, a12``;
    the combination cancels the linear term.
    """
    _, a11, a12 = act.eval_jet(a, 2)
    if abs(a11) < 1e-12:
        return [(1.0, 1.0)], a12
    if abs(abs(a11) - 1.0) < 0.25:
        # f1(x/a11) - f1(x)/a11 degenerates near |a11| = 1, so use the doubled branch
        b = 2.0 * a11
        return [(2.0, 1.0 / b), (-2.0 / b, 1.0)], 2.0 * a12 * (1.0 / b ** 2 - 1.0 / b)
    return [(1.0, 1.0 / a11), (-1.0 / a11, 1.0)], a12 * (1.0 / a11 ** 2 - 1.0 / a11)


def square_network(act: Activation, K: float, R: float = 1.0, symmetric: bool = True) -> Network:
    """Depth-1 approximation of ``x^2`` on ``[-R, R]``.

    ``phi(x) = (K'^2 / a22) f2(x / K')`` with ``K' = K R``.  The symmetric form
    averages ``x`` and ``-x`` so that the odd cubic remainder cancels.
    """
    a, radius = nonlinearity_witness(act)
    terms, a22 = _second_order_terms(act, a)
    if abs(a22) < 1e-14:
        raise ConstructionError("degenerate second-order coefficient")
    k_eff = float(K) * float(R)
    reach = max(abs(s) for _, s in terms) * R / k_eff
    if reach >= radius:
        raise ConstructionError(f"K={K} too small: inputs leave the smooth neighborhood of the witness")
    signs = (1.0, -1.0) if symmetric else (1.0,)
    scale = k_eff ** 2 / a22 / len(signs)
    sigma_a = float(act(np.array(a)))
    w_in, w_out = [], []
    for sgn in signs:
        for w, s in terms:
            w_in.append(sgn * s / k_eff)
            w_out.append(scale * w)
    w_out = np.array(w_out)
    hidden = AffineLayer(np.array(w_in).reshape(-1, 1), np.full(len(w_in), a))
    out = AffineLayer(w_out.reshape(1, -1), np.array([-w_out.sum() * sigma_a]))
    prov = {"construction": "square", "K": float(K), "R": float(R), "witness": a, "symmetric": symmetric}
    return Network((hidden, out), act, ((),), prov, 4, 1)


def product_network(act: Activation, K: float, R: float = 1.0) -> Network:
    """Depth-1 approximation of ``x y`` on ``[-R, R]^2`` by polarization."""
    sq = square_network(act, K, 2.0 * R)
    parts = [affine_pre(sq, [[1.0, 1.0]]), affine_pre(sq, [[1.0, 0.0]]), affine_pre(sq, [[0.0, 1.0]])]
    net = linear_combination(parts, [0.5, -0.5, -0.5])
    return net.with_meta({"construction": "product", "K": float(K), "R": float(R)}, 12, 1)


def identity_network(act: Activation, K: float, R: float = 1.0) -> Network:
    """Depth-1 approximation of ``x`` on ``[-R, R]``: ``(sq(x + 1) - sq(x) - 1) / 2``."""
    sq = square_network(act, K, R + 1.0)
    net = linear_combination([affine_pre(sq, [[1.0]], [1.0]), sq], [0.5, -0.5])
    net = affine_post(net, [[1.0]], [-0.5])
    return net.with_meta({"construction": "identity", "K": float(K), "R": float(R)}, 8, 1)


def skip_carrier(act: Activation, dim: int, index: int) -> Network:
    """Depth-1 lossless pass-through of coordinate ``index``."""
    row = np.zeros((1, dim))
    row[0, index] = 1.0
    layers = (AffineLayer(row, [0.0]), AffineLayer([[1.0]], [0.0]))
    return Network(layers, act, ((0,),), {"construction": "skip"}, 1, 1)


def carrier(act: Activation, dim: int, index: int, R: float, K: float, mode: str) -> Network:
    """Depth-1 pass-through of one coordinate in the requested mode."""
    if mode == "exact_skip":
        return skip_carrier(act, dim, index)
    row = np.zeros((1, dim))
    row[0, index] = 1.0
    return affine_pre(identity_network(act, K, R), row)


def identity_padder(act: Activation, K: float, R: float) -> Callable[[Network, int], Network]:
    """Depth padding with identity blocks, for strict mode."""

    def pad(net: Network, extra: int) -> Network:
        for _ in range(extra):
            k = net.output_dim
            layer = parallel([carrier(act, k, i, R, K, "strict") for i in range(k)])
            net = compose(layer, net)
        return net

    return pad


def padder(act: Activation, K: float, R: float, mode: str):
    return pad_skip if mode == "exact_skip" else identity_padder(act, K, R)


RESOLVE_SCALE = 2.0 ** 30


def resolver(act: Activation, dim: int = 1, K: float = RESOLVE_SCALE) -> Network:
    """``v -> ReLU(v) - ReLU(-v)`` per coordinate, converted at scale ``K``.

    A product block's output is a sum of large cancelling terms.  When it feeds
    another product directly, each of that block's rows re-sums those terms
    with its own rounding and the block amplifies the disagreement by its scale.
    Passing the value through this split first hands the next block a single
    two-term quantity.  For GELU and softplus the split is an exact identity.
    """
    eye = np.eye(dim)
    hidden = AffineLayer(np.vstack([eye, -eye]), np.zeros(2 * dim))
    out = AffineLayer(np.hstack([eye, -eye]), np.zeros(dim))
    split = Network((hidden, out), get_activation("relu"), ((),), {"construction": "signed_split"}, 2 * dim, 1)
    net = convert_relu_network(split, act, K, M=1.0)
    return net.with_meta({"construction": "resolver", "dim": dim, "K": float(K)})


# ---------------------------------------------------------------------------
# product ladders and monomials
# ---------------------------------------------------------------------------

def _select(dim: int, index: int) -> np.ndarray:
    row = np.zeros((1, dim))
    row[0, index] = 1.0
    return row


def product_ladder(act: Activation, dim: int, factors: Sequence[int], K: float, M: float, mode: str,
                   head: Network | None = None, head_bound: float = 1.0, resolve: bool = False) -> Network:
    """Multiply coordinates ``x_f`` (in order) onto an accumulator, one product block per stage.

    With ``head`` (a depth-1 scalar network) the accumulator starts as the
    head's output; otherwise it starts as ``x_{factors[0]}``.  ``resolve``
    inserts a ``resolver`` on the accumulator between consecutive products,
    trading depth for rounding that no longer compounds across stages.
    """
    factors = list(factors)
    stages: list[Network] = []
    if head is None:
        if len(factors) < 2:
            raise ValueError("a ladder without head needs at least two factors")
        acc_bound = M
        first, factors = factors[0], factors[1:]
        state_vars: list[int] = list(range(dim))
        acc_index = first
        state_dim = dim
    else:
        if head.depth != 1 or head.output_dim != 1:
            raise ValueError("head must be a depth-1 scalar network")
        needed = sorted(set(factors))
        layer = parallel([head] + [carrier(act, dim, j, M, K, mode) for j in needed])
        stages.append(layer)
        acc_bound = head_bound
        state_vars = needed
        acc_index = 0
        state_dim = 1 + len(needed)
    for s, f in enumerate(factors):
        later = sorted(set(factors[s + 1:]))
        if head is None and s == 0:
            acc_sel, pos = _select(state_dim, acc_index), {v: v for v in range(dim)}
        else:
            acc_sel, pos = _select(state_dim, 0), {v: 1 + i for i, v in enumerate(state_vars)}
        R = max(acc_bound, M)
        pair = np.vstack([acc_sel, _select(state_dim, pos[f])])
        prod = affine_pre(product_network(act, K, R), pair)
        carried = [carrier(act, state_dim, pos[v], M, K, mode) for v in later]
        stages.append(parallel([prod] + carried))
        acc_bound = acc_bound * M
        state_vars = later
        state_dim = 1 + len(later)
        if resolve and later:
            res = affine_pre(resolver(act), _select(state_dim, 0))
            keep = [carrier(act, state_dim, 1 + i, M, K, mode) for i in range(len(later))]
            stages.append(parallel([res] + keep, pad=padder(act, K, M, mode)))
    net = stages[0]
    for st in stages[1:]:
        net = compose(st, net)
    return net


def monomial_budget(alpha: Sequence[int]) -> tuple[int, int]:
    p = sum(alpha)
    if p == 1:
        return 8, 1
    return max(20, 8 * p - 4), p - 1


def monomial_network(act: Activation, alpha: Sequence[int], K: float, M: float = 1.0,
                     mode: str = "strict") -> Network:
    """``x^alpha`` on ``[-M, M]^d`` for a fixed scale ``K``."""
    _check_mode(mode)
    alpha = tuple(int(a) for a in alpha)
    dim, p = len(alpha), sum(alpha)
    if p < 1:
        raise ValueError("monomial degree must be at least 1")
    factors = [j for j, a in enumerate(alpha) for _ in range(a)]
    if p == 1:
        net = carrier(act, dim, factors[0], M, K, mode)
    else:
        net = product_ladder(act, dim, factors, K, M, mode)
    width, depth = monomial_budget(alpha)
    prov = {"construction": "monomial", "alpha": list(alpha), "K": float(K), "M": float(M), "mode": mode}
    return net.with_meta(prov, width, depth)


def search_scale(builder: Callable[[float], Network], target: TargetFunction | Network, grid: Grid, m: int,
                 eps: float, K0: float = K_MIN, K_max: float = K_MAX) -> Network:
    """Double ``K`` from ``K0`` until the measured ``W^{m,inf}`` error is at most ``eps``."""
    K = K0
    best = math.inf
    while K <= K_max:
        try:
            net = builder(K)
        except ConstructionError:
            K *= 2.0
            continue
        err = sobolev_error(target, net, m, grid).combined
        best = min(best, err)
        if err <= eps:
            prov = dict(net.provenance)
            prov.update({"measured_error": err, "target_eps": eps, "order": m})
            return net.with_meta(prov)
        K *= 2.0
    raise ConstructionError(f"accuracy {eps:g} unreachable for K <= {K_max:g} (best {best:.3g})")


def build_monomial(act: Activation, alpha: Sequence[int], M: float = 1.0, m: int = 2,
                   target_eps: float | None = 1e-3, mode: str = "strict", K: float | None = None,
                   grid: Grid | None = None) -> Network:
    """Monomial network, either at a given ``K`` or searched to meet ``target_eps``."""
    alpha = tuple(int(a) for a in alpha)
    if K is not None:
        return monomial_network(act, alpha, K, M, mode)
    target = polynomial_target({alpha: 1.0}, len(alpha))
    grid = grid or make_grid([(-M, M)] * len(alpha))
    return search_scale(lambda k: monomial_network(act, alpha, k, M, mode), target, grid, m, target_eps)


def build_primitive(kind: str, req: BuildRequest, grid: Grid | None = None) -> Network:
    """Square, product or identity block for a request (explicit ``K`` or searched)."""
    act, M = req.activation, req.M
    if kind == "square":
        build, target, box = (lambda k: square_network(act, k, M)), polynomial_target({(2,): 1.0}), [(-M, M)]
    elif kind == "product":
        build, target, box = (lambda k: product_network(act, k, M)), polynomial_target({(1, 1): 1.0}), [(-M, M)] * 2
    elif kind == "identity":
        build, target, box = (lambda k: identity_network(act, k, M)), polynomial_target({(1,): 1.0}), [(-M, M)]
    else:
        raise ValueError(f"unknown primitive {kind!r}")
    nonlinearity_witness(act)
    if req.K is not None:
        return build(req.K)
    return search_scale(build, target, grid or make_grid(box), req.m, req.target_eps)


@lru_cache(maxsize=None)
def _best_product_scale(name: str, params: tuple) -> float:
    act = get_activation(name, **dict(params))
    grid = make_grid([(-1.0, 1.0)] * 2, n_uniform=33, n_random=64)
    target = polynomial_target({(1, 1): 1.0})
    best, best_K = math.inf, K_MIN
    for K in 10.0 ** np.arange(2.0, 6.01, 0.25):
        try:
            net = product_network(act, K)
        except ConstructionError:
            continue
        err = sobolev_error(target, net, 2, grid).combined
        if err < best:
            best, best_K = err, float(K)
    return best_K


def best_product_scale(act: Activation) -> float:
    """Scale minimizing the product-block error (truncation falls as K^-2, roundoff grows as K^2)."""
    return _best_product_scale(act.name, tuple(sorted(act.params.items())))


PRIMITIVE_BUDGETS = {"square": (4, 1), "product": (12, 1), "identity": (8, 1)}


def polynomial_network(act: Activation, coeffs: dict, K: float, M: float = 1.0, mode: str = "strict") -> Network:
    coeffs = {tuple(int(a) for a in k): float(v) for k, v in coeffs.items() if v != 0.0}
    dim = len(next(iter(coeffs))) if coeffs else 1
    const = sum(v for k, v in coeffs.items() if sum(k) == 0)
    terms = [(k, v) for k, v in coeffs.items() if sum(k) > 0]
    if not terms:
        return affine_network(np.zeros((1, dim)), [const], act, {"construction": "polynomial", "degree": 0})
    nets = [monomial_network(act, k, K, M, mode) for k, _ in terms]
    bound = max(M ** sum(k) for k, _ in terms)
    net = linear_combination(nets, [v for _, v in terms], pad=padder(act, K, bound, mode))
    net = affine_post(net, [[1.0]], [const])
    degree = max(sum(k) for k, _ in terms)
    prov = {"construction": "polynomial", "degree": degree, "K": float(K), "mode": mode}
    return net.with_meta(prov, net.declared_width, max(1, degree - 1))


def polynomial_budget(degree: int, dim: int) -> int:
    return 40 * (degree + 1) ** dim


def build_polynomial(act: Activation, coeffs: dict, M: float = 1.0, m: int = 2,
                     target_eps: float | None = 1e-3, mode: str = "strict", K: float | None = None,
                     grid: Grid | None = None) -> Network:
    """``sum_alpha c_alpha x^alpha`` as a combination of monomial blocks."""
    if K is not None or all(sum(k) == 0 for k in coeffs):
        return polynomial_network(act, coeffs, K or K_MIN, M, mode)
    dim = len(next(iter(coeffs)))
    target = polynomial_target(coeffs, dim)
    grid = grid or make_grid([(-M, M)] * dim)
    return search_scale(lambda k: polynomial_network(act, coeffs, k, M, mode), target, grid, m, target_eps)


# ---------------------------------------------------------------------------
# ReLU surrogates
# ---------------------------------------------------------------------------

def sigma_neuron(act: Activation, K: float, dim: int = 1, index: int = 0, normalized: bool = True,
                 divide: bool = True) -> Network:
    """``beta (sigma(K x_i) + alpha)``, divided by ``K`` when ``divide``."""
    shift, scale = act.normalization if normalized else (0.0, 1.0)
    row = np.zeros((1, dim))
    row[0, index] = K
    c = scale / K if divide else scale
    layers = (AffineLayer(row, [0.0]), AffineLayer([[c]], [c * shift]))
    return Network(layers, act, ((),), {"construction": "sigma_neuron", "K": float(K)}, 1, 1)


def build_relu_unit(act: Activation, K: float, M: float = 1.0, mode: str = "auto", carry: str = "strict",
                    product_K: float | None = None, audit_order: int = 1) -> Network:
    """ReLU surrogate: ``sigma~(K x)/K`` (one neuron) or ``x sigma~(K x)`` (product block)."""
    kind = relu_mode(act, mode)
    require_decay(act, audit_order)
    product_K = product_K or best_product_scale(act)
    if kind == "sigma_over_x":
        net = sigma_neuron(act, K)
        return net.with_meta({"construction": "relu_unit", "mode": kind, "K": float(K)}, 1, 1)
    # ReLU is positively homogeneous: run the product block on z / M and rescale, so its
    # rounding stays at the [-1, 1] level instead of growing with the input range
    head = sigma_neuron(act, K * M, divide=False)
    net = product_ladder(act, 1, [0], product_K, 1.0, carry, head=head, head_bound=1.2)
    net = affine_post(affine_pre(net, [[1.0 / M]]), [[M]])
    prov = {"construction": "relu_unit", "mode": kind, "K": float(K), "product_K": float(product_K),
            "carry": carry}
    return net.with_meta(prov, 12, 2)


def surrogate_leak(act: Activation, K: float = 2.0 ** 30) -> float:
    """Largest value or slope error of the ReLU surrogate at ``1/2 <= |z| <= 1``.

    Converted exact blocks (staircases, point fitting, gates) chain many
    surrogate neurons through large weights, so whatever one neuron leaks away
    from its kink is amplified.  Activations whose tails approach the ReLU only
    algebraically, or that need a product block, leave a leak far above
    float64 resolution.
    """
    z = np.concatenate([-np.linspace(0.5, 1.0, 11), np.linspace(0.5, 1.0, 11)])
    jets = evaluate_jets(build_relu_unit(act, K), z.reshape(-1, 1), 1)[:, 0, :]
    want = np.stack([np.maximum(z, 0.0), (z > 0).astype(float)], axis=1)
    return float(np.max(np.abs(jets - want)))


def relu_power_budget(m: int, kind: str) -> tuple[int, int]:
    return 20, (m + 1 if kind == "sigma_over_x" else m + 2)


def build_relu_power(act: Activation, m: int, K: float, M: float = 1.0, mode: str = "auto",
                     carry: str = "strict", product_K: float | None = None, resolve: bool = False) -> Network:
    """Surrogate of ``ReLU^{m+1}``: ``x^m sigma~(K x)/K`` or ``x^{m+1} sigma~(K x)``."""
    if m < 1:
        raise ValueError("m must be at least 1")
    kind = relu_mode(act, mode)
    require_decay(act, m)
    nonlinearity_witness(act)
    product_K = product_K or best_product_scale(act)
    if kind == "sigma_over_x":
        head, bound, factors = sigma_neuron(act, K), M, [0] * m
        net = product_ladder(act, 1, factors, product_K, M, carry, head=head, head_bound=bound, resolve=resolve)
    else:
        # homogeneous of degree m + 1, so the ladder runs on z / M as in build_relu_unit
        head, factors = sigma_neuron(act, K * M, divide=False), [0] * (m + 1)
        net = product_ladder(act, 1, factors, product_K, 1.0, carry, head=head, head_bound=1.2, resolve=resolve)
        net = affine_post(affine_pre(net, [[1.0 / M]]), [[M ** (m + 1)]])
    width, depth = relu_power_budget(m, kind)
    if resolve:
        depth = net.depth
    prov = {"construction": "relu_power", "m": m, "mode": kind, "K": float(K), "product_K": float(product_K),
            "carry": carry}
    return net.with_meta(prov, max(width, net.width), depth)


def relu_from_relu_power(m: int, t: float) -> Network:
    """Finite-difference ReLU built from ``m + 1`` shifted ``ReLU^{m+1}`` neurons."""
    if t == 0:
        raise ValueError("t must be nonzero")
    if m < 1:
        raise ValueError("m must be at least 1")
    act = get_activation(f"relu{m + 1}")
    ell = np.arange(m + 1)
    hidden = AffineLayer(np.ones((m + 1, 1)), ell * t)
    c = 1.0 / (math.factorial(m + 1) * (-t) ** m)
    w = np.array([c * (-1) ** k * math.comb(m, k) for k in ell])
    out = AffineLayer(w.reshape(1, -1), [0.0])
    return Network((hidden, out), act, ((),), {"construction": "relu_from_relu_power", "m": m, "t": t}, m + 1, 1)


def preactivation_bounds(net: Network, lo, hi) -> list[tuple[np.ndarray, np.ndarray]]:
    """Interval bounds of every hidden pre-activation of a ReLU network over a box."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    out = []
    for k, layer in enumerate(net.layers[:-1]):
        W = layer.dense()
        wp, wn = np.maximum(W, 0), np.minimum(W, 0)
        zlo = wp @ lo + wn @ hi + layer.bias
        zhi = wp @ hi + wn @ lo + layer.bias
        out.append((zlo, zhi))
        mask = net.active_mask(k)
        lo = np.where(mask, np.maximum(zlo, 0), zlo)
        hi = np.where(mask, np.maximum(zhi, 0), zhi)
    return out


def convert_relu_network(relu_net: Network, act: Activation, K: float, M: float = 1.0, mode: str = "auto",
                         carry: str = "strict", product_K: float | None = None) -> Network:
    """Replace every ReLU neuron of ``relu_net`` by a surrogate block of ``act``."""
    if relu_net.activation.name != "relu":
        raise ConstructionError("conversion expects a ReLU network")
    kind = relu_mode(act, mode)
    require_decay(act, 1)
    shift, scale = act.normalization
    prov = {"construction": "converted", "source": relu_net.provenance.get("construction"), "K": float(K),
            "mode": kind, "activation": act.key}
    if kind == "sigma_over_x":
        layers = [(layer.weights.copy(), layer.bias.copy()) for layer in relu_net.layers]
        for k in range(relu_net.depth):
            mask = relu_net.active_mask(k)
            W, b = layers[k]
            W = _scale_rows(W, np.where(mask, K, 1.0))
            b = np.where(mask, K * b, b)
            layers[k] = (W, b)
            Wn, bn = layers[k + 1]
            col = np.where(mask, scale / K, 1.0)
            bn = bn + np.asarray(Wn @ np.where(mask, scale * shift / K, 0.0)).reshape(-1)
            layers[k + 1] = (_scale_cols(Wn, col), bn)
        return Network(tuple(AffineLayer(W, b) for W, b in layers), act, relu_net.skip_channels, prov,
                       relu_net.declared_width, relu_net.declared_depth)
    box = preactivation_bounds(relu_net, -M * np.ones(relu_net.input_dim), M * np.ones(relu_net.input_dim))
    net = None
    for k, layer in enumerate(relu_net.layers[:-1]):
        W, b = layer.dense(), layer.bias
        zlo, zhi = box[k]
        skips = set(relu_net.skip_channels[k])
        blocks = []
        for i in range(layer.out_dim):
            R = max(float(max(abs(zlo[i]), abs(zhi[i]))), 1e-3) * 1.01
            if i in skips:
                unit = pad_skip(affine_network([[1.0]], [0.0], act), 2)
            else:
                unit = build_relu_unit(act, K, R, kind, carry, product_K)
            blocks.append(affine_pre(unit, W[i:i + 1], b[i:i + 1]))
        block = parallel(blocks)
        net = block if net is None else compose(block, net)
    last = relu_net.layers[-1]
    net = compose(affine_network(last.dense(), last.bias, act), net)
    return net.with_meta(prov, 12 * relu_net.width, 2 * relu_net.depth)


def _scale_rows(W, s):
    return W.multiply(s[:, None]).tocsr() if hasattr(W, "multiply") and not isinstance(W, np.ndarray) else W * s[:, None]


def _scale_cols(W, s):
    return W.multiply(s[None, :]).tocsr() if hasattr(W, "multiply") and not isinstance(W, np.ndarray) else W * s[None, :]


# ---------------------------------------------------------------------------
# exact ReLU blocks: sawtooth, staircase, point fitting
# ---------------------------------------------------------------------------

RELU = get_activation("relu")


def build_sawtooth(folds: int, base_teeth: int, J: int, extent: float = 1.0) -> Network:
    """ReLU network for ``x -> dist(x, (2/J) Z)`` on ``[0, base_teeth 2^folds 2/J]``.

    A one-hidden-layer template with ``base_teeth`` hats is folded ``folds``
    times by the tent map; each fold doubles the number of teeth.
    """
    if folds < 0 or base_teeth < 1 or J < 1:
        raise ConstructionError("folds >= 0, base_teeth >= 1 and J >= 1 are required")
    teeth = base_teeth * 2 ** folds
    if teeth * 2.0 / J < extent - 1e-12:
        raise ConstructionError(f"{teeth} teeth of width 2/J do not cover [0, {extent}]")
    # template on s in [0, base_teeth]: 2 dist(s, Z) = sum_j c_j ReLU(s - j/2)
    knots = np.arange(2 * base_teeth) / 2.0
    c = np.array([2.0] + [(-4.0 if j % 2 else 4.0) for j in range(1, 2 * base_teeth)])
    s_scale = (J / 2.0) / 2 ** folds
    layers = [AffineLayer(np.full((knots.size, 1), s_scale), -knots)]
    prev_out = (c.reshape(1, -1), 0.0)
    for _ in range(folds):
        # tent(v) = 2 ReLU(v) - 4 ReLU(v - 1/2) for v in [0, 1]
        Wv, bv = prev_out
        W = np.vstack([Wv, Wv])
        b = np.array([bv, bv - 0.5])
        layers.append(AffineLayer(W, b))
        prev_out = (np.array([[2.0, -4.0]]), 0.0)
    Wv, bv = prev_out
    layers.append(AffineLayer(Wv / J, [bv / J]))
    prov = {"construction": "sawtooth", "folds": folds, "base_teeth": base_teeth, "J": J}
    return Network(tuple(layers), RELU, tuple(() for _ in layers[:-1]), prov, max(knots.size, 2), folds + 1)


def _step_rows(center: float, width: float) -> tuple[np.ndarray, np.ndarray]:
    """Two ReLU units whose difference rises from 0 to 1 on ``[c - 3w/4, c - w/4]``.

    Returns weight multipliers and biases for ``ReLU(g (z - c) + 3/2) - ReLU(g (z - c) + 1/2)``
    with ``g = 2 / w``; the input ``z`` is supplied by the caller's affine map.
    """
    g = 2.0 / width
    return np.array([g, g]), np.array([-g * center + 1.5, -g * center + 0.5])


class _Builder:
    """Layer-by-layer assembly of ReLU networks with named affine read-outs."""

    def __init__(self, in_dim: int):
        self.layers: list[AffineLayer] = []
        self.width = 0
        # read-outs: name -> (row over current outputs, constant)
        self.size = in_dim
        self.reads: dict = {}

    def read(self, name) -> tuple[np.ndarray, float]:
        return self.reads[name]

    def add_layer(self, units: list[tuple[np.ndarray, float]], new_reads: dict) -> None:
        W = np.vstack([u[0] for u in units]) if units else np.zeros((0, self.size))
        b = np.array([u[1] for u in units])
        self.layers.append(AffineLayer(W, b))
        self.size = len(units)
        self.width = max(self.width, self.size)
        self.reads = new_reads

    def finish(self, rows: list[tuple[np.ndarray, float]], provenance: dict, width: int, depth: int) -> Network:
        W = np.vstack([r[0] for r in rows])
        b = np.array([r[1] for r in rows])
        layers = tuple(self.layers) + (AffineLayer(W, b),)
        return Network(layers, RELU, tuple(() for _ in self.layers), provenance, width, depth)


def _unit(row: np.ndarray, const: float, gain: float = 1.0, bias: float = 0.0) -> tuple[np.ndarray, float]:
    return gain * row, gain * const + bias


def _e(n: int, i: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def staircase_split(J: int, N: int | None, L: int | None, d: int = 1) -> tuple[int, int]:
    """Coarse and fine level counts with ``coarse * fine = J``."""
    if N is None or L is None:
        return J, 1
    coarse = int(math.floor(N ** (1.0 / d) + 1e-12)) ** 2
    fine = int(math.floor(L ** (2.0 / d) + 1e-12))
    if coarse * fine != J:
        raise ConstructionError(f"J={J} does not factor as {coarse} x {fine}")
    return coarse, fine


def build_staircase(J: int, delta: float, N: int | None = None, L: int | None = None, d: int = 1) -> Network:
    """ReLU network equal to ``k`` on ``[k/J, (k+1)/J - delta]``.

    Coarse steps cut ``[0, 1]`` into ``A`` blocks; the remainder inside a block
    is resolved bit by bit with ``ceil(log2 B)`` further layers, ``A B = J``.
    Every step rises on the middle half of its gap, so plateau points keep a
    pre-activation margin of ``1/2``.
    """
    if not 0 < delta <= 1.0 / (3 * J):
        raise ConstructionError(f"delta must lie in (0, 1/(3J)], got {delta}")
    A, B = staircase_split(J, N, L, d)
    bldr = _Builder(1)
    x_row = np.array([1.0])
    units = []
    for j in range(1, A):
        g, c = _step_rows(j / A, delta)
        units += [(g[0] * x_row, c[0]), (g[1] * x_row, c[1])]
    units.append((x_row, 1.0))  # x + 1 carried
    n = len(units)
    coarse_row = np.zeros(n)
    coarse_row[0:2 * (A - 1):2] = 1.0
    coarse_row[1:2 * (A - 1):2] = -1.0
    x_read = (_e(n, n - 1), -1.0)
    bldr.add_layer(units, {})
    # remainder r = x - coarse/A, accumulator acc = coarse * B
    r_row, r_c = x_read[0] - coarse_row / A, x_read[1]
    acc_row, acc_c = coarse_row * B, 0.0
    bits = int(math.ceil(math.log2(B))) if B > 1 else 0
    for t in range(bits - 1, -1, -1):
        thr = 2 ** t / J
        g, c = _step_rows(thr, delta)
        units = [(g[0] * r_row, g[0] * r_c + c[0]), (g[1] * r_row, g[1] * r_c + c[1]),
                 (r_row, r_c + 1.0), (acc_row, acc_c + 1.0)]
        bldr.add_layer(units, {})
        bit_row = np.array([1.0, -1.0, 0.0, 0.0])
        r_row, r_c = np.array([0.0, 0.0, 1.0, 0.0]) - thr * bit_row, -1.0
        acc_row, acc_c = np.array([0.0, 0.0, 0.0, 1.0]) + 2 ** t * bit_row, -1.0
    prov = {"construction": "staircase", "J": J, "delta": delta, "coarse": A, "fine": B}
    return bldr.finish([(acc_row, acc_c)], prov, bldr.width, len(bldr.layers))


def staircase_budget(N: int, L: int) -> tuple[int, int]:
    return 48 * N + 36, 8 * L + 10


def fit_points_bits(N: int, L: int, s: int) -> int:
    return max(1, int(math.ceil(2 * s * math.log2(N * L) - 1e-12)))


def fit_points_budget(N: int, L: int, s: int) -> tuple[float, float]:
    return 192 * s * (N + 1) * math.log2(8 * N), 10 * (L + 2) * math.log2(4 * L)


def fit_points(values: Sequence[float], N: int, L: int, s: int, block: int | None = None,
               count: int | None = None) -> Network:
    """ReLU network with ``|phi(i) - xi_i| <= 2 (N L)^{-2 s}`` at ``i = 0, ..., N^2 L^2 - 1``.

    ``count`` overrides the number of positions (the bit budget still follows ``N, L, s``).

    Values are rounded to ``b`` bits.  Positions are grouped in blocks of
    ``B``; for every bit plane a group stores one ``B``-bit binary fraction
    holding that bit of each member.  A lookup layer selects the group, then
    ``B`` extraction layers peel off binary digits and keep the one belonging
    to the queried position.  Every comparison has a pre-activation margin of
    ``1/2`` at integer inputs and the output always lies in ``[0, 1]``.
    """
    xi = np.asarray(values, dtype=float).reshape(-1)
    P = count or N * N * L * L
    if xi.size != P:
        raise ValueError(f"expected {P} values, got {xi.size}")
    if np.any(xi < 0) or np.any(xi > 1) or not np.all(np.isfinite(xi)):
        raise ValueError("values must lie in [0, 1]")
    nbits = fit_points_bits(N, L, s)
    q = np.minimum(np.round(xi * 2.0 ** nbits), 2 ** nbits - 1).astype(np.int64)
    B = block or min(L * L, 40)
    G = -(-P // B)
    qp = np.zeros(G * B, dtype=np.int64)
    qp[:P] = q
    # stored[g, r] = sum_v bit_r(q_{gB+v}) 2^{-(v+1)}, bit_r the r-th most significant of nbits
    bitsets = (qp[:, None] >> (nbits - 1 - np.arange(nbits))[None, :]) & 1  # (G*B, nbits)
    bitsets = bitsets.reshape(G, B, nbits)
    stored = np.einsum("gvr,v->gr", bitsets.astype(float), 2.0 ** -(np.arange(B) + 1))
    bldr = _Builder(1)
    x = np.array([1.0])
    # layer 1: group steps on the index and the index carried with offset 1
    units = []
    for g in range(1, G):
        gain, c = _step_rows(g * B, 1.0)
        units += [(gain[0] * x, c[0]), (gain[1] * x, c[1])]
    units.append((x, 1.0))
    n = len(units)
    group_step = np.zeros((max(G - 1, 0), n))
    for g in range(G - 1):
        group_step[g, 2 * g], group_step[g, 2 * g + 1] = 1.0, -1.0
    bldr.add_layer(units, {})
    idx_row, idx_c = _e(n, n - 1), -1.0
    v_row, v_c = idx_row - B * group_step.sum(axis=0), idx_c
    # y_r = stored[0, r] + sum_g (stored[g, r] - stored[g-1, r]) step_g
    diffs = np.diff(stored, axis=0)  # (G-1, nbits)
    y_rows = [(diffs[:, r] @ group_step if G > 1 else np.zeros(n), stored[0, r]) for r in range(nbits)]
    # layer 2: position indicator steps and the stored fractions carried with offset 1
    units = []
    for k in range(1, B):
        gain, c = _step_rows(k, 1.0)
        units += [(gain[0] * v_row, gain[0] * v_c + c[0]), (gain[1] * v_row, gain[1] * v_c + c[1])]
    for row, c in y_rows:
        units.append((row, c + 1.0))
    n = len(units)
    bldr.add_layer(units, {})
    steps = [None] + [(_e(n, 2 * (k - 1)) - _e(n, 2 * (k - 1) + 1), 0.0) for k in range(1, B)]
    zero = np.zeros(n)

    def step_read(k):
        if k == 0:
            return zero, 1.0
        if k >= B:
            return zero, 0.0
        return steps[k]

    ind = []
    for k in range(B):
        a, ac = step_read(k)
        b, bc = step_read(k + 1)
        ind.append((a - b, ac - bc))
    t_reads = [(_e(n, 2 * (B - 1) + r), -1.0) for r in range(nbits)]
    acc_read = (zero, 0.0)
    sel_reads: list = []
    for k in range(B + 1):
        w = 2.0 ** -(B - k)
        units = []
        if k < B:
            # bit = 1 iff t >= 1/2; t is a multiple of w on plateaus
            gain, c = _step_rows(0.5, w)
            for row, rc in t_reads:
                units += [(gain[0] * row, gain[0] * rc + c[0]), (gain[1] * row, gain[1] * rc + c[1])]
                units.append((row, rc + 1.0))
        n_bits_units = len(units)
        if k > 0:
            # select the previous step's bits where the position indicator fires
            for r in range(nbits):
                brow, bc = bit_reads[r]
                irow, ic = ind_reads[k - 1]
                units.append((brow + irow, bc + ic - 1.0))
        n_sel_units = len(units) - n_bits_units
        keep_from = k if k < B else B
        for j in range(keep_from, B):
            irow, ic = (ind[j] if k == 0 else ind_reads[j])
            units.append((irow, ic + 1.0))
        units.append((acc_read[0], acc_read[1] + 1.0))
        n = len(units)
        bldr.add_layer(units, {})
        # new read-outs in terms of this layer's outputs
        bit_reads, t_next = [], []
        for r in range(nbits if k < B else 0):
            base = 3 * r
            brow = _e(n, base) - _e(n, base + 1)
            trow = _e(n, base + 2)
            bit_reads.append((brow, 0.0))
            t_next.append((2.0 * trow - brow, -2.0))
        acc_row = _e(n, n - 1)
        acc_c = -1.0
        for r in range(n_sel_units):
            acc_row = acc_row + 2.0 ** -(r + 1) * _e(n, n_bits_units + r)
        ind_reads = {}
        for off, j in enumerate(range(keep_from, B)):
            ind_reads[j] = (_e(n, n_bits_units + n_sel_units + off), -1.0)
        t_reads = t_next
        acc_read = (acc_row, acc_c)
    prov = {"construction": "fit_points", "N": N, "L": L, "s": s, "bits": nbits, "block": B, "groups": G}
    return bldr.finish([acc_read], prov, bldr.width, len(bldr.layers))


def cell_gate(dim: int, value_bound: float, spill_bound: float, margin: float = 0.02, knee: float = 0.1,
              onset: float = 0.25) -> Network:
    """ReLU network ``(v, z_1..z_dim) -> v`` while every ``z_j >= -margin``, and ``-> 0`` once some ``z_j <= -onset``.

    ``v`` is soft-thresholded by ``q = sum_j a ReLU(-z_j - margin) + b ReLU(-z_j - knee)``: the gentle
    slope ``a`` removes values up to ``value_bound`` by ``z = -knee``, the steep slope ``b`` removes values
    up to ``spill_bound`` by ``z = -onset``.  Past that the output and all its derivatives are exactly
    zero after conversion with a large scale, so nothing of ``v`` leaks through.
    """
    if not 0 <= margin < knee < onset:
        raise ConstructionError("need 0 <= margin < knee < onset")
    a = value_bound / (knee - margin)
    b = max(0.0, 1.05 * spill_bound - a * (onset - margin)) / (onset - knee)
    n_in = 1 + dim
    W1 = np.zeros((2 + 2 * dim, n_in))
    b1 = np.zeros(2 + 2 * dim)
    W1[0, 0], W1[1, 0] = 1.0, -1.0
    for j in range(dim):
        W1[2 + 2 * j, 1 + j] = -1.0
        b1[2 + 2 * j] = -margin
        W1[3 + 2 * j, 1 + j] = -1.0
        b1[3 + 2 * j] = -knee
    q = np.zeros(2 + 2 * dim)
    q[2::2], q[3::2] = a, b
    W2 = np.vstack([np.concatenate([[1.0, -1.0], -q[2:]]), np.concatenate([[-1.0, 1.0], -q[2:]])])
    layers = (AffineLayer(W1, b1), AffineLayer(W2, np.zeros(2)), AffineLayer([[1.0, -1.0]], [0.0]))
    prov = {"construction": "cell_gate", "dim": dim, "slopes": [a, b], "margin": margin, "knee": knee,
            "onset": onset}
    return Network(layers, RELU, ((), ()), prov, 2 + 2 * dim, 2)
