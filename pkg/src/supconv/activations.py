"""Activation catalog with Taylor-series evaluators and decay/nonlinearity audits.

Every entry knows how to produce the normalized Taylor coefficients
``sigma^{(k)}(x)/k!`` on whole arrays of points.  Smooth entries use
Taylor-mode recurrences (``y' = g(y) u'``) rather than finite differences, so
high orders stay accurate far into the tails.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, ndtr

from .jets import MAX_ORDER, uni_exp, uni_mul, uni_ode, uni_recip, uni_variable

INF = math.inf
LN2 = math.log(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

SHAPES = ("s_shaped", "relu_shaped", "piecewise_linear")


class KinkError(ValueError):
    """Raised when a derivative order is requested at a point where it does not exist."""


# ---------------------------------------------------------------------------
# primitive series on arrays shaped (order+1, ...)
# ---------------------------------------------------------------------------

def _sigmoid_series(u: np.ndarray) -> np.ndarray:
    def rate(y, n):
        return y[n] - sum(y[i] * y[n - i] for i in range(n + 1))

    return uni_ode(u, expit(u[0]), rate)


def _tanh_series(u: np.ndarray) -> np.ndarray:
    def rate(y, n):
        return float(n == 0) - sum(y[i] * y[n - i] for i in range(n + 1))

    return uni_ode(u, np.tanh(u[0]), rate)


def _softplus_series(u: np.ndarray) -> np.ndarray:
    sig = _sigmoid_series(u)
    return uni_ode(u, np.logaddexp(0.0, u[0]), lambda y, n: sig[n])


def _ndtr_series(u: np.ndarray) -> np.ndarray:
    density = INV_SQRT_2PI * uni_exp(-0.5 * uni_mul(u, u))
    return uni_ode(u, ndtr(u[0]), lambda y, n: density[n])


def _arctan_series(u: np.ndarray) -> np.ndarray:
    denom = uni_mul(u, u)
    denom[0] = denom[0] + 1.0
    rate = uni_recip(denom)
    return uni_ode(u, np.arctan(u[0]), lambda y, n: rate[n])


def _branch(z: np.ndarray, cond: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    return np.where(cond[None], pos, neg)


def _linear(z: np.ndarray, order: int, slope, offset=0.0) -> np.ndarray:
    out = np.zeros((order + 1,) + z.shape)
    out[0] = slope * z + offset
    if order >= 1:
        out[1] = slope
    return out


def _clipped_variable(z: np.ndarray, order: int, lo=-np.inf, hi=np.inf) -> np.ndarray:
    # series of the identity with the base point clipped; used on inactive branches
    return uni_variable(np.clip(z, lo, hi), order)


def _sigmoid(z, n):
    return _sigmoid_series(uni_variable(z, n))


def _tanh(z, n):
    return _tanh_series(uni_variable(z, n))


def _arctan(z, n):
    return _arctan_series(uni_variable(z, n))


def _dsilu(z, n):
    u = uni_variable(z, n)
    s = _sigmoid_series(u)
    inner = -s
    inner[0] = inner[0] + 1.0
    inner = uni_mul(u, inner)
    inner[0] = inner[0] + 1.0
    return uni_mul(s, inner)


def _srs(z, n, alpha, beta):
    u = uni_variable(z, n)
    e = _exp_clipped(-u / beta)
    return uni_mul(u, uni_recip(u / alpha + e))


def _exp_clipped(v: np.ndarray) -> np.ndarray:
    w = v.copy()
    w[0] = np.minimum(w[0], 700.0)
    return uni_exp(w)


def _softsign(z, n):
    up = _clipped_variable(z, n, lo=0.0)
    un = _clipped_variable(z, n, hi=0.0)
    one = np.zeros_like(up)
    one[0] = 1.0
    return _branch(z, z >= 0, uni_mul(up, uni_recip(one + up)), uni_mul(un, uni_recip(one - un)))


def _hardsigmoid(z, n):
    inside = (z > -1.0) & (z < 1.0)
    out = np.zeros((n + 1,) + z.shape)
    out[0] = np.clip(0.5 * (z + 1.0), 0.0, 1.0)
    if n >= 1:
        out[1] = np.where(inside, 0.5, 0.0)
    return out


def _hardtanh(z, n):
    inside = (z > -1.0) & (z < 1.0)
    out = np.zeros((n + 1,) + z.shape)
    out[0] = np.clip(z, -1.0, 1.0)
    if n >= 1:
        out[1] = np.where(inside, 1.0, 0.0)
    return out


def _relu(z, n):
    out = np.zeros((n + 1,) + z.shape)
    out[0] = np.maximum(z, 0.0)
    if n >= 1:
        out[1] = (z > 0).astype(float)
    return out


def _leaky(z, n, slope):
    return _branch(z, z > 0, _linear(z, n, 1.0), _linear(z, n, slope))


def _elu(z, n, alpha):
    neg = alpha * _exp_clipped(_clipped_variable(z, n, hi=0.0))
    neg[0] = neg[0] - alpha
    return _branch(z, z > 0, uni_variable(z, n), neg)


def _celu(z, n, beta):
    neg = beta * _exp_clipped(_clipped_variable(z, n, hi=0.0) / beta)
    neg[0] = neg[0] - beta
    return _branch(z, z > 0, uni_variable(z, n), neg)


def _selu(z, n, scale, alpha):
    return scale * _elu(z, n, alpha)


def _softplus_centered(z, n):
    out = _softplus_series(uni_variable(z, n))
    out[0] = out[0] - LN2
    return out


def _silu(z, n):
    u = uni_variable(z, n)
    return uni_mul(u, _sigmoid_series(u))


def _mish(z, n):
    u = uni_variable(z, n)
    return uni_mul(u, _tanh_series(_softplus_series(u)))


def _gelu(z, n):
    u = uni_variable(z, n)
    return uni_mul(u, _ndtr_series(u))


def _relu_power(z, n, power):
    zp = np.maximum(z, 0.0)
    out = np.zeros((n + 1,) + z.shape)
    for j in range(min(n, power) + 1):
        out[j] = math.comb(power, j) * zp ** (power - j) * (z > 0)
    return out


# ---------------------------------------------------------------------------
# catalog entries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Activation:
    """A catalog entry.

    ``normalization = (alpha, beta)`` defines ``beta * (sigma + alpha)``, the
    function whose quasi-decay is audited either directly or after division
    by ``x`` (``decay_target``).
    """

    name: str
    shape_class: str
    smoothness: float
    normalization: tuple[float, float]
    decay_target: str
    kinks: tuple[float, ...] = ()
    params: dict = field(default_factory=dict)
    label: str = ""
    _series: Callable = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.shape_class not in SHAPES:
            raise ValueError(f"unknown shape class {self.shape_class}")
        if self.shape_class == "piecewise_linear" and self.smoothness > 1:
            raise ValueError("piecewise linear entries have smoothness at most 1")
        if self.decay_target not in ("sigma", "sigma_over_x"):
            raise ValueError(f"unknown decay target {self.decay_target}")

    @property
    def key(self) -> str:
        return self.label or self.name

    def max_order_at_kink(self) -> int:
        return MAX_ORDER if math.isinf(self.smoothness) else int(self.smoothness) - 1

    def series(self, z, order: int) -> np.ndarray:
        """Normalized Taylor coefficients, shape ``(order+1,) + z.shape``."""
        z = np.asarray(z, dtype=float)
        if not 0 <= order <= MAX_ORDER:
            raise ValueError(f"order {order} outside 0..{MAX_ORDER}")
        if order > self.max_order_at_kink():
            for k in self.kinks:
                if np.any(z == k):
                    raise KinkError(f"{self.key}: order {order} unavailable at kink {k}")
        return self._series(z, order)

    def __call__(self, z) -> np.ndarray:
        return self.series(z, 0)[0]

    def eval_jet(self, x: float, order: int) -> np.ndarray:
        return self.series(np.asarray(float(x)), order)

    def spec(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}

    def normalized_series(self, z, order: int) -> np.ndarray:
        """Series of ``beta * (sigma + alpha)``."""
        shift, scale = self.normalization
        s = self.series(z, order).copy()
        s[0] = s[0] + shift
        return scale * s


def _make(name: str, **params) -> Activation:
    key = name.lower()
    if key == "sigmoid":
        return Activation("sigmoid", "s_shaped", INF, (0.0, 1.0), "sigma", _series=_sigmoid)
    if key == "tanh":
        return Activation("tanh", "s_shaped", INF, (1.0, 0.5), "sigma", _series=_tanh)
    if key == "arctan":
        return Activation("arctan", "s_shaped", INF, (math.pi / 2, 1.0 / math.pi), "sigma", _series=_arctan)
    if key == "dsilu":
        return Activation("dsilu", "s_shaped", INF, (0.0, 1.0), "sigma", _series=_dsilu)
    if key == "srs":
        a, b = float(params.get("alpha", 3.0)), float(params.get("beta", 2.0))
        if not b < a * math.e:
            raise ValueError("SRS requires beta < alpha * e")
        return Activation("srs", "s_shaped", INF, (0.0, 1.0 / a), "sigma", params={"alpha": a, "beta": b},
                          _series=lambda z, n: _srs(z, n, a, b))
    if key == "softsign":
        return Activation("softsign", "s_shaped", 2, (1.0, 0.5), "sigma", kinks=(0.0,), _series=_softsign)
    if key == "hardsigmoid":
        return Activation("hardsigmoid", "piecewise_linear", 1, (0.0, 1.0), "sigma", kinks=(-1.0, 1.0),
                          _series=_hardsigmoid)
    if key == "hardtanh":
        return Activation("hardtanh", "piecewise_linear", 1, (1.0, 0.5), "sigma", kinks=(-1.0, 1.0),
                          _series=_hardtanh)
    if key == "relu":
        return Activation("relu", "piecewise_linear", 1, (0.0, 1.0), "sigma_over_x", kinks=(0.0,), _series=_relu)
    if key == "leakyrelu":
        s = float(params.get("slope", 0.01))
        return Activation("leakyrelu", "piecewise_linear", 1, (0.0, 1.0), "sigma_over_x", kinks=(0.0,),
                          params={"slope": s}, _series=lambda z, n: _leaky(z, n, s))
    if key == "elu":
        a = float(params.get("alpha", 1.0))
        return Activation("elu", "relu_shaped", 2 if a == 1.0 else 1, (0.0, 1.0), "sigma_over_x", kinks=(0.0,),
                          params={"alpha": a}, label=f"elu(alpha={a:g})", _series=lambda z, n: _elu(z, n, a))
    if key == "celu":
        b = float(params.get("beta", 1.0))
        return Activation("celu", "relu_shaped", 2, (0.0, 1.0), "sigma_over_x", kinks=(0.0,),
                          params={"beta": b}, _series=lambda z, n: _celu(z, n, b))
    if key == "selu":
        lam = float(params.get("scale", SELU_LAMBDA))
        a = float(params.get("alpha", SELU_ALPHA))
        return Activation("selu", "relu_shaped", 2 if a == 1.0 else 1, (0.0, 1.0 / lam), "sigma_over_x",
                          kinks=(0.0,), params={"scale": lam, "alpha": a}, label=f"selu(alpha={a:g})",
                          _series=lambda z, n: _selu(z, n, lam, a))
    if key == "softplus":
        return Activation("softplus", "relu_shaped", INF, (0.0, 1.0), "sigma_over_x", _series=_softplus_centered)
    if key == "silu":
        return Activation("silu", "relu_shaped", INF, (0.0, 1.0), "sigma_over_x", _series=_silu)
    if key == "mish":
        return Activation("mish", "relu_shaped", INF, (0.0, 1.0), "sigma_over_x", _series=_mish)
    if key == "gelu":
        return Activation("gelu", "relu_shaped", INF, (0.0, 1.0), "sigma_over_x", _series=_gelu)
    if key.startswith("relu") and key[4:].isdigit() or key == "relupower":
        p = int(params.get("power", key[4:] if key[4:].isdigit() else 2))
        if not 1 <= p <= 4:
            raise ValueError("ReLU powers are supported up to 4")
        if p == 1:
            return _make("relu")
        return Activation(f"relu{p}", "relu_shaped", p, (0.0, 1.0), "sigma_over_x", kinks=(0.0,),
                          _series=lambda z, n: _relu_power(z, n, p))
    raise KeyError(f"unknown activation {name!r}")


def _mp_table(act: Activation) -> tuple[Callable, Callable]:
    import mpmath as mp

    name, prm = act.name, act.params
    if name == "sigmoid":
        f = lambda z: 1 / (1 + mp.exp(-z))
        return f, lambda z: f(z) * (1 - f(z))
    if name == "tanh":
        return mp.tanh, lambda z: 1 - mp.tanh(z) ** 2
    if name == "arctan":
        return mp.atan, lambda z: 1 / (1 + z * z)
    if name == "softsign":
        return lambda z: z / (1 + abs(z)), lambda z: 1 / (1 + abs(z)) ** 2
    if name == "softplus":
        return lambda z: mp.log1p(mp.exp(z)), lambda z: 1 / (1 + mp.exp(-z))
    if name == "silu":
        sg = lambda z: 1 / (1 + mp.exp(-z))
        return lambda z: z * sg(z), lambda z: sg(z) * (1 + z * (1 - sg(z)))
    if name == "gelu":
        return lambda z: z * mp.ncdf(z), lambda z: mp.ncdf(z) + z * mp.npdf(z)
    if name == "relu":
        return lambda z: max(z, 0), lambda z: mp.mpf(1) if z > 0 else mp.mpf(0)
    if name == "elu":
        a = prm["alpha"]
        return (lambda z: z if z > 0 else a * mp.expm1(z)), (lambda z: mp.mpf(1) if z > 0 else a * mp.exp(z))
    raise NotImplementedError(f"no extended-precision form for {act.key}")


def mp_value_and_slope(act: Activation, z) -> tuple:
    """``(sigma(z), sigma'(z))`` in mpmath precision (current ``mp.dps``)."""
    f, df = _mp_table(act)
    return f(z), df(z)


def get_activation(name: str, **params) -> Activation:
    """Look up a catalog entry by (case-insensitive) name with optional parameters."""
    return _make(name, **params)


def from_spec(spec: dict) -> Activation:
    return get_activation(spec["name"], **spec.get("params", {}))


def catalog() -> list[Activation]:
    """Every supported entry, including the parameter variants that matter for smoothness."""
    names = ["sigmoid", "tanh", "arctan", "dsilu", "srs", "softsign", "hardsigmoid", "hardtanh",
             "relu", "leakyrelu"]
    out = [get_activation(n) for n in names]
    out += [get_activation("elu", alpha=1.0), get_activation("elu", alpha=0.5), get_activation("celu"),
            get_activation("selu"), get_activation("selu", alpha=1.0)]
    out += [get_activation(n) for n in ("softplus", "silu", "mish", "gelu", "relu2", "relu3", "relu4")]
    return out


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------

@dataclass
class ConditionReport:
    condition: str
    activation: str
    passed: bool
    order_checked: int
    witness: dict | None = None
    fitted_constants: dict | None = None
    grid_spec: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def check_condition2(act: Activation, search_interval=(-2.0, 2.0), points: int = 401,
                     kink_margin: float = 0.05, threshold: float = 1e-8) -> ConditionReport:
    """Search a grid for a point with a smooth neighborhood and nonzero second derivative.

    Among qualifying grid points the one with the largest ``|sigma''|`` wins,
    ties broken towards the origin and then towards positive points.
    """
    lo, hi = map(float, search_interval)
    if not hi > lo:
        raise ValueError("degenerate search interval")
    grid = np.linspace(lo, hi, points)
    dist = np.full_like(grid, np.inf)
    for k in act.kinks:
        dist = np.minimum(dist, np.abs(grid - k))
    grid = grid[dist > kink_margin]
    dist = dist[dist > kink_margin]
    second = 2.0 * act.series(grid, 2)[2] if grid.size else np.zeros(0)
    good = np.abs(second) > threshold
    spec = {"interval": [lo, hi], "points": points, "kink_margin": kink_margin, "threshold": threshold}
    if not np.any(good):
        return ConditionReport("nonlinearity", act.key, False, 2, None, None, spec)
    order = sorted(np.flatnonzero(good), key=lambda i: (-round(abs(second[i]), 10), abs(grid[i]), grid[i] < 0))
    best = order[0]
    a = float(np.round(grid[best], 12))
    witness = {"a": a, "sigma2": float(2.0 * act.eval_jet(a, 2)[2]), "radius": float(dist[best])}
    return ConditionReport("nonlinearity", act.key, True, 2, witness, None, spec)


def decay_target_series(act: Activation, x: np.ndarray, order: int) -> np.ndarray:
    """Series of ``sigma~`` or ``sigma~/x`` at nonzero ``x``."""
    s = act.normalized_series(x, order)
    if act.decay_target == "sigma":
        return s
    recip = np.array([(-1.0) ** k / x ** (k + 1) for k in range(order + 1)])
    return uni_mul(s, recip)


def check_condition1(act: Activation, m: int, tail_range=(4.0, 40.0), origin_range=(-4.0, 4.0),
                     points: int = 64, slack: float = 0.25, floor: float = 1e-13,
                     origin_bound: float = 1e6) -> ConditionReport:
    """Audit the quasi-decay condition up to order ``m`` by tail-exponent fitting."""
    if m > act.smoothness:
        raise ValueError(f"order {m} exceeds smoothness {act.smoothness} of {act.key}")
    lo, hi = map(float, tail_range)
    if not 0 < lo < hi:
        raise ValueError("tail range must be positive and exclude 0")
    tail = np.logspace(math.log10(lo), math.log10(hi), points)
    o_lo, o_hi = map(float, origin_range)
    n_origin = 4000
    step = (o_hi - o_lo) / n_origin
    origin = o_lo + (np.arange(n_origin) + 0.5) * step
    origin = origin[origin != 0.0]
    fits: dict = {}
    passed = True
    fact = [math.factorial(k) for k in range(m + 1)]
    origin_series = decay_target_series(act, origin, m)
    for side, xs in (("+", tail), ("-", -tail)):
        ser = decay_target_series(act, xs, m)
        heaviside = 1.0 if side == "+" else 0.0
        for k in range(m + 1):
            deriv = fact[k] * ser[k]
            err = np.abs(deriv - (heaviside if k == 0 else 0.0))
            keep = err > floor
            if keep.sum() < 4:
                slope = -math.inf
            else:
                slope = float(np.polyfit(np.log(tail[keep]), np.log(err[keep]), 1)[0])
            bound_ratio = float(np.max(err * tail ** (k + 1)))
            ok = slope <= -(k + 1) + slack
            passed &= ok
            fits[f"k={k},side={side}"] = {"exponent": slope, "sup_ratio": bound_ratio, "ok": bool(ok)}
    for k in range(m + 1):
        g = float(np.max(np.abs(fact[k] * origin_series[k])))
        ok = math.isfinite(g) and g <= origin_bound
        passed &= ok
        fits[f"k={k},origin_sup"] = g
    spec = {"tail_range": [lo, hi], "points_per_side": points, "origin_range": [o_lo, o_hi],
            "slack": slack, "floor": floor}
    return ConditionReport("quasi_decay", act.key, bool(passed), m, None, fits, spec)


TABLE_GROUPS = ("m=0", "m<=max(1,n-1)", "m<=max(2,n-1)", "0<=m<n")


def table_group(act: Activation) -> str:
    """Derivative range covered by the super-convergence result, decided by the audits."""
    if act.smoothness <= 1:
        return "m<=max(1,n-1)"
    if not check_condition2(act).passed:
        return "m=0"
    if act.smoothness >= 3 and check_condition1(act, 3).passed:
        return "0<=m<n"
    if check_condition1(act, 2).passed:
        return "m<=max(2,n-1)"
    return "m=0"
