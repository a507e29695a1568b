"""Feedforward networks with a shared activation: evaluation, jets, combinators, JSON.

A network with ``L`` hidden layers holds ``L + 1`` affine maps.  Hidden units
listed in ``skip_channels`` bypass the activation (exact pass-through
channels); every other hidden unit applies the shared activation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .activations import Activation, from_spec, mp_value_and_slope
from .jets import Jet, multi_indices, series_compose

# weight matrices beyond this many entries are kept in CSR form in memory
SPARSE_THRESHOLD = 250_000
CHUNK = 1024


class NetworkError(ValueError):
    """Structural problems: dimension or activation mismatch, bad serialized data."""


def _matrix(w):
    if sp.issparse(w):
        return w.tocsr().astype(float)
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.size > SPARSE_THRESHOLD:
        return sp.csr_matrix(w)
    return w


def _dense(w) -> np.ndarray:
    return w.toarray() if sp.issparse(w) else np.asarray(w)


def _finite(w) -> bool:
    data = w.data if sp.issparse(w) else w
    return bool(np.all(np.isfinite(data)))


@dataclass(frozen=True)
class AffineLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w = _matrix(self.weights)
        b = np.asarray(self.bias, dtype=float).reshape(-1)
        if w.shape[0] != b.size:
            raise NetworkError(f"bias length {b.size} does not match {w.shape[0]} rows")
        if not (_finite(w) and np.all(np.isfinite(b))):
            raise NetworkError("non-finite weight or bias")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def dense(self) -> np.ndarray:
        return _dense(self.weights)

    def matmul(self, x: np.ndarray) -> np.ndarray:
        """``W @ x`` for ``x`` of shape ``(in_dim, n)``."""
        return self.weights @ x


@dataclass(frozen=True)
class Network:
    layers: tuple
    activation: Activation
    skip_channels: tuple = ()
    provenance: dict = field(default_factory=dict)
    declared_width: int = 0
    declared_depth: int = 0

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise NetworkError("a network needs at least one affine layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise NetworkError(f"layer size mismatch {a.out_dim} -> {b.in_dim}")
        skips = tuple(tuple(sorted(int(i) for i in s)) for s in self.skip_channels) or tuple(
            () for _ in layers[:-1])
        if len(skips) != len(layers) - 1:
            raise NetworkError("skip_channels needs one entry per hidden layer")
        for s, layer in zip(skips, layers[:-1]):
            if s and (s[0] < 0 or s[-1] >= layer.out_dim):
                raise NetworkError("skip channel index out of range")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "skip_channels", skips)
        width = max([layer.out_dim for layer in layers[:-1]], default=0)
        object.__setattr__(self, "declared_width", max(int(self.declared_width), width))
        object.__setattr__(self, "declared_depth", max(int(self.declared_depth), len(layers) - 1))

    # -- shape ---------------------------------------------------------------
    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def width(self) -> int:
        return max([layer.out_dim for layer in self.layers[:-1]], default=0)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def active_mask(self, k: int) -> np.ndarray:
        mask = np.ones(self.layers[k].out_dim, dtype=bool)
        mask[list(self.skip_channels[k])] = False
        return mask

    def with_meta(self, provenance: dict | None = None, width: int | None = None,
                  depth: int | None = None) -> "Network":
        return Network(self.layers, self.activation, self.skip_channels,
                       provenance if provenance is not None else self.provenance,
                       width if width is not None else self.declared_width,
                       depth if depth is not None else self.declared_depth)

    def __call__(self, x) -> np.ndarray:
        return evaluate(self, x)


def _as_points(net: Network, x) -> tuple[np.ndarray, str]:
    """Rows of points plus how the caller shaped them (``single``, ``flat`` or ``rows``)."""
    x = np.asarray(x, dtype=float)
    if net.input_dim == 1 and x.ndim <= 1:
        return x.reshape(-1, 1), "single" if x.ndim == 0 else "flat"
    if x.ndim == 1:
        pts, kind = x.reshape(1, -1), "single"
    else:
        pts, kind = x, "rows"
    if pts.shape[1] != net.input_dim:
        raise NetworkError(f"input dimension {pts.shape[1]} != {net.input_dim}")
    return pts, kind


def evaluate(net: Network, x) -> np.ndarray:
    """Forward pass.  ``x`` is a point or an array of points (rows)."""
    pts, kind = _as_points(net, x)
    out = np.empty((pts.shape[0], net.output_dim))
    for start in range(0, pts.shape[0], CHUNK):
        h = pts[start:start + CHUNK].T
        for k, layer in enumerate(net.layers):
            h = np.asarray(layer.matmul(h)) + layer.bias[:, None]
            if k < net.depth:
                mask = net.active_mask(k)
                if mask.all():
                    h = net.activation(h)
                else:
                    h[mask] = net.activation(h[mask])
        out[start:start + CHUNK] = h.T
    if kind == "single":
        return out[0]
    if kind == "flat" and net.output_dim == 1:
        return out[:, 0]
    return out


def evaluate_jets(net: Network, points, order: int) -> np.ndarray:
    """Jets of every output at every point, shape ``(npoints, out_dim, ncoef)``."""
    pts, _ = _as_points(net, points)
    dim = net.input_dim
    mids = multi_indices(dim, order)
    nc = len(mids)
    unit_slots = [mids.index(tuple(int(k == i) for k in range(dim))) for i in range(dim)] if order else []
    out = np.empty((pts.shape[0], net.output_dim, nc))
    for start in range(0, pts.shape[0], CHUNK):
        chunk = pts[start:start + CHUNK]
        npt = chunk.shape[0]
        h = np.zeros((nc, dim, npt))
        h[0] = chunk.T
        for i, slot in enumerate(unit_slots):
            h[slot, i] = 1.0
        for k, layer in enumerate(net.layers):
            win = h.shape[1]
            flat = h.transpose(1, 0, 2).reshape(win, nc * npt)
            z = np.asarray(layer.matmul(flat)).reshape(layer.out_dim, nc, npt).transpose(1, 0, 2)
            z[0] += layer.bias[:, None]
            if k < net.depth:
                mask = net.active_mask(k)
                sub = z[:, mask, :]
                ser = net.activation.series(sub[0], order)
                z[:, mask, :] = series_compose(ser, sub, dim, order)
            h = z
        out[start:start + npt] = h.transpose(2, 1, 0)
    return out


def evaluate_jet(net: Network, x, order: int):
    """Jet of the network at one point (a list of jets for vector outputs)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    coeffs = evaluate_jets(net, x.reshape(1, -1), order)[0]
    jets = [Jet(net.input_dim, order, c) for c in coeffs]
    return jets[0] if len(jets) == 1 else jets


# ---------------------------------------------------------------------------
# constructors and combinators
# ---------------------------------------------------------------------------

def evaluate_mp(net: Network, xs: Sequence[float], dps: int = 50) -> list[tuple]:
    """Value and first derivative of a scalar one-input network in extended precision.

    Used where float64 roundoff hides errors far below ``1e-16``.
    """
    import mpmath as mp

    if net.input_dim != 1 or net.output_dim != 1:
        raise NetworkError("extended-precision evaluation supports scalar networks only")
    mats = []
    for layer in net.layers:
        W = layer.dense()
        mats.append(([[mp.mpf(float(w)) for w in row] for row in W], [mp.mpf(float(b)) for b in layer.bias]))
    out = []
    with mp.workdps(dps):
        for x in xs:
            val, der = [mp.mpf(float(x))], [mp.mpf(1)]
            for k, (W, b) in enumerate(mats):
                z = [mp.fsum(w * v for w, v in zip(row, val)) + bi for row, bi in zip(W, b)]
                dz = [mp.fsum(w * d for w, d in zip(row, der)) for row in W]
                if k == len(mats) - 1:
                    val, der = z, dz
                    break
                skips = set(net.skip_channels[k])
                val, der = [], []
                for i, (zi, dzi) in enumerate(zip(z, dz)):
                    if i in skips:
                        val.append(zi)
                        der.append(dzi)
                    else:
                        f, df = mp_value_and_slope(net.activation, zi)
                        val.append(f)
                        der.append(df * dzi)
            out.append((val[0], der[0]))
    return out


def affine_network(weights, bias, activation: Activation, provenance: dict | None = None) -> Network:
    return Network((AffineLayer(weights, bias),), activation, (), provenance or {"construction": "affine"})


def identity_network(dim: int, activation: Activation) -> Network:
    return affine_network(np.eye(dim), np.zeros(dim), activation, {"construction": "identity_affine"})


def _check_activation(nets: Sequence[Network]) -> None:
    spec = nets[0].activation.spec()
    for n in nets[1:]:
        if n.activation.spec() != spec:
            raise NetworkError("networks use different activations")


def compose(outer: Network, inner: Network, provenance: dict | None = None) -> Network:
    """``outer(inner(x))`` with the interface affine maps fused."""
    _check_activation([outer, inner])
    if inner.output_dim != outer.input_dim:
        raise NetworkError(f"cannot feed {inner.output_dim} outputs into {outer.input_dim} inputs")
    a, b = inner.layers[-1], outer.layers[0]
    fused = AffineLayer(b.weights @ a.weights, b.matmul(a.bias[:, None]).reshape(-1) + b.bias)
    layers = inner.layers[:-1] + (fused,) + outer.layers[1:]
    prov = provenance or {"construction": "compose", "outer": outer.provenance.get("construction"),
                          "inner": inner.provenance.get("construction")}
    return Network(layers, outer.activation, inner.skip_channels + outer.skip_channels, prov,
                   max(outer.declared_width, inner.declared_width),
                   outer.declared_depth + inner.declared_depth)


def pad_skip(net: Network, extra: int) -> Network:
    """Append ``extra`` hidden layers that carry the outputs through skip channels."""
    if extra <= 0:
        return net
    k = net.output_dim
    eye = np.eye(k)
    ident = AffineLayer(eye, np.zeros(k))
    layers = net.layers + (ident,) * extra
    skips = net.skip_channels + (tuple(range(k)),) * extra
    return Network(layers, net.activation, skips, net.provenance,
                   max(net.declared_width, k), net.declared_depth + extra)


def _block_diag(mats):
    total = sum(m.shape[0] * m.shape[1] for m in mats)
    if total > SPARSE_THRESHOLD or any(sp.issparse(m) for m in mats):
        return sp.block_diag([sp.csr_matrix(m) for m in mats], format="csr")
    out = np.zeros((sum(m.shape[0] for m in mats), sum(m.shape[1] for m in mats)))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def _vstack(mats):
    if any(sp.issparse(m) for m in mats) or sum(m.shape[0] * m.shape[1] for m in mats) > SPARSE_THRESHOLD:
        return sp.vstack([sp.csr_matrix(m) for m in mats], format="csr")
    return np.vstack(mats)


def parallel(nets: Sequence[Network], pad: Callable[[Network, int], Network] | None = None,
             provenance: dict | None = None) -> Network:
    """Run networks side by side on a shared input; outputs are concatenated.

    Shorter members are padded to the common depth by ``pad`` (skip channels
    by default).
    """
    nets = list(nets)
    if not nets:
        raise NetworkError("nothing to stack")
    _check_activation(nets)
    if len({n.input_dim for n in nets}) != 1:
        raise NetworkError("parallel members need the same input dimension")
    pad = pad or pad_skip
    depth = max(n.depth for n in nets)
    nets = [pad(n, depth - n.depth) for n in nets]
    layers = [AffineLayer(_vstack([n.layers[0].weights for n in nets]),
                          np.concatenate([n.layers[0].bias for n in nets]))]
    for k in range(1, depth + 1):
        layers.append(AffineLayer(_block_diag([n.layers[k].weights for n in nets]),
                                  np.concatenate([n.layers[k].bias for n in nets])))
    skips = []
    for k in range(depth):
        offset, s = 0, []
        for n in nets:
            s.extend(offset + i for i in n.skip_channels[k])
            offset += n.layers[k].out_dim
        skips.append(tuple(s))
    prov = provenance or {"construction": "parallel", "members": [n.provenance.get("construction") for n in nets]}
    return Network(tuple(layers), nets[0].activation, tuple(skips), prov,
                   sum(n.declared_width for n in nets), max(n.declared_depth for n in nets))


def affine_post(net: Network, A, b=None, provenance: dict | None = None) -> Network:
    """``A net(x) + b``."""
    A = np.atleast_2d(np.asarray(A, dtype=float)) if not sp.issparse(A) else A
    last = net.layers[-1]
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float).reshape(-1)
    new = AffineLayer(A @ last.weights, np.asarray(A @ last.bias).reshape(-1) + b)
    return Network(net.layers[:-1] + (new,), net.activation, net.skip_channels,
                   provenance or net.provenance, net.declared_width, net.declared_depth)


def affine_pre(net: Network, A, b=None, provenance: dict | None = None) -> Network:
    """``net(A x + b)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    first = net.layers[0]
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float).reshape(-1)
    new = AffineLayer(first.weights @ A, first.matmul(b[:, None]).reshape(-1) + first.bias)
    return Network((new,) + net.layers[1:], net.activation, net.skip_channels,
                   provenance or net.provenance, net.declared_width, net.declared_depth)


def linear_combination(nets: Sequence[Network], coefficients: Sequence[float],
                       pad: Callable[[Network, int], Network] | None = None,
                       provenance: dict | None = None) -> Network:
    """``sum_k c_k net_k(x)`` for networks with equal output dimension."""
    nets = list(nets)
    if len(nets) != len(coefficients):
        raise NetworkError("one coefficient per network")
    k = nets[0].output_dim
    if any(n.output_dim != k for n in nets):
        raise NetworkError("output dimensions differ")
    stacked = parallel(nets, pad)
    A = np.hstack([c * np.eye(k) for c in coefficients])
    prov = provenance or {"construction": "linear_combination",
                          "members": [n.provenance.get("construction") for n in nets]}
    return affine_post(stacked, A, None, prov)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _hex(a: np.ndarray) -> str:
    return np.ascontiguousarray(a, dtype=">f8").tobytes().hex()


def _unhex(s: str, n: int) -> np.ndarray:
    raw = bytes.fromhex(s)
    if len(raw) != 8 * n:
        raise NetworkError("hex payload has the wrong length")
    return np.frombuffer(raw, dtype=">f8").astype(float)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def serialize(net: Network) -> bytes:
    """Canonical JSON; weights are big-endian binary64 in hex, so round trips are bit-exact."""
    doc = {
        "activation": net.activation.spec(),
        "layers": [{"rows": layer.out_dim, "cols": layer.in_dim, "weights_hex": _hex(layer.dense()),
                    "bias_hex": _hex(layer.bias)} for layer in net.layers],
        "skip_channels": [list(s) for s in net.skip_channels],
        "provenance": _jsonable(net.provenance),
        "declared_width": int(net.declared_width),
        "declared_depth": int(net.declared_depth),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def deserialize(data: bytes | str) -> Network:
    try:
        doc = json.loads(data)
    except (ValueError, TypeError) as exc:
        raise NetworkError(f"not JSON: {exc}") from exc
    required = {"activation", "layers", "skip_channels", "provenance", "declared_width", "declared_depth"}
    if not isinstance(doc, dict) or not required <= doc.keys():
        raise NetworkError(f"missing keys: {sorted(required - set(doc))}")
    try:
        act = from_spec(doc["activation"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkError(f"bad activation: {exc}") from exc
    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise NetworkError("empty layer list")
    layers = []
    for item in doc["layers"]:
        try:
            rows, cols = int(item["rows"]), int(item["cols"])
            w = _unhex(item["weights_hex"], rows * cols).reshape(rows, cols)
            b = _unhex(item["bias_hex"], rows)
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkError(f"bad layer: {exc}") from exc
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NetworkError("NaN or Inf weight")
        layers.append(AffineLayer(w, b))
    return Network(tuple(layers), act, tuple(tuple(s) for s in doc["skip_channels"]), doc["provenance"],
                   int(doc["declared_width"]), int(doc["declared_depth"]))


def networks_equal(a: Network, b: Network) -> bool:
    """Bit-exact equality of weights, biases and structure."""
    if len(a.layers) != len(b.layers) or a.skip_channels != b.skip_channels:
        return False
    if a.activation.spec() != b.activation.spec():
        return False
    for la, lb in zip(a.layers, b.layers):
        wa, wb = la.dense(), lb.dense()
        if wa.shape != wb.shape or wa.tobytes() != wb.tobytes() or la.bias.tobytes() != lb.bias.tobytes():
            return False
    return True
