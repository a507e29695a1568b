"""Grid-based Sobolev errors, the product-norm inequality and convergence-order fits."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .jets import factorials, multi_indices, series_mul
from .localpoly import TargetFunction
from .network import Network, evaluate_jets

# uniform points per dimension for the default tensor grid; d >= 2 is thinned for desk-scale runs
UNIFORM_POINTS = {1: 4097, 2: 257, 3: 33, 4: 17}
RANDOM_POINTS = 256


@dataclass
class Grid:
    points: np.ndarray
    spec: dict

    def restrict(self, keep: np.ndarray, note: str) -> "Grid":
        spec = dict(self.spec)
        spec["restriction"] = note
        return Grid(self.points[keep], spec)


def make_grid(box: Sequence[tuple[float, float]], n_uniform: int | None = None,
              n_random: int = RANDOM_POINTS, seed: int = 0) -> Grid:
    """Cell-centred tensor grid (half-step offset) plus scrambled Sobol points."""
    box = [(float(lo), float(hi)) for lo, hi in box]
    d = len(box)
    n = n_uniform or UNIFORM_POINTS.get(d, 9)
    axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    if n_random:
        sob = qmc.Sobol(d, scramble=True, seed=seed).random(n_random)
        lo = np.array([b[0] for b in box])
        hi = np.array([b[1] for b in box])
        pts = np.vstack([pts, lo + sob * (hi - lo)])
    return Grid(pts, {"box": box, "uniform_per_dim": n, "random": n_random, "seed": seed})


def jets_of(obj, points: np.ndarray, order: int) -> np.ndarray:
    """Normalized jets ``(npoints, ncoef)`` of a scalar network or target."""
    if isinstance(obj, Network):
        return evaluate_jets(obj, points, order)[:, 0, :]
    if isinstance(obj, TargetFunction):
        return obj.jets(points, order)
    raise TypeError(f"cannot take jets of {type(obj).__name__}")


@dataclass
class SobolevErrorReport:
    order: int
    per_alpha: dict
    combined: float
    grid_spec: dict = field(default_factory=dict)

    def per_order(self) -> list[float]:
        """Largest error over multi-indices of each total order."""
        out = [0.0] * (self.order + 1)
        for key, v in self.per_alpha.items():
            k = sum(json.loads(key))
            out[k] = max(out[k], v)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def sobolev_error(f, phi, m: int, grid: Grid | None = None, box=None) -> SobolevErrorReport:
    """``max_alpha sup_grid |D^alpha (f - phi)|`` with the per-multi-index breakdown."""
    if grid is None:
        if box is None:
            raise ValueError("need a grid or a box")
        grid = make_grid(box)
    diff = jets_of(f, grid.points, m) - jets_of(phi, grid.points, m)
    dim = grid.points.shape[1]
    raw = np.abs(diff) * factorials(dim, m)
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError("non-finite jet encountered on the grid")
    sup = raw.max(axis=0) if raw.size else np.zeros(raw.shape[1])
    per = {json.dumps(list(a)): float(s) for a, s in zip(multi_indices(dim, m), sup)}
    return SobolevErrorReport(m, per, float(sup.max()), grid.spec)


def sobolev_norm(f, m: int, grid: Grid) -> float:
    dim = grid.points.shape[1]
    return float(np.max(np.abs(jets_of(f, grid.points, m)) * factorials(dim, m)))


# ---------------------------------------------------------------------------
# convergence orders
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    param_name: str
    params: list
    errors: list
    slope: float | None = None
    r2: float | None = None
    target_order: float | None = None
    reports: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_order(params: Sequence[float], errors: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of log(error) against log(param), plus R^2."""
    p = np.asarray(params, dtype=float)
    e = np.asarray(errors, dtype=float)
    if p.size < 3:
        raise ValueError("need at least three sweep points")
    if np.any(e <= 0) or np.any(p <= 0):
        raise ValueError("errors and parameters must be positive")
    x, y = np.log(p), np.log(e)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    return float(slope), r2


def convergence_report(param_name: str, params, errors, target_order=None, reports=None) -> ConvergenceReport:
    slope, r2 = fit_order(params, errors)
    return ConvergenceReport(param_name, [float(p) for p in params], [float(e) for e in errors], slope, r2,
                             target_order, list(reports or []))


def report_csv(reports: Sequence[ConvergenceReport]) -> str:
    """CSV rows ``param_name, param_value, alpha, sup_error, combined, slope, r2``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param_name", "param_value", "alpha", "sup_error", "combined", "slope", "r2"])
    for rep in reports:
        for value, err, sub in zip(rep.params, rep.errors, rep.reports or [None] * len(rep.params)):
            alphas = sub["per_alpha"] if sub else {"*": err}
            for alpha, s in alphas.items():
                w.writerow([rep.param_name, repr(value), alpha, repr(float(s)), repr(float(err)),
                            repr(rep.slope), repr(rep.r2)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# product inequality
# ---------------------------------------------------------------------------

@dataclass
class InequalityReport:
    holds: bool
    lhs: float
    rhs: float
    order: int


def check_product_inequality(f, g, m: int, grid: Grid) -> InequalityReport:
    """Grid check of ``||f g||_{W^{m,inf}} <= 2^m ||f||_{W^{m,inf}} ||g||_{W^{m,inf}}``."""
    dim = grid.points.shape[1]
    jf = jets_of(f, grid.points, m)
    jg = jets_of(g, grid.points, m)
    prod = series_mul(jf.T, jg.T, dim, m).T
    fac = factorials(dim, m)
    lhs = float(np.max(np.abs(prod) * fac))
    rhs = 2.0 ** m * float(np.max(np.abs(jf) * fac)) * float(np.max(np.abs(jg) * fac))
    return InequalityReport(lhs <= rhs * (1 + 1e-12), lhs, rhs, m)


def kink_free(points: np.ndarray, kinks: Sequence[float], margin: float) -> np.ndarray:
    """Mask of points farther than ``margin`` from every kink (coordinatewise)."""
    keep = np.ones(points.shape[0], dtype=bool)
    for k in kinks:
        keep &= np.all(np.abs(points - k) > margin, axis=1)
    return keep


def function_target(name: str, dim: int, fn: Callable[[np.ndarray, int], np.ndarray]) -> TargetFunction:
    return TargetFunction(name, dim, fn)
