"""Command-line front end: audits, primitive builds, assembly, evaluation, sweeps and partition checks.

Exit codes: 0 success, 1 contract violation (measured error above the requested
tolerance, failed audit, broken budget), 2 usage error.  Diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import qmc

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .activations import check_condition1, check_condition2, get_activation
from .assembler import AssemblyPlan, build_full_approx, global_error
from .constructions import (BuildRequest, ConstructionError, build_monomial, build_primitive,
                            build_relu_power, build_relu_unit)
from .localpoly import (TARGET_NAMES, eval_piecewise_jets, local_piecewise, piecewise_target, polynomial_target,
                        relu_power_target, target_by_name)
from .metrics import ConvergenceReport, fit_order, make_grid, report_csv, sobolev_error
from .network import Network, NetworkError, deserialize, serialize
from .partition import partition_sum, patterns, support_violations

WORKERS_ENV = "SUPCONV_WORKERS"
EXIT_OK, EXIT_CONTRACT, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# io helpers
# ---------------------------------------------------------------------------

def write_atomic(path: str, data: bytes | str) -> None:
    """Write through a temporary file in the same directory, then rename over ``path``."""
    if isinstance(data, str):
        data = data.encode()
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _activation(name: str):
    try:
        return get_activation(name)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"unknown activation {name!r}") from exc


def _target(name: str):
    try:
        return target_by_name(name)
    except KeyError as exc:
        raise UsageError(f"unknown target {name!r}; choose from {', '.join(TARGET_NAMES)}") from exc


def _load_network(path: str) -> Network:
    try:
        with open(path, "rb") as fh:
            return deserialize(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except (NetworkError, ValueError, KeyError) as exc:
        raise UsageError(f"{path} is not a network file: {exc}") from exc


# ---------------------------------------------------------------------------
# replay contracts
# ---------------------------------------------------------------------------

def replay_contract(net: Network):
    """Target, box and derivative order a network file promises, read from its provenance."""
    prov = net.provenance
    kind = prov.get("construction")
    order = int(prov.get("order", 2))
    if kind in ("square", "product", "identity"):
        R = float(prov.get("R", 1.0))
        alpha = {"square": (2,), "product": (1, 1), "identity": (1,)}[kind]
        return polynomial_target({alpha: 1.0}), [(-R, R)] * len(alpha), order
    if kind == "monomial":
        alpha = tuple(prov["alpha"])
        M = float(prov.get("M", 1.0))
        return polynomial_target({alpha: 1.0}, len(alpha)), [(-M, M)] * len(alpha), order
    if kind == "relu_power":
        M = float(prov.get("M", 1.0))
        return relu_power_target(int(prov["m"]) + 1), [(-M, M)], int(prov.get("order", prov["m"]))
    if kind == "full_approx":
        plan = prov["plan"]
        return _target(plan["target"]), [(0.0, 1.0)] * int(plan["d"]), int(plan["m"])
    raise UsageError(f"no replay contract for construction {kind!r}; pass --target")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_audit(args) -> int:
    act = _activation(args.activation)
    if args.condition == "nonlinearity":
        report = check_condition2(act)
    else:
        if args.order is None:
            raise UsageError("--order is required for the quasi-decay audit")
        try:
            report = check_condition1(act, args.order)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    print(_dump(report.to_dict()))
    return EXIT_OK if report.passed else EXIT_CONTRACT


def _parse_alpha(text: str | None) -> tuple[int, ...]:
    if not text:
        raise UsageError("--alpha is required for --kind monomial")
    try:
        alpha = tuple(int(a) for a in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad multi-index {text!r}") from exc
    if any(a < 0 for a in alpha) or sum(alpha) == 0:
        raise UsageError("multi-index needs nonnegative entries and positive total degree")
    return alpha


def cmd_build(args) -> int:
    act = _activation(args.activation)
    if args.M <= 0:
        raise UsageError("--M must be positive")
    if args.kind == "monomial":
        net = build_monomial(act, _parse_alpha(args.alpha), args.M, args.m, args.eps, args.mode, args.K)
    elif args.kind == "relu_power":
        if args.K is None:
            raise UsageError("--kind relu_power takes an explicit --K")
        net = build_relu_power(act, args.m, args.K, args.M)
        net = net.with_meta(dict(net.provenance, M=args.M, order=args.m))
    elif args.kind == "relu_unit":
        if args.K is None:
            raise UsageError("--kind relu_unit takes an explicit --K")
        net = build_relu_unit(act, args.K, args.M)
    else:
        net = build_primitive(args.kind, BuildRequest(act, args.M, args.eps, args.m, args.K, args.mode))
    data = serialize(net)
    write_atomic(args.out, data)
    result = {"out": args.out, "width": net.width, "depth": net.depth, "provenance": net.provenance}
    if args.kind != "relu_unit":
        # replay the file just written, not the in-memory object
        replay = deserialize(data)
        target, box, _ = replay_contract(replay)
        err = sobolev_error(target, replay, args.m, make_grid(box))
        result["replayed_error"] = err.combined
        if args.eps is not None and err.combined > args.eps:
            print(_dump(result))
            raise ContractViolation(f"replayed error {err.combined:.3g} exceeds eps {args.eps:g}")
    print(_dump(result))
    return EXIT_OK


def cmd_assemble(args) -> int:
    act = _activation(args.activation)
    target = _target(args.target)
    try:
        plan = AssemblyPlan(act, target, args.n, args.m, args.N, args.L, carry=args.carry)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        assembly = build_full_approx(plan)
    except ConstructionError as exc:
        raise ContractViolation(str(exc)) from exc
    write_atomic(args.out, serialize(assembly.network))
    errors = {f"W{k}": global_error(assembly, k) for k in range(plan.m + 1)}
    report = {"plan": plan.summary(), "errors": errors, "width": assembly.network.width,
              "depth": assembly.network.depth, "budgets_ok": all(e.ok for e in plan.ledger)}
    if args.report:
        write_atomic(args.report, _dump(report))
    print(_dump({"out": args.out, "errors": errors, "budgets_ok": report["budgets_ok"]}))
    if args.eps is not None and errors[f"W{plan.m}"] > args.eps:
        raise ContractViolation(f"W^{plan.m} error {errors[f'W{plan.m}']:.3g} exceeds eps {args.eps:g}")
    return EXIT_OK if report["budgets_ok"] else EXIT_CONTRACT


def cmd_eval(args) -> int:
    net = _load_network(args.net)
    if args.target:
        target = _target(args.target)
        box = [(args.lo, args.hi)] * target.dim
        order = args.m if args.m is not None else 0
    else:
        target, box, order = replay_contract(net)
        if args.m is not None:
            order = args.m
    grid = make_grid(box, n_uniform=args.uniform, n_random=args.random, seed=args.seed)
    report = sobolev_error(target, net, order, grid)
    out = report.to_dict()
    text = _dump(out)
    if args.report:
        write_atomic(args.report, text)
    print(text)
    eps = args.eps if args.eps is not None else net.provenance.get("target_eps")
    if eps is not None and report.combined > float(eps):
        raise ContractViolation(f"measured error {report.combined:.3g} exceeds {float(eps):g}")
    return EXIT_OK


def cmd_pou_check(args) -> int:
    if args.d < 1 or args.J < 1 or args.m < 1:
        raise UsageError("--d, --J and --m must be positive")
    pts = qmc.Halton(args.d, scramble=True, seed=args.seed).random(args.points)
    resid = np.abs(partition_sum(pts, args.J, args.m) - 1.0)
    viol = {"".join(map(str, vm)): support_violations(vm, pts, args.J, args.m) for vm in patterns(args.d)}
    stats = {"d": args.d, "J": args.J, "m": args.m, "points": args.points, "seed": args.seed,
             "max_residual": float(resid.max()), "mean_residual": float(resid.mean()),
             "support_violations": viol, "total_violations": int(sum(viol.values()))}
    print(_dump(stats))
    ok = stats["max_residual"] <= args.tol and stats["total_violations"] == 0
    return EXIT_OK if ok else EXIT_CONTRACT


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepConfig:
    target: str
    activation: str
    n: int
    m: int
    d: int
    kind: str  # "assemble", "local" or a primitive kind
    values: list
    param_name: str
    grid: dict = field(default_factory=dict)
    csv_path: str | None = None
    json_path: str | None = None
    seed: int = 0


SWEEP_KINDS = ("square", "product", "identity", "relu_power")


def _require(doc: dict, key: str, kind=None):
    if key not in doc:
        raise UsageError(f"sweep config is missing {key!r}")
    value = doc[key]
    if kind is not None and not isinstance(value, kind):
        raise UsageError(f"sweep config entry {key!r} has the wrong type")
    return value


def parse_sweep_config(text: str, base_dir: str = ".") -> SweepConfig:
    """Read a TOML sweep description and check every referenced name against the catalogs."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config: {exc}") from exc
    target = _require(doc, "target", str)
    activation = _require(doc, "activation", str)
    tf = _target(target)
    _activation(activation)
    n = int(doc.get("n", 3))
    m = int(doc.get("m", 1))
    d = int(doc.get("d", tf.dim))
    if d != tf.dim:
        raise UsageError(f"target {target!r} has dimension {tf.dim}, config says {d}")
    given = [k for k in ("NL", "J", "K") if k in doc]
    if len(given) != 1:
        raise UsageError("give exactly one of NL, J or K")
    key = given[0]
    values = doc[key]
    if not isinstance(values, list) or not values:
        raise UsageError(f"{key} must be a non-empty list")
    if key == "NL":
        if not all(isinstance(v, list) and len(v) == 2 for v in values):
            raise UsageError("NL entries must be [N, L] pairs")
        kind, values, name = "assemble", [[int(a), int(b)] for a, b in values], "J"
    elif key == "J":
        kind, values, name = "local", [int(v) for v in values], "J"
    else:
        kind = doc.get("kind", "square")
        if kind not in SWEEP_KINDS:
            raise UsageError(f"kind must be one of {SWEEP_KINDS}")
        values, name = [float(v) for v in values], "K"
    out = doc.get("output", {})
    resolve = (lambda p: p if p is None or os.path.isabs(p) else os.path.join(base_dir, p))
    return SweepConfig(target, activation, n, m, d, kind, values, name, dict(doc.get("grid", {})),
                       resolve(out.get("csv")), resolve(out.get("json")), int(doc.get("seed", 0)))


def _grid_for(cfg: SweepConfig, box):
    g = cfg.grid
    return make_grid(box, n_uniform=g.get("uniform"), n_random=int(g.get("random", 256)), seed=cfg.seed)


def sweep_cell(cfg: SweepConfig, value) -> tuple[float, dict]:
    """One sweep point: the parameter value used for fitting and the Sobolev error report."""
    act = get_activation(cfg.activation)
    target = target_by_name(cfg.target)
    if cfg.kind == "assemble":
        N, L = value
        assembly = build_full_approx(AssemblyPlan(act, target, cfg.n, cfg.m, N, L))
        rep = sobolev_error(target, assembly.network, cfg.m, _grid_for(cfg, [(0.0, 1.0)] * cfg.d))
        return float(assembly.plan.J), rep.to_dict()
    if cfg.kind == "local":
        J = int(value)
        box = [(0.0, 1.0)] * cfg.d
        grid = _grid_for(cfg, box)
        worst = None
        for vm in patterns(cfg.d):
            poly = local_piecewise(target, J, vm, cfg.n, cfg.m)
            keep = ~np.any(np.isnan(eval_piecewise_jets(poly, grid.points, 0)), axis=1)
            rep = sobolev_error(target, piecewise_target(poly), cfg.m, grid.restrict(keep, "cells"))
            if worst is None or rep.combined > worst.combined:
                worst = rep
        return float(J), worst.to_dict()
    K = float(value)
    if cfg.kind == "relu_power":
        net = build_relu_power(act, cfg.m, K, 1.0)
        rep = sobolev_error(relu_power_target(cfg.m + 1), net, cfg.m, _grid_for(cfg, [(-1.0, 1.0)]))
    else:
        net = build_primitive(cfg.kind, BuildRequest(act, 1.0, None, cfg.m, K))
        tgt, box, _ = replay_contract(net)
        rep = sobolev_error(tgt, net, cfg.m, _grid_for(cfg, box))
    return K, rep.to_dict()


def _sweep_cell_star(job):
    return sweep_cell(*job)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def run_sweep(cfg: SweepConfig, workers: int = 1) -> ConvergenceReport:
    jobs = [(cfg, v) for v in cfg.values]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_sweep_cell_star, jobs))
    else:
        results = [_sweep_cell_star(j) for j in jobs]
    params = [p for p, _ in results]
    errors = [r["combined"] for _, r in results]
    slope = r2 = None
    if len(params) >= 3 and all(e > 0 for e in errors):
        slope, r2 = fit_order(params, errors)
    return ConvergenceReport(cfg.param_name, params, errors, slope, r2, None, [r for _, r in results])


def cmd_sweep(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    cfg = parse_sweep_config(text, os.path.dirname(os.path.abspath(args.config)))
    if args.csv:
        cfg.csv_path = args.csv
    if args.json:
        cfg.json_path = args.json
    try:
        report = run_sweep(cfg, worker_count())
    except ConstructionError as exc:
        raise ContractViolation(str(exc)) from exc
    csv_text = report_csv([report])
    if cfg.csv_path:
        write_atomic(cfg.csv_path, csv_text)
    else:
        sys.stdout.write(csv_text)
    if cfg.json_path:
        write_atomic(cfg.json_path, _dump(report.to_dict()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="supconv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("audit", help="audit an activation's analytic conditions")
    a.add_argument("--activation", required=True)
    a.add_argument("--order", type=int)
    a.add_argument("--condition", choices=("quasi_decay", "nonlinearity"), default="quasi_decay")
    a.set_defaults(func=cmd_audit)

    b = sub.add_parser("build", help="build a primitive block and replay its error")
    b.add_argument("--kind", required=True, choices=("square", "product", "identity", "monomial",
                                                     "relu_power", "relu_unit"))
    b.add_argument("--activation", required=True)
    b.add_argument("--M", type=float, default=1.0)
    scale = b.add_mutually_exclusive_group(required=True)
    scale.add_argument("--eps", type=float)
    scale.add_argument("--K", type=float)
    b.add_argument("--m", type=int, default=2)
    b.add_argument("--alpha", help="comma-separated multi-index for --kind monomial")
    b.add_argument("--mode", choices=("strict", "exact_skip"), default="strict")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("assemble", help="assemble the full approximant for a target")
    s.add_argument("--target", required=True)
    s.add_argument("--activation", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--carry", choices=("strict", "exact_skip"), default="exact_skip")
    s.add_argument("--eps", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_assemble)

    e = sub.add_parser("eval", help="measure a network file's Sobolev error")
    e.add_argument("--net", required=True)
    e.add_argument("--target")
    e.add_argument("--m", type=int)
    e.add_argument("--eps", type=float)
    e.add_argument("--lo", type=float, default=0.0)
    e.add_argument("--hi", type=float, default=1.0)
    e.add_argument("--uniform", type=int)
    e.add_argument("--random", type=int, default=256)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="run a convergence sweep from a TOML config")
    w.add_argument("--config", required=True)
    w.add_argument("--csv")
    w.add_argument("--json")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("pou-check", help="partition-of-unity residual and support check")
    c.add_argument("--d", type=int, required=True)
    c.add_argument("--J", type=int, required=True)
    c.add_argument("--m", type=int, required=True)
    c.add_argument("--points", type=int, default=10_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-9)
    c.set_defaults(func=cmd_pou_check)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"supconv: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        print(f"supconv: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except ConstructionError as exc:
        print(f"supconv: construction failed: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
