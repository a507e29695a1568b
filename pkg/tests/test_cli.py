import json
import os

import pytest

from supconv.cli import parse_sweep_config, run, write_atomic
from supconv.localpoly import polynomial_target
from supconv.metrics import make_grid, sobolev_error
from supconv.network import deserialize


def test_audit_prints_condition_report(capsys):
    assert run(["audit", "--activation", "gelu", "--order", "3"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["passed"] and rep["condition"] == "quasi_decay" and rep["order_checked"] == 3
    assert run(["audit", "--activation", "relu", "--condition", "nonlinearity"]) == 1


def test_usage_errors_exit_2(capsys, tmp_path):
    assert run([]) == 2
    assert run(["audit", "--activation", "nope", "--order", "1"]) == 2
    assert run(["audit", "--activation", "softsign", "--order", "3"]) == 2
    assert run(["build", "--kind", "square", "--activation", "gelu", "--out", str(tmp_path / "x.json")]) == 2
    assert run(["eval", "--net", str(tmp_path / "missing.json")]) == 2
    assert "usage error" in capsys.readouterr().err


def test_build_square_replays_within_eps(tmp_path, capsys):
    out = tmp_path / "net.json"
    assert run(["build", "--kind", "square", "--activation", "gelu", "--M", "1", "--eps", "1e-3", "--m", "2",
                "--out", str(out)]) == 0
    net = deserialize(out.read_bytes())
    err = sobolev_error(polynomial_target({(2,): 1.0}), net, 2, make_grid([(-1.0, 1.0)])).combined
    assert err <= 1e-3
    assert run(["eval", "--net", str(out)]) == 0
    assert run(["eval", "--net", str(out), "--eps", "1e-12"]) == 1


def test_build_monomial_with_fixed_scale(tmp_path):
    out = tmp_path / "mono.json"
    assert run(["build", "--kind", "monomial", "--alpha", "1,2", "--activation", "silu", "--K", "1e4",
                "--out", str(out)]) == 0
    assert deserialize(out.read_bytes()).provenance["alpha"] == [1, 2]


def test_assemble_writes_network_and_report(tmp_path, capsys):
    net, rep = tmp_path / "a.json", tmp_path / "r.json"
    code = run(["assemble", "--target", "sin_pi", "--activation", "gelu", "--n", "3", "--m", "1", "--N", "1",
                "--L", "2", "--out", str(net), "--report", str(rep)])
    assert code == 0
    report = json.loads(rep.read_text())
    assert report["budgets_ok"] and report["errors"]["W1"] < 5e-2
    capsys.readouterr()
    assert run(["eval", "--net", str(net)]) == 0
    assert json.loads(capsys.readouterr().out)["combined"] == pytest.approx(report["errors"]["W1"])
    assert run(["assemble", "--target", "sin_pi", "--activation", "gelu", "--n", "3", "--m", "1", "--N", "1",
                "--L", "1", "--out", str(net)]) == 2


def test_pou_check(capsys):
    assert run(["pou-check", "--d", "2", "--J", "4", "--m", "2", "--points", "2000"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["max_residual"] <= 1e-9 and stats["total_violations"] == 0


def test_sweep_is_deterministic(tmp_path, monkeypatch):
    cfg = tmp_path / "sweep.toml"
    cfg.write_text('target = "sin_pi"\nactivation = "gelu"\nn = 3\nm = 0\nJ = [4, 8, 16]\n'
                   '[grid]\nuniform = 513\n[output]\ncsv = "out.csv"\njson = "out.json"\n')
    assert run(["sweep", "--config", str(cfg)]) == 0
    first = (tmp_path / "out.csv").read_bytes()
    monkeypatch.setenv("SUPCONV_WORKERS", "2")
    assert run(["sweep", "--config", str(cfg)]) == 0
    assert (tmp_path / "out.csv").read_bytes() == first
    rep = json.loads((tmp_path / "out.json").read_text())
    assert rep["slope"] < -2.5


def test_sweep_config_errors(tmp_path):
    cfg = tmp_path / "poisson_free.toml"
    cfg.write_text('activation = "gelu"\nJ = [4, 8]\n')
    assert run(["sweep", "--config", str(cfg)]) == 2
    cfg.write_text('target = "sin_pi"\nactivation = "gelu"\nJ = [4]\nK = [1.0]\n')
    assert run(["sweep", "--config", str(cfg)]) == 2
    cfg.write_text('target = "sin_pi"\nactivation = "gelu"\nd = 2\nJ = [4]\n')
    assert run(["sweep", "--config", str(cfg)]) == 2
    cfg.write_text("target = [")
    assert run(["sweep", "--config", str(cfg)]) == 2


def test_sweep_config_parsing(tmp_path):
    cfg = parse_sweep_config('target = "square"\nactivation = "tanh"\nkind = "product"\nm = 2\nK = [10, 100]\n',
                             str(tmp_path))
    assert cfg.kind == "product" and cfg.values == [10.0, 100.0] and cfg.param_name == "K" and cfg.seed == 0


def test_write_atomic_replaces_file(tmp_path):
    path = tmp_path / "sub" / "f.txt"
    write_atomic(str(path), "one")
    write_atomic(str(path), b"two")
    assert path.read_text() == "two"
    assert os.listdir(path.parent) == ["f.txt"]
