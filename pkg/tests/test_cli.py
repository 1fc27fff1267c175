import json

import pytest

from billiard_lab.cli import run


def _run(tmp_path, *argv):
    out = tmp_path / "out"
    code = run([*argv, "--out", str(out), "--quiet"])
    return code, out


def test_corridors_circle04(tmp_path):
    code, out = _run(tmp_path, "corridors", "--table", "circle04.json")
    assert code == 0
    doc = json.loads((out / "corridors.json").read_text())
    assert len(doc["result"]["corridors"]) == 2
    assert doc["run"]["seed"] == 0 and "workers" in doc["run"]


def test_corridors_violation_exit(tmp_path):
    code, out = _run(tmp_path, "corridors", "--table", "degenerate_a1.json")
    assert code == 1
    doc = json.loads((out / "corridors.json").read_text())
    assert any(v["kind"] == "A1" for v in doc["result"]["violations"])


def test_usage_errors(tmp_path, capsys):
    assert _run(tmp_path, "corridors", "--table", "no-such-table.json")[0] == 2
    assert "no-such-table" in capsys.readouterr().err
    assert run(["frobnicate"]) == 2
    assert _run(tmp_path, "corridors")[0] == 2


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"table": "circle04", "seed": 3, "samples": 2000}))
    code, out = _run(tmp_path, "tail", "--config", str(cfg), "--seed", "4")
    assert code == 0
    doc = json.loads((out / "tail.json").read_text())
    assert doc["run"]["seed"] == 4 and doc["run"]["params"]["samples"] == 2000
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"table": "circle04", "colour": "red"}))
    assert _run(tmp_path, "tail", "--config", str(bad))[0] == 2


def test_tail_finite_horizon_fails(tmp_path):
    assert _run(tmp_path, "tail", "--table", "finite-horizon-3disk", "--samples", "1000")[0] == 1


def test_validate_and_cells(tmp_path):
    assert _run(tmp_path, "validate", "--table", "fig1")[0] == 0
    code, out = _run(tmp_path, "cells", "--table", "circle04", "--h", "0", "--n-count", "4")
    assert code == 0
    assert (out / "cells.json").exists()


def test_workers_env(tmp_path, monkeypatch):
    monkeypatch.setenv("BILLIARD_LAB_WORKERS", "1")
    code, out = _run(tmp_path, "validate", "--table", "circle04")
    assert json.loads((out / "validate.json").read_text())["run"]["workers"] == 1


@pytest.mark.parametrize("argv", [
    ["correlate", "--table", "circle04", "--lags", "5", "--samples", "200", "--segment-length", "50"],
    ["clt", "--table", "circle04", "--n-terms", "200", "--replicas", "200"],
    ["zq", "--table", "circle04", "--q", "0.5", "--M", "2", "--trials", "5", "--seed", "7"],
    ["perturb", "--table", "incipient-pair", "--eps", "0.5"],
])
def test_rerun_is_byte_identical(tmp_path, argv):
    a = tmp_path / "a"
    b = tmp_path / "b"
    run([*argv, "--out", str(a), "--quiet"])
    run([*argv, "--out", str(b), "--quiet"])
    files = sorted(p.name for p in a.iterdir() if p.name != "run.log")
    assert files == sorted(p.name for p in b.iterdir() if p.name != "run.log")
    assert any(f.endswith(".csv") for f in files) or argv[0] == "perturb"
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    assert (a / "run.log").exists()
