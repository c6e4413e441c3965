from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from torus_scope.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

DRIFT = """torus-scope-config v1
[system]
name = custom
dim = 2
order = 1

[parameters]
alpha = 0
epsilon = 0.05

[zone.0]
F1 = 0 0; 0 0
F1_offset = 1 0

[fixed-point]
guess = 0 0
"""


def _rows(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _run(*args):
    return main([str(a) for a in args])


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "torus-scope" in capsys.readouterr().out


def test_melnikov_smooth_zero(tmp_path):
    assert _run("melnikov", "--config", CONFIGS / "smooth_zero.ini", "--out", tmp_path, "--no-plots") == 0
    rows = _rows(tmp_path / "melnikov.csv")
    assert rows
    for row in rows:
        assert float(row["delta1_1"]) == 0.0 and float(row["delta1_2"]) == 0.0


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[system]\nname = pwl3d\n")
    assert _run("melnikov", "--config", bad, "--out", tmp_path) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and err["error"] == "config"
    assert _run("melnikov", "--config", tmp_path / "missing.ini", "--out", tmp_path) == 2


def test_unknown_override_and_tolerance(tmp_path, capsys):
    cfg = CONFIGS / "smooth_zero.ini"
    assert _run("melnikov", "--config", cfg, "--out", tmp_path, "--set", "gamma=1") == 2
    assert "gamma" in json.loads(capsys.readouterr().err)["message"]
    assert _run("melnikov", "--config", cfg, "--out", tmp_path, "--tol", "speed=1") == 2
    assert "speed" in json.loads(capsys.readouterr().err)["message"]


def test_analysis_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "drift.ini"
    cfg.write_text(DRIFT)
    assert _run("fixed-point", "--config", cfg, "--out", tmp_path, "--no-plots") == 1
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 1 and err["type"] == "NSError"


def test_outputs_are_deterministic(tmp_path):
    cfg = CONFIGS / "pwl3d.ini"
    for d in ("a", "b"):
        assert _run("fixed-point", "--config", cfg, "--out", tmp_path / d, "--set", "fixed-point.points=5") == 0
    a, b = (tmp_path / d / "fixed_points.csv" for d in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "fixed_points.png").exists()
    rows = _rows(a)
    assert len(rows) == 5
    mid = rows[2]
    assert float(mid["alpha"]) == 0.0
    assert float(mid["x1"]) == pytest.approx(np.pi, abs=0.5)


@pytest.mark.slow
def test_ns_analyze_pwl3d(tmp_path):
    for d in ("a", "b"):
        assert _run("ns-analyze", "--config", CONFIGS / "pwl3d.ini", "--out", tmp_path / d) == 0
    a, b = (tmp_path / d / "ns_report.json" for d in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    rep = json.loads(a.read_text())
    assert rep["schema_version"] == 1
    assert rep["verdict"] == "subcritical-repelling-curve"
    assert rep["report"]["ell1"] > 0


@pytest.mark.slow
def test_sweep_flips_once(tmp_path):
    code = _run("sweep", "--config", CONFIGS / "pwl3d.ini", "--out", tmp_path, "--set", "b=5",
                "--set", "sweep.points=6", "--jobs", "2")
    assert code == 0
    rows = _rows(tmp_path / "sweep.csv")
    fp = [r["fixed_point"] for r in rows]
    flips = sum(1 for u, v in zip(fp, fp[1:]) if u != v)
    assert flips == 1
    assert fp[0] == "attracting" and fp[-1] == "repelling"
    assert {r["curve"] for r in rows} == {"none", "attracting"}
    assert (tmp_path / "sweep.png").exists()
