from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from mtwkit.cli import main

PROBLEMS = Path(__file__).resolve().parents[1] / "problems"


def run(*args):
    return main([str(a) for a in args])


def write(tmp_path, doc, name="problem.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_check_quadratic_disk_pair_holds(tmp_path):
    assert run("check", "--input", PROBLEMS / "quad_disk.json", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "check_report.json").read_text())
    assert {r["verdict"] for r in rep["conditions"]} == {"holds"}
    assert (tmp_path / "check_report.txt").exists()


def test_check_power_three_fails_with_witness(tmp_path):
    assert run("check", "--input", PROBLEMS / "power3.json", "--out", tmp_path) == 1
    rep = json.loads((tmp_path / "check_report.json").read_text())
    a3w = next(r for r in rep["conditions"] if r["condition"] == "A3w")
    assert a3w["verdict"] == "fails" and a3w["witness"] is not None


@pytest.mark.parametrize("text", ["{not json", json.dumps({"cost": {"id": "nope"}}),
                                  json.dumps({"cost": {"id": "quadratic"}, "domains": {}})])
def test_malformed_input_exits_two(tmp_path, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    assert run("check", "--input", p, "--out", tmp_path / "o") == 2


def test_missing_file_exits_two(tmp_path):
    assert run("solve", "--input", tmp_path / "absent.json", "--out", tmp_path) == 2


def test_solve_quadratic_disk(tmp_path):
    assert run("solve", "--input", PROBLEMS / "quad_disk.json", "--out", tmp_path, "--resolution", 8) == 0
    for name in ("field.csv", "trace.json", "diagnostics.json", "run_report.json"):
        assert (tmp_path / name).exists()
    data = np.loadtxt(tmp_path / "field.csv", delimiter=",", skiprows=1)
    x, T = data[:, :2], data[:, 5:7]
    assert np.abs(T - x).max() <= 2 / 8
    assert json.loads((tmp_path / "diagnostics.json").read_text())["passed"]


def test_solve_refuses_failed_checks_without_force(tmp_path):
    assert run("solve", "--input", PROBLEMS / "power3.json", "--out", tmp_path) == 1
    assert json.loads((tmp_path / "run_report.json").read_text())["status"] == "check_failed"
    assert not (tmp_path / "field.csv").exists()


def test_stall_writes_partial_trace(tmp_path):
    doc = json.loads((PROBLEMS / "quad_disk.json").read_text())
    doc["solver"] = {"h": 0.125, "schedule": {"newton_tol": 1e-30, "newton_max_iter": 2, "dt_min": 0.1}}
    assert run("solve", "--input", write(tmp_path, doc), "--out", tmp_path / "o") == 1
    rep = json.loads((tmp_path / "o" / "run_report.json").read_text())
    assert rep["status"] == "stalled"
    trace = json.loads((tmp_path / "o" / "trace.json").read_text())["trace"]
    assert trace and any("rejected" in r for r in trace)


def test_oracle_monotone_pairing(tmp_path):
    assert run("oracle", "--input", PROBLEMS / "coarse_intervals.json", "--out", tmp_path) == 0
    src = np.loadtxt(tmp_path / "source_cloud.csv", delimiter=",", skiprows=1)
    tgt = np.loadtxt(tmp_path / "target_cloud.csv", delimiter=",", skiprows=1)
    plan = np.loadtxt(tmp_path / "plan.csv", delimiter=",", skiprows=1, ndmin=2)
    for i, j, _ in plan:
        assert src[int(i), 0] == tgt[int(j), 0]


def test_oracle_compares_with_a_matching_solve(tmp_path):
    assert run("solve", "--input", PROBLEMS / "sqrt_plus_1d.json", "--out", tmp_path, "--resolution", 50) == 0
    assert run("oracle", "--input", PROBLEMS / "sqrt_plus_1d.json", "--out", tmp_path, "--resolution", 50) == 0
    cmp_ = json.loads((tmp_path / "oracle_report.json").read_text())["oracle"]["comparison"]
    assert cmp_["potential_rel_linf"] <= 0.02
    assert cmp_["cost_value_rel_gap"] <= 0.02
    assert (tmp_path / "comparison.csv").exists()


def test_oracle_size_limit_exits_one(tmp_path, monkeypatch):
    monkeypatch.setenv("MTW_ORACLE_MAX", "5")
    assert run("oracle", "--input", PROBLEMS / "sqrt_plus_1d.json", "--out", tmp_path) == 1
    rep = json.loads((tmp_path / "oracle_report.json").read_text())
    assert rep["status"] == "OracleTooLarge"


def test_classify_empty_range(tmp_path):
    assert run("classify", "--m", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "classify.json").read_text())["power"] == []


def test_classify_small_range(tmp_path):
    assert run("classify", "--m", "2", "3", "--signs", "1", "--resolution", 4, "--out", tmp_path) == 0
    rows = json.loads((tmp_path / "classify.json").read_text())["power"]
    assert [r["verdict"] for r in rows] == ["holds", "fails"]


def test_reports_are_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("check", "--input", PROBLEMS / "quad_disk.json", "--out", tmp_path / d, "--seed", 3) == 0
    assert (tmp_path / "a" / "check_report.json").read_bytes() == (tmp_path / "b" / "check_report.json").read_bytes()
