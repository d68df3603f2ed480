# -*- coding: utf-8 -*-
import json
import os

import pandas as pd
import pytest

from conftest import small_config_doc
from lab_config import SweepConfig
from lab_errors import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_VERIFY_FAILED
from run_pipeline import main
from run_sweep import seed_grid


@pytest.fixture(scope="module")
def constructed(tmp_path_factory):
    root = tmp_path_factory.mktemp("lab")
    cfg_path = root / "lab.json"
    cfg_path.write_text(json.dumps(small_config_doc()), encoding="utf-8")
    out = root / "out"
    code = main(["construct", "--config", str(cfg_path), "--out", str(out)])
    assert code == EXIT_OK
    return str(cfg_path), str(out)


def test_print_defaults(capsys):
    assert main(["--print-defaults"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["geometry"]["alpha"] == 0.04
    assert doc["geometry"]["depth"] == 6
    assert doc["sweep"]["grid"] == 32


def test_missing_command():
    assert main([]) == EXIT_CONFIG_ERROR


@pytest.mark.parametrize("patch", [
    {"geometry": {"alpha": 0.06}},
    {"geometry": {"depth": 1}},
    {"tau": {"mode": "c2"}},
    {"transport": {"ns": 130}},
    {"nonsense": 1},
])
def test_bad_config_exit_code(tmp_path, capsys, patch):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(patch), encoding="utf-8")
    assert main(["construct", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG_ERROR
    assert "错误" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["verify", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG_ERROR


def test_verify_requires_construct(config_file, tmp_path):
    assert main(["verify", "--config", config_file, "--out", str(tmp_path / "empty")]) == EXIT_VERIFY_FAILED


def test_construct_outputs(constructed):
    _, out = constructed
    manifest = json.load(open(os.path.join(out, "construct_manifest.json"), encoding="utf-8"))
    assert manifest["config"]["geometry"]["depth"] == 3
    for name in manifest["files"]:
        assert os.path.isfile(os.path.join(out, name))
    levels = json.load(open(os.path.join(out, "levels.json"), encoding="utf-8"))
    assert [lev["n"] for lev in levels["levels"]] == [1, 2, 3]
    mass = pd.read_csv(os.path.join(out, "mass_bookkeeping.csv"), encoding="utf-8-sig")
    assert list(mass["n"]) == [1, 2, 3]


def test_verify_geometry_suite(constructed):
    cfg_path, out = constructed
    assert main(["verify", "--suite", "geometry", "--config", cfg_path, "--out", out]) == EXIT_OK
    summary = json.load(open(os.path.join(out, "verify_summary.json"), encoding="utf-8"))
    assert summary["passed"] and summary["suite"] == "geometry"
    checks = pd.read_csv(os.path.join(out, "checks.csv"), encoding="utf-8-sig")
    assert set(checks["suite"]) == {"geometry"}
    assert checks["passed"].all()
    report = open(os.path.join(out, "verify_report.md"), encoding="utf-8").read()
    assert "## 1. 各套件通过情况" in report


def test_verify_rejects_changed_config(constructed, tmp_path):
    _, out = constructed
    doc = small_config_doc()
    doc["geometry"]["alpha"] = 0.03
    path = tmp_path / "changed.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    assert main(["verify", "--suite", "geometry", "--config", str(path), "--out", out]) == EXIT_VERIFY_FAILED


@pytest.mark.slow
def test_verify_all_suites(constructed):
    cfg_path, out = constructed
    assert main(["verify", "--config", cfg_path, "--out", out]) == EXIT_OK


def test_seed_grid_default_size():
    grid = seed_grid(SweepConfig())
    assert len(grid) == 1024
    assert grid["x1"].min() == pytest.approx(1.0 / 64.0)
    assert grid["x2"].max() == pytest.approx(1.0 - 1.0 / 64.0)


def test_sweep_field_slice_is_deterministic(config_file, tmp_path):
    paths = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["sweep", "--kind", "field-slice", "--config", config_file, "--out", str(out)]) == EXIT_OK
        paths.append(out / "field_slice_theta_0.csv")
    assert paths[0].read_bytes() == paths[1].read_bytes()
    df = pd.read_csv(paths[0], encoding="utf-8-sig")
    assert len(df) == 64


def test_sweep_lyapunov(config_file, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", config_file, "--out", str(out)]) == EXIT_OK
    df = pd.read_csv(out / "lyapunov_sweep.csv", encoding="utf-8-sig")
    assert len(df) == 16
    assert {"lambda_1", "lambda_2", "lambda_3", "in_complement", "trivial"} <= set(df.columns)
    summary = json.load(open(out / "lyapunov_summary.json", encoding="utf-8"))
    assert summary["seeds"] == 16
    assert summary["complement_zero"]


def test_sweep_orbits(config_file, tmp_path):
    out = tmp_path / "orbits"
    assert main(["sweep", "--kind", "orbits", "--config", config_file, "--out", str(out)]) == EXIT_OK
    df = pd.read_csv(out / "orbits.csv", encoding="utf-8-sig")
    assert len(df) == 16 * 11
    assert list(df.columns) == ["seed", "t", "x1", "x2", "theta", "flagged"]
