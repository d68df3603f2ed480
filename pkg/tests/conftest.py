# -*- coding: utf-8 -*-
"""共享夹具：小规模配置（depth=3、粗表格）与会话级 LabContext。"""
import json
import os
import sys
from dataclasses import replace

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from lab_config import (DEFAULT_CONFIG, GeometryConfig, IntegratorConfig, RunConfig, SweepConfig,  # noqa: E402
                        TransportConfig)

SMALL_ALPHA = 0.04
SMALL_DEPTH = 3


def small_config(out_dir: str = "data_lab_test", **sweep) -> RunConfig:
    return replace(
        DEFAULT_CONFIG,
        geometry=GeometryConfig(alpha=SMALL_ALPHA, depth=SMALL_DEPTH),
        transport=TransportConfig(ns=128, nu=256, wing_nx=192, wing_ny=65, chi2_samples=4000, chi2_bins=4),
        integrator=IntegratorConfig(horizon=20.0),
        sweep=replace(SweepConfig(), grid=4, slice_grid=8, orbit_horizon=5.0, orbit_samples=11, **sweep),
        out_dir=out_dir,
    )


def small_config_doc() -> dict:
    """与 small_config 对应的 JSON 配置（供 CLI 测试写入 --config）。"""
    return {
        "geometry": {"alpha": SMALL_ALPHA, "depth": SMALL_DEPTH},
        "transport": {"ns": 128, "nu": 256, "wing_nx": 192, "wing_ny": 65, "chi2_samples": 4000, "chi2_bins": 4},
        "integrator": {"horizon": 20.0},
        "sweep": {"grid": 4, "slice_grid": 8, "orbit_horizon": 5.0, "orbit_samples": 11},
    }


@pytest.fixture(scope="session")
def cfg() -> RunConfig:
    return small_config()


@pytest.fixture(scope="session")
def lab(cfg):
    from run_construct import LabContext
    return LabContext(cfg)


@pytest.fixture(scope="session")
def transport(lab):
    return lab.transport


@pytest.fixture(scope="session")
def field(lab):
    return lab.field


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 默认表格尺寸下的慢速检查")


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "lab.json"
    path.write_text(json.dumps(small_config_doc()), encoding="utf-8")
    return str(path)
