# -*- coding: utf-8 -*-
"""
扫描层：在 sweep.window 的 grid×grid 种子上估计 Lyapunov 指数、输出轨道，或在 θ 截面上输出场值网格。
种子取网格单元中心；输出只依赖配置，同一配置重复运行得到逐字节相同的 CSV。
"""
import logging
import os
from typing import Optional

import numpy as np
import pandas as pd

from lab_config import LYAPUNOV_ZERO_TOL, SWEEP_KINDS, RunConfig, SweepConfig
from lab_errors import DomainError
from run_construct import LabContext, write_csv, write_json
from torus_dynamics import field_slice, integrate, lyapunov

logger = logging.getLogger(__name__)


def seed_grid(sweep: SweepConfig) -> pd.DataFrame:
    x0, x1, y0, y1 = sweep.window
    n = sweep.grid
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    gi, gj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return pd.DataFrame({"i": gi.ravel(), "j": gj.ravel(), "x1": xs[gi.ravel()], "x2": ys[gj.ravel()],
                         "theta": sweep.theta})


def lyapunov_sweep(lab: LabContext) -> pd.DataFrame:
    cfg = lab.cfg
    X = lab.field
    seeds = seed_grid(cfg.sweep)
    complement = X.in_complement(seeds[["x1", "x2"]].to_numpy())
    rows = []
    for k, seed in enumerate(seeds.itertuples(index=False)):
        est = lyapunov(X, (seed.x1, seed.x2, seed.theta), cfg.integrator.horizon, cfg.integrator)
        row = {"i": seed.i, "j": seed.j, "x1": seed.x1, "x2": seed.x2, "theta": seed.theta,
               "in_complement": bool(complement[k])}
        row.update(est.to_dict())
        rows.append(row)
        if not est.trivial:
            logger.debug("种子 (%d, %d)：λ = %s", seed.i, seed.j, est.exponents)
    return pd.DataFrame(rows)


def lyapunov_summary(df: pd.DataFrame) -> dict:
    """补集种子全为零指数；内部种子的最大指数只报告，不作判定。"""
    comp = df[df["in_complement"]]
    inner = df[~df["in_complement"] & ~df["trivial"]]
    exps = ["lambda_1", "lambda_2", "lambda_3"]
    return {
        "seeds": int(len(df)),
        "trivial": int(df["trivial"].sum()),
        "complement": int(len(comp)),
        "complement_max_abs": float(comp[exps].abs().to_numpy().max()) if len(comp) else 0.0,
        "complement_zero": bool(comp[exps].abs().to_numpy().max() <= LYAPUNOV_ZERO_TOL) if len(comp) else True,
        "interior": int(len(inner)),
        "interior_top_max": float(inner["lambda_1"].max()) if len(inner) else None,
        "interior_positive": int((inner["lambda_1"] > LYAPUNOV_ZERO_TOL).sum()),
        "sum_vs_divergence_max": float((df["sum"] - df["divergence_average"]).abs().max()) if len(df) else 0.0,
    }


def orbit_sweep(lab: LabContext) -> pd.DataFrame:
    cfg = lab.cfg
    X = lab.field
    frames = []
    for k, seed in enumerate(seed_grid(cfg.sweep).itertuples(index=False)):
        traj = integrate(X, (seed.x1, seed.x2, seed.theta), cfg.sweep.orbit_horizon, cfg.sweep.orbit_samples,
                         cfg.integrator, estimate_error=False)
        frame = traj.to_frame()
        frame.insert(0, "seed", k)
        frame["flagged"] = traj.flagged
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def run(cfg: RunConfig, kind: str = "lyapunov", out_dir: Optional[str] = None,
        lab: Optional[LabContext] = None) -> str:
    if kind not in SWEEP_KINDS:
        raise DomainError(f"未知扫描类型 {kind!r}，可选 {SWEEP_KINDS}")
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    lab = lab or LabContext(cfg)
    sw = cfg.sweep
    print(f"--- 扫描 {kind} ---")
    if kind == "lyapunov":
        df = lyapunov_sweep(lab)
        path = write_csv(df, out_dir, "lyapunov_sweep.csv")
        write_json(lyapunov_summary(df), out_dir, "lyapunov_summary.json")
    elif kind == "orbits":
        path = write_csv(orbit_sweep(lab), out_dir, "orbits.csv")
    else:
        df = field_slice(lab.field, sw.theta, sw.slice_grid, sw.window)
        path = write_csv(df, out_dir, f"field_slice_theta_{sw.theta:g}.csv")
    logger.info("扫描 %s 完成：%s", kind, path)
    return path


if __name__ == "__main__":
    from lab_config import load_config
    run(load_config())
