# -*- coding: utf-8 -*-
"""
构造层：几何 -> 显式映射 -> 测度输运，写出层级 JSON、测度报告、映射栈元数据与输运校验表。
输出目录：RunConfig.out_dir（默认 data_lab/）。
LabContext 供 verify / sweep 复用同一套构造对象。
"""
import json
import logging
import os
from dataclasses import asdict
from functools import cached_property
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from cantor_geometry import build_levels, cantor_measure, export_levels
from disk_dynamics import DiskIsotopy, default_isotopy
from explicit_maps import build_phi, composition_consistency
from hamiltonian_system import HamiltonianSystem, build_hamiltonian
from lab_config import CHECK_SAMPLES, STREAM_CONSTRUCT, RunConfig
from lab_errors import MissingArtifactError
from measure_transport import (AssembledTransport, assemble_h, chi_square_uniformity, correction_displacements,
                               jacobian_constancy, mass_bookkeeping, sample_disk)
from torus_dynamics import SuspensionField, suspension_field

logger = logging.getLogger(__name__)

MANIFEST_FILE = "construct_manifest.json"
# construct 产物只依赖这两节配置
MANIFEST_SECTIONS = ("geometry", "transport")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"无法序列化 {type(obj).__name__}")


def write_json(doc: Any, out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=False, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")
    print(f"已写入 {path}")
    return path


def write_csv(df: pd.DataFrame, out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    df.to_csv(path, index=False, encoding="utf-8-sig")
    print(f"已写入 {path}")
    return path


class LabContext:
    """按需构造并缓存 h、同痕、悬挂场与哈密顿系统。"""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, stream])

    @cached_property
    def levels(self):
        g = self.cfg.geometry
        return build_levels(g.alpha, g.depth, g.max_depth)

    @cached_property
    def transport(self) -> AssembledTransport:
        g = self.cfg.geometry
        return assemble_h(g.alpha, g.depth, self.cfg.transport, g.max_depth)

    @cached_property
    def isotopy(self) -> DiskIsotopy:
        return default_isotopy(self.cfg.isotopy, radius=1.0)

    @cached_property
    def field(self) -> SuspensionField:
        return suspension_field(self.transport, self.isotopy, self.cfg.tau)

    @cached_property
    def system(self) -> HamiltonianSystem:
        return build_hamiltonian(self.field)


def _manifest_config(cfg: RunConfig) -> Dict[str, Any]:
    doc = asdict(cfg)
    return json.loads(json.dumps({k: doc[k] for k in MANIFEST_SECTIONS}))


def check_manifest(cfg: RunConfig, out_dir: str) -> Dict[str, Any]:
    """verify 前置条件：construct 产物存在且与当前配置一致。"""
    path = os.path.join(out_dir, MANIFEST_FILE)
    if not os.path.isfile(path):
        raise MissingArtifactError(f"未找到 {path}，请先执行 construct")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("config") != _manifest_config(cfg):
        raise MissingArtifactError(f"{path} 与当前配置不一致，请重新执行 construct")
    missing = [name for name in manifest.get("files", []) if not os.path.isfile(os.path.join(out_dir, name))]
    if missing:
        raise MissingArtifactError(f"construct 产物缺失: {', '.join(missing)}")
    return manifest


def run(cfg: RunConfig, out_dir: Optional[str] = None, lab: Optional[LabContext] = None) -> LabContext:
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    lab = lab or LabContext(cfg)
    g = cfg.geometry
    files: List[str] = []

    print("--- 1/3 几何层 ---")
    levels = lab.levels
    files.append(write_json(export_levels(levels), out_dir, "levels.json"))
    files.append(write_json(cantor_measure(g.alpha, g.depth).to_dict(), out_dir, "measure_report.json"))
    print()

    print("--- 2/3 显式映射 ---")
    phi = build_phi(g.alpha, g.depth, g.max_depth)
    rng = lab.rng(STREAM_CONSTRUCT)
    comp = composition_consistency(g.alpha, g.depth, sample_disk(CHECK_SAMPLES, rng))
    files.append(write_csv(comp, out_dir, "phi_composition.csv"))
    print()

    print("--- 3/3 测度输运 ---")
    tr = lab.transport
    files.append(write_json({"phi": phi.metadata(), "transport": tr.metadata()}, out_dir, "map_stack.json"))
    mass = mass_bookkeeping(g.alpha, g.depth)
    files.append(write_csv(mass, out_dir, "mass_bookkeeping.csv"))
    jac = jacobian_constancy(tr, rng, CHECK_SAMPLES)
    files.append(write_csv(jac, out_dir, "jacobian_constancy.csv"))
    disp = correction_displacements(tr, rng)
    files.append(write_csv(disp, out_dir, "correction_displacements.csv"))
    chi2 = chi_square_uniformity(tr, rng, cfg.transport.chi2_samples, cfg.transport.chi2_bins)
    report = {
        "closure_error_max": float(mass["closure_error"].max()),
        "jacobian_ratio_deviation_max": float((jac["ratio"] - 1.0).abs().max()),
        "jacobian_samples": int(len(jac)),
        "chi_square": chi2,
        "displacement_ratio_max": float((disp["max_displacement"] / disp["bound"]).max()) if len(disp) else 0.0,
    }
    files.append(write_json(report, out_dir, "transport_report.json"))

    names = [os.path.basename(p) for p in files]
    write_json({"config": _manifest_config(cfg), "files": names, "seed": cfg.seed}, out_dir, MANIFEST_FILE)
    logger.info("construct 完成：%d 个产物写入 %s", len(names), out_dir)
    return lab


if __name__ == "__main__":
    from lab_config import load_config
    run(load_config())
