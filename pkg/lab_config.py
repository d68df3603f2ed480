# -*- coding: utf-8 -*-
"""
实验室配置：常量、默认参数与 JSON 配置的加载/校验。
配置文件为单个 JSON；未给出的字段取默认值，未知字段与非法取值抛 ConfigError（带点号路径）。
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, Optional, Tuple

from lab_errors import ConfigError

logger = logging.getLogger(__name__)

# ----- 几何层 -----
ALPHA_MAX = 0.05
# 十字臂宽 α^(n+1) 至少为机器精度的若干倍，否则视为深度溢出
DEPTH_GUARD_ULPS = 64.0
DEFAULT_MAX_DEPTH = 10

# ----- 映射层 -----
BISECT_TOL = 1e-12
BISECT_MAX_ITER = 200
FD_STEP = 1e-6
JACOBIAN_MIN_DET = 1e-12

# ----- 测度输运层 -----
CELL_MASS_RTOL = 1e-8
# 第 n 层单元质量（Gauss 求积）与子树面积的相对误差上限
MU_N_MASS_RTOL = 1e-6
DENSITY_RTOL = 1e-2
AREA_CONSTANCY_RTOL = 2e-2
CHI2_LEVEL = 0.01

# ----- 动力学层 -----
DIVERGENCE_TOL = 1e-4
LYAPUNOV_ZERO_TOL = 1e-3
IDENTITY_TOL = 1e-12
ISOTOPY_AREA_TOL = 1e-8
# 有限差分雅可比的面积检查（截断误差随扭转幅度放大）
ISOTOPY_AREA_FD_TOL = 1e-6
INVERSE_TOL = 1e-10
GLUING_TOL = 1e-6
# 流性质残差相对圆盘尺度
FLOW_PROPERTY_TOL = 1e-5

# ----- 哈密顿层 -----
DET_OMEGA_MIN = 0.5
SPEED_CHANGE_TOL = 1e-5
LOOP_TOL = 1e-8
PDE_GRADIENT_TOL = 1e-4
PERIODICITY_TOL = 1e-6
SYMPLECTIC_TOL = 1e-4
ENERGY_DRIFT_TOL = 1e-6
CONJUGACY_TOL = 1e-5
STENCIL_STEP = 1e-4
# 圆盘坐标中的差分步长（相对同痕尺度）；h⁻¹∘h 的往返误差约 1e-12
CHART_STEP = 2e-4
HITTING_TIME_TOL = 1e-8
HITTING_TIME_SAMPLES = 50

# ----- 校验套件 -----
MEASURE_RTOL = 1e-12
MC_SAMPLES = 1_000_000
MC_SIGMAS = 3.0
LIPSCHITZ_SLOPE_TARGET = -1.0
LIPSCHITZ_SLOPE_TOL = 0.2
# 卡方检验分块拉回，避免 (n, ns+1) 的条件 CDF 数组过大
CHI2_CHUNK = 20000
PHI_ROUNDTRIP_TOL = 1e-9
H_ROUNDTRIP_TOL = 1e-6
FLOW_MAP_TOL = 1e-6
TIME_REVERSAL_TOL = 1e-6
# 同痕支撑边缘内侧的环带宽度（圆盘坐标）；宽度减半时位移须至少按 4 次方衰减
EDGE_WIDTHS = (0.02, 0.01, 0.005)
EDGE_TANGENCY_RATIO = 1.0 / 16.0
VOLUME_DEFECT_TOL = 1e-6
CHECK_SAMPLES = 1000
# 随机流编号：同一 seed 下各用途互不干扰
STREAM_CONSTRUCT = 0
STREAM_GEOMETRY = 1
STREAM_MAPS = 2
STREAM_TRANSPORT = 3
STREAM_DYNAMICS = 4
STREAM_HAMILTONIAN = 5
STREAM_SWEEP = 6

# τ 的硬上限：ε 需保证 τ 为正且形式可算，非退化由 verify 检查
EPSILON_HARD_MAX = 1.0
TAU_MODES = ("c1", "c0")
SUITES = ("geometry", "maps", "transport", "dynamics", "hamiltonian", "all")
SWEEP_KINDS = ("lyapunov", "orbits", "field-slice")


@dataclass(frozen=True)
class GeometryConfig:
    alpha: float = 0.04
    depth: int = 6
    max_depth: int = DEFAULT_MAX_DEPTH


@dataclass(frozen=True)
class TransportConfig:
    # 圆盘 Knothe 表格：s=r^2 方向与角度方向的节点数
    ns: int = 256
    nu: int = 512
    # 翼表：X1 聚集网格与 X2 行数
    wing_nx: int = 384
    wing_ny: int = 129
    chi2_samples: int = 1_000_000
    chi2_bins: int = 6


@dataclass(frozen=True)
class IsotopyConfig:
    """作用在整个单位圆盘上，支撑止于 |q| = 1 − margin。"""

    name: str = "twist_kick"
    twist: float = 2.5
    kick: float = 3.0
    margin: float = 0.05


@dataclass(frozen=True)
class TauConfig:
    epsilon: float = 0.05
    mode: str = "c1"
    # 凸起半径相对 h(D_core) 半径的比例
    radius_fraction: float = 0.8


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-10
    atol: float = 1e-12
    horizon: float = 1e4
    qr_every: float = 1.0


@dataclass(frozen=True)
class SweepConfig:
    grid: int = 32
    # (x1_min, x1_max, x2_min, x2_max)，默认整个环面
    window: Tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)
    theta: float = 0.0
    slice_grid: int = 64
    orbit_horizon: float = 100.0
    orbit_samples: int = 101


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    isotopy: IsotopyConfig = field(default_factory=IsotopyConfig)
    tau: TauConfig = field(default_factory=TauConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "data_lab"
    seed: int = 20240607


DEFAULT_CONFIG = RunConfig()


def defaults_json() -> str:
    """--print-defaults 的输出。"""
    return json.dumps(asdict(DEFAULT_CONFIG), ensure_ascii=False, indent=2, sort_keys=True)


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "应为布尔值")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(path, f"应为整数，得到 {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"应为数值，得到 {value!r}")
        if not math.isfinite(float(value)):
            raise ConfigError(path, "应为有限数值")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"应为字符串，得到 {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(path, f"应为长度 {len(default)} 的数组")
        return tuple(_coerce(f"{path}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default)))
    return value


def _merge(path: str, base: Any, patch: Dict[str, Any]) -> Any:
    if not isinstance(patch, dict):
        raise ConfigError(path or "<root>", "应为 JSON 对象")
    known = {f.name: f for f in fields(base)}
    updates = {}
    for key, value in patch.items():
        sub = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(sub, "未知字段")
        current = getattr(base, key)
        if is_dataclass(current):
            updates[key] = _merge(sub, current, value)
        else:
            updates[key] = _coerce(sub, value, current)
    return replace(base, **updates)


def validate(cfg: RunConfig) -> RunConfig:
    g = cfg.geometry
    if not (0.0 < g.alpha < ALPHA_MAX):
        raise ConfigError("geometry.alpha", f"须在 (0, {ALPHA_MAX}) 内，得到 {g.alpha}")
    if g.depth < 2:
        raise ConfigError("geometry.depth", f"须 >= 2，得到 {g.depth}")
    if g.max_depth < 2:
        raise ConfigError("geometry.max_depth", "须 >= 2")
    t = cfg.transport
    for name in ("ns", "nu", "wing_nx", "wing_ny", "chi2_samples", "chi2_bins"):
        if getattr(t, name) < 4:
            raise ConfigError(f"transport.{name}", "须 >= 4")
    if t.ns % 4:
        raise ConfigError("transport.ns", "须为 4 的倍数（s = 1/4 须为节点）")
    iso = cfg.isotopy
    if iso.name not in ("twist_kick", "identity"):
        raise ConfigError("isotopy.name", f"未知同痕 {iso.name!r}")
    if not (0.0 < iso.margin < 0.5):
        raise ConfigError("isotopy.margin", "须在 (0, 0.5) 内")
    tau = cfg.tau
    if not (0.0 <= tau.epsilon < EPSILON_HARD_MAX):
        raise ConfigError("tau.epsilon", f"须在 [0, {EPSILON_HARD_MAX}) 内")
    if tau.mode not in TAU_MODES:
        raise ConfigError("tau.mode", f"须为 {TAU_MODES} 之一")
    if not (0.0 < tau.radius_fraction <= 1.0):
        raise ConfigError("tau.radius_fraction", "须在 (0, 1] 内")
    it = cfg.integrator
    if it.rtol <= 0 or it.atol <= 0:
        raise ConfigError("integrator.rtol", "容差须为正")
    if it.horizon <= 0 or it.qr_every <= 0:
        raise ConfigError("integrator.horizon", "时间须为正")
    sw = cfg.sweep
    if sw.grid < 1 or sw.slice_grid < 2 or sw.orbit_samples < 2:
        raise ConfigError("sweep.grid", "网格须为正")
    x0, x1, y0, y1 = sw.window
    if not (x0 < x1 and y0 < y1):
        raise ConfigError("sweep.window", "窗口须满足 min < max")
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """读取 JSON 配置并与默认值合并；overrides 为命令行覆盖（同样的嵌套结构）。"""
    cfg = DEFAULT_CONFIG
    if path:
        if not os.path.isfile(path):
            raise ConfigError("--config", f"文件不存在: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError("--config", f"JSON 解析失败: {exc}") from exc
        cfg = _merge("", cfg, data)
        logger.info("已加载配置 %s", path)
    if overrides:
        cfg = _merge("", cfg, overrides)
    return validate(cfg)
