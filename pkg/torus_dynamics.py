# -*- coding: utf-8 -*-
"""
环面动力学层：共轭映射 f_t = h∘g_t∘h⁻¹、T³ 上的悬挂场 X = (X1, X2, τ)、时间变换 τ、
流积分、Lyapunov 指数（切丛积分 + 定期 QR 重正交化）与 θ=0 截面回归映射。

U 上用圆盘坐标 q = h⁻¹(y)：相似核 {|q| <= r_core} 内 h(q) = c + λq 取闭式，其余经 h 的映射栈。
平面场 X = Dh·Z_θ(q) 由链式法则给出；U 上运动的轨道在 (q, θ) 中积分 Z 再经 h 推出，
与直接积分 X 给出同一条轨道（chart=False 时走后者，作对照）。
h 的表格插值使 Dh 只分片光滑，因此在 U 的非核部分，对 X 与势函数的差分都放在圆盘坐标中做，
再用 Dh 推回环面；散度与辛形式的面积部分相对 ν = h_*(λ²dq1∧dq2)，其密度与 Lebesgue 之比
在 jacobian_constancy 的容差内为 1。
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp
from scipy.linalg import qr

from cantor_geometry import KIND_U, classify_points, displacement_tail, distance_to_boundary
from disk_dynamics import DiskBump, DiskIsotopy, FlatnessSchedule
from lab_config import (CHART_STEP, DEFAULT_MAX_DEPTH, FD_STEP, STENCIL_STEP, TAU_MODES, IntegratorConfig,
                        TauConfig)
from lab_errors import DomainError, NumericalError, SupportViolationError

logger = logging.getLogger(__name__)

# τ 的默认支撑半径相对允许子圆盘半径的收缩
TAU_SUPPORT_SHRINK = 0.85
RETURN_SPAN = 2.0
# 四阶中心差分的节点与权重
_STENCIL = ((2, -1.0), (1, 8.0), (-1, -8.0), (-2, 1.0))
_BUMP = DiskBump()


def wrap(d: np.ndarray) -> np.ndarray:
    """环面上的位移取到 [-1/2, 1/2)。"""
    return np.mod(np.asarray(d, dtype=float) + 0.5, 1.0) - 0.5


def _states(s) -> np.ndarray:
    return np.atleast_2d(np.asarray(s, dtype=float))


def _thetas(theta, n: int) -> np.ndarray:
    return np.mod(np.broadcast_to(np.asarray(theta, dtype=float), (n,)), 1.0)


def _classify(transport, y: np.ndarray) -> np.ndarray:
    kind, _ = classify_points(transport.alpha, transport.depth, y,
                              max_depth=max(transport.depth, DEFAULT_MAX_DEPTH))
    return kind


def _uncertain(transport, y) -> np.ndarray:
    """距 ∂U 不足尾界 Σ_(i>=N) 2β_i 的 U 点。"""
    y = np.mod(_states(y), 1.0)
    band = displacement_tail(transport.alpha, transport.depth)
    dist = distance_to_boundary(transport.alpha, transport.depth, y)
    return (dist > 0.0) & (dist < band)


# ----- 圆盘坐标 -----


class DiskChart:
    """U 的圆盘坐标 q = h⁻¹(y)：核 {|y−c| < λ·r_core} 内为 (y−c)/λ，其余 U 点经映射栈，U 外为 NaN。"""

    def __init__(self, transport):
        self.transport = transport
        self.center = transport.center
        self.lam = transport.lam
        self.r_core = transport.r_core
        self._memo: Dict[str, Tuple[Tuple, np.ndarray]] = {}

    def _cached(self, name: str, a: np.ndarray, compute: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        # 同一批点常被连续求值多次（场、雅可比、面积密度），只记最近一次
        key = (a.shape, a.tobytes())
        hit = self._memo.get(name)
        if hit is None or hit[0] != key:
            hit = (key, compute(a))
            self._memo[name] = hit
        return hit[1].copy()

    def offset(self, y) -> np.ndarray:
        return wrap(np.mod(_states(y), 1.0) - self.center)

    def in_core(self, y, margin: float = 0.0) -> np.ndarray:
        d = self.offset(y)
        return np.hypot(d[:, 0], d[:, 1]) < self.lam * self.r_core - margin

    def in_U(self, y) -> np.ndarray:
        return _classify(self.transport, np.mod(_states(y), 1.0)) == KIND_U

    def to_chart(self, y) -> np.ndarray:
        def compute(y):
            q = np.full(y.shape, np.nan)
            core = self.in_core(y)
            q[core] = self.offset(y[core]) / self.lam
            rest = ~core & self.in_U(y)
            if np.any(rest):
                q[rest] = self.transport.inverse(y[rest])
            return q
        return self._cached("to_chart", np.mod(_states(y), 1.0), compute)

    def from_chart(self, q) -> np.ndarray:
        q = _states(q)
        out = np.empty_like(q)
        core = np.hypot(q[:, 0], q[:, 1]) < self.r_core
        out[core] = self.center + self.lam * q[core]
        if np.any(~core):
            out[~core] = self.transport.forward(q[~core])
        return np.mod(out, 1.0)

    def jacobian(self, q) -> np.ndarray:
        def compute(q):
            J = np.broadcast_to(self.lam * np.eye(2), (q.shape[0], 2, 2)).copy()
            rest = ~(np.hypot(q[:, 0], q[:, 1]) < self.r_core)
            if np.any(rest):
                J[rest] = self.transport.stack.jacobian(q[rest])
            return J
        return self._cached("jacobian", _states(q), compute)

    def det(self, q) -> np.ndarray:
        J = self.jacobian(q)
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]


def chart_radius(q: np.ndarray) -> np.ndarray:
    """|q|，U 外（NaN）记为 +inf。"""
    r = np.hypot(q[:, 0], q[:, 1])
    return np.where(np.isfinite(r), r, np.inf)


# ----- 共轭映射 -----


class TorusMap:
    """f_t：在 U 上等于 h∘g_t∘h⁻¹，其余恒等。"""

    def __init__(self, transport, iso: DiskIsotopy, t: float = 1.0, chart: Optional[DiskChart] = None):
        self.transport = transport
        self.iso = iso
        self.t = float(t)
        self.chart = chart or DiskChart(transport)
        self.center = transport.center
        self.lam = transport.lam

    def _apply(self, y, local) -> np.ndarray:
        y = np.mod(_states(y), 1.0)
        out = y.copy()
        q = self.chart.to_chart(y)
        r = chart_radius(q)
        # zero_radius 内与 support_radius 外 g_t 恒等
        m = (r >= self.iso.zero_radius) & (r < self.iso.support_radius)
        if np.any(m):
            out[m] = self.chart.from_chart(local(q[m]))
        return out

    def forward(self, y) -> np.ndarray:
        return self._apply(y, lambda q: self.iso.g(q, self.t))

    def inverse(self, y) -> np.ndarray:
        return self._apply(y, lambda q: self.iso.inverse(q, self.t))

    def jacobian(self, y, step: float = FD_STEP) -> np.ndarray:
        y = _states(y)
        n = y.shape[0]
        e0, e1 = np.array([step, 0.0]), np.array([0.0, step])
        vals = self.forward(np.vstack([y + e0, y - e0, y + e1, y - e1]))
        J = np.empty((n, 2, 2))
        J[:, :, 0] = wrap(vals[:n] - vals[n:2 * n]) / (2.0 * step)
        J[:, :, 1] = wrap(vals[2 * n:3 * n] - vals[3 * n:]) / (2.0 * step)
        return J

    def identity_region(self, y) -> np.ndarray:
        """深度 N 截断下 U 的补集。"""
        return ~self.chart.in_U(y)

    def uncertain(self, y) -> np.ndarray:
        return _uncertain(self.transport, y)


def conjugate_map(transport, iso: DiskIsotopy, t: float = 1.0) -> TorusMap:
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"t 须在 [0, 1] 内，得到 {t}")
    return TorusMap(transport, iso, t)


def torus_map_area(fmap: TorusMap, y: np.ndarray) -> float:
    """max ||det Df| − 1|；Df 含两次 Dh，偏差受 jacobian_constancy 控制。"""
    J = fmap.jacobian(y)
    return float(np.max(np.abs(J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0] - 1.0)))


# ----- 时间变换 -----


def _bump_slope(samples: int = 20001) -> float:
    return float(np.max(np.abs(_BUMP(np.linspace(0.0, 1.0, samples))[1])))


@dataclass
class TimeChange:
    """τ(y) = 1 + ε_p·b(|y−c|/ρ)，b 在 [0,1/2] 为 1、>=1 为 0；c1 模式下 ε_p = ε/max(1, max|b′|/ρ)。"""

    epsilon: float
    center: np.ndarray
    radius: float
    mode: str = "c1"
    plateau_eps: float = field(init=False)

    def __post_init__(self):
        if self.mode not in TAU_MODES:
            raise DomainError(f"τ 模式须为 {TAU_MODES} 之一，得到 {self.mode!r}")
        if self.epsilon < 0.0 or self.radius <= 0.0:
            raise DomainError("ε 须非负，半径须为正")
        self.center = np.asarray(self.center, dtype=float)
        if self.mode == "c1":
            self.plateau_eps = self.epsilon / max(1.0, _bump_slope() / self.radius)
        else:
            self.plateau_eps = self.epsilon

    @property
    def plateau(self) -> float:
        return 1.0 + self.plateau_eps

    def _offset(self, y: np.ndarray):
        d = wrap(_states(y) - self.center)
        return d, np.hypot(d[:, 0], d[:, 1])

    def __call__(self, y) -> np.ndarray:
        _, r = self._offset(y)
        return 1.0 + self.plateau_eps * _BUMP(r / self.radius)[0]

    def gradient(self, y) -> np.ndarray:
        d, r = self._offset(y)
        slope = self.plateau_eps * _BUMP(r / self.radius)[1] / self.radius
        safe = np.where(r > 0.0, r, 1.0)
        return np.where((r > 0.0)[:, None], slope[:, None] * d / safe[:, None], 0.0)

    def c1_norm(self, grid: int = 401) -> Dict[str, float]:
        """稠密网格上的 ‖τ−1‖_C0 与 ‖∇τ‖_C0。"""
        xs = np.linspace(-1.1 * self.radius, 1.1 * self.radius, grid)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        pts = self.center + np.column_stack([gx.ravel(), gy.ravel()])
        c0 = float(np.max(np.abs(self(pts) - 1.0)))
        c1 = float(np.max(np.linalg.norm(self.gradient(pts), axis=1)))
        return {"c0": c0, "gradient": c1, "c1": max(c0, c1)}


def time_change(epsilon: float, center: Sequence[float], radius: float, mode: str = "c1",
                allowed_center: Optional[Sequence[float]] = None,
                allowed_radius: Optional[float] = None) -> TimeChange:
    """allowed_* 给出允许的子圆盘（流场恒为零且 h 为相似的区域）；越界抛 SupportViolationError。"""
    if allowed_radius is not None:
        ac = np.asarray(center if allowed_center is None else allowed_center, dtype=float)
        reach = float(np.hypot(*wrap(np.asarray(center, dtype=float) - ac))) + radius
        if reach >= allowed_radius:
            raise SupportViolationError(
                f"τ 的支撑（半径 {radius:.4g}，外缘 {reach:.4g}）越出允许子圆盘（半径 {allowed_radius:.4g}）")
    return TimeChange(epsilon, np.asarray(center, dtype=float), radius, mode)


def allowed_tau_radius(transport, iso: DiskIsotopy) -> float:
    return transport.lam * min(transport.r_core, iso.zero_radius)


def tau_in_still_core(tau: TimeChange, transport, iso: DiskIsotopy) -> bool:
    """τ − 1 的支撑是否落在 h({|q| < min(r_core, zero_radius)}) 内：此时运动轨道上 τ ≡ 1，Θ = θ/τ 成立。"""
    if tau.plateau_eps == 0.0:
        return True
    reach = float(np.hypot(*wrap(tau.center - transport.center))) + tau.radius
    return reach < allowed_tau_radius(transport, iso)


def default_time_change(cfg: TauConfig, transport, iso: DiskIsotopy) -> TimeChange:
    allowed = allowed_tau_radius(transport, iso)
    radius = cfg.radius_fraction * TAU_SUPPORT_SHRINK * allowed
    return time_change(cfg.epsilon, transport.center, radius, cfg.mode, transport.center, allowed)


# ----- 悬挂场 -----


class SuspensionField:
    """X(y, θ) = (∂_t F(x, t)|_(t=θ), τ(y))，x = f_θ⁻¹(y)；状态为 (x1, x2, θ)。"""

    def __init__(self, transport, iso: DiskIsotopy, tau: TimeChange, chart: Optional[DiskChart] = None):
        self.transport = transport
        self.iso = iso
        self.tau = tau
        self.chart = chart or DiskChart(transport)
        self.center = transport.center
        self.lam = transport.lam
        self.core = self.lam * transport.r_core
        self.support = self.lam * iso.support_radius
        self.zero = self.lam * iso.zero_radius
        self.chart_step = CHART_STEP * iso.radius
        self.tau_still = tau_in_still_core(tau, transport, iso)

    @property
    def epsilon(self) -> float:
        return self.tau.epsilon

    def with_tau(self, tau: TimeChange) -> "SuspensionField":
        return SuspensionField(self.transport, self.iso, tau, self.chart)

    # 圆盘坐标中的量

    def moving_chart(self, q: np.ndarray) -> np.ndarray:
        r = chart_radius(_states(q))
        return (r >= self.iso.zero_radius) & (r < self.iso.support_radius)

    def chart_tau(self, q) -> np.ndarray:
        q = _states(q)
        if self.tau_still:
            return np.ones(q.shape[0])
        return self.tau(self.chart.from_chart(q))

    def chart_jacobian(self, q, theta) -> np.ndarray:
        """(Z_θ, τ∘h) 对 (q1, q2, θ) 的雅可比，(n, 3, 3)。"""
        q = _states(q)
        th = _thetas(theta, q.shape[0])
        out = np.zeros((q.shape[0], 3, 3))
        out[:, :2, :2] = self.iso.field_jacobian(q, th)
        out[:, :2, 2] = self.iso.field_dt(q, th)
        if not self.tau_still:
            grad = self.tau.gradient(self.chart.from_chart(q))
            out[:, 2, :2] = np.einsum("nji,nj->ni", self.chart.jacobian(q), grad)
        return out

    # 环面上的量

    def planar(self, y, theta) -> np.ndarray:
        y = np.mod(_states(y), 1.0)
        th = _thetas(theta, y.shape[0])
        out = np.zeros_like(y)
        q = self.chart.to_chart(y)
        m = self.moving_chart(q)
        if np.any(m):
            out[m] = np.einsum("nij,nj->ni", self.chart.jacobian(q[m]), self.iso.field(q[m], th[m]))
        return out

    def __call__(self, states) -> np.ndarray:
        s = _states(states)
        return np.column_stack([self.planar(s[:, :2], s[:, 2]), self.tau(s[:, :2])])

    def planar_jacobian(self, y, theta, step: float = FD_STEP) -> np.ndarray:
        """∂(X1, X2)/∂(x1, x2, θ)，(n, 2, 3)：核内闭式，其余运动点对环面坐标差分。"""
        y = np.mod(_states(y), 1.0)
        th = _thetas(theta, y.shape[0])
        out = np.zeros((y.shape[0], 2, 3))
        q = self.chart.to_chart(y)
        m = self.moving_chart(q)
        core = m & self.chart.in_core(y)
        if np.any(core):
            out[core, :, :2] = self.iso.field_jacobian(q[core], th[core])
            out[core, :, 2] = self.lam * self.iso.field_dt(q[core], th[core])
        rest = m & ~core
        if np.any(rest):
            s = np.column_stack([y[rest], th[rest]])
            for j in range(3):
                e = np.zeros(3)
                e[j] = step
                out[rest, :, j] = (self.planar((s + e)[:, :2], (s + e)[:, 2])
                                   - self.planar((s - e)[:, :2], (s - e)[:, 2])) / (2.0 * step)
        return out

    def jacobian(self, states) -> np.ndarray:
        s = _states(states)
        out = np.zeros((s.shape[0], 3, 3))
        out[:, :2, :] = self.planar_jacobian(s[:, :2], s[:, 2])
        out[:, 2, :2] = self.tau.gradient(s[:, :2])
        return out

    def divergence(self, states) -> np.ndarray:
        J = self.jacobian(states)
        return J[:, 0, 0] + J[:, 1, 1] + J[:, 2, 2]

    def moving(self, y) -> np.ndarray:
        return self.moving_chart(self.chart.to_chart(y))

    def stationary(self, y) -> np.ndarray:
        """对所有 θ 平面分量恒为零的点：轨道为 (y, θ + τ(y)t)。"""
        return ~self.moving(y)

    def trivial(self, y) -> np.ndarray:
        """静止且 ∇τ = 0 的点：切流在横向上为恒等。"""
        y = np.mod(_states(y), 1.0)
        flat_tau = np.linalg.norm(self.tau.gradient(y), axis=1) == 0.0
        return flat_tau & self.stationary(y)

    def in_complement(self, y) -> np.ndarray:
        return ~self.chart.in_U(y)

    def uncertain(self, y) -> np.ndarray:
        return _uncertain(self.transport, y)

    def chart_rows(self, y, margin: float = 0.0) -> np.ndarray:
        """需在圆盘坐标中差分的点：U 的非核部分，且差分模板不出单位圆盘。"""
        y = np.mod(_states(y), 1.0)
        r = chart_radius(self.chart.to_chart(y))
        return (r < 1.0 - 4.0 * self.chart_step) & ~self.chart.in_core(y, margin)

    def area_density(self, y) -> np.ndarray:
        """ν = h_*(λ² dq1∧dq2) 相对 dx1∧dx2 的密度 λ²/|det Dh|；核内与 U 外为 1。"""
        y = np.mod(_states(y), 1.0)
        out = np.ones(y.shape[0])
        q = self.chart.to_chart(y)
        m = np.isfinite(q[:, 0]) & ~self.chart.in_core(y)
        if np.any(m):
            out[m] = self.lam ** 2 / np.abs(self.chart.det(q[m]))
        return out


def suspension_field(transport, iso: DiskIsotopy, tau) -> SuspensionField:
    """tau 可为 TimeChange 或 TauConfig。"""
    if isinstance(tau, TauConfig):
        tau = default_time_change(tau, transport, iso)
    return SuspensionField(transport, iso, tau)


def _with_theta(X: SuspensionField, y: np.ndarray, rng: np.random.Generator, theta: bool) -> np.ndarray:
    if not theta:
        return y
    return np.column_stack([y, rng.random(y.shape[0])])


def _disk_points(n: int, r_lo: float, r_hi: float, rng: np.random.Generator) -> np.ndarray:
    r = np.sqrt(rng.uniform(r_lo ** 2, r_hi ** 2, n))
    th = 2.0 * math.pi * rng.random(n)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def sample_moving(X: SuspensionField, n: int, rng: np.random.Generator, theta: bool = True) -> np.ndarray:
    """平面场非零区 h({zero_radius <= |q| < support_radius}) 内的点（圆盘坐标中均匀取，经 h 推出）。"""
    if X.iso.support_radius <= 0.0:
        raise DomainError(f"同痕 {X.iso.name} 没有运动区")
    q = _disk_points(n, X.iso.zero_radius, X.iso.support_radius, rng)
    return _with_theta(X, X.chart.from_chart(q), rng, theta)


def sample_support(X: SuspensionField, n: int, rng: np.random.Generator, theta: bool = True,
                   tau_share: float = 0.25) -> np.ndarray:
    """平面场支撑 h({|q| < support_radius}) 与 τ 支撑圆盘内的混合样本，tau_share 为后者占比。"""
    n_tau = n if X.iso.support_radius <= 0.0 else int(round(tau_share * n))
    parts = [X.tau.center + _disk_points(n_tau, 0.0, X.tau.radius, rng)]
    if n > n_tau:
        q = _disk_points(n - n_tau, 0.0, X.iso.support_radius, rng)
        parts.append(X.chart.from_chart(q))
    y = np.mod(np.vstack(parts), 1.0)[rng.permutation(n)]
    return _with_theta(X, y, rng, theta)


def _chart_divergence(iso: DiskIsotopy, q: np.ndarray, th: np.ndarray, h: float) -> np.ndarray:
    div = np.zeros(q.shape[0])
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        div += sum(w * iso.field(q + k * e, th)[:, j] for k, w in _STENCIL) / (12.0 * h)
    return div


def divergence_residual(X: SuspensionField, states: np.ndarray) -> float:
    """(X1, X2) 的四阶中心差分散度最大绝对值；U 的非核部分相对 ν 在圆盘坐标中计算。"""
    s = _states(states)
    y = np.mod(s[:, :2], 1.0)
    th = np.mod(s[:, 2], 1.0)
    h = STENCIL_STEP * max(X.support, X.tau.radius)
    chart = X.chart_rows(y, 2.0 * h)
    div = np.zeros(s.shape[0])
    if np.any(chart):
        div[chart] = _chart_divergence(X.iso, X.chart.to_chart(y[chart]), th[chart], X.chart_step)
    rest = ~chart
    if np.any(rest):
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            div[rest] += sum(w * X.planar(y[rest] + k * e, th[rest])[:, j] for k, w in _STENCIL) / (12.0 * h)
    return float(np.max(np.abs(div)))


def chart_gradient(X: SuspensionField, fun: Callable[[np.ndarray], np.ndarray], states: np.ndarray,
                   step: Optional[float] = None) -> np.ndarray:
    """∂fun/∂(x1, x2) = Dh⁻ᵀ ∇_q(fun∘h)，q = h⁻¹(y)；其余状态分量保持不变。"""
    s = _states(states)
    n = s.shape[0]
    h = step or X.chart_step
    q = X.chart.to_chart(s[:, :2])
    shifted = []
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        shifted += [q + k * e for k, _ in _STENCIL]
    big = np.tile(s, (len(shifted), 1))
    big[:, :2] = X.chart.from_chart(np.vstack(shifted))
    vals = np.asarray(fun(big), dtype=float).reshape(len(shifted), n)
    gq = np.empty((n, 2))
    for j in range(2):
        block = vals[4 * j:4 * j + 4]
        gq[:, j] = sum(w * block[i] for i, (_, w) in enumerate(_STENCIL)) / (12.0 * h)
    Dh = X.chart.jacobian(q)
    return np.linalg.solve(np.transpose(Dh, (0, 2, 1)), gq[:, :, None])[:, :, 0]


def field_slice(X: SuspensionField, theta: float, grid: int,
                window: Sequence[float] = (0.0, 1.0, 0.0, 1.0)) -> pd.DataFrame:
    x0, x1, y0, y1 = window
    gx, gy = np.meshgrid(np.linspace(x0, x1, grid), np.linspace(y0, y1, grid), indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    vals = X(np.column_stack([pts, np.full(pts.shape[0], theta)]))
    return pd.DataFrame({"x1": pts[:, 0], "x2": pts[:, 1], "theta": theta,
                         "X1": vals[:, 0], "X2": vals[:, 1], "tau": vals[:, 2]})


# ----- 积分 -----


@dataclass
class Trajectory:
    t: np.ndarray
    lift: np.ndarray
    nfev: int
    success: bool
    message: str
    error_estimate: float
    flagged: bool = False

    @property
    def states(self) -> np.ndarray:
        """约化到基本区域 [0,1)³。"""
        return np.mod(self.lift, 1.0)

    def to_frame(self) -> pd.DataFrame:
        s = self.states
        return pd.DataFrame({"t": self.t, "x1": s[:, 0], "x2": s[:, 1], "theta": s[:, 2]})


def _rhs(X: SuspensionField):
    def fun(_t, s):
        return X(s[None, :])[0]
    return fun


def chart_rhs(X: SuspensionField):
    """(q1, q2, θ) 上的 (Z_θ(q), τ(h(q)))。"""
    def fun(_t, s):
        q = s[None, :2]
        return np.concatenate([X.iso.field(q, np.mod(s[2], 1.0))[0], X.chart_tau(q)])
    return fun


def _solve(fun, span, x0, rtol, atol, **kw):
    sol = solve_ivp(fun, span, x0, method="DOP853", rtol=rtol, atol=atol, **kw)
    if sol.status < 0:
        raise NumericalError(f"积分失败（t={span}）: {sol.message}")
    return sol


def chart_start(X: SuspensionField, x0: np.ndarray) -> np.ndarray:
    q0 = X.chart.to_chart(x0[None, :2])[0]
    return np.array([q0[0], q0[1], x0[2]])


def chart_lift(X: SuspensionField, x0: np.ndarray, qs: np.ndarray) -> np.ndarray:
    """圆盘轨道经 h 推出，逐点取最近像拼成连续提升。"""
    ys = X.chart.from_chart(qs)
    steps = wrap(np.diff(np.vstack([np.mod(x0[None, :2], 1.0), ys]), axis=0))
    return x0[:2] + np.cumsum(steps, axis=0)


def integrate(X: SuspensionField, x0: Sequence[float], T: float, n_out: int = 101,
              cfg: Optional[IntegratorConfig] = None, estimate_error: bool = True,
              chart: bool = True) -> Trajectory:
    """自适应 DOP853 积分；T 可为负（反向）。平面分量恒零的初值直接给出解析轨道；
    运动初值默认在圆盘坐标中积分，chart=False 时直接积分环面上的 X。"""
    cfg = cfg or IntegratorConfig()
    x0 = np.asarray(x0, dtype=float)
    ts = np.linspace(0.0, T, n_out)
    if X.stationary(x0[:2])[0]:
        tau = float(X.tau(x0[:2])[0])
        lift = np.tile(x0, (n_out, 1))
        lift[:, 2] = x0[2] + tau * ts
        return Trajectory(ts, lift, 0, True, "解析轨道", 0.0)
    err = 0.0
    if chart:
        fun, z0 = chart_rhs(X), chart_start(X, x0)
        sol = _solve(fun, (0.0, T), z0, cfg.rtol, cfg.atol, t_eval=ts)
        lift = np.column_stack([chart_lift(X, x0, sol.y[:2].T), sol.y[2]])
        if estimate_error:
            fine = _solve(fun, (0.0, T), z0, cfg.rtol * 1e-2, cfg.atol * 1e-2)
            ends = X.chart.from_chart(np.vstack([sol.y[:2, -1], fine.y[:2, -1]]))
            err = float(max(np.max(np.abs(wrap(ends[0] - ends[1]))), abs(fine.y[2, -1] - sol.y[2, -1])))
    else:
        sol = _solve(_rhs(X), (0.0, T), x0, cfg.rtol, cfg.atol, t_eval=ts)
        lift = sol.y.T
        if estimate_error:
            fine = _solve(_rhs(X), (0.0, T), x0, cfg.rtol * 1e-2, cfg.atol * 1e-2)
            err = float(np.max(np.abs(fine.y[:, -1] - sol.y[:, -1])))
    flagged = bool(np.any(X.uncertain(lift[:, :2])))
    if flagged:
        logger.warning("轨道进入 ∂U 不确定带，x0=%s", x0)
    return Trajectory(sol.t, lift, int(sol.nfev), bool(sol.success), sol.message, err, flagged)


@dataclass
class LyapunovEstimate:
    exponents: np.ndarray
    horizon: float
    divergence_average: float
    convergence_error: float
    trace: pd.DataFrame
    trivial: bool = False

    def to_dict(self) -> Dict[str, object]:
        return {"lambda_1": float(self.exponents[0]), "lambda_2": float(self.exponents[1]),
                "lambda_3": float(self.exponents[2]), "sum": float(np.sum(self.exponents)),
                "divergence_average": self.divergence_average, "horizon": self.horizon,
                "convergence_error": self.convergence_error, "trivial": self.trivial}


def _tangent_rhs(X: SuspensionField):
    def fun(_t, s):
        x = s[None, :3]
        A = X.jacobian(x)[0]
        Q = s[3:12].reshape(3, 3)
        return np.concatenate([X(x)[0], (A @ Q).ravel(), [np.trace(A)]])
    return fun


def _chart_tangent_rhs(X: SuspensionField):
    # h 与时间无关，圆盘坐标与环面坐标下的指数相同
    base = chart_rhs(X)

    def fun(t, s):
        A = X.chart_jacobian(s[None, :2], s[2])[0]
        Q = s[3:12].reshape(3, 3)
        return np.concatenate([base(t, s[:3]), (A @ Q).ravel(), [np.trace(A)]])
    return fun


def _tangent_system(X: SuspensionField, x0: np.ndarray, chart: bool):
    if chart and X.moving(x0[:2])[0]:
        return _chart_tangent_rhs(X), chart_start(X, x0), True
    return _tangent_rhs(X), x0.copy(), False


def lyapunov(X: SuspensionField, x0: Sequence[float], T: float,
             cfg: Optional[IntegratorConfig] = None, chart: bool = True) -> LyapunovEstimate:
    """切丛积分，每 qr_every 个时间单位做一次 QR，log|diag R| 累加后除以时间。"""
    cfg = cfg or IntegratorConfig()
    x0 = np.asarray(x0, dtype=float)
    if X.trivial(x0[:2])[0]:
        trace = pd.DataFrame({"t": [T], "lambda_1": [0.0], "lambda_2": [0.0], "lambda_3": [0.0]})
        return LyapunovEstimate(np.zeros(3), T, 0.0, 0.0, trace, trivial=True)
    fun, start, _ = _tangent_system(X, x0, chart)
    state = np.concatenate([start, np.eye(3).ravel(), [0.0]])
    sums = np.zeros(3)
    rows = []
    t = 0.0
    n_steps = max(1, int(math.ceil(T / cfg.qr_every - 1e-12)))
    for k in range(n_steps):
        t1 = min(T, (k + 1) * cfg.qr_every)
        sol = _solve(fun, (t, t1), state, cfg.rtol, cfg.atol)
        state = sol.y[:, -1].copy()
        q, r = qr(state[3:12].reshape(3, 3))
        sign = np.sign(np.diag(r))
        sign[sign == 0.0] = 1.0
        sums += np.log(np.abs(np.diag(r)))
        state[3:12] = (q * sign).ravel()
        t = t1
        rows.append({"t": t, "lambda_1": sums[0] / t, "lambda_2": sums[1] / t, "lambda_3": sums[2] / t,
                     "divergence_average": state[12] / t})
    trace = pd.DataFrame(rows)
    exps = np.sort(sums / t)[::-1]
    half = trace[trace["t"] <= 0.5 * t]
    conv = 0.0
    if not half.empty:
        prev = np.sort(half.iloc[-1][["lambda_1", "lambda_2", "lambda_3"]].to_numpy(dtype=float))[::-1]
        conv = float(np.max(np.abs(exps - prev)))
    return LyapunovEstimate(exps, t, float(state[12] / t), conv, trace)


def volume_defect(X: SuspensionField, seeds: np.ndarray, T: float,
                  cfg: Optional[IntegratorConfig] = None) -> pd.DataFrame:
    """时间 T 流映射的切映射行列式与 1 的偏差；transport_ratio 为环面 Lebesgue 体积的变化
    det Dh(q_T)/det Dh(q_0)，其与 1 的偏差来自 h 的雅可比常数误差。"""
    cfg = cfg or IntegratorConfig()
    rows = []
    for s in _states(seeds):
        det, ratio = 1.0, 1.0
        if not X.trivial(s[:2])[0]:
            fun, start, in_chart = _tangent_system(X, s, True)
            sol = _solve(fun, (0.0, T), np.concatenate([start, np.eye(3).ravel(), [0.0]]), cfg.rtol, cfg.atol)
            det = float(np.linalg.det(sol.y[3:12, -1].reshape(3, 3)))
            if in_chart:
                dets = X.chart.det(np.vstack([start[:2], sol.y[:2, -1]]))
                ratio = float(dets[1] / dets[0])
        rows.append({"x1": s[0], "x2": s[1], "theta": s[2], "det": det, "defect": abs(det - 1.0),
                     "transport_ratio": ratio})
    return pd.DataFrame(rows)


# ----- 截面回归 -----


def return_map(X: SuspensionField, y: np.ndarray, cfg: Optional[IntegratorConfig] = None,
               chart: bool = True) -> np.ndarray:
    """从 (y, 0) 出发到 θ = 1 的首次穿越点（θ̇ >= 1 保证穿越唯一）。"""
    cfg = cfg or IntegratorConfig()
    y = np.mod(_states(y), 1.0)
    out = y.copy()
    moving = X.moving(y)
    q = X.chart.to_chart(y)

    def hit(_t, s):
        return s[2] - 1.0
    hit.terminal = True
    hit.direction = 1

    ends, rows = [], []
    for i in np.flatnonzero(moving):
        start = np.array([q[i, 0], q[i, 1], 0.0]) if chart else np.array([y[i, 0], y[i, 1], 0.0])
        sol = _solve(chart_rhs(X) if chart else _rhs(X), (0.0, RETURN_SPAN), start, cfg.rtol, cfg.atol,
                     events=hit)
        if not sol.t_events[0].size:
            raise NumericalError(f"截面回归失败：{y[i]} 在 t<={RETURN_SPAN} 内未回到 θ=0")
        ends.append(sol.y_events[0][0][:2])
        rows.append(i)
    if rows:
        end = np.vstack(ends)
        out[rows] = X.chart.from_chart(end) if chart else np.mod(end, 1.0)
    return out


def flow_map_consistency(X: SuspensionField, fmap: TorusMap, y: np.ndarray,
                         cfg: Optional[IntegratorConfig] = None) -> float:
    """τ ≡ 1 时 θ=0 截面上的时间 1 映射与 f_1 的最大偏差。"""
    unit = replace(X.tau, epsilon=0.0) if X.tau.epsilon else X.tau
    P = return_map(X.with_tau(unit), y, cfg)
    return float(np.max(np.linalg.norm(wrap(P - fmap.forward(y)), axis=1)))


def complement_approach(X: SuspensionField, y: Sequence[float], direction: Sequence[float],
                        max_dist: float = 0.5, step: float = 1e-4,
                        refine: int = 30) -> Tuple[np.ndarray, np.ndarray, float]:
    """从 U 中的 y 沿 direction 前进到首个补集点 x0（步长 step 粗找后二分 refine 次）；
    返回 (x0, 指回 y 的单位方向, 距离)。"""
    y = np.asarray(y, dtype=float)[:2]
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    ts = step * np.arange(1, int(max_dist / step) + 1)
    hits = np.flatnonzero(X.in_complement(np.mod(y + ts[:, None] * d, 1.0)))
    if not hits.size:
        raise DomainError(f"{y} 沿 {d} 在 {max_dist} 内未到达补集")
    lo, hi = (ts[hits[0] - 1] if hits[0] else 0.0), ts[hits[0]]
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        if X.in_complement(np.mod(y + mid * d, 1.0))[0]:
            hi = mid
        else:
            lo = mid
    return np.mod(y + hi * d, 1.0), -d, float(hi)


def support_edge_offsets(X: SuspensionField, x0: Sequence[float], direction: Sequence[float],
                         widths: Sequence[float], max_dist: float = 0.2, step: float = 1e-5) -> Tuple[float, ...]:
    """自 x0 沿 direction 前进，首次到达圆盘半径 support_radius − w 处的距离，逐个 w 给出。"""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    ts = step * np.arange(1, int(max_dist / step) + 1)
    r = chart_radius(X.chart.to_chart(np.mod(np.asarray(x0, dtype=float)[:2] + ts[:, None] * d, 1.0)))
    out = []
    for w in widths:
        hit = np.flatnonzero(r <= X.iso.support_radius - w)
        if not hit.size:
            raise DomainError(f"沿 {d} 在 {max_dist} 内未进入 |q| <= {X.iso.support_radius - w:.4g}")
        out.append(float(ts[hit[0]]))
    return tuple(out)


def poincare_flatness(X: SuspensionField, x0: Sequence[float], deltas: Sequence[float] = (1e-2, 5e-3, 2.5e-3),
                      direction: Sequence[float] = (1.0, 0.0), sched: Optional[FlatnessSchedule] = None,
                      cfg: Optional[IntegratorConfig] = None) -> pd.DataFrame:
    """补集点附近回归映射 P 的偏差 ‖P(x)−x‖ 及 ‖P(x)−x‖/δᵏ（k=1..3）；bound 为所在 V_n 的 λⁿ 包络。"""
    x0 = np.mod(np.asarray(x0, dtype=float)[:2], 1.0)
    if not X.in_complement(x0)[0]:
        raise DomainError(f"{x0} 不在 U 的补集中")
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    pts = np.vstack([x0] + [x0 + delta * d for delta in deltas])
    P = return_map(X, pts, cfg)
    dev = np.linalg.norm(wrap(P - np.mod(pts, 1.0)), axis=1)
    dist = distance_to_boundary(X.transport.alpha, X.transport.depth, np.mod(pts, 1.0))
    rows = []
    for delta, dv, dd in zip((0.0,) + tuple(deltas), dev, dist):
        row = {"delta": delta, "deviation": float(dv), "distance": float(dd)}
        for k in (1, 2, 3):
            row[f"ratio_k{k}"] = float(dv / delta ** k) if delta > 0 else float("nan")
        row["bound"] = float("nan")
        if sched is not None and delta > 0:
            levels = [n for n in range(1, sched.n_max + 1) if 0.0 < dd < sched.band(n)]
            row["bound"] = float(sched.decay ** max(levels)) if levels else 1.0
        rows.append(row)
    return pd.DataFrame(rows)


