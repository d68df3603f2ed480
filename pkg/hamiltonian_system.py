# -*- coding: utf-8 -*-
"""
哈密顿层：击中时间 Θ、势函数 H̃、T³×ℝ 上的 Ĥ = H̃(x1, x2, Θ) + I 与 ω̂ = w dx1∧dx2 + dΘ∧dI，
场 X_Ĥ = (X1, X2, τ, v)、拉直坐标 Φ(x1, x2, θ, I) = (x1, x2, Θ, I) 以及能量面上的流。

w 为 ν = h_*(λ²dq1∧dq2) 的密度（核内与 U 外为 1），X 相对 ν 无散，H̃ = λ²K_θ̃∘h⁻¹ 满足
(∂H̃/∂x2, −∂H̃/∂x1) = w·(X1, X2)。τ 的支撑落在平面场恒为零的子圆盘内时 Θ = θ/τ(y) 处处成立；
否则逐点向后事件积分到 θ = 0。
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.polynomial.legendre import leggauss
from scipy.integrate import solve_ivp

from lab_config import (DET_OMEGA_MIN, ENERGY_DRIFT_TOL, LOOP_TOL, PDE_GRADIENT_TOL, SPEED_CHANGE_TOL,
                        STENCIL_STEP, SYMPLECTIC_TOL, IntegratorConfig)
from lab_errors import DegeneracyError, NumericalError
from torus_dynamics import (SuspensionField, chart_gradient, chart_lift, chart_radius, chart_rhs, chart_start,
                            integrate, sample_support, wrap)

logger = logging.getLogger(__name__)

# 取样时避开截面 θ = 0 两侧（Θ 在截面处跳变 1 − 1/τ）
SECTION_GAP = 0.05
THETA_SLICE_STEP = 1e-3
# 路径积分：环面上的节点间距、圆盘弦上的 Gauss 节点数、视为跨越补集的弦长
PATH_SPACING = 5e-4
GAUSS_NODES = 8
CHORD_JUMP = 0.1


def _states(s) -> np.ndarray:
    return np.atleast_2d(np.asarray(s, dtype=float))


def grad4(fun: Callable[[np.ndarray], np.ndarray], states: np.ndarray, steps: Sequence[float],
          axes: Optional[Sequence[int]] = None) -> np.ndarray:
    """四阶中心差分梯度，(n, len(steps))；axes 缺省为前 len(steps) 个分量。"""
    s = _states(states)
    axes = range(len(steps)) if axes is None else axes
    out = np.empty((s.shape[0], len(steps)))
    for col, (j, h) in enumerate(zip(axes, steps)):
        e = np.zeros(s.shape[1])
        e[j] = h
        out[:, col] = (-fun(s + 2 * e) + 8.0 * fun(s + e) - 8.0 * fun(s - e) + fun(s - 2 * e)) / (12.0 * h)
    return out


def _spatial_step(X: SuspensionField) -> float:
    return STENCIL_STEP * max(X.support, X.tau.radius)


def state_gradient(X: SuspensionField, fun: Callable[[np.ndarray], np.ndarray], states: np.ndarray,
                   steps: Sequence[float]) -> np.ndarray:
    """同 grad4；U 的非核部分的 (x1, x2) 分量改在圆盘坐标中差分。"""
    s = _states(states)
    out = np.empty((s.shape[0], len(steps)))
    chart = X.chart_rows(s[:, :2], 2.0 * steps[0])
    if np.any(chart):
        out[chart, :2] = chart_gradient(X, fun, s[chart])
        if len(steps) > 2:
            out[chart, 2:] = grad4(fun, s[chart], steps[2:], axes=range(2, len(steps)))
    rest = ~chart
    if np.any(rest):
        out[rest] = grad4(fun, s[rest], steps)
    return out


# ----- 击中时间 -----


class HittingTime:
    """Θ(x1, x2, θ)：沿流向后回到 θ = 0 截面所需的时间。"""

    def __init__(self, X: SuspensionField, cfg: Optional[IntegratorConfig] = None):
        self.X = X
        self.cfg = cfg or IntegratorConfig()
        self.closed = X.tau_still

    def closed_form(self, states) -> np.ndarray:
        s = _states(states)
        return np.mod(s[:, 2], 1.0) / self.X.tau(s[:, :2])

    def __call__(self, states) -> np.ndarray:
        s = _states(states)
        if self.closed:
            return self.closed_form(s)
        return np.array([self.integrated(p) for p in s])

    def integrated(self, state: Sequence[float], cfg: Optional[IntegratorConfig] = None) -> float:
        """向后事件积分到 θ = 0（θ̇ = τ >= 1 保证唯一穿越）；静止点上 θ̇ = τ(y) 为常数。"""
        cfg = cfg or self.cfg
        p = np.asarray(state, dtype=float)[:3].copy()
        p[2] = p[2] % 1.0
        if p[2] == 0.0:
            return 0.0
        if self.X.stationary(p[None, :2])[0]:
            return float(p[2] / self.X.tau(p[None, :2])[0])

        def section(_t, s):
            return s[2]
        section.terminal = True
        section.direction = -1

        sol = solve_ivp(chart_rhs(self.X), (0.0, -1.0 - 1e-9), chart_start(self.X, p), method="DOP853",
                        rtol=cfg.rtol, atol=cfg.atol, events=section)
        if sol.status < 0 or not sol.t_events[0].size:
            raise NumericalError(f"击中时间积分失败: {sol.message}")
        return float(-sol.t_events[0][0])

    def gradient(self, states) -> np.ndarray:
        h = _spatial_step(self.X)
        return state_gradient(self.X, self, states, (h, h, STENCIL_STEP))


def hitting_time(X: SuspensionField, p: Sequence[float], method: str = "closed") -> float:
    theta = HittingTime(X)
    if method == "integrate":
        return theta.integrated(p)
    return float(theta(np.asarray(p, dtype=float)[None, :3])[0])


def speed_change_residual(X: SuspensionField, states: np.ndarray) -> float:
    """max |X1 ∂Θ/∂x1 + X2 ∂Θ/∂x2 + τ ∂Θ/∂θ − 1|。"""
    s = _states(states)
    dT = HittingTime(X).gradient(s)
    return float(np.max(np.abs(np.sum(X(s) * dT, axis=1) - 1.0)))


# ----- 势函数 -----


class PotentialField:
    """
    H̃(·, ·, θ̃)：∂H̃/∂x2 = w·X1，−∂H̃/∂x1 = w·X2，补集上为 0。
    有流函数时为 λ²K_θ̃∘h⁻¹；否则从 (0,0) 沿 (x1,0)、(x1,x2) 积分 w(−X2 dx1 + X1 dx2)，
    该 1-形式拉回圆盘后为 λ²(Z1 dq2 − Z2 dq1)，逐段沿圆盘中的弦积分。
    """

    def __init__(self, X: SuspensionField, theta: Optional[float] = None):
        self.X = X
        self.theta = theta
        self.closed = X.iso.stream(np.zeros((1, 2)), 0.5) is not None
        self._gauss = leggauss(GAUSS_NODES)

    def _theta(self, states: np.ndarray) -> np.ndarray:
        if states.shape[1] >= 3:
            return states[:, 2]
        if self.theta is None:
            raise ValueError("未给出 θ 切片")
        return np.full(states.shape[0], self.theta)

    def _on_support(self, states, stream: Callable) -> np.ndarray:
        s = _states(states)
        th = np.mod(self._theta(s), 1.0)
        q = self.X.chart.to_chart(s[:, :2])
        out = np.zeros(s.shape[0])
        m = chart_radius(q) < self.X.iso.support_radius
        if np.any(m):
            out[m] = self.X.lam ** 2 * stream(q[m], th[m])
        return out

    def closed_form(self, states) -> np.ndarray:
        return self._on_support(states, self.X.iso.stream)

    def chord_integral(self, q: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """折线 q[i] → q[i+1] 上 λ²∫(Z1 dq2 − Z2 dq1)，每段一个值；跨越补集（NaN 或长弦）的段记 0。"""
        a, b = q[:-1], q[1:]
        dq = b - a
        ok = np.all(np.isfinite(dq), axis=1) & (np.hypot(dq[:, 0], dq[:, 1]) < CHORD_JUMP)
        out = np.zeros(a.shape[0])
        if not np.any(ok):
            return out
        nodes, weights = self._gauss
        u = 0.5 * (nodes + 1.0)
        a, dq, th = a[ok], dq[ok], np.broadcast_to(theta, (q.shape[0] - 1,))[ok]
        pts = (a[:, None, :] + u[None, :, None] * dq[:, None, :]).reshape(-1, 2)
        Z = self.X.iso.field(pts, np.repeat(th, GAUSS_NODES)).reshape(-1, GAUSS_NODES, 2)
        flux = Z[:, :, 0] * dq[:, None, 1] - Z[:, :, 1] * dq[:, None, 0]
        out[ok] = self.X.lam ** 2 * 0.5 * flux @ weights
        return out

    def _polyline(self, y: np.ndarray) -> np.ndarray:
        x1, x2 = y
        leg1 = np.linspace(0.0, x1, max(2, int(math.ceil(x1 / PATH_SPACING)) + 1))
        leg2 = np.linspace(0.0, x2, max(2, int(math.ceil(x2 / PATH_SPACING)) + 1))
        return np.vstack([np.column_stack([leg1, np.zeros_like(leg1)]),
                          np.column_stack([np.full(leg2.size - 1, x1), leg2[1:]])])

    def _run_edges(self, q: np.ndarray) -> None:
        inside = np.isfinite(q[:, 0])
        edges = inside & ~(np.roll(inside, 1) & np.roll(inside, -1))
        if np.any(chart_radius(q[edges]) < self.X.iso.support_radius):
            logger.warning("路径进出补集的节点落在同痕支撑内，节点间距 %.3g 偏大", PATH_SPACING)

    def path_integral(self, states) -> np.ndarray:
        s = _states(states)
        th = np.mod(self._theta(s), 1.0)
        y = np.mod(s[:, :2], 1.0)
        paths = [self._polyline(p) for p in y]
        q_all = self.X.chart.to_chart(np.vstack(paths))
        out = np.empty(s.shape[0])
        start = 0
        for i, path in enumerate(paths):
            q = q_all[start:start + path.shape[0]]
            start += path.shape[0]
            self._run_edges(q)
            out[i] = float(np.sum(self.chord_integral(q, th[i])))
        return out

    def __call__(self, states) -> np.ndarray:
        return self.closed_form(states) if self.closed else self.path_integral(states)

    def dtheta(self, states) -> np.ndarray:
        """∂H̃/∂θ̃：有流函数时闭式，否则相邻 θ 切片中心差分。"""
        s = _states(states)
        if self.closed:
            return self._on_support(s, self.X.iso.stream_dt)
        e = np.array([0.0, 0.0, THETA_SLICE_STEP])
        return (self.path_integral(s + e) - self.path_integral(s - e)) / (2.0 * THETA_SLICE_STEP)

    def loop_residuals(self, theta: float, levels: Sequence[float] = (0.2, 0.5, 0.8)) -> pd.DataFrame:
        """∮ 沿水平环 Γ¹_a = {x2 = a} 与竖直环 Γ²_a = {x1 = a}，路径无关且周期时为 0。"""
        u = np.linspace(0.0, 1.0, int(math.ceil(1.0 / PATH_SPACING)) + 1)
        rows = []
        for a in levels:
            loops = []
            for pts in (np.column_stack([u, np.full_like(u, a)]), np.column_stack([np.full_like(u, a), u])):
                q = self.X.chart.to_chart(np.mod(pts, 1.0))
                self._run_edges(q)
                loops.append(float(np.sum(self.chord_integral(q, np.mod(theta, 1.0)))))
            h, v = loops
            rows.append({"a": a, "theta": theta, "horizontal": h, "vertical": v,
                         "passed": bool(max(abs(h), abs(v)) <= LOOP_TOL)})
        return pd.DataFrame(rows)

    def gradient_residual(self, states) -> float:
        """max |(∂H̃/∂x2, −∂H̃/∂x1) − w·(X1, X2)|。"""
        s = _states(states)
        h = _spatial_step(self.X)
        g = state_gradient(self.X, self, s, (h, h))
        wX = self.X.area_density(s[:, :2])[:, None] * self.X.planar(s[:, :2], s[:, 2])
        return float(np.max(np.abs(np.column_stack([g[:, 1], -g[:, 0]]) - wX)))

    def periodicity_residual(self, states) -> float:
        s = _states(states)
        base = self(s)
        shifts = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]))
        return float(max(np.max(np.abs(self(s + e) - base)) for e in shifts))

    def path_agreement(self, states) -> float:
        """闭式与路径积分之差（仅在有流函数时有意义）。"""
        return float(np.max(np.abs(self.closed_form(states) - self.path_integral(states))))


def potential(X: SuspensionField, theta: Optional[float] = None) -> PotentialField:
    return PotentialField(X, theta)


# ----- 哈密顿系统 -----


class HamiltonianSystem:
    """状态为 (x1, x2, θ, I)。"""

    def __init__(self, X: SuspensionField, pot: Optional[PotentialField] = None):
        self.X = X
        self.Theta = HittingTime(X)
        self.H = pot or PotentialField(X)

    def _at_Theta(self, s: np.ndarray) -> np.ndarray:
        return np.column_stack([s[:, :2], self.Theta(s[:, :3])])

    def H_hat(self, states) -> np.ndarray:
        s = _states(states)
        return self.H(self._at_Theta(s)) + s[:, 3]

    def v(self, states) -> np.ndarray:
        """v = −∂H̃/∂θ̃ 在 θ̃ = Θ 处。"""
        s = _states(states)
        return -self.H.dtheta(self._at_Theta(s))

    def field(self, states) -> np.ndarray:
        s = _states(states)
        return np.column_stack([self.X(s[:, :3]), self.v(s)])

    def _area_block(self, s: np.ndarray) -> np.ndarray:
        W = np.zeros((s.shape[0], 4, 4))
        w = self.X.area_density(s[:, :2])
        W[:, 0, 1], W[:, 1, 0] = w, -w
        return W

    def omega_hat(self, states) -> np.ndarray:
        """ω̂ 的 4×4 反对称矩阵，Ω_ij = ω̂(e_i, e_j)；Pfaffian 为 w·∂Θ/∂θ。"""
        s = _states(states)
        dT = self.Theta.gradient(s[:, :3])
        W = self._area_block(s)
        W[:, :3, 3] += dT
        W[:, 3, :3] -= dT
        return W

    def det_omega(self, states) -> np.ndarray:
        return np.linalg.det(self.omega_hat(states))

    def dH_hat(self, states) -> np.ndarray:
        h = _spatial_step(self.X)
        return state_gradient(self.X, self.H_hat, states, (h, h, STENCIL_STEP, 1.0))

    def symplectic_residual(self, states) -> float:
        """max ‖ω̂(X_Ĥ, ·) − dĤ‖_∞。"""
        s = _states(states)
        lhs = np.einsum("ni,nij->nj", self.field(s), self.omega_hat(s))
        return float(np.max(np.abs(lhs - self.dH_hat(s))))

    def closedness_residual(self, states) -> float:
        """dω̂ 的分量 ∂_iΘ_j − ∂_jΘ_i（i<j<3），嵌套差分；w 只依赖 x，w dx1∧dx2 自动闭。"""
        s = _states(states)[:, :3]
        h = _spatial_step(self.X)
        steps = (h, h, STENCIL_STEP)
        worst = 0.0
        for i in range(3):
            e = np.zeros(3)
            e[i] = steps[i]
            dgrad = (self.Theta.gradient(s + e) - self.Theta.gradient(s - e)) / (2.0 * steps[i])
            for j in range(i + 1, 3):
                f = np.zeros(3)
                f[j] = steps[j]
                dgrad_j = (self.Theta.gradient(s + f) - self.Theta.gradient(s - f)) / (2.0 * steps[j])
                worst = max(worst, float(np.max(np.abs(dgrad[:, j] - dgrad_j[:, i]))))
        return worst

    def theta_c1(self, states) -> float:
        """‖Θ − θ‖_C1，ω̂ 与 ω 的 C0 距离的上界。"""
        s = _states(states)[:, :3]
        diff = self.Theta(s) - np.mod(s[:, 2], 1.0)
        g = self.Theta.gradient(s) - np.array([0.0, 0.0, 1.0])
        return float(max(np.max(np.abs(diff)), np.max(np.abs(g))))

    # 拉直坐标

    def straighten(self, states) -> np.ndarray:
        s = _states(states)
        return np.column_stack([s[:, :2], self.Theta(s[:, :3]), s[:, 3]])

    def unstraighten(self, states) -> np.ndarray:
        s = _states(states)
        return np.column_stack([s[:, :2], s[:, 2] * self.X.tau(s[:, :2]), s[:, 3]])

    def H_straight(self, states) -> np.ndarray:
        s = _states(states)
        return self.H(s[:, :3]) + s[:, 3]

    def field_straight(self, states) -> np.ndarray:
        """Φ_*X_Ĥ：Θ 分量为 dΘ(X) = 1。"""
        p = self.unstraighten(states)
        f = self.field(p)
        return np.column_stack([f[:, :2], np.ones(p.shape[0]), f[:, 3]])

    def straight_residual(self, states) -> float:
        """拉直坐标下 ω(X_H, ·) − dH，ω = w dx1∧dx2 + dΘ∧dI。"""
        s = _states(states)
        W = self._area_block(s)
        W[:, 2, 3], W[:, 3, 2] = 1.0, -1.0
        lhs = np.einsum("ni,nij->nj", self.field_straight(s), W)
        h = _spatial_step(self.X)
        dH = state_gradient(self.X, self.H_straight, s, (h, h, STENCIL_STEP, 1.0))
        return float(np.max(np.abs(lhs - dH)))

    def lift(self, states, e: float) -> np.ndarray:
        """Ψ̂_e(x1, x2, θ) = (x1, x2, θ, e − H̃(x1, x2, Θ))。"""
        s = _states(states)[:, :3]
        return np.column_stack([s, e - self.H(np.column_stack([s[:, :2], self.Theta(s)]))])


def build_hamiltonian(X: SuspensionField) -> HamiltonianSystem:
    return HamiltonianSystem(X)


def sample_states(sys: HamiltonianSystem, n: int, rng: np.random.Generator, spread: float = 1.0) -> np.ndarray:
    """支撑内的 (x1, x2, θ, I)，θ 避开截面两侧 SECTION_GAP。"""
    s = sample_support(sys.X, n, rng)
    s[:, 2] = SECTION_GAP + (1.0 - 2.0 * SECTION_GAP) * rng.random(n)
    return np.column_stack([s, spread * rng.standard_normal(n)])


def hamiltonian_residual(sys: HamiltonianSystem, samples: np.ndarray) -> Dict[str, float]:
    """ω̂(X_Ĥ,·) = dĤ、det ω̂、‖Θ−θ‖_C1、闭性与拉直坐标残差；det ω̂ 穿过 0 抛 DegeneracyError。"""
    s = _states(samples)
    det = sys.det_omega(s)
    if np.any(det <= 0.0):
        bad = s[det <= 0.0]
        raise DegeneracyError(f"ω̂ 在 {bad.shape[0]} 个采样点退化，首个 {bad[0]}")
    report = {
        "symplectic_identity_max": sys.symplectic_residual(s),
        "det_omega_min": float(np.min(det)),
        "theta_c1": sys.theta_c1(s),
        "closedness_max": sys.closedness_residual(s),
        "straight_chart_max": sys.straight_residual(s),
        "speed_change_max": speed_change_residual(sys.X, s[:, :3]),
    }
    report["passed"] = bool(report["symplectic_identity_max"] <= SYMPLECTIC_TOL
                            and report["det_omega_min"] > DET_OMEGA_MIN
                            and report["speed_change_max"] <= SPEED_CHANGE_TOL)
    logger.info("哈密顿残差：%s", {k: round(v, 12) if isinstance(v, float) else v for k, v in report.items()})
    return report


def pde_report(sys: HamiltonianSystem, states: np.ndarray, thetas: Sequence[float] = (0.25, 0.5, 0.75)) -> Dict[str, object]:
    """势函数的梯度、环路与周期性检查。"""
    loops = pd.concat([sys.H.loop_residuals(t) for t in thetas], ignore_index=True)
    grad = sys.H.gradient_residual(states)
    return {
        "pde_gradient_max": grad,
        "pde_passed": bool(grad <= PDE_GRADIENT_TOL),
        "loop_residual_max": float(loops[["horizontal", "vertical"]].abs().to_numpy().max()),
        "loops": loops,
        "periodicity_max": sys.H.periodicity_residual(states),
    }


@dataclass
class EnergyOrbit:
    e: float
    frame: pd.DataFrame
    energy_drift: float
    conjugacy: pd.DataFrame

    def to_dict(self) -> Dict[str, object]:
        return {"e": self.e, "energy_drift": self.energy_drift,
                "conjugacy_max": float(self.conjugacy["defect"].max()) if not self.conjugacy.empty else 0.0,
                "energy_passed": bool(self.energy_drift <= ENERGY_DRIFT_TOL)}


def _energy_chart_rhs(sys: HamiltonianSystem):
    """运动轨道上 τ ≡ 1、Θ = θ：(q, θ, I) 上的 (Z_θ(q), 1, −λ²∂_θK_θ(q))。"""
    X = sys.X

    def fun(_t, s):
        q = s[None, :2]
        th = np.mod(s[2], 1.0)
        return np.array([*X.iso.field(q, th)[0], 1.0, -X.lam ** 2 * X.iso.stream_dt(q, th)[0]])
    return fun


def _energy_orbit(sys: HamiltonianSystem, p0: np.ndarray, ts: np.ndarray, cfg: IntegratorConfig) -> np.ndarray:
    X = sys.X
    T = float(ts[-1])
    if X.stationary(p0[None, :2])[0]:
        orbit = np.tile(p0, (ts.size, 1))
        orbit[:, 2] = p0[2] + float(X.tau(p0[None, :2])[0]) * ts
        return orbit
    if sys.H.closed and X.tau_still:
        z0 = np.concatenate([chart_start(X, p0[:3]), [p0[3]]])
        sol = solve_ivp(_energy_chart_rhs(sys), (0.0, T), z0, method="DOP853", t_eval=ts,
                        rtol=cfg.rtol, atol=cfg.atol)
        if sol.status < 0:
            raise NumericalError(f"能量面积分失败: {sol.message}")
        return np.column_stack([chart_lift(X, p0, sol.y[:2].T), sol.y[2], sol.y[3]])
    sol = solve_ivp(lambda t, s: sys.field(s[None, :])[0], (0.0, T), p0, method="DOP853",
                    t_eval=ts, rtol=cfg.rtol, atol=cfg.atol)
    if sol.status < 0:
        raise NumericalError(f"能量面积分失败: {sol.message}")
    return sol.y.T


def energy_surface_flow(sys: HamiltonianSystem, e: float, x0: Sequence[float], T: float,
                        checkpoints: Sequence[float] = (1.0, 10.0, 100.0), n_out: int = 201,
                        cfg: Optional[IntegratorConfig] = None) -> EnergyOrbit:
    """在 𝓜_e 上积分 X_Ĥ，报告 |Ĥ − e| 与共轭缺陷 ‖Ψ̂_e∘f^t − flow(X_Ĥ)^t∘Ψ̂_e‖。"""
    cfg = cfg or IntegratorConfig()
    x0 = np.asarray(x0, dtype=float)[:3]
    p0 = sys.lift(x0[None], e)[0]
    checks = sorted(c for c in checkpoints if 0.0 < c <= T)
    ts = np.unique(np.concatenate([np.linspace(0.0, T, n_out), checks]))
    orbit = _energy_orbit(sys, p0, ts, cfg)
    H = sys.H_hat(orbit)
    frame = pd.DataFrame({"t": ts, "x1": np.mod(orbit[:, 0], 1.0), "x2": np.mod(orbit[:, 1], 1.0),
                          "theta": np.mod(orbit[:, 2], 1.0), "I": orbit[:, 3], "H_hat": H})
    rows = []
    for c in checks:
        traj = integrate(sys.X, x0, c, n_out=2, cfg=cfg, estimate_error=False)
        other = sys.lift(traj.lift[-1][None], e)[0]
        mine = orbit[np.searchsorted(ts, c)]
        angle = wrap(other[:3] - mine[:3])
        rows.append({"t": c, "defect": float(max(np.max(np.abs(angle)), abs(other[3] - mine[3])))})
    return EnergyOrbit(float(e), frame, float(np.max(np.abs(H - e))), pd.DataFrame(rows, columns=["t", "defect"]))
