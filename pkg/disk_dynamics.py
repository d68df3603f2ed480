# -*- coding: utf-8 -*-
"""
圆盘动力学层：同痕插件契约 DiskIsotopy、默认的扭转+踢映射、平坦度时间表与一致性报告。

默认同痕分两段：t∈[0,1/2] 走中心扭转的流，t∈[1/2,1] 再走偏心踢的流，
两段都以 ŝ(2t) 为时间参数，因此 ∂_t g_t 在 t=0、1/2、1 处各阶为零，粘合条件自动成立。
每段都是某个流函数 K 的哈密顿流 Z = (∂K/∂q2, −∂K/∂q1)，径向 K 的流是按 |q−c| 决定角速度的旋转，
逐点保面积且可精确求逆。
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import comb

from cantor_geometry import distance_to_boundary
from explicit_maps import flat_step, flat_step_deriv, flat_step_deriv2
from lab_config import (FD_STEP, FLOW_PROPERTY_TOL, GLUING_TOL, IDENTITY_TOL, INVERSE_TOL,
                        ISOTOPY_AREA_FD_TOL, ISOTOPY_AREA_TOL, STENCIL_STEP, IsotopyConfig)
from lab_errors import DomainError
from measure_transport import sample_uniform_U

logger = logging.getLogger(__name__)

# 扭转环带内半径（相对支撑尺度），其内 Z ≡ 0
TWIST_INNER = 0.35
GLUING_DT = 1e-2
FLOW_DT = 1e-6

_J = np.array([[0.0, 1.0], [-1.0, 0.0]])
_DIAG = 1.0 / math.sqrt(2.0)
_DIRECTIONS = np.array([[1.0, 0.0], [0.0, 1.0], [_DIAG, _DIAG], [_DIAG, -_DIAG]])


def _points(q) -> np.ndarray:
    return np.atleast_2d(np.asarray(q, dtype=float))


def _times(t, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(t, dtype=float), (n,)).copy()


def phase_schedule(t) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """两段时间表：返回 (second, s, ds/dt, d²s/dt²)，second 标记踢段。"""
    t = np.asarray(t, dtype=float)
    second = t > 0.5
    u = np.where(second, 2.0 * t - 1.0, 2.0 * t)
    return second, flat_step(u), 2.0 * flat_step_deriv(u), 4.0 * flat_step_deriv2(u)


# ----- 径向剖面 -----


@dataclass(frozen=True)
class AnnulusBump:
    """[lo, hi] 上的平顶凸起，两端无穷阶平坦；返回 (B, B′, B″)。"""

    lo: float
    hi: float

    def __call__(self, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = (self.hi - self.lo) / 3.0
        a = (rho - self.lo) / d
        b = (self.hi - rho) / d
        fa, fb = flat_step(a), flat_step(b)
        da, db = flat_step_deriv(a) / d, flat_step_deriv(b) / d
        dda, ddb = flat_step_deriv2(a) / d ** 2, flat_step_deriv2(b) / d ** 2
        return fa * fb, da * fb - fa * db, dda * fb - 2.0 * da * db + fa * ddb


@dataclass(frozen=True)
class DiskBump:
    """ρ<=1/2 为 1，ρ>=1 为 0。"""

    def __call__(self, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = 2.0 * rho - 1.0
        return 1.0 - flat_step(u), -2.0 * flat_step_deriv(u), -4.0 * flat_step_deriv2(u)


class RadialTwist:
    """流函数 K(q) = amp·scale²·B(|q−c|/scale) 的哈密顿流：绕 c 以角速度 Ω(r) = −K′(r)/r 旋转。"""

    def __init__(self, center: Sequence[float], scale: float, amp: float, profile: Callable):
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.amp = float(amp)
        self.profile = profile

    def _radial(self, q: np.ndarray):
        d = q - self.center
        r = np.hypot(d[:, 0], d[:, 1])
        B, B1, B2 = self.profile(r / self.scale)
        a = self.amp
        return d, r, a * self.scale ** 2 * B, a * self.scale * B1, a * B2

    @staticmethod
    def _over_r(num: np.ndarray, r: np.ndarray) -> np.ndarray:
        safe = np.where(r > 0.0, r, 1.0)
        return np.where(r > 0.0, num / safe, 0.0)

    def angular(self, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(Ω, dΩ/dr)。"""
        d, r, _, K1, K2 = self._radial(q)
        omega = -self._over_r(K1, r)
        domega = self._over_r(-K2 + self._over_r(K1, r), r)
        return omega, domega

    def stream(self, q: np.ndarray) -> np.ndarray:
        return self._radial(q)[2]

    def field(self, q: np.ndarray) -> np.ndarray:
        d, r, _, K1, _ = self._radial(q)
        f = self._over_r(K1, r)
        return np.column_stack([f * d[:, 1], -f * d[:, 0]])

    def field_jacobian(self, q: np.ndarray) -> np.ndarray:
        d, r, _, K1, K2 = self._radial(q)
        n = np.column_stack([self._over_r(d[:, 0], r), self._over_r(d[:, 1], r)])
        nn = n[:, :, None] * n[:, None, :]
        tang = self._over_r(K1, r)
        hess = K2[:, None, None] * nn + tang[:, None, None] * (np.eye(2)[None] - nn)
        return np.einsum("ij,njk->nik", _J, hess)

    def flow(self, q: np.ndarray, s) -> np.ndarray:
        d = q - self.center
        omega, _ = self.angular(q)
        ang = np.asarray(s, dtype=float) * omega
        c, sn = np.cos(ang), np.sin(ang)
        out = np.column_stack([c * d[:, 0] - sn * d[:, 1], sn * d[:, 0] + c * d[:, 1]]) + self.center
        # 旋转角为零处逐位保持输入
        return np.where((ang == 0.0)[:, None], q, out)

    def flow_jacobian(self, q: np.ndarray, s) -> np.ndarray:
        """D(flow) = Rot(A)·[I + A′(r)·(J₊d) nᵀ]，行列式恒为 1。"""
        d = q - self.center
        r = np.hypot(d[:, 0], d[:, 1])
        omega, domega = self.angular(q)
        s = np.broadcast_to(np.asarray(s, dtype=float), omega.shape)
        ang, dang = s * omega, s * domega
        c, sn = np.cos(ang), np.sin(ang)
        rot = np.stack([np.stack([c, -sn], axis=-1), np.stack([sn, c], axis=-1)], axis=1)
        perp = np.column_stack([-d[:, 1], d[:, 0]])
        n = np.column_stack([self._over_r(d[:, 0], r), self._over_r(d[:, 1], r)])
        inner = np.eye(2)[None] + dang[:, None, None] * perp[:, :, None] * n[:, None, :]
        return rot @ inner


# ----- 插件契约 -----


class DiskIsotopy:
    """
    圆盘同痕插件契约：g_t、∂_t g_t、Dg_t，生成场 Z_t 与流函数 K_t。
    子类至少实现 g 与 inverse；其余给出有限差分缺省实现。
    radius 为圆盘尺度，support_radius 之外 g_t 恒等，zero_radius 之内 Z_t ≡ 0。
    """

    name = "abstract"
    radius = 1.0
    support_radius = 1.0
    zero_radius = 0.0
    margin = 0.0

    def params(self) -> Dict[str, object]:
        return {"name": self.name, "radius": self.radius, "support_radius": self.support_radius,
                "zero_radius": self.zero_radius, "margin": self.margin}

    def g(self, q, t) -> np.ndarray:
        raise NotImplementedError

    def inverse(self, y, t) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, q, t, step: float = FD_STEP) -> np.ndarray:
        q = _points(q)
        tt = np.tile(_times(t, q.shape[0]), 4)
        h = step * self.radius
        n = q.shape[0]
        e0, e1 = np.array([h, 0.0]), np.array([0.0, h])
        vals = self.g(np.vstack([q + e0, q - e0, q + e1, q - e1]), tt)
        J = np.empty((n, 2, 2))
        J[:, :, 0] = (vals[:n] - vals[n:2 * n]) / (2.0 * h)
        J[:, :, 1] = (vals[2 * n:3 * n] - vals[3 * n:]) / (2.0 * h)
        return J

    def dg_dt(self, q, t) -> np.ndarray:
        q = _points(q)
        tt = _times(t, q.shape[0])
        return self.field(self.g(q, tt), tt)

    def field(self, y, t) -> np.ndarray:
        y = _points(y)
        tt = _times(t, y.shape[0])
        x = self.inverse(y, tt)
        return (self.g(x, tt + FLOW_DT) - self.g(x, tt - FLOW_DT)) / (2.0 * FLOW_DT)

    def field_jacobian(self, y, t, step: float = FD_STEP) -> np.ndarray:
        y = _points(y)
        tt = _times(t, y.shape[0])
        h = step * self.radius
        out = np.empty((y.shape[0], 2, 2))
        for j, e in enumerate(np.eye(2) * h):
            out[:, :, j] = (self.field(y + e, tt) - self.field(y - e, tt)) / (2.0 * h)
        return out

    def field_dt(self, y, t) -> np.ndarray:
        y = _points(y)
        tt = _times(t, y.shape[0])
        return (self.field(y, tt + FLOW_DT) - self.field(y, tt - FLOW_DT)) / (2.0 * FLOW_DT)

    def stream(self, y, t) -> Optional[np.ndarray]:
        """流函数 K_t；一般插件没有闭式，返回 None 时由路径积分求势。"""
        return None

    def stream_dt(self, y, t) -> Optional[np.ndarray]:
        return None


class IdentityIsotopy(DiskIsotopy):
    name = "identity"
    support_radius = 0.0
    zero_radius = math.inf

    def g(self, q, t) -> np.ndarray:
        return _points(q).copy()

    def inverse(self, y, t) -> np.ndarray:
        return _points(y).copy()

    def jacobian(self, q, t, step: float = FD_STEP) -> np.ndarray:
        return np.broadcast_to(np.eye(2), (_points(q).shape[0], 2, 2)).copy()

    def field(self, y, t) -> np.ndarray:
        return np.zeros_like(_points(y))

    def field_jacobian(self, y, t, step: float = FD_STEP) -> np.ndarray:
        return np.zeros((_points(y).shape[0], 2, 2))

    def field_dt(self, y, t) -> np.ndarray:
        return np.zeros_like(_points(y))

    def stream(self, y, t) -> np.ndarray:
        return np.zeros(_points(y).shape[0])

    def stream_dt(self, y, t) -> np.ndarray:
        return np.zeros(_points(y).shape[0])


class TwistKickIsotopy(DiskIsotopy):
    """中心扭转（环带 [0.35, 1−margin]·R）接偏心踢（圆心 (mid·R, 0)，半径 (1−margin−0.35)/2·R）。"""

    name = "twist_kick"

    def __init__(self, radius: float = 1.0, twist: float = 2.5, kick: float = 3.0, margin: float = 0.05):
        outer = 1.0 - margin
        self.radius = float(radius)
        self.margin = float(margin)
        self.twist_amp = float(twist)
        self.kick_amp = float(kick)
        self.support_radius = outer * self.radius
        self.zero_radius = TWIST_INNER * self.radius
        mid = 0.5 * (TWIST_INNER + outer)
        half = 0.5 * (outer - TWIST_INNER)
        self.twist = RadialTwist((0.0, 0.0), self.radius, twist, AnnulusBump(TWIST_INNER, outer))
        self.kick = RadialTwist((mid * self.radius, 0.0), half * self.radius, kick, DiskBump())

    def params(self) -> Dict[str, object]:
        out = super().params()
        out.update({"twist": self.twist_amp, "kick": self.kick_amp})
        return out

    def g(self, q, t) -> np.ndarray:
        q = _points(q)
        second, s, _, _ = phase_schedule(_times(t, q.shape[0]))
        out = self.twist.flow(q, np.where(second, 1.0, s))
        if np.any(second):
            out[second] = self.kick.flow(out[second], s[second])
        return out

    def inverse(self, y, t) -> np.ndarray:
        y = _points(y).copy()
        second, s, _, _ = phase_schedule(_times(t, y.shape[0]))
        if np.any(second):
            y[second] = self.kick.flow(y[second], -s[second])
        return self.twist.flow(y, -np.where(second, 1.0, s))

    def jacobian(self, q, t, step: float = FD_STEP) -> np.ndarray:
        q = _points(q)
        second, s, _, _ = phase_schedule(_times(t, q.shape[0]))
        J = self.twist.flow_jacobian(q, np.where(second, 1.0, s))
        if np.any(second):
            p = self.twist.flow(q[second], 1.0)
            J[second] = self.kick.flow_jacobian(p, s[second]) @ J[second]
        return J

    def _by_phase(self, y, t, fun: str, order: int) -> np.ndarray:
        y = _points(y)
        second, _, ds, dds = phase_schedule(_times(t, y.shape[0]))
        rate = ds if order == 1 else dds
        a = getattr(self.twist, fun)(y)
        b = getattr(self.kick, fun)(y)
        pick = second.reshape((-1,) + (1,) * (a.ndim - 1))
        rate = rate.reshape((-1,) + (1,) * (a.ndim - 1))
        return rate * np.where(pick, b, a)

    def field(self, y, t) -> np.ndarray:
        return self._by_phase(y, t, "field", 1)

    def field_jacobian(self, y, t, step: float = FD_STEP) -> np.ndarray:
        return self._by_phase(y, t, "field_jacobian", 1)

    def field_dt(self, y, t) -> np.ndarray:
        return self._by_phase(y, t, "field", 2)

    def stream(self, y, t) -> np.ndarray:
        return self._by_phase(y, t, "stream", 1)

    def stream_dt(self, y, t) -> np.ndarray:
        return self._by_phase(y, t, "stream", 2)


def default_isotopy(params: Optional[IsotopyConfig] = None, radius: float = 1.0) -> DiskIsotopy:
    """按配置构造同痕；radius 为圆盘尺度，接入环面时取单位圆盘。"""
    params = params or IsotopyConfig()
    if params.name == "identity":
        return IdentityIsotopy()
    if params.name != "twist_kick":
        raise DomainError(f"未知同痕 {params.name!r}")
    if not (math.isfinite(params.twist) and math.isfinite(params.kick)):
        raise DomainError("扭转与踢的幅度须为有限数")
    if not (0.0 < params.margin < 0.5):
        raise DomainError(f"margin 须在 (0, 0.5) 内，得到 {params.margin}")
    if radius <= 0.0:
        raise DomainError(f"圆盘尺度须为正，得到 {radius}")
    return TwistKickIsotopy(radius, params.twist, params.kick, params.margin)


# ----- 一致性报告 -----


def _sample_disk(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    th = 2.0 * math.pi * rng.random(n)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def _det(J: np.ndarray) -> np.ndarray:
    return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]


def _max_norm(a: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(a, axis=-1))) if a.size else 0.0


def isotopy_consistency(iso: DiskIsotopy, n_samples: int = 1000, times: Sequence[float] = (0.25, 0.5, 1.0),
                        seed: int = 0) -> pd.DataFrame:
    """g₀ = id、保面积、可逆、粘合 dⁿG(x,1) = dⁿG(g(x),0)（n<=2）、∂_t g_t = Z_t∘g_t。"""
    rng = np.random.default_rng(seed)
    scale = iso.radius
    q = _sample_disk(n_samples, scale, rng)
    rows = []

    def add(check: str, value: float, threshold: float) -> None:
        rows.append({"check": check, "value": float(value), "threshold": float(threshold),
                     "passed": bool(value <= threshold)})

    add("g0_identity", _max_norm(iso.g(q, 0.0) - q), IDENTITY_TOL * max(1.0, scale))
    area = max(float(np.max(np.abs(_det(iso.jacobian(q, t)) - 1.0))) for t in times)
    add("area_det", area, ISOTOPY_AREA_TOL)
    area_fd = max(float(np.max(np.abs(_det(DiskIsotopy.jacobian(iso, q, t)) - 1.0))) for t in times)
    add("area_det_fd", area_fd, ISOTOPY_AREA_FD_TOL)
    inv = max(_max_norm(iso.inverse(iso.g(q, t), t) - q) for t in times)
    add("inverse_roundtrip", inv, INVERSE_TOL * max(1.0, scale))
    r_out = np.sqrt(rng.uniform(iso.support_radius ** 2, scale ** 2, n_samples))
    th_out = 2.0 * math.pi * rng.random(n_samples)
    outside = np.column_stack([r_out * np.cos(th_out), r_out * np.sin(th_out)])
    add("identity_outside_support", max(_max_norm(iso.g(outside, t) - outside) for t in times), 0.0)

    p = iso.g(q, 1.0)
    h = GLUING_DT
    left = [iso.g(q, 1.0 - k * h) for k in range(3)]
    right = [iso.g(p, k * h) for k in range(3)]
    add("gluing_order_0", _max_norm(left[0] - right[0]), GLUING_TOL)
    add("gluing_order_1", _max_norm((left[0] - left[1]) / h - (right[1] - right[0]) / h), GLUING_TOL)
    add("gluing_order_2", _max_norm((left[0] - 2 * left[1] + left[2]) / h ** 2
                                    - (right[2] - 2 * right[1] + right[0]) / h ** 2), GLUING_TOL)

    flow = 0.0
    for t in tuple(times) + (0.75,):
        t = min(max(t, FLOW_DT), 1.0 - FLOW_DT)
        dg = (iso.g(q, t + FLOW_DT) - iso.g(q, t - FLOW_DT)) / (2.0 * FLOW_DT)
        flow = max(flow, _max_norm(dg - iso.field(iso.g(q, t), t)))
    add("flow_property", flow, FLOW_PROPERTY_TOL * max(1.0, scale))
    df = pd.DataFrame(rows)
    logger.info("同痕 %s 一致性：%d/%d 项通过", iso.name, int(df["passed"].sum()), len(df))
    return df


# ----- 平坦度 -----


def directional_derivative(fun: Callable[[np.ndarray], np.ndarray], pts: np.ndarray, k: int,
                           step: float) -> np.ndarray:
    """逐点的 k 阶中心差分沿四个方向的最大模。"""
    pts = _points(pts)
    if pts.shape[0] == 0:
        return np.zeros(0)
    if k == 0:
        return np.linalg.norm(fun(pts), axis=-1)
    best = np.zeros(pts.shape[0])
    for d in _DIRECTIONS:
        acc = 0.0
        for j in range(k + 1):
            acc = acc + (-1) ** j * comb(k, j, exact=True) * fun(pts + (0.5 * k - j) * step * d)
        best = np.maximum(best, np.linalg.norm(np.asarray(acc), axis=-1) / step ** k)
    return best


def directional_derivative_norm(fun: Callable[[np.ndarray], np.ndarray], pts: np.ndarray, k: int,
                                step: float) -> float:
    """估计 ‖D^k fun‖_C0。"""
    vals = directional_derivative(fun, pts, k, step)
    return float(np.max(vals)) if vals.size else 0.0


@dataclass(frozen=True)
class FlatnessSchedule:
    """
    𝒩_n = {r_n < |q| < 1}，V_n = h(𝒩_n) ⊃ {x ∈ U: dist(x, ∂U) < band_n}，ρ_n = λⁿ/(K_n‖h‖‖h⁻¹‖)。
    radii 单调不减、bands 单调不增。
    """

    radii: Tuple[float, ...]
    bands: Tuple[float, ...]
    decay: float = 0.5
    h_norm: float = 1.0
    h_inv_norm: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.decay < 1.0):
            raise DomainError(f"衰减率须在 (0, 1) 内，得到 {self.decay}")
        if not self.radii or len(self.radii) != len(self.bands):
            raise DomainError("radii 与 bands 须非空且等长")
        if min(self.bands) <= 0.0:
            raise DomainError(f"带宽须为正，得到 {self.bands}")
        if np.any(np.diff(self.radii) < 0.0) or np.any(np.diff(self.bands) > 0.0):
            raise DomainError("radii 须单调不减、bands 须单调不增")

    @property
    def n_max(self) -> int:
        return len(self.radii)

    @property
    def delta0(self) -> float:
        return self.bands[0]

    @staticmethod
    def amplification(n: int) -> float:
        # Faà di Bruno 型放大常数
        return float(math.factorial(n) * 2 ** n)

    def band(self, n: int) -> float:
        return self.bands[n - 1]

    def radius(self, n: int) -> float:
        return self.radii[n - 1]

    def rho(self, n: int) -> float:
        return self.decay ** n / (self.amplification(n) * self.h_norm * self.h_inv_norm)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([{"n": n, "radius": self.radius(n), "band": self.band(n),
                              "K_n": self.amplification(n), "rho_n": self.rho(n)}
                             for n in range(1, self.n_max + 1)])


def _displacement(iso: DiskIsotopy, t: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda p: iso.g(p, t) - p


def radial_profile(iso: DiskIsotopy, radii: np.ndarray, k: int, times: Sequence[float] = (0.5, 1.0),
                   n_angles: int = 256) -> np.ndarray:
    """每个半径圆周上 max_t ‖D^k(g_t − id)‖ 的差分估计。"""
    th = np.linspace(0.0, 2.0 * math.pi, n_angles, endpoint=False)
    pts = (radii[:, None, None] * np.stack([np.cos(th), np.sin(th)], axis=-1)[None]).reshape(-1, 2)
    step = STENCIL_STEP * iso.radius
    vals = np.max([directional_derivative(_displacement(iso, t), pts, k, step) for t in times], axis=0)
    return vals.reshape(radii.shape[0], n_angles).max(axis=1)


def build_flatness_schedule(transport, iso: DiskIsotopy, decay: float = 0.5, n_max: int = 4, k_max: int = 2,
                            margin: float = 0.1, n_radii: int = 400, n_angles: int = 256,
                            n_samples: int = 256, seed: int = 0) -> FlatnessSchedule:
    """
    r_n 取最小的圆盘半径，使 |q| >= r_n 上 k <= min(n, k_max) 阶范数都不超过 margin·ρ_n；
    band_n 取圆 |q| = r_n 的像到 ∂U 的最小距离，于是 {dist < band_n} 的 U 点都落在 V_n 中。
    ‖h‖、‖h⁻¹‖ 取采样点上 Dh 的最大奇异值与最小奇异值的倒数。
    """
    rng = np.random.default_rng(seed)
    q = _sample_disk(n_samples, 1.0 - 1e-3, rng)
    sv = np.linalg.svd(transport.stack.jacobian(q), compute_uv=False)
    h_norm, h_inv_norm = float(np.max(sv[:, 0])), float(np.max(1.0 / sv[:, -1]))
    rho = [decay ** n / (FlatnessSchedule.amplification(n) * h_norm * h_inv_norm) for n in range(1, n_max + 1)]

    if iso.support_radius <= 0.0:
        radii = np.zeros(n_max)
        band = float(distance_to_boundary(transport.alpha, transport.depth, transport.center[None])[0])
        bands = np.full(n_max, band)
    else:
        lo, hi = iso.zero_radius, iso.support_radius
        # 半径网格向支撑边缘加密
        grid = hi - (hi - lo) * np.linspace(0.0, 1.0, n_radii)[::-1] ** 3
        tails = [np.maximum.accumulate(radial_profile(iso, grid, k, n_angles=n_angles)[::-1])[::-1]
                 for k in range(k_max + 1)]
        radii = np.empty(n_max)
        for n in range(1, n_max + 1):
            worst = np.max(tails[:min(n, k_max) + 1], axis=0)
            ok = np.flatnonzero(worst <= margin * rho[n - 1])
            radii[n - 1] = grid[ok[0]] if ok.size else hi
        radii = np.maximum.accumulate(radii)
        th = np.linspace(0.0, 2.0 * math.pi, 720, endpoint=False)
        circle = np.column_stack([np.cos(th), np.sin(th)])
        bands = np.array([np.min(distance_to_boundary(transport.alpha, transport.depth,
                                                      transport.forward(r * circle))) for r in radii])
        bands = np.minimum.accumulate(bands)
    sched = FlatnessSchedule(tuple(float(r) for r in radii), tuple(float(b) for b in bands), decay,
                             h_norm, h_inv_norm)
    logger.info("平坦度时间表：r_n=%s，band_n=%s，‖h‖=%.4g，‖h⁻¹‖=%.4g",
                np.round(radii, 5), np.round(bands, 6), h_norm, h_inv_norm)
    return sched


def neighborhood_samples(transport, sched: FlatnessSchedule, n: int, n_samples: int,
                         rng: np.random.Generator) -> np.ndarray:
    """𝒩_n 中的圆盘点：环带 r_n < |q| < 1 上均匀取一半，另一半取 U 中 dist < band_n 的点用 h⁻¹ 拉回。"""
    r_lo = sched.radius(n)
    half = n_samples // 2
    r = np.sqrt(rng.uniform(r_lo ** 2, 1.0, half))
    th = 2.0 * math.pi * rng.random(half)
    parts = [np.column_stack([r * np.cos(th), r * np.sin(th)])]
    y = sample_uniform_U(transport.alpha, transport.depth, n_samples - half, rng)
    dist = distance_to_boundary(transport.alpha, transport.depth, y)
    keep = (dist > 0.0) & (dist < sched.band(n))
    if np.any(keep):
        parts.append(transport.inverse(y[keep]))
    return np.vstack(parts)


def flatness_check(iso: DiskIsotopy, sched: FlatnessSchedule, transport, k_max: int = 2,
                   n_samples: int = 2000, times: Sequence[float] = (0.5, 1.0), seed: int = 0) -> pd.DataFrame:
    """
    𝒩_n 上 ‖g_t − id‖_{C^k}（k <= min(n, k_max)）与 ρ_n 的比较，每个 (n, k) 一行。
    moving 为 g_1 ≠ id 的样本数；k > 2 的差分受舍入误差支配，k_max 默认取 2。
    """
    if not (0 <= k_max <= 4):
        raise DomainError(f"k_max 须在 [0, 4] 内，得到 {k_max}")
    rng = np.random.default_rng(seed)
    step = STENCIL_STEP * iso.radius
    rows = []
    for n in range(1, sched.n_max + 1):
        q = neighborhood_samples(transport, sched, n, n_samples, rng)
        moving = int(np.count_nonzero(np.any(iso.g(q, 1.0) != q, axis=1)))
        thin = q.shape[0] < 8 or (1.0 - sched.radius(n)) < k_max * step
        if thin:
            logger.warning("𝒩_%d 样本不足或薄于差分模板（%d 点，r_n=%.6g，模板 %.3g）",
                           n, q.shape[0], sched.radius(n), k_max * step)
        for k in range(0, min(n, k_max) + 1):
            norm = max(directional_derivative_norm(_displacement(iso, t), q, k, step) for t in times)
            rho = sched.rho(n)
            rows.append({"n": n, "k": k, "norm": norm, "rho_n": rho, "samples": int(q.shape[0]),
                         "moving": moving, "thin": bool(thin), "passed": bool(norm <= rho)})
    return pd.DataFrame(rows)


def dense_grid_norm(iso: DiskIsotopy, sched: FlatnessSchedule, n: int, k: int, grid: int = 200,
                    t: float = 1.0) -> float:
    """规则网格上的暴力估计，作为 flatness_check 的对照。"""
    xs = np.linspace(-1.0, 1.0, grid)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    q = np.column_stack([gx.ravel(), gy.ravel()])
    r = np.hypot(q[:, 0], q[:, 1])
    q = q[(r > sched.radius(n)) & (r < 1.0 - 1e-3)]
    return directional_derivative_norm(_displacement(iso, t), q, k, STENCIL_STEP * iso.radius)


def edge_tangency(iso: DiskIsotopy, widths: Sequence[float], t: float = 1.0, n_radii: int = 64,
                  n_angles: int = 256) -> np.ndarray:
    """支撑圆内侧宽 w 的环带 [support − w, support] 上 max|g_t − id|，逐个宽度给出。"""
    out = []
    for w in widths:
        radii = np.linspace(iso.support_radius - w, iso.support_radius, n_radii)
        out.append(float(np.max(radial_profile(iso, radii, 0, times=(t,), n_angles=n_angles))))
    return np.asarray(out)
