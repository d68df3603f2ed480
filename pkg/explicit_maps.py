# -*- coding: utf-8 -*-
"""
显式映射层：平顶光滑台阶 χ、正方形到长条的 ρ̂、增广十字映射 σ_γ、逐层映射 φ̂_n、
圆盘到第 1 层十字的基映射，以及把它们串起来的 PlanarMapStack。

所有映射对 (n, 2) 点数组向量化；声称为恒等的区域逐位返回输入值。
只给出逆映射公式的部分（ρ̂_1、ρ̂_2）正向求值沿单调一维剖面二分。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from cantor_geometry import KIND_U, check_depth, child_wings, classify_points, descend, gamma
from lab_config import BISECT_MAX_ITER, BISECT_TOL, DEFAULT_MAX_DEPTH, FD_STEP
from lab_errors import ConvergenceError, DomainError

logger = logging.getLogger(__name__)

DOMAIN_SLACK = 1e-9
# σ_γ 的定义域：α <= 0.05 时 γ_n > (2α)⁻ⁿ >= 10
SIGMA_GAMMA_MIN = 10.0


# ----- 数值工具 -----


def flat_step(t):
    """ŝ(t)：t<=0 为 0，t>=1 为 1，中间 expit(1/(1-t) - 1/t)，两端无穷阶平坦。"""
    t = np.asarray(t, dtype=float)
    tc = np.clip(t, 1e-300, 1.0 - 2.0 ** -53)
    with np.errstate(over="ignore", divide="ignore"):
        mid = expit(1.0 / (1.0 - tc) - 1.0 / tc)
    out = np.where(t <= 0.0, 0.0, np.where(t >= 1.0, 1.0, mid))
    return out if out.ndim else float(out)


def flat_step_deriv(t):
    t = np.asarray(t, dtype=float)
    s = flat_step(t)
    prod = s * (1.0 - s)
    tc = np.clip(t, 1e-300, 1.0 - 2.0 ** -53)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        val = prod * (1.0 / tc ** 2 + 1.0 / (1.0 - tc) ** 2)
    out = np.where(prod > 0.0, val, 0.0)
    return out if out.ndim else float(out)


def flat_step_deriv2(t):
    t = np.asarray(t, dtype=float)
    s = flat_step(t)
    prod = s * (1.0 - s)
    tc = np.clip(t, 1e-300, 1.0 - 2.0 ** -53)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        d1 = 1.0 / tc ** 2 + 1.0 / (1.0 - tc) ** 2
        d2 = 2.0 / (1.0 - tc) ** 3 - 2.0 / tc ** 3
        val = prod * ((1.0 - 2.0 * s) * d1 * d1 + d2)
    out = np.where(prod > 0.0, val, 0.0)
    return out if out.ndim else float(out)


def smooth_step(t) -> Tuple[np.ndarray, np.ndarray]:
    """χ(t) = ŝ(10 t) 及其导数：t<=0 为 0，t>=0.1 为 1。"""
    t = np.asarray(t, dtype=float)
    return flat_step(10.0 * t), 10.0 * flat_step_deriv(10.0 * t)


def measured_c1(samples: int = 200001) -> float:
    """c1 = max χ′，在 [0, 0.1] 上稠密采样。"""
    _, d = smooth_step(np.linspace(0.0, 0.1, samples))
    return float(np.max(d))


def bisect_increasing(fun: Callable[[np.ndarray], np.ndarray], lo, hi, tol: float = BISECT_TOL,
                      max_iter: int = BISECT_MAX_ITER, points: Optional[np.ndarray] = None,
                      what: str = "") -> np.ndarray:
    """对单调递增的 fun 逐点二分求 fun(x) = 0，要求 fun(lo) <= 0 <= fun(hi)。"""
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    for _ in range(max_iter):
        width = hi - lo
        if np.all(width <= tol * np.maximum(1.0, np.abs(hi))):
            return 0.5 * (lo + hi)
        mid = 0.5 * (lo + hi)
        up = fun(mid) < 0.0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    bad = (hi - lo) > tol * np.maximum(1.0, np.abs(hi))
    pts = None if points is None else np.asarray(points)[bad]
    raise ConvergenceError(f"{what} 二分在 {max_iter} 次内未收敛（{int(bad.sum())} 个点）", pts)


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], pts: np.ndarray, step=FD_STEP) -> np.ndarray:
    """中心差分雅可比，返回 (n, 2, 2)，J[:, i, j] = ∂f_i/∂x_j；step 可逐点给出。"""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = pts.shape[0]
    h = np.broadcast_to(np.asarray(step, dtype=float), (n,))
    zero = np.zeros(n)
    e0 = np.column_stack([h, zero])
    e1 = np.column_stack([zero, h])
    vals = fun(np.vstack([pts + e0, pts - e0, pts + e1, pts - e1]))
    J = np.empty((n, 2, 2))
    J[:, :, 0] = (vals[:n] - vals[n:2 * n]) / (2.0 * h[:, None])
    J[:, :, 1] = (vals[2 * n:3 * n] - vals[3 * n:]) / (2.0 * h[:, None])
    return J


def fd_det(fun: Callable[[np.ndarray], np.ndarray], pts: np.ndarray, step=FD_STEP) -> np.ndarray:
    J = fd_jacobian(fun, pts, step)
    return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]


def lipschitz_on_grid(fun: Callable[[np.ndarray], np.ndarray], x_range: Tuple[float, float],
                      y_range: Tuple[float, float], n: int) -> float:
    """规则网格上相邻点（横、竖、对角）差商的最大值。"""
    xs = np.linspace(x_range[0], x_range[1], n)
    ys = np.linspace(y_range[0], y_range[1], n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    vals = fun(pts).reshape(n, n, 2)
    grid = pts.reshape(n, n, 2)
    best = 0.0
    for dx, dy in ((1, 0), (0, 1), (1, 1)):
        a = vals[dx:, dy:] - vals[:n - dx, :n - dy]
        b = grid[dx:, dy:] - grid[:n - dx, :n - dy]
        ratio = np.linalg.norm(a, axis=-1) / np.linalg.norm(b, axis=-1)
        best = max(best, float(np.max(ratio)))
    return best


def half_width(x2: np.ndarray) -> np.ndarray:
    """p(x2) = sqrt(x2 (1 - x2))：以 (1, 1/2) 为心、半径 1/2 的半圆盘轮廓。"""
    x2 = np.asarray(x2, dtype=float)
    return np.sqrt(np.clip(x2 * (1.0 - x2), 0.0, None))


def _check_box(pts: np.ndarray, x_max: float, name: str) -> None:
    ok = (
        (pts[:, 0] >= -DOMAIN_SLACK) & (pts[:, 0] <= x_max + DOMAIN_SLACK * max(1.0, x_max))
        & (pts[:, 1] >= -DOMAIN_SLACK) & (pts[:, 1] <= 1.0 + DOMAIN_SLACK)
    )
    if not np.all(ok):
        raise DomainError(f"{name}: {int((~ok).sum())} 个点不在 [0, {x_max:g}]×[0,1] 内，例如 {pts[~ok][0]}")


# ----- 正方形到长条：ρ̂ = ρ̂3 ∘ ρ̂2 ∘ ρ̂1 -----

_G_SCALE = 1.2
_G_NORM = flat_step(1.0 / _G_SCALE)
ZETA0 = 0.25
SEAM_BAND = 0.1


def _g(u: np.ndarray) -> np.ndarray:
    return flat_step(u / _G_SCALE) / _G_NORM


class RhoHat:
    """把 [0,1]^2 映到 [0, 2+2κ]×[0,1]，在 Ω⁻ = {x1 <= 1 - p(x2)} 上为恒等。"""

    def __init__(self, kappa: float):
        if not kappa > 3.0:
            raise DomainError(f"kappa 须 > 3，得到 {kappa}")
        self.kappa = float(kappa)
        self.slope = 10.0 * (1.0 + 1.0 / self.kappa)
        self.x_star = self.slope * (1.0 + 0.8 * self.kappa) / (self.slope - 1.0)
        self.x_lin = 1.0 + 0.9 * self.kappa
        self.length = 2.0 + 2.0 * self.kappa

    # ρ̂1：Q -> Ω⁺，由逆映射 (x1 - S, x2) 定义
    def _S(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        p = half_width(x2)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(p > 0.0, (x1 - 1.0 + p) / (2.0 * np.where(p > 0.0, p, 1.0)), -1.0)
        return np.where(u > 0.0, p * _g(np.minimum(u, 1.0)), 0.0)

    def rho1_inverse(self, x: np.ndarray) -> np.ndarray:
        z = x.copy()
        S = self._S(x[:, 0], x[:, 1])
        moved = S != 0.0
        z[moved, 0] = x[moved, 0] - S[moved]
        return z

    def rho1_forward(self, z: np.ndarray) -> np.ndarray:
        x = z.copy()
        p = half_width(z[:, 1])
        act = (p > 0.0) & (z[:, 0] > 1.0 - p)
        if np.any(act):
            za = z[act]
            pa = p[act]
            x[act, 0] = bisect_increasing(
                lambda t: t - self._S(t, za[:, 1]) - za[:, 0],
                za[:, 0], 1.0 + pa, points=za, what="rho1",
            )
        return x

    # ρ̂2：Ω⁺ -> [0, 1+κ]×[0,1]，以 c = (1, 1/2) 为中心沿射线，Q 上恒等
    def _E(self, s: np.ndarray) -> np.ndarray:
        tau = (s - 2.0 * ZETA0) / (1.0 - 2.0 * ZETA0)
        return 2.0 * flat_step(np.clip(tau, 0.0, 1.0) / 2.0)

    def _mu_tilde(self, d: np.ndarray, y: np.ndarray) -> np.ndarray:
        k = self.kappa
        t = (d * d + 4.0 * k * k * y * y) / (k * k + 4.0 * d * d * y * y)
        mu = np.sqrt(np.clip(t, 0.0, None))
        r2 = 2.0 * np.hypot(d, y)
        p = half_width(y + 0.5)
        with np.errstate(divide="ignore", invalid="ignore"):
            arg = np.where(p > 0.0, d / (SEAM_BAND * np.where(p > 0.0, p, 1.0)), np.where(d > 0.0, np.inf, 0.0))
        w = flat_step(np.clip(arg, -1.0, 2.0))
        return r2 - (r2 - mu) * w

    def ray_length(self, cos_phi: np.ndarray, sin_phi: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            a = np.where(cos_phi > 0.0, self.kappa / np.where(cos_phi > 0.0, cos_phi, 1.0), np.inf)
            b = np.where(np.abs(sin_phi) > 0.0, 0.5 / np.where(np.abs(sin_phi) > 0.0, np.abs(sin_phi), 1.0), np.inf)
        return np.minimum(a, b)

    def rho2_inverse(self, x: np.ndarray) -> np.ndarray:
        z = x.copy()
        d = x[:, 0] - 1.0
        y = x[:, 1] - 0.5
        r = np.hypot(d, y)
        act = (d > 0.0) & (r > ZETA0)
        if np.any(act):
            da, ya, ra = d[act], y[act], r[act]
            mt = self._mu_tilde(da, ya)

            def residual(zeta):
                e = self._E(2.0 * zeta)
                return -(2.0 * (1.0 - e) * ra + e * mt - 2.0 * zeta)

            zeta = bisect_increasing(residual, np.full(ra.size, ZETA0), np.minimum(ra, 0.5),
                                     points=x[act], what="rho2_inverse")
            z[act, 0] = 1.0 + zeta * da / ra
            z[act, 1] = 0.5 + zeta * ya / ra
        return z

    def rho2_forward(self, z: np.ndarray) -> np.ndarray:
        x = z.copy()
        d = z[:, 0] - 1.0
        y = z[:, 1] - 0.5
        zeta = np.hypot(d, y)
        act = (d > 0.0) & (zeta > ZETA0)
        if np.any(act):
            za = np.minimum(zeta[act], 0.5)
            c, s = d[act] / zeta[act], y[act] / zeta[act]
            e = self._E(2.0 * za)
            length = self.ray_length(c, s)

            def residual(r):
                return 2.0 * (1.0 - e) * r + e * self._mu_tilde(r * c, r * s) - 2.0 * za

            r = bisect_increasing(residual, za, length, points=z[act], what="rho2_forward")
            x[act, 0] = 1.0 + r * c
            x[act, 1] = 0.5 + r * s
        return x

    # ρ̂3：[0, 1+κ] -> [0, 2+2κ]，[0, x*] 上恒等，[1+0.9κ, 1+κ] 上线性
    def T(self, x1: np.ndarray) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        s = flat_step((x1 - self.x_star) / (self.x_lin - self.x_star))
        ell = self.slope * (x1 - 1.0 - 0.8 * self.kappa)
        return np.where(x1 <= self.x_star, x1, x1 + (ell - x1) * s)

    def T_inverse(self, X1: np.ndarray) -> np.ndarray:
        X1 = np.asarray(X1, dtype=float)
        out = X1.copy()
        lin = X1 >= 1.0 + self.kappa
        out[lin] = X1[lin] / self.slope + 1.0 + 0.8 * self.kappa
        mid = (X1 > self.x_star) & ~lin
        if np.any(mid):
            xm = X1[mid]
            out[mid] = bisect_increasing(
                lambda t: self.T(t) - xm, np.full(xm.size, self.x_star), np.full(xm.size, self.x_lin),
                points=xm[:, None], what="rho3_inverse",
            )
        return out

    def rho3_forward(self, x: np.ndarray) -> np.ndarray:
        out = x.copy()
        out[:, 0] = self.T(x[:, 0])
        return out

    def rho3_inverse(self, X: np.ndarray) -> np.ndarray:
        out = X.copy()
        out[:, 0] = self.T_inverse(X[:, 0])
        return out

    def forward(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        _check_box(q, 1.0, "rho_hat forward")
        return self.rho3_forward(self.rho2_forward(self.rho1_forward(q)))

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _check_box(x, self.length, "rho_hat inverse")
        return self.rho1_inverse(self.rho2_inverse(self.rho3_inverse(x)))


def rho_hat(kappa: float, q, direction: str = "forward") -> np.ndarray:
    m = RhoHat(kappa)
    return m.forward(q) if direction == "forward" else m.inverse(q)


# ----- 增广十字：σ_γ = ρ̃ ∘ ρ̂ -----


class SigmaGamma:
    """[0,1]^2 -> 𝒞_γ = [0,2+2γ]×[0,1] ∪ [1+γ,2+γ]×[-γ,1+γ]。

    竖条 [1+γ, 2+γ]×[0,1] 上下各接一个翼：ρ̃± = η±⁻¹ ∘ ρ̂′ ∘ η±，ρ̂′ 的参数为 (γ-1)/2。
    """

    def __init__(self, gamma_value: float):
        if not gamma_value >= SIGMA_GAMMA_MIN:
            raise DomainError(f"gamma 须 >= {SIGMA_GAMMA_MIN}（γ_n > 10ⁿ），得到 {gamma_value}")
        self.gamma = float(gamma_value)
        self.rho = RhoHat(self.gamma)
        self.rho_wing = RhoHat((self.gamma - 1.0) / 2.0)
        self.bar = (1.0 + self.gamma, 2.0 + self.gamma)

    def _eta_plus(self, x):
        return np.column_stack([x[:, 1], 2.0 + self.gamma - x[:, 0]])

    def _eta_plus_inv(self, X):
        return np.column_stack([2.0 + self.gamma - X[:, 1], X[:, 0]])

    def _eta_minus(self, x):
        return np.column_stack([1.0 - x[:, 1], x[:, 0] - (1.0 + self.gamma)])

    def _eta_minus_inv(self, X):
        return np.column_stack([1.0 + self.gamma + X[:, 1], 1.0 - X[:, 0]])

    def contains(self, x: np.ndarray, slack: float = DOMAIN_SLACK) -> np.ndarray:
        x = np.atleast_2d(x)
        g = self.gamma
        s = slack * max(1.0, g)
        horiz = (x[:, 0] >= -s) & (x[:, 0] <= 2.0 + 2.0 * g + s) & (x[:, 1] >= -s) & (x[:, 1] <= 1.0 + s)
        vert = (x[:, 0] >= 1.0 + g - s) & (x[:, 0] <= 2.0 + g + s) & (x[:, 1] >= -g - s) & (x[:, 1] <= 1.0 + g + s)
        return horiz | vert

    def forward(self, q: np.ndarray) -> np.ndarray:
        y = self.rho.forward(q)
        in_bar = (y[:, 0] >= self.bar[0]) & (y[:, 0] <= self.bar[1])
        up = in_bar & (y[:, 1] > 0.5)
        dn = in_bar & (y[:, 1] < 0.5)
        if np.any(up):
            y[up] = self._eta_plus_inv(self.rho_wing.forward(self._eta_plus(y[up])))
        if np.any(dn):
            y[dn] = self._eta_minus_inv(self.rho_wing.forward(self._eta_minus(y[dn])))
        return y

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
        if not np.all(self.contains(x)):
            bad = x[~self.contains(x)]
            raise DomainError(f"sigma_gamma inverse: {bad.shape[0]} 个点不在 𝒞_γ 内，例如 {bad[0]}")
        in_bar = (x[:, 0] >= self.bar[0]) & (x[:, 0] <= self.bar[1])
        up = in_bar & (x[:, 1] > 0.5)
        dn = in_bar & (x[:, 1] < 0.5)
        if np.any(up):
            x[up] = self._eta_plus_inv(self.rho_wing.inverse(self._eta_plus(x[up])))
        if np.any(dn):
            x[dn] = self._eta_minus_inv(self.rho_wing.inverse(self._eta_minus(x[dn])))
        return self.rho.inverse(np.clip(x, [0.0, 0.0], [self.rho.length, 1.0]))

    def upper_tip(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        """𝒞_γ⁺ = [1+γ, 2+γ]×[1+(γ-1)/2, 1+γ]。"""
        g = self.gamma
        return (1.0 + g, 2.0 + g), (1.0 + (g - 1.0) / 2.0, 1.0 + g)

    def lower_tip(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        g = self.gamma
        return (1.0 + g, 2.0 + g), (-g, -(g - 1.0) / 2.0)


def sigma_gamma(gamma_value: float, q, direction: str = "forward") -> np.ndarray:
    m = SigmaGamma(gamma_value)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return m.forward(q) if direction == "forward" else m.inverse(q)


# ----- 翼坐标框 η_(n+1,k) -----


def to_model(pts: np.ndarray, wing: Dict[str, np.ndarray]) -> np.ndarray:
    """环面坐标 -> 模型坐标；X1 = 1 为附着边，附着在右侧时 x 方向反射。"""
    a = wing["a"]
    x0 = wing["wx0"]
    right = wing["right"]
    X1 = np.where(right, (x0 + a - pts[:, 0]) / a, (pts[:, 0] - x0) / a)
    X2 = (pts[:, 1] - (wing["cy"] - a / 2.0)) / a
    return np.column_stack([X1, X2])


def from_model(X: np.ndarray, wing: Dict[str, np.ndarray]) -> np.ndarray:
    a = wing["a"]
    x0 = wing["wx0"]
    right = wing["right"]
    x = np.where(right, x0 + a - a * X[:, 0], x0 + a * X[:, 0])
    y = wing["cy"] - a / 2.0 + a * X[:, 1]
    return np.column_stack([x, y])


def _subset(wing: Dict[str, object], mask: np.ndarray) -> Dict[str, np.ndarray]:
    out = {}
    for key, val in wing.items():
        arr = np.asarray(val)
        out[key] = arr[mask] if arr.ndim == 1 and arr.size == mask.size else val
    return out


class PhiHat:
    """φ̂_n：U_n -> U_(n+1)，在每个翼 W_(n,k) 上为 η⁻¹ ∘ σ_(γ_n) ∘ η，其余处恒等。"""

    def __init__(self, alpha: float, n: int, max_depth: int = DEFAULT_MAX_DEPTH):
        if n < 1:
            raise DomainError("n 须 >= 1")
        check_depth(alpha, n + 1, max(max_depth, n + 1))
        self.alpha = alpha
        self.n = n
        self.gamma = gamma(n, alpha)
        self.sigma = SigmaGamma(self.gamma)

    def wings_for(self, pts: np.ndarray) -> List[Dict[str, np.ndarray]]:
        host = descend(self.alpha, pts, self.n - 1)
        return child_wings(self.alpha, host["X"], host["Y"], self.n - 1)

    def wing_mask(self, pts: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        pts = np.atleast_2d(pts)
        masks = []
        total = np.zeros(pts.shape[0], dtype=bool)
        for wing in self.wings_for(pts):
            X = to_model(pts, wing)
            m = (X[:, 0] >= 0.0) & (X[:, 0] < 1.0) & (X[:, 1] >= 0.0) & (X[:, 1] <= 1.0)
            masks.append(m)
            total |= m
        return total, masks

    def forward(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = pts.copy()
        for wing in self.wings_for(pts):
            X = to_model(pts, wing)
            m = (X[:, 0] >= 0.0) & (X[:, 0] < 1.0) & (X[:, 1] >= 0.0) & (X[:, 1] <= 1.0)
            if np.any(m):
                sub = _subset(wing, m)
                out[m] = from_model(self.sigma.forward(np.clip(X[m], 0.0, 1.0)), sub)
        return out

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = pts.copy()
        for wing in self.wings_for(pts):
            X = to_model(pts, wing)
            m = self.sigma.contains(X, slack=0.0)
            if np.any(m):
                sub = _subset(wing, m)
                out[m] = from_model(self.sigma.inverse(X[m]), sub)
        return out

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.forward(pts) - pts, axis=1)


def phi_hat_n(alpha: float, n: int, q, direction: str = "forward") -> np.ndarray:
    m = PhiHat(alpha, n)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return m.forward(q) if direction == "forward" else m.inverse(q)


# ----- 基映射：单位圆盘 -> 第 1 层十字 -----


def _rotate(z: np.ndarray, k: int) -> np.ndarray:
    k %= 4
    if k == 0:
        return z.copy()
    if k == 1:
        return np.column_stack([-z[:, 1], z[:, 0]])
    if k == 2:
        return -z
    return np.column_stack([z[:, 1], -z[:, 0]])


def plus_ray_length(theta: np.ndarray) -> np.ndarray:
    """五个边长 2 的正方形组成的加号 P0 的射线长度（精确、非光滑）。"""
    c, s = np.abs(np.cos(theta)), np.abs(np.sin(theta))
    with np.errstate(divide="ignore"):
        h = np.minimum(3.0 / c, 1.0 / s)
        v = np.minimum(1.0 / c, 3.0 / s)
    return np.maximum(h, v)


class BaseMap:
    """B = 相似 ∘ 四臂拉伸 ∘ 圆盘到加号的径向映射；|q| <= 1/2 上为精确相似 q -> c + (α/2) q。"""

    CORE_RADIUS = 0.5
    RHO_CAP = 1.0 - 1e-13

    def __init__(self, alpha: float):
        if not (0.0 < alpha < 0.05):
            raise DomainError(f"alpha 须在 (0, 0.05) 内，得到 {alpha}")
        self.alpha = alpha
        self.kappa = (1.0 / alpha - 5.0) / 4.0
        self.arm = RhoHat(self.kappa)
        self.center = np.array([0.5, 0.5])
        self.scale = alpha / 2.0

    # 圆盘 -> P0
    def _smooth_length(self, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        rho = np.minimum(rho, self.RHO_CAP)
        p = 8.0 + 4.0 / (1.0 - rho)
        with np.errstate(divide="ignore"):
            lc = np.log(np.abs(np.cos(theta)))
            ls = np.log(np.abs(np.sin(theta)))
        l3 = math.log(3.0)
        log_h = -np.logaddexp(p * (lc - l3), p * ls) / p
        log_v = -np.logaddexp(p * lc, p * (ls - l3)) / p
        return np.exp((np.logaddexp(p * log_h, p * log_v) - math.log(2.0)) / p)

    def _radial(self, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        b = flat_step((rho - self.CORE_RADIUS) / (1.0 - self.CORE_RADIUS))
        return rho * (1.0 + b * (self._smooth_length(rho, theta) - 1.0))

    def disk_to_plus(self, q: np.ndarray) -> np.ndarray:
        out = q.copy()
        rho = np.hypot(q[:, 0], q[:, 1])
        act = rho > self.CORE_RADIUS
        if np.any(act):
            th = np.arctan2(q[act, 1], q[act, 0])
            R = self._radial(rho[act], th)
            out[act] = q[act] * (R / rho[act])[:, None]
        return out

    def plus_to_disk(self, z: np.ndarray) -> np.ndarray:
        out = z.copy()
        R = np.hypot(z[:, 0], z[:, 1])
        act = R > self.CORE_RADIUS
        if np.any(act):
            th = np.arctan2(z[act, 1], z[act, 0])
            Ra = R[act]
            rho = bisect_increasing(
                lambda r: self._radial(r, th) - Ra,
                np.full(Ra.size, self.CORE_RADIUS), np.full(Ra.size, self.RHO_CAP),
                points=z[act], what="base_map",
            )
            out[act] = np.column_stack([rho * np.cos(th), rho * np.sin(th)])
        return out

    # P0 -> 长臂十字（四个端正方形各用一次 ρ̂）
    def stretch_arms(self, z: np.ndarray) -> np.ndarray:
        out = z.copy()
        for k in range(4):
            zr = _rotate(z, -k)
            sel = (zr[:, 0] > 1.0) & (np.abs(zr[:, 1]) <= 1.0)
            if np.any(sel):
                model = np.column_stack([(zr[sel, 0] - 1.0) / 2.0, (zr[sel, 1] + 1.0) / 2.0])
                moved = self.arm.forward(np.clip(model, 0.0, 1.0))
                back = np.column_stack([1.0 + 2.0 * moved[:, 0], 2.0 * moved[:, 1] - 1.0])
                out[sel] = _rotate(back, k)
        return out

    def shrink_arms(self, z: np.ndarray) -> np.ndarray:
        out = z.copy()
        for k in range(4):
            zr = _rotate(z, -k)
            sel = (zr[:, 0] > 1.0) & (np.abs(zr[:, 1]) <= 1.0)
            if np.any(sel):
                model = np.column_stack([(zr[sel, 0] - 1.0) / 2.0, (zr[sel, 1] + 1.0) / 2.0])
                moved = self.arm.inverse(np.clip(model, [0.0, 0.0], [self.arm.length, 1.0]))
                back = np.column_stack([1.0 + 2.0 * moved[:, 0], 2.0 * moved[:, 1] - 1.0])
                out[sel] = _rotate(back, k)
        return out

    def in_cross(self, z: np.ndarray, slack: float = DOMAIN_SLACK) -> np.ndarray:
        L = 1.0 / self.alpha + slack / self.alpha
        ax, ay = np.abs(z[:, 0]), np.abs(z[:, 1])
        return ((ax <= L) & (ay <= 1.0 + slack)) | ((ax <= 1.0 + slack) & (ay <= L))

    def forward(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        r = np.hypot(q[:, 0], q[:, 1])
        if np.any(r > 1.0 + DOMAIN_SLACK):
            raise DomainError(f"base_map forward: {int((r > 1.0).sum())} 个点在单位圆盘外")
        z = self.stretch_arms(self.disk_to_plus(q))
        return self.center + self.scale * z

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        z = (y - self.center) / self.scale
        ok = self.in_cross(z)
        if not np.all(ok):
            raise DomainError(f"base_map inverse: {int((~ok).sum())} 个点不在第 1 层十字内，例如 {y[~ok][0]}")
        return self.plus_to_disk(self.shrink_arms(z))


def base_map(alpha: float, q, direction: str = "forward") -> np.ndarray:
    m = BaseMap(alpha)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return m.forward(q) if direction == "forward" else m.inverse(q)


# ----- 映射栈 -----


@dataclass
class MapStage:
    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    params: Dict[str, object] = field(default_factory=dict)


class PlanarMapStack:
    """按顺序复合的映射阶段；forward 依次作用，inverse 逆序作用。"""

    def __init__(self, stages: Sequence[MapStage]):
        self.stages: List[MapStage] = list(stages)

    def forward(self, pts: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
        out = np.atleast_2d(np.asarray(pts, dtype=float))
        for stage in self.stages[:upto]:
            out = stage.forward(out)
        return out

    def inverse(self, pts: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
        out = np.atleast_2d(np.asarray(pts, dtype=float))
        for stage in reversed(self.stages[:upto]):
            out = stage.inverse(out)
        return out

    def jacobian(self, pts: np.ndarray, step: float = FD_STEP) -> np.ndarray:
        return fd_jacobian(self.forward, pts, step)

    def det(self, pts: np.ndarray, step: float = FD_STEP) -> np.ndarray:
        return fd_det(self.forward, pts, step)

    def then(self, stage: MapStage) -> "PlanarMapStack":
        return PlanarMapStack(self.stages + [stage])

    def metadata(self) -> List[Dict[str, object]]:
        return [{"name": s.name, **s.params} for s in self.stages]

    def __len__(self) -> int:
        return len(self.stages)


def base_stage(alpha: float) -> MapStage:
    b = BaseMap(alpha)
    return MapStage("base_map", b.forward, b.inverse, {"alpha": alpha, "kappa": b.kappa})


def phi_hat_stage(alpha: float, n: int, max_depth: int = DEFAULT_MAX_DEPTH) -> MapStage:
    m = PhiHat(alpha, n, max_depth)
    return MapStage(f"phi_hat_{n}", m.forward, m.inverse, {"n": n, "gamma": m.gamma})


def build_phi(alpha: float, depth: int, max_depth: int = DEFAULT_MAX_DEPTH) -> PlanarMapStack:
    """φ_N = φ̂_(N-1) ∘ … ∘ φ̂_1 ∘ B：单位圆盘 -> U_N。"""
    check_depth(alpha, depth, max_depth)
    stages = [base_stage(alpha)]
    for n in range(1, depth):
        stages.append(phi_hat_stage(alpha, n, max_depth))
    logger.info("已组装 φ_%d（%d 个阶段）", depth, len(stages))
    return PlanarMapStack(stages)


def phi(alpha: float, depth: int, q, direction: str = "forward") -> np.ndarray:
    stack = build_phi(alpha, depth)
    return stack.forward(q) if direction == "forward" else stack.inverse(q)


# ----- 常数与性质测量 -----


def measure_c0(kappa: float = 10.0, n: int = 200) -> Dict[str, float]:
    """远臂 [1+κ, 2+2κ]×[0,1] 上 ρ̂⁻¹ 的 Lipschitz 常数 L，c0 = κ L，c = c0^2。"""
    m = RhoHat(kappa)
    lip = lipschitz_on_grid(m.inverse, (1.0 + kappa, 2.0 + 2.0 * kappa), (0.0, 1.0), n)
    c0 = kappa * lip
    return {"kappa": kappa, "lipschitz": lip, "c0": c0, "c": c0 * c0}


def sigma_lipschitz_scaling(gammas: Sequence[float] = (10.0, 20.0, 40.0, 80.0), n: int = 60) -> Dict[str, object]:
    """𝒞_γ^± 上 σ_γ⁻¹ 的 Lipschitz 常数与 log-log 斜率。"""
    lips = []
    for g in gammas:
        s = SigmaGamma(g)
        up = lipschitz_on_grid(s.inverse, *s.upper_tip(), n)
        dn = lipschitz_on_grid(s.inverse, *s.lower_tip(), n)
        lips.append(max(up, dn))
    slope = float(np.polyfit(np.log(gammas), np.log(lips), 1)[0])
    return {"gammas": list(gammas), "lipschitz": lips, "slope": slope}


def rho2_jacobian_bound(kappa: float = 10.0, n: int = 60) -> Dict[str, float]:
    """[1+0.8κ, 1+κ]×[0,1] 上 ρ̂2⁻¹ 偏导的最大值与 200/κ 的比较。"""
    m = RhoHat(kappa)
    xs = np.linspace(1.0 + 0.8 * kappa, 1.0 + kappa - 1e-4, n)
    ys = np.linspace(1e-3, 1.0 - 1e-3, n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    J = fd_jacobian(m.rho2_inverse, pts, step=1e-6)
    worst = float(np.max(np.abs(J)))
    image = m.rho2_inverse(pts)
    return {
        "kappa": kappa,
        "max_partial": worst,
        "bound": 200.0 / kappa,
        "image_x2_min": float(image[:, 1].min()),
        "image_x2_max": float(image[:, 1].max()),
    }


def roundtrip_error(stack: PlanarMapStack, pts: np.ndarray, upto: Optional[int] = None) -> float:
    """max |φ⁻¹(φ(q)) - q|。"""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    back = stack.inverse(stack.forward(pts, upto), upto)
    return float(np.max(np.linalg.norm(back - pts, axis=1)))


def composition_consistency(alpha: float, depth: int, pts: np.ndarray,
                            max_depth: int = DEFAULT_MAX_DEPTH) -> pd.DataFrame:
    """逐层核对 φ_(n+1) = φ̂_n ∘ φ_n（两侧各自独立构造），φ_n 的像落在 U_n 内，且 φ̂_n 确实移动了点。"""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    limit = max(depth, max_depth)
    rows = []
    image = build_phi(alpha, 1, limit).forward(pts)
    for n in range(1, depth + 1):
        kind, _ = classify_points(alpha, n, image, max_depth=max(depth, DEFAULT_MAX_DEPTH))
        row = {"n": n, "in_U_fraction": float(np.mean(kind == KIND_U)),
               "composition_error": float("nan"), "moved_fraction": float("nan")}
        if n < depth:
            composed = PhiHat(alpha, n, limit).forward(image)
            direct = build_phi(alpha, n + 1, limit).forward(pts)
            row["composition_error"] = float(np.max(np.abs(composed - direct)))
            row["moved_fraction"] = float(np.mean(np.any(composed != image, axis=1)))
            image = direct
        rows.append(row)
    return pd.DataFrame(rows)
