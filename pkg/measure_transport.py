# -*- coding: utf-8 -*-
"""
测度输运层：构造修正 ψ，使 h = φ ∘ ψ 把单位圆盘上的均匀测度推到 U_N 上的均匀测度。

h = φ̂_(N-1) ∘ c_(N-1) ∘ … ∘ φ̂_1 ∘ c_1 ∘ B ∘ c_0
- c_0：圆盘上 (s, u) = (r², θ/2π) 坐标的 Knothe 重排，把均匀测度推到 B 的拉回密度；
- c_n (n >= 1)：第 n 层十字竖臂窗口内先列后行的一维重排，把窗口中央的多余质量 e_n 搬进两侧翼。
ψ̂_n = φ_n⁻¹ ∘ c_n ∘ φ_n，ψ = ψ̂_(N-1) ∘ … ∘ ψ̂_1 ∘ c_0。

质量簿记（以翼面积为单位）：M_(N-1) = 2 + 4γ_(N-1)，M_n = 2 + 4γ_n + 4α²(M_(n+1) - 1)。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import CubicHermiteSpline, RegularGridInterpolator, make_interp_spline
from scipy.special import roots_legendre

from cantor_geometry import (
    KIND_U, build_levels, check_depth, classify_points, descend, gamma, side_length,
)
from explicit_maps import (
    BaseMap, MapStage, PlanarMapStack, SigmaGamma, bisect_increasing, build_phi,
    fd_det, flat_step, flat_step_deriv, half_width,
)
from lab_config import (
    BISECT_TOL, CELL_MASS_RTOL, CHI2_CHUNK, DEFAULT_MAX_DEPTH, FD_STEP, JACOBIAN_MIN_DET, MU_N_MASS_RTOL,
    TransportConfig,
)
from lab_errors import DomainError, JacobianSingularityError, MassMismatchError

logger = logging.getLogger(__name__)

# 翼表 X1 方向：1 - X1 按几何级数从 1 加密到该间隙
WING_EDGE_GAP = 1e-7
# 多余质量在竖臂内的横向支撑（相对臂宽）
BAND = (0.25, 0.75)
KNOTHE_QUAD_ORDER = 6
DISK_QUAD_ORDER = 2
EVAL_CHUNK = 4096


# ----- 质量簿记 -----


def area_U(alpha: float, depth: int) -> float:
    """Leb(U_N) = 1 - 4^N β_N²。"""
    return 1.0 - 4.0 ** depth * side_length(depth, alpha) ** 2


def cross_area(alpha: float, n: int) -> float:
    w = alpha ** n
    return w * (2.0 * side_length(n - 1, alpha) - w)


def augmented_masses(alpha: float, depth: int) -> Dict[int, float]:
    """M_n，n = 1..N-1：第 n 层翼经 φ̂_n 展开后（连同更深层）所载质量与翼面积之比。"""
    out: Dict[int, float] = {}
    nxt = None
    for n in range(depth - 1, 0, -1):
        m = 2.0 + 4.0 * gamma(n, alpha)
        if nxt is not None:
            m += 4.0 * alpha ** 2 * (nxt - 1.0)
        out[n] = m
        nxt = m
    return out


def window_excess_mass(alpha: float, n: int, mass: float) -> float:
    """单个窗口内的多余质量 E_w = 2 a² (M_n - 1)，a = α^(n+1)。"""
    return 2.0 * alpha ** (2 * n + 2) * (mass - 1.0)


def mass_bookkeeping(alpha: float, depth: int) -> pd.DataFrame:
    """逐层簿记：十字面积、M_n，以及 "第 n 层十字 + 4 份翼多余质量 = 子树面积" 的闭合误差。"""
    masses = augmented_masses(alpha, depth)
    rows = []
    for n in range(1, depth + 1):
        subtree = sum(4.0 ** (m - n) * cross_area(alpha, m) for m in range(n, depth + 1))
        mass = masses.get(n)
        excess = 0.0 if mass is None else 4.0 * alpha ** (2 * n + 2) * (mass - 1.0)
        rows.append({
            "n": n,
            "gamma": gamma(n, alpha) if n < depth else float("nan"),
            "M_n": float("nan") if mass is None else mass,
            "cross_area": cross_area(alpha, n),
            "subtree_area": subtree,
            "closure_error": abs(cross_area(alpha, n) + excess - subtree) / subtree,
        })
    return pd.DataFrame(rows)


# ----- 多余质量剖面 e_n -----


def band_profile(xi: np.ndarray, w: float) -> Tuple[np.ndarray, np.ndarray]:
    """κ1 及其累积 K1：支撑在 [0.25w, 0.75w]，∫κ1 = 1。"""
    length = (BAND[1] - BAND[0]) * w
    t = (np.asarray(xi, dtype=float) - BAND[0] * w) / length
    return flat_step_deriv(t) / length, flat_step(t)


def window_profile(eta: np.ndarray, length: float) -> Tuple[np.ndarray, np.ndarray]:
    t = np.asarray(eta, dtype=float) / length
    return flat_step_deriv(t) / length, flat_step(t)


def excess_density(xi: np.ndarray, eta: np.ndarray, w: float, length: float, total: float) -> np.ndarray:
    k1, _ = band_profile(xi, w)
    k2, _ = window_profile(eta, length)
    return total * k1 * k2


def locate_windows(alpha: float, n: int, pts: np.ndarray) -> Dict[str, np.ndarray]:
    """第 n 层十字竖臂去掉横臂后的上下两个窗口；返回窗口内局部坐标 (ξ, η) 与原点。"""
    pts = np.atleast_2d(pts)
    host = descend(alpha, pts, n - 1)
    side = host["side"]
    w = alpha ** n
    x0 = host["X"] + side / 2.0 - w / 2.0
    cy = host["Y"] + side / 2.0
    y = pts[:, 1]
    lower = (y >= host["Y"]) & (y <= cy - w / 2.0)
    upper = (y >= cy + w / 2.0) & (y <= host["Y"] + side)
    xi = pts[:, 0] - x0
    y0 = np.where(upper, cy + w / 2.0, host["Y"])
    mask = (xi >= 0.0) & (xi <= w) & (lower | upper)
    return {"mask": mask, "xi": xi, "eta": y - y0, "x0": x0, "y0": y0}


def level_excess(alpha: float, n: int, mass: Optional[float], pts: np.ndarray) -> np.ndarray:
    """环面坐标下的 e_n；mass 为 None（n = N）时恒为 0。"""
    pts = np.atleast_2d(pts)
    out = np.zeros(pts.shape[0])
    if mass is None:
        return out
    loc = locate_windows(alpha, n, pts)
    m = loc["mask"]
    if np.any(m):
        out[m] = excess_density(loc["xi"][m], loc["eta"][m], alpha ** n, side_length(n, alpha),
                                window_excess_mass(alpha, n, mass))
    return out


def bar_excess(model_pts: np.ndarray, gamma_value: float, total: float) -> np.ndarray:
    """翼模型坐标下 e_(n+1)：增广十字竖条 [1+γ, 2+γ] 的上下窗口，臂宽 1、窗口长 γ。"""
    out = np.zeros(model_pts.shape[0])
    if total == 0.0:
        return out
    xi = model_pts[:, 0] - (1.0 + gamma_value)
    y = model_pts[:, 1]
    upper = (y >= 1.0) & (y <= 1.0 + gamma_value)
    lower = (y <= 0.0) & (y >= -gamma_value)
    m = (xi >= 0.0) & (xi <= 1.0) & (upper | lower)
    eta = np.where(upper, y - 1.0, y + gamma_value)
    if np.any(m):
        out[m] = excess_density(xi[m], eta[m], 1.0, gamma_value, total)
    return out


# ----- 翼表与窗口重排 c_n -----


@dataclass
class WingTable:
    """翼 [0,1]^2 上 C(X1, X2) = ∫_0^X1 (J - 1)，J = |det Dσ_γ|·(1 + e_(n+1)∘σ_γ)。"""

    n: int
    gamma: float
    mass: float
    X1: np.ndarray
    X2: np.ndarray
    C: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self._C = RegularGridInterpolator((self.X1, self.X2), self.C, bounds_error=False, fill_value=None)
        self._row = make_interp_spline(self.X2, self.C[-1], k=1)
        self._D = self._row.antiderivative()

    def cumulative(self, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
        q = np.column_stack([np.clip(X1, 0.0, 1.0), np.clip(X2, 0.0, 1.0)])
        return self._C(q)

    def row_excess(self, X2: np.ndarray) -> np.ndarray:
        """C(1, X2)，翼外的行为 0。"""
        X2 = np.asarray(X2, dtype=float)
        inside = (X2 > 0.0) & (X2 < 1.0)
        return np.where(inside, self._row(np.clip(X2, 0.0, 1.0)), 0.0)

    def row_excess_integral(self, X2: np.ndarray) -> np.ndarray:
        """D(X2) = ∫_0^X2 C(1, t) dt，D(1) = M_n - 1。"""
        return self._D(np.clip(np.asarray(X2, dtype=float), 0.0, 1.0))


def build_wing_table(alpha: float, n: int, mass: float, next_mass: Optional[float],
                     nx: int, ny: int) -> WingTable:
    g = gamma(n, alpha)
    sigma = SigmaGamma(g)
    X1 = np.concatenate([1.0 - np.geomspace(1.0, WING_EDGE_GAP, nx - 1), [1.0]])
    X2 = np.linspace(0.0, 1.0, ny)
    g1, g2 = np.meshgrid(X1, X2, indexing="ij")
    p = half_width(g2)
    active = (g1 > 1.0 - p - 1e-6) & (g1 < 1.0) & (g2 > 0.0) & (g2 < 1.0)
    J = np.ones_like(g1)
    pts = np.column_stack([g1[active], g2[active]])
    step = np.minimum(FD_STEP, 0.25 * (1.0 - pts[:, 0]))
    det = np.abs(fd_det(sigma.forward, pts, step))
    total = 0.0 if next_mass is None else 2.0 * alpha ** 2 * (next_mass - 1.0)
    J[active] = det * (1.0 + bar_excess(sigma.forward(pts), g, total))
    J[-1, 1:-1] = J[-2, 1:-1]
    C = cumulative_trapezoid(J - 1.0, X1, axis=0, initial=0.0)
    raw = float(trapezoid(C[-1], X2))
    if raw <= 0.0:
        raise MassMismatchError(f"第 {n} 层翼表多余质量非正：{raw:.3e}")
    scale = (mass - 1.0) / raw
    C = C * scale
    if scale < 0.95 or scale > 1.05:
        logger.warning("第 %d 层翼表归一化系数 %.4f 偏离 1，翼表分辨率可能不足", n, scale)
    if C[-1].min() < 0.0:
        logger.warning("第 %d 层翼表存在负的行多余质量（min %.3e）", n, C[-1].min())
    logger.info("第 %d 层翼表：γ=%.3f，M=%.4f，归一化系数 %.6f", n, g, mass, scale)
    return WingTable(n, g, mass, X1, X2, C, scale)


class TransportMap:
    """带支撑集描述的平面映射：支撑外逐位恒等。"""

    support: str = ""

    def forward(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian_det(self, pts: np.ndarray, step: float = FD_STEP) -> np.ndarray:
        return fd_det(self.forward, pts, step)

    def stage(self, name: str, **params) -> MapStage:
        return MapStage(name, self.forward, self.inverse, {"support": self.support, **params})


class WindowCorrection(TransportMap):
    """c_n：每个第 n 层窗口内先按列、再按行的一维重排。

    列：密度 1 + E_w κ1(ξ) κ2(η) -> 1 + κ1(ξ) R(η)，R(η) = 2a C(1, X2(η)) 为翼行多余质量；
    行：密度 1 + κ1(ξ) R(η) -> 两侧翼内为 J、其余为 1。
    """

    def __init__(self, alpha: float, n: int, mass: float, table: WingTable):
        self.alpha = alpha
        self.n = n
        self.mass = mass
        self.table = table
        self.w = alpha ** n
        self.length = side_length(n, alpha)
        self.a = alpha ** (n + 1)
        self.total = window_excess_mass(alpha, n, mass)
        self.support = f"level-{n} vertical-arm windows"
        self._tol = BISECT_TOL * min(self.w, 1.0)

    def _X2(self, eta: np.ndarray) -> np.ndarray:
        return (eta - self.length / 2.0 + self.a / 2.0) / self.a

    def _row_mass(self, eta: np.ndarray) -> np.ndarray:
        return 2.0 * self.a * self.table.row_excess(self._X2(eta))

    def _column_source(self, k1: np.ndarray, eta: np.ndarray) -> np.ndarray:
        return eta + self.total * k1 * window_profile(eta, self.length)[1]

    def _column_target(self, k1: np.ndarray, eta: np.ndarray) -> np.ndarray:
        return eta + k1 * 2.0 * self.a ** 2 * self.table.row_excess_integral(self._X2(eta))

    def _row_source(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        return xi + self._row_mass(eta) * band_profile(xi, self.w)[1]

    def _row_target(self, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        a, w = self.a, self.w
        X2 = self._X2(eta)
        c1 = self.table.row_excess(X2)
        left = a * (c1 - self.table.cumulative(1.0 - xi / a, X2))
        right = a * c1 + a * self.table.cumulative((xi - w + a) / a, X2)
        extra = np.where(xi <= a, left, np.where(xi >= w - a, right, a * c1))
        return xi + extra

    def _wing_rows(self, eta: np.ndarray) -> np.ndarray:
        X2 = self._X2(eta)
        return (X2 > 0.0) & (X2 < 1.0)

    def forward_local(self, xi: np.ndarray, eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xi, eta = xi.copy(), eta.copy()
        k1 = band_profile(xi, self.w)[0]
        col = k1 > 0.0
        if np.any(col):
            kc, ec = k1[col], eta[col]
            level = self._column_source(kc, ec)
            eta[col] = bisect_increasing(
                lambda t: self._column_target(kc, t) - level,
                np.zeros(kc.size), np.full(kc.size, self.length), tol=self._tol, what=f"c_{self.n} column",
            )
        row = self._wing_rows(eta)
        if np.any(row):
            xr, er = xi[row], eta[row]
            level = self._row_source(xr, er)
            xi[row] = bisect_increasing(
                lambda t: self._row_target(t, er) - level,
                np.zeros(xr.size), np.full(xr.size, self.w), tol=self._tol, what=f"c_{self.n} row",
            )
        return xi, eta

    def inverse_local(self, xi: np.ndarray, eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xi, eta = xi.copy(), eta.copy()
        row = self._wing_rows(eta)
        if np.any(row):
            xr, er = xi[row], eta[row]
            level = self._row_target(xr, er)
            xi[row] = bisect_increasing(
                lambda t: self._row_source(t, er) - level,
                np.zeros(xr.size), np.full(xr.size, self.w), tol=self._tol, what=f"c_{self.n} row inverse",
            )
        k1 = band_profile(xi, self.w)[0]
        col = k1 > 0.0
        if np.any(col):
            kc, ec = k1[col], eta[col]
            level = self._column_target(kc, ec)
            eta[col] = bisect_increasing(
                lambda t: self._column_source(kc, t) - level,
                np.zeros(kc.size), np.full(kc.size, self.length), tol=self._tol, what=f"c_{self.n} column inverse",
            )
        return xi, eta

    def _apply(self, pts: np.ndarray, local: Callable) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = pts.copy()
        loc = locate_windows(self.alpha, self.n, pts)
        m = loc["mask"]
        if np.any(m):
            xi, eta = local(loc["xi"][m], loc["eta"][m])
            out[m, 0] = loc["x0"][m] + xi
            out[m, 1] = loc["y0"][m] + eta
        return out

    def forward(self, pts: np.ndarray) -> np.ndarray:
        return self._apply(pts, self.forward_local)

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        return self._apply(pts, self.inverse_local)

    def displacement(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.forward(pts) - np.atleast_2d(pts), axis=1)


# ----- 矩形上的 Knothe 重排 -----


@dataclass
class CdfTables:
    """密度在矩形节点网格上的表：x 边缘 CDF 与各节点列上的 y 条件 CDF（三次 Hermite）。"""

    xs: np.ndarray
    ys: np.ndarray
    cell_mass: np.ndarray
    column_cells: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        self.total = float(self.cell_mass.sum())
        col = self.column_cells.sum(axis=1)
        if np.any(col <= 0.0):
            raise DomainError("密度在某一节点列上积分非正")
        Fx = np.concatenate([[0.0], np.cumsum(self.cell_mass.sum(axis=1))]) / self.total
        self.marginal = CubicHermiteSpline(self.xs, Fx, col / self.total)
        G = np.concatenate([np.zeros((self.xs.size, 1)), np.cumsum(self.column_cells, axis=1)], axis=1)
        self.conditional = CubicHermiteSpline(self.ys, (G / col[:, None]).T, (self.nodes / col[:, None]).T, axis=0)

    def cdf_x(self, x: np.ndarray) -> np.ndarray:
        return self.marginal(np.clip(x, self.xs[0], self.xs[-1]))

    def inv_cdf_x(self, v: np.ndarray) -> np.ndarray:
        n = v.size
        return bisect_increasing(lambda t: self.cdf_x(t) - v, np.full(n, self.xs[0]), np.full(n, self.xs[-1]),
                                 what="knothe marginal")

    def cdf_y(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        xs = self.xs
        i = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.size - 2)
        wt = (np.clip(x, xs[0], xs[-1]) - xs[i]) / (xs[i + 1] - xs[i])
        yc = np.clip(y, self.ys[0], self.ys[-1])
        out = np.empty(x.size)
        for start in range(0, x.size, EVAL_CHUNK):
            sl = slice(start, start + EVAL_CHUNK)
            vals = self.conditional(yc[sl])
            rows = np.arange(vals.shape[0])
            out[sl] = (1.0 - wt[sl]) * vals[rows, i[sl]] + wt[sl] * vals[rows, i[sl] + 1]
        return out

    def inv_cdf_y(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        n = v.size
        return bisect_increasing(lambda t: self.cdf_y(x, t) - v, np.full(n, self.ys[0]), np.full(n, self.ys[-1]),
                                 what="knothe conditional")


def tabulate_density(density: Callable[[np.ndarray], np.ndarray], xs: np.ndarray, ys: np.ndarray,
                     quad_order: int = KNOTHE_QUAD_ORDER) -> CdfTables:
    """张量 Gauss–Legendre：单元质量、节点列上的 y 区间积分与节点值。"""
    t, wts = roots_legendre(quad_order)
    nx, ny, q = xs.size - 1, ys.size - 1, quad_order
    hx, hy = np.diff(xs), np.diff(ys)
    gx = xs[:-1, None] + hx[:, None] * (t + 1.0) / 2.0
    gy = ys[:-1, None] + hy[:, None] * (t + 1.0) / 2.0
    PX = np.broadcast_to(gx[:, :, None, None], (nx, q, ny, q))
    PY = np.broadcast_to(gy[None, None, :, :], (nx, q, ny, q))
    vals = density(np.column_stack([PX.ravel(), PY.ravel()])).reshape(nx, q, ny, q)
    cell = np.einsum("iajb,a,b->ij", vals, wts, wts) * np.outer(hx, hy) / 4.0
    CX = np.broadcast_to(xs[:, None, None], (nx + 1, ny, q))
    CY = np.broadcast_to(gy[None, :, :], (nx + 1, ny, q))
    cv = density(np.column_stack([CX.ravel(), CY.ravel()])).reshape(nx + 1, ny, q)
    column = np.einsum("ijb,b->ij", cv, wts) * hy[None, :] / 2.0
    NX, NY = np.meshgrid(xs, ys, indexing="ij")
    nodes = density(np.column_stack([NX.ravel(), NY.ravel()])).reshape(nx + 1, ny + 1)
    return CdfTables(xs, ys, cell, column, nodes)



@dataclass
class UniformTables:
    """矩形上常数密度的闭式 CDF，接口同 CdfTables。"""

    cell: Tuple[float, float, float, float]

    def __post_init__(self):
        x0, x1, y0, y1 = self.cell
        self.total = (x1 - x0) * (y1 - y0)

    def density(self, pts: np.ndarray) -> np.ndarray:
        return np.ones(np.atleast_2d(pts).shape[0])

    def cdf_x(self, x: np.ndarray) -> np.ndarray:
        x0, x1 = self.cell[:2]
        return (np.clip(x, x0, x1) - x0) / (x1 - x0)

    def inv_cdf_x(self, v: np.ndarray) -> np.ndarray:
        x0, x1 = self.cell[:2]
        return x0 + np.asarray(v, dtype=float) * (x1 - x0)

    def cdf_y(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        y0, y1 = self.cell[2:]
        return (np.clip(y, y0, y1) - y0) / (y1 - y0)

    def inv_cdf_y(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        y0, y1 = self.cell[2:]
        return y0 + np.asarray(v, dtype=float) * (y1 - y0)


class KnotheTransport(TransportMap):
    """矩形 K 上先 x 后 y 的条件 CDF 重排，把 source 推到 target；K 外逐位恒等。

    source / target 可为密度函数（在 nx × ny 网格上建表），也可直接给出已建好的表。
    """

    def __init__(self, cell: Tuple[float, float, float, float], source, target,
                 nx: int = 64, ny: int = 64, quad_order: int = KNOTHE_QUAD_ORDER):
        x0, x1, y0, y1 = cell
        if not (x0 < x1 and y0 < y1):
            raise DomainError(f"单元退化：{cell}")
        self.cell = cell
        self.support = f"[{x0:g}, {x1:g}]×[{y0:g}, {y1:g}]"
        self.trivial = source is target
        xs = np.linspace(x0, x1, nx + 1)
        ys = np.linspace(y0, y1, ny + 1)
        self.source = self._tables(source, xs, ys, quad_order)
        self.target = self.source if self.trivial else self._tables(target, xs, ys, quad_order)
        rel = abs(self.source.total - self.target.total) / self.target.total
        if rel > CELL_MASS_RTOL:
            raise MassMismatchError(
                f"单元 {self.support} 上源/目标质量不符：{self.source.total:.10g} vs {self.target.total:.10g}（相对 {rel:.2e}）"
            )
        self._source_fn = source if callable(source) else getattr(source, "density", None)
        self._target_fn = target if callable(target) else getattr(target, "density", None)

    @staticmethod
    def _tables(spec, xs: np.ndarray, ys: np.ndarray, quad_order: int):
        if isinstance(spec, (CdfTables, UniformTables)):
            return spec
        return tabulate_density(spec, xs, ys, quad_order)

    def _inside(self, pts: np.ndarray) -> np.ndarray:
        x0, x1, y0, y1 = self.cell
        return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)

    def forward(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = pts.copy()
        m = self._inside(pts)
        if self.trivial or not np.any(m):
            return out
        x, y = pts[m, 0], pts[m, 1]
        xn = self.target.inv_cdf_x(self.source.cdf_x(x))
        out[m, 0] = xn
        out[m, 1] = self.target.inv_cdf_y(xn, self.source.cdf_y(x, y))
        return out

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = pts.copy()
        m = self._inside(pts)
        if self.trivial or not np.any(m):
            return out
        x, y = pts[m, 0], pts[m, 1]
        xo = self.source.inv_cdf_x(self.target.cdf_x(x))
        out[m, 0] = xo
        out[m, 1] = self.source.inv_cdf_y(xo, self.target.cdf_y(x, y))
        return out

    def pushforward_error(self, n: int = 24, margin: float = 0.02) -> float:
        """内部网格上 max |source(p)/|det DT(p)| - target(T p)| / target(T p)。"""
        if self._source_fn is None or self._target_fn is None:
            raise DomainError("由现成表构造的重排没有密度函数，无法检查推前")
        x0, x1, y0, y1 = self.cell
        dx, dy = margin * (x1 - x0), margin * (y1 - y0)
        gx, gy = np.meshgrid(np.linspace(x0 + dx, x1 - dx, n), np.linspace(y0 + dy, y1 - dy, n), indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        step = FD_STEP * max(x1 - x0, y1 - y0)
        det = np.abs(fd_det(self.forward, pts, step))
        pushed = self._source_fn(pts) / det
        tgt = self._target_fn(self.forward(pts))
        return float(np.max(np.abs(pushed - tgt) / tgt))


def local_transport(cell: Tuple[float, float, float, float], source: "DensityField", target: "DensityField",
                    nx: int = 64, ny: int = 64, quad_order: int = KNOTHE_QUAD_ORDER) -> KnotheTransport:
    """单元上的 Knothe 重排；meta 标记 uniform 的密度场用闭式 CDF，不再建表。"""
    def spec(d):
        if isinstance(d, DensityField):
            return UniformTables(cell) if d.meta.get("uniform") else d.evaluator
        return d

    src = spec(source)
    tgt = src if source is target else spec(target)
    return KnotheTransport(cell, src, tgt, nx, ny, quad_order)


# ----- 圆盘上的 c_0 -----


def _polar(q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    s = q[:, 0] ** 2 + q[:, 1] ** 2
    u = np.mod(np.arctan2(q[:, 1], q[:, 0]) / (2.0 * np.pi), 1.0)
    return s, u


def _cartesian(s: np.ndarray, u: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.clip(s, 0.0, None))
    return np.column_stack([r * np.cos(2.0 * np.pi * u), r * np.sin(2.0 * np.pi * u)])


class DiskKnothe(TransportMap):
    """c_0：(s, u) 单位正方形上把均匀测度推到 g = π d (1 + e_1∘B)|det DB|。

    B 在 |q| <= 1/2 上是精确相似，g 在 s <= 1/4 上为常数 π ν0，ν0 = d (α/2)²；
    对应的源核 s <= π ν0 / 4 上 c_0 精确为 q -> q / sqrt(π ν0)。只缩放尾部使总质量为 1。
    """

    support = "unit disk"

    def __init__(self, base: BaseMap, density_scale: float, excess: Callable[[np.ndarray], np.ndarray],
                 ns: int, nu: int, quad_order: int = DISK_QUAD_ORDER):
        if ns % 4:
            raise DomainError("ns 须为 4 的倍数")
        self.base = base
        self.d = density_scale
        self.excess = excess
        self.core_density = np.pi * density_scale * (base.alpha / 2.0) ** 2
        xs = np.linspace(0.0, 1.0, ns + 1)
        ys = np.linspace(0.0, 1.0, nu + 1)
        raw = tabulate_density(self._target_density, xs, ys, quad_order)
        i_core = ns // 4
        tail = float(raw.cell_mass[i_core:].sum())
        self.tail_scale = (1.0 - self.core_density * 0.25) / tail
        cell, column, nodes = raw.cell_mass.copy(), raw.column_cells.copy(), raw.nodes.copy()
        cell[i_core:] *= self.tail_scale
        column[i_core + 1:] *= self.tail_scale
        nodes[i_core + 1:] *= self.tail_scale
        self.target = CdfTables(xs, ys, cell, column, nodes)
        self.square = local_transport((0.0, 1.0, 0.0, 1.0), uniform_density((0.0, 1.0, 0.0, 1.0)), self.target)
        self.s_core = self.core_density * 0.25
        self.r_core = math.sqrt(self.s_core)
        if abs(self.tail_scale - 1.0) > 0.05:
            logger.warning("c_0 尾部缩放系数 %.4f 偏离 1，网格 (%d, %d) 可能过粗", self.tail_scale, ns, nu)
        logger.info("c_0 已建表：核半径 %.5f，尾部缩放 %.6f", self.r_core, self.tail_scale)

    def _target_density(self, su: np.ndarray) -> np.ndarray:
        s = su[:, 0]
        out = np.full(s.size, self.core_density)
        tail = s > 0.25
        if np.any(tail):
            q = _cartesian(s[tail], su[tail, 1])
            r = np.sqrt(s[tail])
            rb = np.minimum(r, 1.0 - 2.0 * FD_STEP)
            qb = q * (rb / r)[:, None]
            vals = np.empty(qb.shape[0])
            for start in range(0, qb.shape[0], 16 * EVAL_CHUNK):
                sl = slice(start, start + 16 * EVAL_CHUNK)
                det = np.abs(fd_det(self.base.forward, qb[sl]))
                vals[sl] = det * (1.0 + self.excess(self.base.forward(qb[sl])))
            out[tail] = np.pi * self.d * vals
        return out

    def forward(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        s, u = _polar(q)
        out = q / math.sqrt(self.core_density)
        tail = s > self.s_core
        if np.any(tail):
            su = self.square.forward(np.column_stack([np.minimum(s[tail], 1.0), u[tail]]))
            out[tail] = _cartesian(su[:, 0], su[:, 1])
        return out

    def inverse(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        s, u = _polar(q)
        out = q * math.sqrt(self.core_density)
        tail = s > 0.25
        if np.any(tail):
            su = self.square.inverse(np.column_stack([np.minimum(s[tail], 1.0), u[tail]]))
            out[tail] = _cartesian(su[:, 0], su[:, 1])
        return out


# ----- 密度场 -----


@dataclass
class DensityField:
    """平面密度：evaluator(pts) >= 0，mass 为理论总质量。"""

    evaluator: Callable[[np.ndarray], np.ndarray]
    mass: float
    domain: str
    meta: Dict[str, object] = field(default_factory=dict)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return self.evaluator(np.atleast_2d(np.asarray(pts, dtype=float)))



def uniform_density(cell: Tuple[float, float, float, float]) -> DensityField:
    """矩形上的 Lebesgue 测度（密度 1）。"""
    x0, x1, y0, y1 = cell
    return DensityField(
        evaluator=lambda pts: np.ones(pts.shape[0]),
        mass=(x1 - x0) * (y1 - y0),
        domain="rectangle",
        meta={"uniform": True},
    )


def _abs_det(stack: PlanarMapStack, pts: np.ndarray, step: float) -> np.ndarray:
    det = np.abs(stack.det(pts, step))
    bad = det < JACOBIAN_MIN_DET
    if np.any(bad):
        raise JacobianSingularityError(f"|det| < {JACOBIAN_MIN_DET:g} 于 {int(bad.sum())} 个点，例如 {pts[bad][0]}")
    return det


def pullback_density(stack: PlanarMapStack, normalization: float = 1.0, domain: str = "unit disk",
                     step: float = FD_STEP) -> DensityField:
    """density(q) = normalization · |det Dφ(q)|。"""
    return DensityField(
        evaluator=lambda pts: normalization * _abs_det(stack, pts, step),
        mass=1.0,
        domain=domain,
        meta={"stack": stack, "normalization": normalization},
    )


def mu_density(alpha: float, depth: int, max_depth: int = DEFAULT_MAX_DEPTH) -> DensityField:
    """μ = φ_N 对 m_U 的拉回，密度 |det Dφ_N| / Leb(U_N)。"""
    field_ = pullback_density(build_phi(alpha, depth, max_depth), 1.0 / area_U(alpha, depth))
    field_.meta.update({"alpha": alpha, "depth": depth})
    return field_


def integrate_on_disk(density: DensityField, ns: int = 200, nu: int = 400) -> float:
    """(s, u) 中点网格求积：∫ ρ dA = π ∫∫ ρ ds du；外圈节点内缩以容纳差分模板。"""
    s = (np.arange(ns) + 0.5) / ns
    u = (np.arange(nu) + 0.5) / nu
    S, Uu = np.meshgrid(s, u, indexing="ij")
    q = _cartesian(np.minimum(S.ravel(), (1.0 - 4.0 * FD_STEP) ** 2), Uu.ravel())
    return float(np.pi * density(q).mean())


def _window_quadrature(alpha: float, n: int, mass: float, center: Tuple[float, float], order: int) -> float:
    """∫ e_n 在一个第 n 层十字两窗口上的 Gauss–Legendre 求积（只在横向支撑带内取点）。"""
    t, wts = roots_legendre(order)
    w, host = alpha ** n, side_length(n - 1, alpha)
    cx, cy = center
    bx0 = cx - w / 2.0 + BAND[0] * w
    bx1 = cx - w / 2.0 + BAND[1] * w
    total = 0.0
    for y0, y1 in ((cy - host / 2.0, cy - w / 2.0), (cy + w / 2.0, cy + host / 2.0)):
        gx = bx0 + (bx1 - bx0) * (t + 1.0) / 2.0
        gy = y0 + (y1 - y0) * (t + 1.0) / 2.0
        GX, GY = np.meshgrid(gx, gy, indexing="ij")
        pts = np.column_stack([GX.ravel(), GY.ravel()])
        vals = level_excess(alpha, n, mass, pts).reshape(order, order)
        total += float(wts @ vals @ wts) * (bx1 - bx0) * (y1 - y0) / 4.0
    return total


def build_mu_n(mu: DensityField, n: int, quad_order: int = 96) -> DensityField:
    """μ_n(q) = d (1 + e_n(φ_n q)) |det Dφ_n(q)|：在 φ⁻¹(U_(n-1)) 上等于 μ，各第 n 层单元质量与 μ 一致。"""
    alpha, depth = mu.meta["alpha"], mu.meta["depth"]
    if not (2 <= n <= depth):
        raise DomainError(f"n 须在 [2, {depth}] 内，得到 {n}")
    d = 1.0 / area_U(alpha, depth)
    stack = PlanarMapStack(mu.meta["stack"].stages[:n])
    mass = augmented_masses(alpha, depth).get(n)
    rows = []
    levels = build_levels(alpha, n, max_depth=max(depth, DEFAULT_MAX_DEPTH))
    subtree = sum(4.0 ** (m - n) * cross_area(alpha, m) for m in range(n, depth + 1))
    for c in levels[n - 1].crosses:
        quad = cross_area(alpha, n)
        if mass is not None:
            quad += _window_quadrature(alpha, n, mass, (c.center.x1, c.center.x2), quad_order)
        rows.append({"index": c.index, "quadrature": d * quad, "subtree": d * subtree})
    cells = pd.DataFrame(rows)
    cells["rel_error"] = (cells["quadrature"] - cells["subtree"]).abs() / cells["subtree"]
    worst = float(cells["rel_error"].max())
    if worst > MU_N_MASS_RTOL:
        raise MassMismatchError(f"μ_{n} 单元质量与子树面积不符：最大相对误差 {worst:.2e}")
    outer = sum(4.0 ** (m - 1) * cross_area(alpha, m) for m in range(1, n)) * d
    total = outer + float(cells["quadrature"].sum())
    logger.debug("μ_%d：%d 个单元，最大相对误差 %.2e，总质量 %.10f", n, len(cells), worst, total)

    def evaluator(pts: np.ndarray) -> np.ndarray:
        img = stack.forward(pts)
        return d * (1.0 + level_excess(alpha, n, mass, img)) * _abs_det(stack, pts, FD_STEP)

    return DensityField(evaluator, total, mu.domain,
                        {"alpha": alpha, "depth": depth, "n": n, "cells": cells, "stack": stack})


# ----- 组装 h -----


class AssembledTransport:
    """h = φ̂_(N-1) ∘ c_(N-1) ∘ … ∘ φ̂_1 ∘ c_1 ∘ B ∘ c_0 及其分解 ψ。"""

    def __init__(self, alpha: float, depth: int, cfg: TransportConfig, max_depth: int = DEFAULT_MAX_DEPTH):
        check_depth(alpha, depth, max_depth)
        self.alpha = alpha
        self.depth = depth
        self.area = area_U(alpha, depth)
        self.d = 1.0 / self.area
        self.masses = augmented_masses(alpha, depth)
        self.phi = build_phi(alpha, depth, max_depth)
        self.base = BaseMap(alpha)
        m1 = self.masses.get(1)
        self.c0 = DiskKnothe(self.base, self.d, lambda pts: level_excess(alpha, 1, m1, pts), cfg.ns, cfg.nu)
        self.corrections: Dict[int, WindowCorrection] = {}
        for n in range(1, depth):
            table = build_wing_table(alpha, n, self.masses[n], self.masses.get(n + 1), cfg.wing_nx, cfg.wing_ny)
            self.corrections[n] = WindowCorrection(alpha, n, self.masses[n], table)
        stages = [self.c0.stage("c_0"), self.phi.stages[0]]
        for n in range(1, depth):
            stages.append(self.corrections[n].stage(f"c_{n}", n=n, M_n=self.masses[n]))
            stages.append(self.phi.stages[n])
        self.stack = PlanarMapStack(stages)
        self.center = np.array([0.5, 0.5])
        self.lam = math.sqrt(self.area / math.pi)
        self.r_core = self.c0.r_core
        logger.info("h 已组装：N=%d，Leb(U_N)=%.6g，λ=%.6g，核半径 %.6g", depth, self.area, self.lam, self.r_core)

    def forward(self, q: np.ndarray) -> np.ndarray:
        return self.stack.forward(q)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return self.stack.inverse(y)

    def det(self, q: np.ndarray, step: float = FD_STEP) -> np.ndarray:
        return self.stack.det(q, step)

    def partial(self, q: np.ndarray, n: int) -> np.ndarray:
        """前 n 层之后的像（落在 U_n 内）。"""
        return self.stack.forward(q, upto=2 * n)

    def psi_hat_stage(self, n: int) -> MapStage:
        """ψ̂_n = φ_n⁻¹ ∘ c_n ∘ φ_n；n = 0 时为 c_0。"""
        if n == 0:
            return self.stack.stages[0]
        phi_n = PlanarMapStack(self.phi.stages[:n])
        c_n = self.corrections[n]
        return MapStage(
            f"psi_hat_{n}",
            lambda q: phi_n.inverse(c_n.forward(phi_n.forward(q))),
            lambda q: phi_n.inverse(c_n.inverse(phi_n.forward(q))),
            {"n": n},
        )

    def psi(self) -> PlanarMapStack:
        return PlanarMapStack([self.psi_hat_stage(n) for n in range(self.depth)])

    def metadata(self) -> Dict[str, object]:
        return {
            "alpha": self.alpha,
            "depth": self.depth,
            "area_U": self.area,
            "lambda": self.lam,
            "r_core": self.r_core,
            "c0_tail_scale": self.c0.tail_scale,
            "wing_table_scale": {str(n): c.table.scale for n, c in self.corrections.items()},
            "M_n": {str(n): m for n, m in self.masses.items()},
            "stages": [s.name for s in self.stack.stages],
        }


def assemble_h(alpha: float, depth: int, cfg: Optional[TransportConfig] = None,
               max_depth: int = DEFAULT_MAX_DEPTH) -> AssembledTransport:
    return AssembledTransport(alpha, depth, cfg or TransportConfig(), max_depth)


# ----- 校验 -----


def sample_disk(n: int, rng: np.random.Generator, r_max: float = 1.0 - 1e-5) -> np.ndarray:
    r = r_max * np.sqrt(rng.random(n))
    th = 2.0 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def sample_uniform_U(alpha: float, depth: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """环面上拒绝采样得到 U_N 上的均匀点。"""
    out: List[np.ndarray] = []
    got = 0
    batch = max(1024, int(2 * n / max(area_U(alpha, depth), 1e-6)))
    while got < n:
        pts = rng.random((batch, 2))
        kind, _ = classify_points(alpha, depth, pts, max_depth=max(depth, DEFAULT_MAX_DEPTH))
        keep = pts[kind == KIND_U]
        out.append(keep)
        got += keep.shape[0]
    return np.vstack(out)[:n]


def stabilized_level(depth: int) -> int:
    return max(1, depth - 2)


def jacobian_constancy(tr: AssembledTransport, rng: np.random.Generator, n_samples: int = 1000,
                       step: float = FD_STEP) -> pd.DataFrame:
    """|det Dh(q)| / (Leb(U_N)/π)，只取像点层级 <= stabilized_level 的样本。"""
    q = sample_disk(4 * n_samples, rng)
    img = tr.forward(q)
    _, level = classify_points(tr.alpha, tr.depth, img, max_depth=max(tr.depth, DEFAULT_MAX_DEPTH))
    keep = level <= stabilized_level(tr.depth)
    q, img, level = q[keep][:n_samples], img[keep][:n_samples], level[keep][:n_samples]
    if q.shape[0] < n_samples:
        logger.warning("稳定区样本不足：%d < %d", q.shape[0], n_samples)
    ratio = np.abs(tr.det(q, step)) / (tr.area / math.pi)
    return pd.DataFrame({
        "q1": q[:, 0], "q2": q[:, 1], "y1": img[:, 0], "y2": img[:, 1],
        "level": level, "in_core": np.hypot(q[:, 0], q[:, 1]) <= tr.r_core, "ratio": ratio,
    })


def chi_square_uniformity(tr: AssembledTransport, rng: np.random.Generator, n_samples: int = 20000,
                          bins: int = 6) -> Dict[str, float]:
    """U_N 上均匀点经 h⁻¹ 拉回后在 (s, u) 的 bins×bins 格子中应均匀；按 CHI2_CHUNK 分块拉回。"""
    counts = np.zeros((bins, bins))
    for start in range(0, n_samples, CHI2_CHUNK):
        pts = sample_uniform_U(tr.alpha, tr.depth, min(CHI2_CHUNK, n_samples - start), rng)
        s, u = _polar(tr.inverse(pts))
        part, _, _ = np.histogram2d(np.clip(s, 0.0, 1.0 - 1e-15), u, bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
        counts += part
    expected = n_samples / bins ** 2
    stat = float(((counts - expected) ** 2 / expected).sum())
    dof = bins * bins - 1
    return {"statistic": stat, "dof": dof, "p_value": float(stats.chi2.sf(stat, dof)), "samples": n_samples}


def correction_displacements(tr: AssembledTransport, rng: np.random.Generator, n_samples: int = 2000) -> pd.DataFrame:
    """每层 c_n 在 U_n 上的最大位移，与 2β_n 对照；以及 c_n 在 U_(n-1) 上是否逐位恒等。"""
    q = sample_disk(n_samples, rng)
    rows = []
    for n, corr in tr.corrections.items():
        pts = tr.partial(q, n)
        moved = corr.forward(pts)
        disp = np.linalg.norm(moved - pts, axis=1)
        kind, level = classify_points(tr.alpha, n, pts, max_depth=max(tr.depth, DEFAULT_MAX_DEPTH))
        outer = (kind == KIND_U) & (level < n)
        rows.append({
            "n": n,
            "max_displacement": float(disp.max()),
            "bound": 2.0 * side_length(n, tr.alpha),
            "moved_fraction": float(np.mean(disp > 0.0)),
            "identity_on_U_prev": bool(np.all(disp[outer] == 0.0)),
        })
    return pd.DataFrame(rows)
