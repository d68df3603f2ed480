# -*- coding: utf-8 -*-
"""
几何层：环面 T^2 = [0,1]^2（对边等同）上的嵌套分解 (U_n, E_n, L_n)。

约定：
- 把整个单位正方形视为第 0 层正方形（边长 β_0 = 1）；第 m 层正方形内同心内接第 m+1 层十字，
  臂宽 α^(m+1)、臂长 β_m；其四个角上是第 m+1 层正方形，边长 β_(m+1)，左下角偏移 0 或 β_m - β_(m+1)。
- 子正方形位于宿主中心左侧时，它的第 m+2 层十字经右端开边附着在宿主十字的竖臂上（attached right），
  否则经左端开边附着。
- 第 n 层正方形的"翼" W_(n,k) 是贴在附着边外侧、宿主竖臂内的 α^(n+1) 小方块。
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from lab_config import DEFAULT_MAX_DEPTH, DEPTH_GUARD_ULPS
from lab_errors import DepthOverflowError, DomainError

logger = logging.getLogger(__name__)

KIND_U = 0
KIND_E = 1
KIND_L = 2
KIND_NAMES = {KIND_U: "U", KIND_E: "E", KIND_L: "L"}
# 附着线段与父十字臂边界的重合容差
ATTACH_TOL = 1e-12


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 0.05):
        raise DomainError(f"alpha 须在 (0, 0.05) 内，得到 {alpha}")


def beta(n: int, alpha: float) -> float:
    """β_n = 2^-n (1 - Σ_{k=1..n} 2^(k-1) α^k)，n >= 1。"""
    _check_alpha(alpha)
    if int(n) != n or n < 1:
        raise DomainError(f"n 须为 >= 1 的整数，得到 {n}")
    return _beta(int(n), alpha)


def _beta(n: int, alpha: float) -> float:
    # n = 0 时为单位正方形边长 1
    s = sum(2.0 ** (k - 1) * alpha ** k for k in range(1, n + 1))
    return 2.0 ** (-n) * (1.0 - s)


def side_length(n: int, alpha: float) -> float:
    """β_n，允许 n = 0（单位正方形）；不做参数检查，供内部几何计算。"""
    return _beta(n, alpha)


def beta_recursive(n: int, alpha: float) -> float:
    """递推 β_(k+1) = (β_k - α^(k+1)) / 2，与闭式互为校验。"""
    _check_alpha(alpha)
    b = (1.0 - alpha) / 2.0
    for k in range(1, n):
        b = (b - alpha ** (k + 1)) / 2.0
    return b


def gamma(n: int, alpha: float) -> float:
    """γ_n = β_(n+1) / α^(n+1)。"""
    return _beta(n + 1, alpha) / alpha ** (n + 1)


def check_depth(alpha: float, depth: int, max_depth: int = DEFAULT_MAX_DEPTH) -> None:
    _check_alpha(alpha)
    if int(depth) != depth or depth < 1:
        raise DomainError(f"depth 须为 >= 1 的整数，得到 {depth}")
    if depth > max_depth:
        raise DepthOverflowError(f"depth={depth} 超过配置上限 {max_depth}")
    width = alpha ** (depth + 1)
    if width < DEPTH_GUARD_ULPS * np.finfo(float).eps or _beta(depth, alpha) <= 0.0:
        raise DepthOverflowError(f"depth={depth} 时臂宽 {width:.3e} 低于双精度可分辨范围")


# ----- 数据类型 -----


@dataclass(frozen=True)
class TorusPoint:
    x1: float
    x2: float

    def __post_init__(self):
        object.__setattr__(self, "x1", float(self.x1) % 1.0)
        object.__setattr__(self, "x2", float(self.x2) % 1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2])


@dataclass(frozen=True)
class CrossSpec:
    center: TorusPoint
    arm_width: float
    arm_length: float
    orientation: str
    level: int
    attached_edge: Optional[str]
    index: int

    def rectangles(self) -> Tuple[Tuple[float, float, float, float], Tuple[float, float, float, float]]:
        """两个开矩形 (x0, x1, y0, y1)：横臂、竖臂。"""
        c1, c2 = self.center.x1, self.center.x2
        if self.level == 1:
            c1, c2 = 0.5, 0.5
        h, w = self.arm_length / 2.0, self.arm_width / 2.0
        return (c1 - h, c1 + h, c2 - w, c2 + w), (c1 - w, c1 + w, c2 - h, c2 + h)

    def area(self) -> float:
        return 2.0 * self.arm_width * self.arm_length - self.arm_width ** 2

    def attached_segment(self) -> Optional[Tuple[float, float, float]]:
        """附着端的竖直线段 (x, y0, y1)；第 1 层没有。"""
        if self.attached_edge is None:
            return None
        c1, c2 = self.center.x1, self.center.x2
        h, w = self.arm_length / 2.0, self.arm_width / 2.0
        x = c1 + h if self.attached_edge == "right" else c1 - h
        return x, c2 - w, c2 + w


@dataclass(frozen=True)
class SquareCell:
    lower_left: TorusPoint
    side: float
    level: int
    index: int
    attach_right: bool

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        x0, y0 = self.lower_left.x1, self.lower_left.x2
        return (p[:, 0] >= x0) & (p[:, 0] <= x0 + self.side) & (p[:, 1] >= y0) & (p[:, 1] <= y0 + self.side)


@dataclass(frozen=True)
class Segment:
    p0: Tuple[float, float]
    p1: Tuple[float, float]
    level: int


@dataclass
class ConstructionLevel:
    n: int
    alpha: float
    crosses: List[CrossSpec]
    squares: List[SquareCell]
    segments: List[Segment]
    # (square index, touching cross level, touching cross index, side of the square)
    adjacency: List[Tuple[int, int, int, str]] = field(default_factory=list)

    @property
    def beta(self) -> float:
        return _beta(self.n, self.alpha)

    def area_U(self) -> float:
        return 1.0 - 4.0 ** self.n * self.beta ** 2


# ----- 构造 -----


def _level_arrays(alpha: float, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """第 n 层全部正方形的左下角与附着方向（下标 k 的四进制位依次为 2*iy + ix）。"""
    X = np.zeros(1)
    Y = np.zeros(1)
    right = np.zeros(1, dtype=bool)
    for m in range(n):
        side, b = _beta(m, alpha), _beta(m + 1, alpha)
        off = side - b
        ix = np.tile([0, 1, 0, 1], X.size)
        iy = np.tile([0, 0, 1, 1], X.size)
        X = np.repeat(X, 4) + ix * off
        Y = np.repeat(Y, 4) + iy * off
        right = ix == 0
    return X, Y, right


def build_levels(alpha: float, depth: int, max_depth: int = DEFAULT_MAX_DEPTH) -> List[ConstructionLevel]:
    """按归纳构造第 1..depth 层。"""
    check_depth(alpha, depth, max_depth)
    levels: List[ConstructionLevel] = []
    prev_X, prev_Y, prev_right = np.zeros(1), np.zeros(1), np.zeros(1, dtype=bool)
    for n in range(1, depth + 1):
        host_side = _beta(n - 1, alpha)
        w = alpha ** n
        crosses: List[CrossSpec] = []
        segments: List[Segment] = []
        for k in range(prev_X.size):
            X, Y = prev_X[k], prev_Y[k]
            cx, cy = X + host_side / 2.0, Y + host_side / 2.0
            if n == 1:
                edge = None
            else:
                edge = "right" if prev_right[k] else "left"
            crosses.append(CrossSpec(
                center=TorusPoint(cx, cy), arm_width=w, arm_length=host_side,
                orientation="reflected" if edge == "right" else "none",
                level=n, attached_edge=edge, index=k,
            ))
            ends = {
                "left": ((X, cy - w / 2), (X, cy + w / 2)),
                "right": ((X + host_side, cy - w / 2), (X + host_side, cy + w / 2)),
                "bottom": ((cx - w / 2, Y), (cx + w / 2, Y)),
                "top": ((cx - w / 2, Y + host_side), (cx + w / 2, Y + host_side)),
            }
            for name, (p0, p1) in ends.items():
                if name != edge:
                    segments.append(Segment(p0, p1, n))
        Xs, Ys, rights = _level_arrays(alpha, n)
        b = _beta(n, alpha)
        squares = [
            SquareCell(TorusPoint(Xs[i], Ys[i]), b, n, i, bool(rights[i]))
            for i in range(Xs.size)
        ]
        adjacency = [(i, n, i // 4, "right" if rights[i] else "left") for i in range(Xs.size)]
        levels.append(ConstructionLevel(n, alpha, crosses, squares, segments, adjacency))
        logger.debug("第 %d 层：十字 %d 个，正方形 %d 个，线段 %d 条", n, len(crosses), len(squares), len(segments))
        prev_X, prev_Y, prev_right = Xs, Ys, rights
    logger.info("已构造 %d 层（alpha=%g）", depth, alpha)
    return levels


def accumulated_segments(levels: List[ConstructionLevel], n: int) -> List[Segment]:
    """L_n = 第 1..n 层线段之并。"""
    out: List[Segment] = []
    for lev in levels[:n]:
        out.extend(lev.segments)
    return out


# ----- 分类 -----


@dataclass(frozen=True)
class RegionTag:
    kind: str
    level: int

    def __str__(self) -> str:
        if self.kind == "E":
            return f"E-candidate@{self.level}"
        return f"{self.kind}@{self.level}"


def classify_points(alpha: float, depth: int, pts: np.ndarray, max_depth: int = DEFAULT_MAX_DEPTH) -> Tuple[np.ndarray, np.ndarray]:
    """向量化分层下降：依次检查开十字、开附着边、闭子正方形，否则归入 L。

    返回 (kind, level)：kind 取 KIND_U/KIND_E/KIND_L；E 候选点的 level 为 depth。
    """
    check_depth(alpha, depth, max_depth)
    pts = np.mod(np.atleast_2d(np.asarray(pts, dtype=float)), 1.0)
    x, y = pts[:, 0], pts[:, 1]
    npts = x.size
    kind = np.full(npts, KIND_E, dtype=np.int8)
    level = np.full(npts, depth, dtype=np.int16)
    X = np.zeros(npts)
    Y = np.zeros(npts)
    right = np.zeros(npts, dtype=bool)
    active = np.ones(npts, dtype=bool)
    for m in range(depth):
        side = _beta(m, alpha)
        w = alpha ** (m + 1)
        cx, cy = X + side / 2.0, Y + side / 2.0
        in_h = (X < x) & (x < X + side) & (np.abs(y - cy) < w / 2.0)
        in_v = (np.abs(x - cx) < w / 2.0) & (Y < y) & (y < Y + side)
        hit = active & (in_h | in_v)
        if m >= 1:
            edge_x = np.where(right, X + side, X)
            hit |= active & (x == edge_x) & (np.abs(y - cy) < w / 2.0)
        kind[hit] = KIND_U
        level[hit] = m + 1
        active &= ~hit
        b = _beta(m + 1, alpha)
        left = x <= X + b
        far = x >= X + side - b
        low = y <= Y + b
        up = y >= Y + side - b
        in_child = active & (left | far) & (low | up)
        lpts = active & ~in_child
        kind[lpts] = KIND_L
        level[lpts] = m + 1
        active &= in_child
        X = np.where(left, X, X + side - b)
        Y = np.where(low, Y, Y + side - b)
        right = left
    return kind, level


def classify_point(levels: List[ConstructionLevel], p) -> RegionTag:
    """单点分类，levels 给出截断深度与 α。"""
    if isinstance(p, TorusPoint):
        arr = p.as_array()
    else:
        arr = np.asarray(p, dtype=float)
    depth, alpha = len(levels), levels[0].alpha
    kind, level = classify_points(alpha, depth, arr[None, :], max_depth=max(depth, DEFAULT_MAX_DEPTH))
    return RegionTag(KIND_NAMES[int(kind[0])], int(level[0]))


# ----- 下降定位、翼与到边界距离 -----


def descend(alpha: float, pts: np.ndarray, m: int) -> Dict[str, np.ndarray]:
    """按象限下降到第 m 层正方形（不检查十字），返回左下角、边长、下标与附着方向。"""
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    X = np.zeros(x.size)
    Y = np.zeros(x.size)
    k = np.zeros(x.size, dtype=np.int64)
    right = np.zeros(x.size, dtype=bool)
    for j in range(m):
        side, b = _beta(j, alpha), _beta(j + 1, alpha)
        left = x < X + side / 2.0
        low = y < Y + side / 2.0
        X = np.where(left, X, X + side - b)
        Y = np.where(low, Y, Y + side - b)
        k = 4 * k + 2 * (~low) + (~left)
        right = left
    return {"X": X, "Y": Y, "k": k, "right": right, "side": np.full(x.size, _beta(m, alpha))}


def child_wings(alpha: float, X: np.ndarray, Y: np.ndarray, m: int) -> List[Dict[str, np.ndarray]]:
    """第 m 层正方形 (X, Y) 的四个子正方形（第 m+1 层）及其翼。"""
    side, b = _beta(m, alpha), _beta(m + 1, alpha)
    a = alpha ** (m + 2)
    out = []
    for q in range(4):
        ix, iy = q % 2, q // 2
        cX = X + ix * (side - b)
        cY = Y + iy * (side - b)
        attach_right = ix == 0
        cy = cY + b / 2.0
        wx0 = cX + b if attach_right else cX - a
        out.append({
            "q": q, "X": cX, "Y": cY, "side": b, "a": a, "right": attach_right,
            "wx0": wx0, "wy0": cy - a / 2.0, "cy": cy,
        })
    return out


def wing_squares(levels: List[ConstructionLevel], n: int) -> List[Tuple[float, float, float, bool]]:
    """第 n 层全部翼 W_(n,k)：(x0, y0, a, attach_right)，下标与第 n 层正方形一致。"""
    alpha = levels[0].alpha
    a = alpha ** (n + 1)
    out = []
    for sq in levels[n - 1].squares:
        X, Y, b = sq.lower_left.x1, sq.lower_left.x2, sq.side
        x0 = X + b if sq.attach_right else X - a
        out.append((x0, Y + b / 2.0 - a / 2.0, a, sq.attach_right))
    return out


def distance_to_boundary(alpha: float, depth: int, pts: np.ndarray) -> np.ndarray:
    """dist(p, ∂U) 的下界：p 所在十字两条开矩形内距离的较大者；非 U 点为 0。"""
    pts = np.mod(np.atleast_2d(pts), 1.0)
    kind, level = classify_points(alpha, depth, pts, max_depth=max(depth, DEFAULT_MAX_DEPTH))
    out = np.zeros(pts.shape[0])
    for n in np.unique(level[kind == KIND_U]):
        sel = (kind == KIND_U) & (level == n)
        host = descend(alpha, pts[sel], int(n) - 1)
        side = host["side"]
        w = alpha ** int(n)
        x, y = pts[sel, 0], pts[sel, 1]
        cx, cy = host["X"] + side / 2.0, host["Y"] + side / 2.0
        d_h = np.minimum(np.minimum(x - host["X"], host["X"] + side - x), w / 2.0 - np.abs(y - cy))
        d_v = np.minimum(np.minimum(y - host["Y"], host["Y"] + side - y), w / 2.0 - np.abs(x - cx))
        out[sel] = np.maximum(np.clip(d_h, 0.0, None), np.clip(d_v, 0.0, None))
    return out


# ----- 测度 -----


@dataclass
class MeasureReport:
    alpha: float
    depth: int
    per_level: List[float]
    limit: float
    tail_bound: float
    displacement_tail: float

    def to_dict(self) -> Dict[str, object]:
        return {
            "alpha": self.alpha,
            "depth": self.depth,
            "per_level": self.per_level,
            "limit": self.limit,
            "tail_bound": self.tail_bound,
            "displacement_tail": self.displacement_tail,
        }


def measure_limit(alpha: float) -> float:
    return ((1.0 - 3.0 * alpha) / (1.0 - 2.0 * alpha)) ** 2


def displacement_tail(alpha: float, depth: int) -> float:
    """Σ_(i>=N) 2β_i（取 60 项，余项低于双精度）。"""
    return sum(2.0 * _beta(i, alpha) for i in range(depth, depth + 60))


def cantor_measure(alpha: float, depth: int) -> MeasureReport:
    _check_alpha(alpha)
    if depth < 1:
        raise DomainError("depth 须 >= 1")
    per = [4.0 ** n * _beta(n, alpha) ** 2 for n in range(1, depth + 1)]
    lim = measure_limit(alpha)
    return MeasureReport(alpha, depth, per, lim, per[-1] - lim, displacement_tail(alpha, depth))


def monte_carlo_areas(alpha: float, depth: int, n_samples: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """均匀采样估计 Leb(E_n)，n = 1..depth，附标准误差。"""
    pts = rng.random((n_samples, 2))
    kind, level = classify_points(alpha, depth, pts, max_depth=max(depth, DEFAULT_MAX_DEPTH))
    est = np.empty(depth)
    for n in range(1, depth + 1):
        in_e = (kind == KIND_E) | (level > n)
        est[n - 1] = in_e.mean()
    se = np.sqrt(est * (1.0 - est) / n_samples)
    exact = np.array([4.0 ** n * _beta(n, alpha) ** 2 for n in range(1, depth + 1)])
    return {"estimate": est, "stderr": se, "exact": exact}


# ----- 树结构与导出 -----


def _rect_array(crosses: List[CrossSpec]) -> np.ndarray:
    return np.array([r for c in crosses for r in c.rectangles()]).reshape(-1, 4)


def _components(n_nodes: int, edges: List[Tuple[int, int]]) -> Tuple[int, np.ndarray]:
    if not edges:
        return n_nodes, np.arange(n_nodes)
    i, j = np.array(edges).T
    graph = coo_matrix((np.ones(i.size), (i, j)), shape=(n_nodes, n_nodes))
    return connected_components(graph, directed=False)


def adjacency_tree_check(levels: List[ConstructionLevel], tol: float = ATTACH_TOL) -> Dict[str, object]:
    """
    十字邻接图：节点 = 各层十字，边 = 附着端线段落在某个更低层十字臂的边界上。
    检查每个非根十字恰有一个这样的父十字、图连通，且删去任一条边都恰好分成两块（即为树）。
    """
    nodes = [c for lev in levels for c in lev.crosses]
    ids = {(c.level, c.index): k for k, c in enumerate(nodes)}
    edges: List[Tuple[int, int]] = []
    orphans, ambiguous, index_agree = 0, 0, 0
    for lev in levels[1:]:
        lower = [c for c in nodes if c.level < lev.n]
        rects = _rect_array(lower)
        for c in lev.crosses:
            x, y0, y1 = c.attached_segment()
            on_side = (np.abs(rects[:, 0] - x) <= tol) | (np.abs(rects[:, 1] - x) <= tol)
            covers = (rects[:, 2] <= y0 + tol) & (y1 <= rects[:, 3] + tol)
            hosts = sorted({lower[k // 2] for k in np.flatnonzero(on_side & covers)}, key=lambda p: (p.level, p.index))
            if not hosts:
                orphans += 1
                continue
            if len(hosts) > 1:
                ambiguous += 1
            parent = hosts[0]
            edges.append((ids[(c.level, c.index)], ids[(parent.level, parent.index)]))
            index_agree += int(parent.level == lev.n - 1 and parent.index == c.index // 4)
    n_comp, _ = _components(len(nodes), edges)
    bridges = 0
    subtree_sizes = set()
    for k, (child, _) in enumerate(edges):
        count, labels = _components(len(nodes), edges[:k] + edges[k + 1:])
        if count == n_comp + 1:
            bridges += 1
            subtree_sizes.add(int(np.sum(labels == labels[child])))
    expected = sum(4 ** (n - 1) for n in range(1, len(levels) + 1))
    is_tree = (n_comp == 1 and orphans == 0 and ambiguous == 0 and len(edges) == len(nodes) - 1
               and bridges == len(edges) and len(nodes) == expected)
    return {
        "nodes": len(nodes),
        "edges": len(edges),
        "expected_nodes": expected,
        "components": int(n_comp),
        "orphans": orphans,
        "ambiguous": ambiguous,
        "index_agreement": index_agree,
        "is_tree": bool(is_tree),
        "subtree_sizes": sorted(subtree_sizes),
    }


def export_levels(levels: List[ConstructionLevel]) -> Dict[str, object]:
    alpha, depth = levels[0].alpha, len(levels)
    rep = cantor_measure(alpha, depth)
    doc_levels = []
    for lev in levels:
        doc_levels.append({
            "n": lev.n,
            "crosses": [
                {
                    "center": [c.center.x1, c.center.x2],
                    "arm_width": c.arm_width,
                    "arm_length": c.arm_length,
                    "orientation": c.orientation,
                    "attached_edge": c.attached_edge,
                    "index": c.index,
                }
                for c in lev.crosses
            ],
            "squares": [
                {"lower_left": [s.lower_left.x1, s.lower_left.x2], "side": s.side, "index": s.index}
                for s in lev.squares
            ],
            "segments": [{"p0": list(s.p0), "p1": list(s.p1)} for s in lev.segments],
            "adjacency": [list(a) for a in lev.adjacency],
        })
    return {
        "alpha": alpha,
        "depth": depth,
        "levels": doc_levels,
        "measures": {"per_level": rep.per_level, "limit": rep.limit},
    }


def gamma_bound_holds(alpha: float, n: int) -> bool:
    """γ_n > (2α)^(-n) >= 10^n（α <= 0.05）。"""
    lower = (2.0 * alpha) ** (-n)
    return gamma(n, alpha) > lower and lower >= 10.0 ** n * (1.0 - 1e-12)


def closed_form_area_identity(alpha: float, depth: int) -> float:
    """max_n |area(U_n) + 4^n β_n^2 - 1|，area(U_n) 由各层十字面积累加。"""
    worst = 0.0
    area = 0.0
    for n in range(1, depth + 1):
        w, length = alpha ** n, _beta(n - 1, alpha)
        area += 4.0 ** (n - 1) * (2.0 * w * length - w * w)
        worst = max(worst, abs(area + 4.0 ** n * _beta(n, alpha) ** 2 - 1.0))
    return worst
