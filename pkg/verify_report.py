# -*- coding: utf-8 -*-
"""
校验报告：各层套件逐项给出 (suite, check, value, threshold, relation, passed, invariant)，
汇总为 Markdown 报告与机器可读 JSON。每个检查名对应 INVARIANTS 中的一条性质（可追溯表）。
"""
import logging
import math
from typing import Any, Callable, Dict, List

import numpy as np
import pandas as pd

from cantor_geometry import (KIND_U, adjacency_tree_check, beta_recursive, cantor_measure, classify_points,
                             closed_form_area_identity, gamma_bound_holds, monte_carlo_areas, side_length)
from disk_dynamics import build_flatness_schedule, edge_tangency, flatness_check, isotopy_consistency
from explicit_maps import (PhiHat, build_phi, composition_consistency, measure_c0, rho2_jacobian_bound,
                           roundtrip_error, sigma_lipschitz_scaling)
from hamiltonian_system import (HittingTime, energy_surface_flow, hamiltonian_residual, pde_report,
                                sample_states)
from lab_config import (AREA_CONSTANCY_RTOL, CELL_MASS_RTOL, CHECK_SAMPLES, CHI2_LEVEL, CONJUGACY_TOL,
                        DEFAULT_MAX_DEPTH, DET_OMEGA_MIN, DIVERGENCE_TOL, EDGE_TANGENCY_RATIO, EDGE_WIDTHS,
                        ENERGY_DRIFT_TOL, FLOW_MAP_TOL, H_ROUNDTRIP_TOL, HITTING_TIME_SAMPLES, HITTING_TIME_TOL,
                        ISOTOPY_AREA_FD_TOL, LIPSCHITZ_SLOPE_TARGET, LIPSCHITZ_SLOPE_TOL, LOOP_TOL,
                        LYAPUNOV_ZERO_TOL, MC_SAMPLES, MC_SIGMAS, MEASURE_RTOL, PDE_GRADIENT_TOL,
                        PERIODICITY_TOL, PHI_ROUNDTRIP_TOL, SPEED_CHANGE_TOL, STREAM_DYNAMICS, STREAM_GEOMETRY,
                        STREAM_HAMILTONIAN, STREAM_MAPS, STREAM_TRANSPORT, SYMPLECTIC_TOL,
                        TIME_REVERSAL_TOL, VOLUME_DEFECT_TOL)
from measure_transport import (chi_square_uniformity, correction_displacements, jacobian_constancy,
                               mass_bookkeeping, sample_disk, sample_uniform_U)
from torus_dynamics import (complement_approach, conjugate_map, divergence_residual, flow_map_consistency, integrate,
                            lyapunov, poincare_flatness, sample_moving, sample_support, support_edge_offsets,
                            torus_map_area, volume_defect, wrap)

logger = logging.getLogger(__name__)

CHECK_COLUMNS = ["suite", "check", "value", "threshold", "relation", "passed", "invariant"]
SUITE_ORDER = ("geometry", "maps", "transport", "dynamics", "hamiltonian")
RELATIONS = ("<=", ">=", ">", "report")

# 检查名 -> 所校验的性质
INVARIANTS: Dict[str, str] = {
    "per_level_closed_form": "Leb(E_n) = 4ⁿβ_n²，闭式与递推一致",
    "measure_limit": "lim Leb(E_n) = ((1−3α)/(1−2α))²",
    "area_identity": "area(U_n) + Leb(E_n) = 1",
    "monte_carlo_area": "均匀采样估计 Leb(E_N) 在 3 个标准误差内",
    "adjacency_tree": "十字邻接图为树",
    "gamma_bound": "γ_n > (2α)⁻ⁿ >= 10ⁿ",
    "tail_bound_nonnegative": "Leb(E_N) − Leb(E) >= 0",
    "rho_c0": "远臂常数 c0 有限（实测值）",
    "sigma_lipschitz_slope": "σ_γ⁻¹ 在 𝒞_γ^± 上 Lipschitz 常数的对数斜率为 −1 ± 0.2",
    "rho2_jacobian_bound": "ρ̂₂⁻¹ 的偏导 <= 200/κ",
    "rho2_image_in_strip": "ρ̂₂⁻¹ 的像落在 [0,1] 条带内",
    "phi_roundtrip": "φ_N⁻¹∘φ_N = id",
    "phi_image_in_U": "φ_n(D²) ⊂ U_n",
    "phi_composition": "φ_(n+1) = φ̂_n ∘ φ_n",
    "phi_hat_displacement": "d(x, φ̂_n(x)) <= 2β_n",
    "mass_closure": "十字面积 + 翼多余质量 = 子树面积",
    "jacobian_constancy": "|det Dh| = Leb(U_N)/π（稳定区）",
    "jacobian_core": "核上 h 为相似，det 精确",
    "chi_square_uniformity": "h 将圆盘均匀测度推到 U_N 上的均匀测度",
    "correction_displacement": "d(x, c_n(x)) <= 2β_n",
    "correction_identity_prev": "c_n 在 U_(n−1) 上恒等",
    "h_roundtrip": "h⁻¹∘h = id",
    "flatness": "‖g_t − id‖_(C^k(𝒩_n)) <= ρ_n",
    "flatness_nontrivial": "每个 𝒩_n 都含 g_1 ≠ id 的样本",
    "edge_tangency": "支撑边缘内侧环带宽度减半，位移至少缩小 16 倍",
    "edge_nontrivial": "支撑边缘内侧的位移非零",
    "torus_area": "f_t 保面积（容差含 Dh 两次的常数误差）",
    "complement_identity": "f_t 在 U 的补集上恒等",
    "divergence_free": "(X1, X2) 相对 ν = h_*(λ²dq) 无散",
    "complement_field": "补集上 X = (0, 0, 1)",
    "tau_c1": "‖τ − 1‖_C1 <= ε",
    "flow_map_consistency": "τ ≡ 1 时时间 1 截面映射 = f_1",
    "time_reversal": "正向再反向积分回到初值",
    "volume_defect": "流映射保体积（圆盘坐标）",
    "volume_transport_ratio": "det Dh(q_T)/det Dh(q_0) 与 1 的偏差",
    "lyapunov_complement_zero": "补集种子的 Lyapunov 指数为 0",
    "lyapunov_sum_divergence": "指数和 = 散度时间平均",
    "lyapunov_flow_direction": "沿流方向的指数接近 0（实测值）",
    "poincare_flatness": "补集点附近回归映射偏差受 λⁿ 包络控制",
    "poincare_nontrivial": "进入支撑边缘后回归映射偏差非零",
    "symplectic_identity": "ω̂(X_Ĥ, ·) = dĤ",
    "det_omega": "det ω̂ > 0.5（非退化）",
    "speed_change": "X·∇Θ = 1",
    "closedness": "dω̂ = 0",
    "straight_chart": "拉直坐标中 ω(X_H, ·) = dH",
    "theta_c1": "‖Θ − θ‖_C1（实测值）",
    "pde_gradient": "∂H̃/∂x2 = w·X1，−∂H̃/∂x1 = w·X2",
    "loop_residual": "闭环积分为零",
    "periodicity": "H̃ 在 x1、x2 方向周期",
    "hitting_time_section": "闭式 Θ 与向后事件积分一致",
    "energy_drift": "能量面上 |Ĥ − e| 守恒",
    "energy_conjugacy": "Ψ̂_e 共轭 f^t 与 X_Ĥ 的流",
}

# isotopy_consistency 各行 -> 检查名
_ISOTOPY_PREFIX = "isotopy_"
INVARIANTS.update({
    f"{_ISOTOPY_PREFIX}g0_identity": "g_0 = id",
    f"{_ISOTOPY_PREFIX}area_det": "det Dg_t = 1（解析雅可比）",
    f"{_ISOTOPY_PREFIX}area_det_fd": "det Dg_t = 1（差分雅可比）",
    f"{_ISOTOPY_PREFIX}inverse_roundtrip": "g_t⁻¹∘g_t = id",
    f"{_ISOTOPY_PREFIX}identity_outside_support": "支撑外 g_t = id",
    f"{_ISOTOPY_PREFIX}gluing_order_0": "dᵏG(x,1) = dᵏG(g(x),0)，k = 0",
    f"{_ISOTOPY_PREFIX}gluing_order_1": "dᵏG(x,1) = dᵏG(g(x),0)，k = 1",
    f"{_ISOTOPY_PREFIX}gluing_order_2": "dᵏG(x,1) = dᵏG(g(x),0)，k = 2",
    f"{_ISOTOPY_PREFIX}flow_property": "∂_t g_t = Z_t ∘ g_t",
})


def check_row(suite: str, check: str, value: float, threshold: float, relation: str = "<=") -> Dict[str, Any]:
    if relation not in RELATIONS:
        raise ValueError(f"未知比较关系 {relation!r}")
    value = float(value)
    threshold = float(threshold)
    if relation == "report":
        passed = True
    elif not math.isfinite(value):
        passed = False
    elif relation == "<=":
        passed = value <= threshold
    elif relation == ">=":
        passed = value >= threshold
    else:
        passed = value > threshold
    return {"suite": suite, "check": check, "value": value, "threshold": threshold, "relation": relation,
            "passed": bool(passed), "invariant": INVARIANTS.get(check, "")}


def _frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


# ----- 各层套件 -----


def geometry_checks(lab) -> pd.DataFrame:
    g = lab.cfg.geometry
    alpha, depth = g.alpha, g.depth
    rows = []
    rep = cantor_measure(alpha, depth)
    recursive = np.array([4.0 ** n * beta_recursive(n, alpha) ** 2 for n in range(1, depth + 1)])
    rel = np.max(np.abs(np.asarray(rep.per_level) - recursive) / recursive)
    rows.append(check_row("geometry", "per_level_closed_form", rel, MEASURE_RTOL))
    far = cantor_measure(alpha, 60).per_level[-1]
    rows.append(check_row("geometry", "measure_limit", abs(far - rep.limit) / rep.limit, MEASURE_RTOL))
    rows.append(check_row("geometry", "area_identity", closed_form_area_identity(alpha, depth), MEASURE_RTOL))
    mc = monte_carlo_areas(alpha, depth, MC_SAMPLES, lab.rng(STREAM_GEOMETRY))
    z = abs(mc["estimate"][-1] - mc["exact"][-1]) / max(mc["stderr"][-1], 1e-300)
    rows.append(check_row("geometry", "monte_carlo_area", z, MC_SIGMAS))
    tree = adjacency_tree_check(lab.levels)
    rows.append(check_row("geometry", "adjacency_tree", float(tree["is_tree"]), 1.0, ">="))
    violations = sum(not gamma_bound_holds(alpha, n) for n in range(1, depth))
    rows.append(check_row("geometry", "gamma_bound", violations, 0.0))
    rows.append(check_row("geometry", "tail_bound_nonnegative", rep.tail_bound, 0.0, ">="))
    return _frame(rows)


def maps_checks(lab) -> pd.DataFrame:
    g = lab.cfg.geometry
    rows = []
    c0 = measure_c0()
    rows.append(check_row("maps", "rho_c0", c0["c0"], float("nan"), "report"))
    sig = sigma_lipschitz_scaling()
    rows.append(check_row("maps", "sigma_lipschitz_slope", abs(sig["slope"] - LIPSCHITZ_SLOPE_TARGET),
                          LIPSCHITZ_SLOPE_TOL))
    rho2 = rho2_jacobian_bound()
    rows.append(check_row("maps", "rho2_jacobian_bound", rho2["max_partial"], rho2["bound"]))
    spill = max(0.0 - rho2["image_x2_min"], rho2["image_x2_max"] - 1.0)
    rows.append(check_row("maps", "rho2_image_in_strip", spill, 0.0))

    rng = lab.rng(STREAM_MAPS)
    q = sample_disk(CHECK_SAMPLES, rng)
    stack = build_phi(g.alpha, g.depth, g.max_depth)
    rows.append(check_row("maps", "phi_roundtrip", roundtrip_error(stack, q), PHI_ROUNDTRIP_TOL))
    comp = composition_consistency(g.alpha, g.depth, q)
    rows.append(check_row("maps", "phi_image_in_U", comp["in_U_fraction"].min(), 1.0, ">="))
    rows.append(check_row("maps", "phi_composition", comp["composition_error"].max(skipna=True), 1e-12))
    worst = 0.0
    for n in range(1, g.depth):
        pts = sample_uniform_U(g.alpha, n, CHECK_SAMPLES, rng)
        worst = max(worst, float(np.max(PhiHat(g.alpha, n, g.max_depth).displacement(pts)))
                    / (2.0 * side_length(n, g.alpha)))
    rows.append(check_row("maps", "phi_hat_displacement", worst, 1.0))
    return _frame(rows)


def transport_checks(lab) -> pd.DataFrame:
    cfg = lab.cfg
    tr = lab.transport
    rng = lab.rng(STREAM_TRANSPORT)
    rows = []
    mass = mass_bookkeeping(tr.alpha, tr.depth)
    rows.append(check_row("transport", "mass_closure", mass["closure_error"].max(), CELL_MASS_RTOL))
    jac = jacobian_constancy(tr, rng, CHECK_SAMPLES)
    dev = (jac["ratio"] - 1.0).abs()
    rows.append(check_row("transport", "jacobian_constancy", dev.max(), AREA_CONSTANCY_RTOL))
    core = dev[jac["in_core"]]
    rows.append(check_row("transport", "jacobian_core", core.max() if len(core) else 0.0, ISOTOPY_AREA_FD_TOL))
    chi2 = chi_square_uniformity(tr, rng, cfg.transport.chi2_samples, cfg.transport.chi2_bins)
    rows.append(check_row("transport", "chi_square_uniformity", chi2["p_value"], CHI2_LEVEL, ">="))
    disp = correction_displacements(tr, rng)
    ratio = (disp["max_displacement"] / disp["bound"]).max() if len(disp) else 0.0
    rows.append(check_row("transport", "correction_displacement", ratio, 1.0))
    bad = int((~disp["identity_on_U_prev"]).sum()) if len(disp) else 0
    rows.append(check_row("transport", "correction_identity_prev", bad, 0.0))
    q = sample_disk(CHECK_SAMPLES, rng)
    err = float(np.max(np.linalg.norm(tr.inverse(tr.forward(q)) - q, axis=1)))
    rows.append(check_row("transport", "h_roundtrip", err, H_ROUNDTRIP_TOL))
    return _frame(rows)


def _complement_points(lab, n: int, rng: np.random.Generator) -> np.ndarray:
    g = lab.cfg.geometry
    pts = rng.random((8 * n, 2))
    kind, _ = classify_points(g.alpha, g.depth, pts, max_depth=max(g.depth, DEFAULT_MAX_DEPTH))
    return pts[kind != KIND_U][:n]


def _poincare_rows(lab, sched) -> List[Dict[str, Any]]:
    """自中心沿对角线找到补集点，再沿反方向取进入同痕支撑边缘的三个偏移。"""
    X, cfg = lab.field, lab.cfg
    if X.iso.support_radius <= 0.0:
        return [check_row("dynamics", "poincare_flatness", 0.0, 0.0),
                check_row("dynamics", "poincare_nontrivial", 0.0, float("nan"), "report")]
    x0, back, _ = complement_approach(X, X.center, (1.0, 1.0), max_dist=0.75)
    deltas = support_edge_offsets(X, x0, back, EDGE_WIDTHS)
    pf = poincare_flatness(X, x0, deltas=deltas, direction=back, sched=sched, cfg=cfg.integrator)
    pf = pf[pf["delta"] > 0].sort_values("delta", ascending=False)
    excess = float((pf["deviation"] - pf["bound"]).max())
    return [check_row("dynamics", "poincare_flatness", excess, 0.0),
            check_row("dynamics", "poincare_nontrivial", float(pf["deviation"].iloc[0]), 0.0, ">")]


def dynamics_checks(lab) -> pd.DataFrame:
    cfg = lab.cfg
    tr, iso, X = lab.transport, lab.isotopy, lab.field
    rng = lab.rng(STREAM_DYNAMICS)
    rows = []
    for rec in isotopy_consistency(iso, CHECK_SAMPLES, seed=cfg.seed).to_dict("records"):
        rows.append(check_row("dynamics", _ISOTOPY_PREFIX + rec["check"], rec["value"], rec["threshold"]))

    sched = build_flatness_schedule(tr, iso, seed=cfg.seed)
    flat = flatness_check(iso, sched, tr, seed=cfg.seed)
    excess = float((flat["norm"] - flat["rho_n"]).max()) if len(flat) else 0.0
    rows.append(check_row("dynamics", "flatness", excess, 0.0))
    has_support = iso.support_radius > 0.0
    rows.append(check_row("dynamics", "flatness_nontrivial", float(flat["moving"].min()) if len(flat) else 0.0,
                          1.0, ">=" if has_support else "report"))
    if has_support:
        n_mid, n_edge = edge_tangency(iso, EDGE_WIDTHS[:2])
        rows.append(check_row("dynamics", "edge_tangency", n_edge / n_mid if n_mid > 0 else math.inf,
                              EDGE_TANGENCY_RATIO))
        rows.append(check_row("dynamics", "edge_nontrivial", n_edge, 0.0, ">"))

    fmap = conjugate_map(tr, iso, 1.0)
    ys = sample_support(X, CHECK_SAMPLES, rng, theta=False)
    rows.append(check_row("dynamics", "torus_area", torus_map_area(fmap, ys), 2.0 * AREA_CONSTANCY_RTOL))
    outside = _complement_points(lab, CHECK_SAMPLES, rng)
    moved = float(np.max(np.abs(wrap(fmap.forward(outside) - outside)))) if len(outside) else 0.0
    rows.append(check_row("dynamics", "complement_identity", moved, 0.0))
    states = sample_support(X, CHECK_SAMPLES, rng)
    rows.append(check_row("dynamics", "divergence_free", divergence_residual(X, states), DIVERGENCE_TOL))
    if len(outside):
        th = rng.random(len(outside))
        off = float(np.max(np.abs(X(np.column_stack([outside, th])) - np.array([0.0, 0.0, 1.0]))))
    else:
        off = 0.0
    rows.append(check_row("dynamics", "complement_field", off, 0.0))
    c1 = X.tau.c1_norm()["c1"]
    rows.append(check_row("dynamics", "tau_c1", c1, X.epsilon, "<=" if X.tau.mode == "c1" else "report"))

    rows.append(check_row("dynamics", "flow_map_consistency",
                          flow_map_consistency(X, fmap, ys[:20], cfg.integrator), FLOW_MAP_TOL))
    moving = sample_moving(X, 3, rng) if has_support else states[:3]
    x0 = moving[0]
    horizon = min(5.0, cfg.sweep.orbit_horizon)
    fwd = integrate(X, x0, horizon, n_out=2, cfg=cfg.integrator, estimate_error=False)
    back = integrate(X, fwd.lift[-1], -horizon, n_out=2, cfg=cfg.integrator, estimate_error=False)
    gap = np.concatenate([wrap(back.lift[-1][:2] - x0[:2]), [back.lift[-1][2] - x0[2]]])
    rows.append(check_row("dynamics", "time_reversal", float(np.max(np.abs(gap))), TIME_REVERSAL_TOL))
    vol = volume_defect(X, moving, horizon, cfg.integrator)
    rows.append(check_row("dynamics", "volume_defect", vol["defect"].max(), VOLUME_DEFECT_TOL))
    rows.append(check_row("dynamics", "volume_transport_ratio", float((vol["transport_ratio"] - 1.0).abs().max()),
                          2.0 * AREA_CONSTANCY_RTOL))

    zero = 0.0
    for p in outside[:4]:
        est = lyapunov(X, np.append(p, 0.0), cfg.sweep.orbit_horizon, cfg.integrator)
        zero = max(zero, float(np.max(np.abs(est.exponents))))
    rows.append(check_row("dynamics", "lyapunov_complement_zero", zero, LYAPUNOV_ZERO_TOL))
    est = lyapunov(X, x0, cfg.sweep.orbit_horizon, cfg.integrator)
    rows.append(check_row("dynamics", "lyapunov_sum_divergence",
                          abs(float(np.sum(est.exponents)) - est.divergence_average), LYAPUNOV_ZERO_TOL))
    rows.append(check_row("dynamics", "lyapunov_flow_direction", float(np.min(np.abs(est.exponents))),
                          LYAPUNOV_ZERO_TOL, "report"))
    rows += _poincare_rows(lab, sched)
    return _frame(rows)


def hamiltonian_checks(lab) -> pd.DataFrame:
    cfg = lab.cfg
    sys = lab.system
    rng = lab.rng(STREAM_HAMILTONIAN)
    rows = []
    states = sample_states(sys, CHECK_SAMPLES, rng)
    res = hamiltonian_residual(sys, states)
    rows.append(check_row("hamiltonian", "symplectic_identity", res["symplectic_identity_max"], SYMPLECTIC_TOL))
    rows.append(check_row("hamiltonian", "det_omega", res["det_omega_min"], DET_OMEGA_MIN, ">"))
    rows.append(check_row("hamiltonian", "speed_change", res["speed_change_max"], SPEED_CHANGE_TOL))
    rows.append(check_row("hamiltonian", "closedness", res["closedness_max"], SYMPLECTIC_TOL))
    rows.append(check_row("hamiltonian", "straight_chart", res["straight_chart_max"], SYMPLECTIC_TOL))
    rows.append(check_row("hamiltonian", "theta_c1", res["theta_c1"], float("nan"), "report"))

    pde = pde_report(sys, states[:200, :3])
    rows.append(check_row("hamiltonian", "pde_gradient", pde["pde_gradient_max"], PDE_GRADIENT_TOL))
    rows.append(check_row("hamiltonian", "loop_residual", pde["loop_residual_max"], LOOP_TOL))
    rows.append(check_row("hamiltonian", "periodicity", pde["periodicity_max"], PERIODICITY_TOL))

    theta = HittingTime(sys.X, cfg.integrator)
    gap = max(abs(theta.integrated(p) - float(theta.closed_form(p[None])[0]))
              for p in states[:HITTING_TIME_SAMPLES, :3])
    rows.append(check_row("hamiltonian", "hitting_time_section", gap,
                          HITTING_TIME_TOL if theta.closed else float("nan"), "<=" if theta.closed else "report"))

    orbit = energy_surface_flow(sys, 0.3, states[0, :3], cfg.sweep.orbit_horizon, cfg=cfg.integrator).to_dict()
    rows.append(check_row("hamiltonian", "energy_drift", orbit["energy_drift"], ENERGY_DRIFT_TOL))
    rows.append(check_row("hamiltonian", "energy_conjugacy", orbit["conjugacy_max"], CONJUGACY_TOL))
    return _frame(rows)


SUITES: Dict[str, Callable[[Any], pd.DataFrame]] = {
    "geometry": geometry_checks,
    "maps": maps_checks,
    "transport": transport_checks,
    "dynamics": dynamics_checks,
    "hamiltonian": hamiltonian_checks,
}


def run_suites(lab, suite: str = "all") -> pd.DataFrame:
    names = SUITE_ORDER if suite == "all" else (suite,)
    frames = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"未知套件 {name!r}")
        df = SUITES[name](lab)
        logger.info("套件 %s：%d/%d 项通过", name, int(df["passed"].sum()), len(df))
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


# ----- 汇总与报告 -----


def summarize_by_suite(df: pd.DataFrame) -> pd.DataFrame:
    """各套件：检查数、通过数、失败数、通过率。"""
    g = df.groupby("suite", sort=False).agg(
        total=("check", "count"),
        passed=("passed", "sum"),
    ).reset_index()
    g["passed"] = g["passed"].astype(int)
    g["failed"] = g["total"] - g["passed"]
    g["pass_rate"] = (g["passed"] / g["total"]).round(4)
    g["pass_pct"] = (g["pass_rate"] * 100).round(2).astype(str) + "%"
    return g[["suite", "total", "passed", "failed", "pass_rate", "pass_pct"]]


def failed_checks(df: pd.DataFrame) -> pd.DataFrame:
    return df.loc[~df["passed"], ["suite", "check", "value", "threshold", "relation"]].reset_index(drop=True)


def summary_json(df: pd.DataFrame) -> Dict[str, Any]:
    """机器可读汇总；NaN 阈值写为 null。"""
    checks = []
    for rec in df.to_dict("records"):
        rec = dict(rec)
        for key in ("value", "threshold"):
            if not math.isfinite(rec[key]):
                rec[key] = None
        rec["passed"] = bool(rec["passed"])
        checks.append(rec)
    by_suite = {r["suite"]: {"total": int(r["total"]), "passed": int(r["passed"]), "failed": int(r["failed"])}
                for r in summarize_by_suite(df).to_dict("records")}
    return {"passed": bool(df["passed"].all()), "suites": by_suite, "checks": checks}


def build_report(df: pd.DataFrame) -> str:
    """生成 Markdown 校验报告。"""
    lines = [
        "# 构造实验室校验报告",
        "",
        f"检查总数: {len(df)}，失败: {int((~df['passed']).sum())}",
        "",
        "## 1. 各套件通过情况",
        "",
        "```",
        summarize_by_suite(df).to_string(index=False),
        "```",
        "",
    ]
    failed = failed_checks(df)
    lines += ["## 2. 未通过的检查", ""]
    if failed.empty:
        lines += ["（无）", ""]
    else:
        lines += ["```", failed.to_string(index=False), "```", ""]
    lines += ["## 3. 全部检查", ""]
    for suite, part in df.groupby("suite", sort=False):
        lines += [f"### {suite}", "", "```",
                  part[["check", "value", "threshold", "relation", "passed"]].to_string(index=False), "```", ""]
    lines += ["## 4. 检查与性质对照", "", "| check | 性质 |", "|---|---|"]
    for check, invariant in df[["check", "invariant"]].drop_duplicates().itertuples(index=False):
        lines.append(f"| {check} | {invariant} |")
    lines.append("")
    return "\n".join(lines)
