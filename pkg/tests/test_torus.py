# -*- coding: utf-8 -*-
import numpy as np
import numpy.testing as npt
import pytest

from disk_dynamics import build_flatness_schedule
from lab_config import (AREA_CONSTANCY_RTOL, DIVERGENCE_TOL, EDGE_WIDTHS, FLOW_MAP_TOL, H_ROUNDTRIP_TOL,
                        IntegratorConfig, TauConfig)
from lab_errors import DomainError, SupportViolationError
from torus_dynamics import (TimeChange, chart_radius, complement_approach, conjugate_map, divergence_residual,
                            field_slice, flow_map_consistency, integrate, lyapunov, poincare_flatness,
                            sample_moving, sample_support, support_edge_offsets, suspension_field, time_change,
                            torus_map_area, volume_defect, wrap)

COMPLEMENT = np.array([[0.01, 0.01], [0.3, 0.02], [0.99, 0.7]])
SHORT = IntegratorConfig(horizon=5.0)


def test_wrap():
    npt.assert_allclose(wrap(np.array([0.0, 0.4, 0.6, -0.6, 1.25])), [0.0, 0.4, -0.4, 0.4, 0.25])


def test_isotopy_reaches_beyond_core(field):
    assert field.iso.support_radius > 0.9
    assert field.core < field.zero < field.support
    y = sample_moving(field, 200, np.random.default_rng(3), theta=False)
    assert not field.chart.in_core(y).any()
    assert np.all(np.linalg.norm(field.planar(y, 0.3), axis=1) > 0.0)


def test_conjugate_map_identity_off_support(lab, rng):
    f = conjugate_map(lab.transport, lab.isotopy, 1.0)
    npt.assert_array_equal(f.forward(COMPLEMENT), COMPLEMENT)
    assert f.identity_region(COMPLEMENT).all()
    y = sample_support(lab.field, 200, rng, theta=False)
    npt.assert_allclose(wrap(conjugate_map(lab.transport, lab.isotopy, 0.0).forward(y) - y), 0.0, atol=H_ROUNDTRIP_TOL)
    with pytest.raises(DomainError):
        conjugate_map(lab.transport, lab.isotopy, 1.5)


def test_conjugate_map_roundtrip_and_area(lab, rng):
    f = conjugate_map(lab.transport, lab.isotopy, 1.0)
    y = sample_moving(lab.field, 200, rng, theta=False)
    assert np.max(np.linalg.norm(wrap(f.forward(y) - y), axis=1)) > 1e-3
    npt.assert_allclose(wrap(f.inverse(f.forward(y)) - y), 0.0, atol=H_ROUNDTRIP_TOL)
    assert torus_map_area(f, y) <= 2.0 * AREA_CONSTANCY_RTOL


def test_time_change_modes():
    tau = TimeChange(0.1, np.array([0.5, 0.5]), 0.01, mode="c1")
    assert tau.c1_norm()["c1"] <= 0.1 + 1e-9
    c0 = TimeChange(0.1, np.array([0.5, 0.5]), 0.01, mode="c0")
    npt.assert_allclose(c0.plateau, 1.1)
    npt.assert_allclose(c0(np.array([[0.5, 0.5], [0.9, 0.9]])), [1.1, 1.0])
    assert c0.c1_norm()["gradient"] > 0.1
    with pytest.raises(DomainError):
        TimeChange(0.1, np.array([0.5, 0.5]), 0.01, mode="c2")


def test_time_change_support_violation():
    with pytest.raises(SupportViolationError):
        time_change(0.05, (0.5, 0.5), 0.02, allowed_center=(0.5, 0.5), allowed_radius=0.01)
    with pytest.raises(SupportViolationError):
        time_change(0.05, (0.505, 0.5), 0.004, allowed_center=(0.5, 0.5), allowed_radius=0.008)
    time_change(0.05, (0.5, 0.5), 0.004, allowed_center=(0.5, 0.5), allowed_radius=0.008)


def test_default_tau_inside_still_core(field):
    assert field.tau.radius < min(field.zero, field.core)
    assert field.tau_still
    npt.assert_allclose(field.tau.center, field.center)


def test_field_on_complement(field):
    s = np.column_stack([COMPLEMENT, [0.0, 0.3, 0.7]])
    npt.assert_array_equal(field(s), np.tile([0.0, 0.0, 1.0], (3, 1)))
    assert field.trivial(COMPLEMENT).all()
    assert field.in_complement(COMPLEMENT).all()


def test_field_is_divergence_free_on_moving_region(field, rng):
    s = sample_moving(field, 300, rng)
    assert divergence_residual(field, s) <= DIVERGENCE_TOL
    assert divergence_residual(field, sample_support(field, 100, rng)) <= DIVERGENCE_TOL


def test_trivial_orbit_is_analytic(field):
    traj = integrate(field, (0.01, 0.01, 0.2), 3.0, n_out=4)
    assert traj.nfev == 0
    npt.assert_allclose(traj.lift[:, 2], 0.2 + np.arange(4.0))
    npt.assert_allclose(traj.states[:, :2], 0.01)


def test_time_reversal(field, rng):
    x0 = sample_moving(field, 1, rng)[0]
    fwd = integrate(field, x0, 2.0, n_out=3, cfg=SHORT)
    assert fwd.success and fwd.nfev > 0
    assert fwd.error_estimate < 1e-6
    back = integrate(field, fwd.lift[-1], -2.0, n_out=3, cfg=SHORT, estimate_error=False)
    npt.assert_allclose(wrap(back.lift[-1, :2] - x0[:2]), 0.0, atol=1e-6)
    npt.assert_allclose(back.lift[-1, 2], x0[2], atol=1e-6)


@pytest.mark.slow
def test_chart_orbit_matches_torus_orbit(field, rng):
    x0 = sample_moving(field, 1, rng)[0]
    a = integrate(field, x0, 0.5, n_out=3, cfg=SHORT, estimate_error=False)
    b = integrate(field, x0, 0.5, n_out=3, cfg=SHORT, estimate_error=False, chart=False)
    npt.assert_allclose(wrap(a.lift[-1, :2] - b.lift[-1, :2]), 0.0, atol=1e-5)


def test_flow_map_matches_conjugate_map(lab, rng):
    f = conjugate_map(lab.transport, lab.isotopy, 1.0)
    y = sample_moving(lab.field, 5, rng, theta=False)
    assert flow_map_consistency(lab.field, f, y, SHORT) <= FLOW_MAP_TOL


def test_volume_preserved(field, rng):
    seeds = sample_moving(field, 3, rng)
    df = volume_defect(field, seeds, 2.0, SHORT)
    assert df["defect"].max() <= 1e-6
    assert (df["transport_ratio"] - 1.0).abs().max() <= 2.0 * AREA_CONSTANCY_RTOL


def test_lyapunov_trivial_and_sum(field, rng):
    est = lyapunov(field, (0.01, 0.01, 0.0), 10.0, SHORT)
    assert est.trivial
    npt.assert_array_equal(est.exponents, 0.0)
    x0 = sample_moving(field, 1, rng)[0]
    est = lyapunov(field, x0, 5.0, SHORT)
    assert not est.trivial
    assert len(est.trace) == 5
    assert abs(est.exponents.sum() - est.divergence_average) <= 1e-6
    assert est.exponents[0] >= est.exponents[1] >= est.exponents[2]


def test_complement_approach_and_edge_offsets(field):
    x0, back, dist = complement_approach(field, field.center, (1.0, 1.0), max_dist=0.75)
    assert field.in_complement(x0).all()
    assert dist > field.core
    npt.assert_allclose(np.linalg.norm(wrap(x0 - field.center)), dist, rtol=1e-9)
    deltas = support_edge_offsets(field, x0, back, EDGE_WIDTHS)
    assert 0.0 < deltas[0] <= deltas[1] <= deltas[2]
    for w, d in zip(EDGE_WIDTHS, deltas):
        q = field.chart.to_chart(np.mod(x0 + d * back, 1.0)[None, :])
        assert chart_radius(q)[0] <= field.iso.support_radius - w
    with pytest.raises(DomainError):
        complement_approach(field, field.center, (1.0, 0.0), max_dist=0.001)


def test_poincare_deviation_within_flatness_bound(lab):
    X = lab.field
    sched = build_flatness_schedule(lab.transport, lab.isotopy, seed=0)
    x0, back, _ = complement_approach(X, X.center, (1.0, 1.0), max_dist=0.75)
    deltas = support_edge_offsets(X, x0, back, EDGE_WIDTHS)
    pf = poincare_flatness(X, x0, deltas=deltas, direction=back, sched=sched, cfg=SHORT)
    assert pf.loc[pf["delta"] == 0.0, "deviation"].iloc[0] == 0.0
    inner = pf[pf["delta"] > 0].sort_values("delta", ascending=False)
    assert inner["deviation"].iloc[0] > 0.0
    assert (inner["deviation"] <= inner["bound"]).all()
    with pytest.raises(DomainError):
        poincare_flatness(X, X.center)


def test_field_slice(field):
    df = field_slice(field, 0.25, 5)
    assert len(df) == 25
    assert list(df.columns) == ["x1", "x2", "theta", "X1", "X2", "tau"]
    assert (df["tau"] >= 1.0).all()


def test_suspension_field_from_config(lab):
    X = suspension_field(lab.transport, lab.isotopy, TauConfig(epsilon=0.0))
    assert X.epsilon == 0.0
    npt.assert_array_equal(X.tau(np.array([[0.5, 0.5]])), 1.0)
