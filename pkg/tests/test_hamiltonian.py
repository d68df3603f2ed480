# -*- coding: utf-8 -*-
import numpy as np
import numpy.testing as npt
import pytest

from hamiltonian_system import (SECTION_GAP, HittingTime, build_hamiltonian, energy_surface_flow,
                                hamiltonian_residual, hitting_time, pde_report, sample_states, speed_change_residual)
from lab_config import (CONJUGACY_TOL, DET_OMEGA_MIN, ENERGY_DRIFT_TOL, HITTING_TIME_TOL, PDE_GRADIENT_TOL,
                        SPEED_CHANGE_TOL, SYMPLECTIC_TOL, IntegratorConfig)
from torus_dynamics import sample_moving, time_change

SHORT = IntegratorConfig(horizon=5.0)


@pytest.fixture(scope="module")
def system(lab):
    return lab.system


@pytest.fixture
def states(system, rng):
    return sample_states(system, 20, rng)


@pytest.fixture
def moving_states(system, rng):
    """同痕运动区内的 (x1, x2, θ, I)，θ 避开截面。"""
    s = sample_moving(system.X, 12, rng)
    s[:, 2] = SECTION_GAP + (1.0 - 2.0 * SECTION_GAP) * rng.random(12)
    return np.column_stack([s, rng.standard_normal(12)])


def _tau_point(X, theta):
    """τ 平台内的一点（平面场为零）。"""
    return np.array([X.center[0] + 0.2 * X.tau.radius, X.center[1], theta])


def test_sample_states_avoid_section(states):
    assert states.shape == (20, 4)
    assert (states[:, 2] >= SECTION_GAP).all() and (states[:, 2] <= 1.0 - SECTION_GAP).all()


def test_det_omega_is_inverse_tau_squared(system, states):
    w = system.X.area_density(states[:, :2]) / system.X.tau(states[:, :2])
    npt.assert_allclose(system.det_omega(states), w ** 2, rtol=1e-6)
    W = system.omega_hat(states)
    npt.assert_allclose(W, -np.transpose(W, (0, 2, 1)))


def test_hitting_time_closed_form_matches_integration(system):
    X = system.X
    for theta in (0.3, 0.8):
        p = _tau_point(X, theta)
        closed = hitting_time(X, p)
        npt.assert_allclose(closed, theta / X.tau.plateau, rtol=1e-12)
        assert abs(hitting_time(X, p, method="integrate") - closed) <= HITTING_TIME_TOL
    far = np.array([0.01, 0.01, 0.4])
    npt.assert_allclose(hitting_time(X, far), 0.4)


def test_hitting_time_on_moving_orbits(system, moving_states):
    theta = HittingTime(system.X)
    assert theta.closed
    closed = theta.closed_form(moving_states[:, :3])
    npt.assert_allclose(closed, moving_states[:, 2], rtol=1e-12)
    integrated = np.array([theta.integrated(p) for p in moving_states[:, :3]])
    npt.assert_allclose(integrated, closed, atol=HITTING_TIME_TOL)


def test_hitting_time_without_still_core_integrates(system, moving_states):
    X = system.X
    tau = time_change(0.05, X.center, 1.5 * X.core)
    wide = X.with_tau(tau)
    assert not wide.tau_still
    theta = HittingTime(wide)
    assert not theta.closed
    p = moving_states[:2, :3]
    npt.assert_array_equal(theta(p), [theta.integrated(s) for s in p])
    q = _tau_point(X, 0.5)
    npt.assert_allclose(theta(q[None]), 0.5 / wide.tau(q[None, :2]), rtol=1e-12)


def test_speed_change(system, states, moving_states):
    assert speed_change_residual(system.X, states[:, :3]) <= SPEED_CHANGE_TOL
    assert speed_change_residual(system.X, moving_states[:, :3]) <= SPEED_CHANGE_TOL


def test_hamiltonian_residual_passes(system, states):
    rep = hamiltonian_residual(system, states)
    assert rep["passed"], rep
    assert rep["det_omega_min"] > DET_OMEGA_MIN
    assert rep["theta_c1"] <= system.X.epsilon + 1e-6


def test_symplectic_identity_on_moving_states(system, moving_states):
    assert np.abs(system.X.planar(moving_states[:, :2], moving_states[:, 2])).max() > 0.0
    assert system.symplectic_residual(moving_states) <= SYMPLECTIC_TOL
    rep = hamiltonian_residual(system, moving_states)
    assert rep["passed"], rep
    dT = HittingTime(system.X).gradient(moving_states[:, :3])
    npt.assert_allclose(dT[:, 2], 1.0 / system.X.tau(moving_states[:, :2]), atol=1e-6)


def test_c0_time_change_breaks_nondegeneracy_bound(system):
    X = system.X
    tau = time_change(0.5, X.center, X.tau.radius, mode="c0")
    sys_c0 = build_hamiltonian(X.with_tau(tau))
    p = np.append(_tau_point(X, 0.5), 0.0)
    npt.assert_allclose(sys_c0.det_omega(p), 1.0 / 1.5 ** 2, rtol=1e-6)
    rep = hamiltonian_residual(sys_c0, p[None])
    assert rep["det_omega_min"] < DET_OMEGA_MIN
    assert not rep["passed"]


def test_potential_closed_form_matches_path_integral(system, states):
    assert system.H.closed
    core = np.vstack([_tau_point(system.X, t) for t in (0.2, 0.6)])
    assert system.H.path_agreement(core) <= 1e-9
    rep = pde_report(system, states[:, :3], thetas=(0.5,))
    assert rep["pde_gradient_max"] <= PDE_GRADIENT_TOL
    assert rep["loops"]["passed"].all()
    assert rep["periodicity_max"] <= 1e-12


def test_potential_matches_field_on_moving_states(system, moving_states):
    s = moving_states[:4, :3]
    assert np.abs(system.H.closed_form(s)).max() > 0.0
    assert system.H.path_agreement(s) <= PDE_GRADIENT_TOL
    assert system.H.gradient_residual(moving_states[:, :3]) <= PDE_GRADIENT_TOL


def test_lift_lands_on_energy_surface(system, states):
    lifted = system.lift(states[:, :3], 0.3)
    npt.assert_allclose(system.H_hat(lifted), 0.3, atol=1e-15)
    back = system.unstraighten(system.straighten(states))
    npt.assert_allclose(back, states, atol=1e-14)


def test_energy_surface_flow(system, moving_states):
    x0 = moving_states[0, :3]
    orbit = energy_surface_flow(system, 0.3, x0, 2.0, checkpoints=(1.0,), n_out=21, cfg=SHORT)
    assert orbit.energy_drift <= ENERGY_DRIFT_TOL
    assert orbit.conjugacy["defect"].max() <= CONJUGACY_TOL
    assert orbit.to_dict()["energy_passed"]


def test_energy_flow_trivial_orbit(system):
    orbit = energy_surface_flow(system, -1.0, (0.01, 0.01, 0.0), 3.0, checkpoints=(1.0,), n_out=4)
    assert orbit.energy_drift == 0.0
    npt.assert_allclose(orbit.frame["I"], -1.0)
