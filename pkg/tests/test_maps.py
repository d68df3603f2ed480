# -*- coding: utf-8 -*-
import numpy as np
import numpy.testing as npt
import pytest

from cantor_geometry import side_length
from explicit_maps import (BaseMap, PhiHat, RhoHat, SigmaGamma, build_phi, composition_consistency, flat_step,
                           flat_step_deriv, measure_c0, rho2_jacobian_bound, roundtrip_error, sigma_lipschitz_scaling,
                           smooth_step)
from lab_config import LIPSCHITZ_SLOPE_TARGET, LIPSCHITZ_SLOPE_TOL
from lab_errors import DomainError
from measure_transport import sample_disk, sample_uniform_U


def test_flat_step_values():
    npt.assert_equal(flat_step(np.array([-1.0, 0.0, 1.0, 2.0])), [0.0, 0.0, 1.0, 1.0])
    npt.assert_allclose(flat_step(0.5), 0.5)
    npt.assert_allclose(flat_step_deriv(0.5), 2.0)
    t = np.linspace(0.01, 0.99, 99)
    npt.assert_allclose(flat_step(t) + flat_step(1.0 - t), 1.0, atol=1e-15)


def test_flat_step_is_flat_at_ends():
    assert flat_step(1e-3) < 1e-300
    assert flat_step_deriv(1e-3) < 1e-300
    assert 1.0 - flat_step(1.0 - 1e-3) < 1e-300


def test_smooth_step():
    chi, dchi = smooth_step(np.array([0.0, 0.05, 0.1, 0.2]))
    npt.assert_allclose(chi, [0.0, 0.5, 1.0, 1.0])
    npt.assert_allclose(dchi[1], 20.0)


def test_rho_hat_parameter_guard():
    with pytest.raises(DomainError):
        RhoHat(3.0)
    with pytest.raises(DomainError):
        SigmaGamma(7.0)
    with pytest.raises(DomainError):
        SigmaGamma(9.5)
    assert SigmaGamma(10.0).gamma == 10.0


def test_rho_hat_identity_on_left_half():
    m = RhoHat(10.0)
    q = np.array([[0.2, 0.5], [0.0, 0.0], [0.4, 0.9], [0.45, 0.1]])
    npt.assert_array_equal(m.forward(q), q)


def test_rho_hat_roundtrip_and_image(rng):
    m = RhoHat(10.0)
    q = rng.random((300, 2))
    x = m.forward(q)
    assert np.all((x[:, 0] >= 0.0) & (x[:, 0] <= m.length + 1e-9))
    assert np.all((x[:, 1] >= -1e-12) & (x[:, 1] <= 1.0 + 1e-12))
    npt.assert_allclose(m.inverse(x), q, atol=1e-8)


def test_rho_hat_rejects_points_outside_square():
    with pytest.raises(DomainError):
        RhoHat(10.0).forward(np.array([[1.5, 0.5]]))


def test_sigma_gamma_roundtrip(rng):
    s = SigmaGamma(12.0)
    q = rng.random((300, 2))
    x = s.forward(q)
    assert np.all(s.contains(x))
    npt.assert_allclose(s.inverse(x), q, atol=1e-8)


def test_base_map_core_similarity(rng):
    b = BaseMap(0.04)
    npt.assert_allclose(b.kappa, (25.0 - 5.0) / 4.0)
    q = sample_disk(200, rng, r_max=0.49)
    npt.assert_allclose(b.forward(q), np.array([0.5, 0.5]) + 0.02 * q, atol=1e-14)


def test_base_map_domain():
    with pytest.raises(DomainError):
        BaseMap(0.04).forward(np.array([[0.9, 0.9]]))
    with pytest.raises(DomainError):
        BaseMap(0.04).inverse(np.array([[0.1, 0.1]]))


def test_phi_hat_identity_off_wings(rng):
    m = PhiHat(0.04, 1)
    pts = sample_uniform_U(0.04, 1, 400, rng)
    inside, _ = m.wing_mask(pts)
    assert (~inside).any()
    npt.assert_array_equal(m.forward(pts[~inside]), pts[~inside])


def test_phi_hat_moves_wing_points():
    # 左下子正方形的翼：[0.48, 0.48 + α²] × [0.24 ± α²/2]，附着在右侧
    m = PhiHat(0.04, 1)
    p = np.array([[0.48016, 0.24]])
    inside, _ = m.wing_mask(p)
    assert inside.all()
    y = m.forward(p)
    assert 0.0 < m.displacement(p)[0] <= 2.0 * side_length(1, 0.04)
    npt.assert_allclose(m.inverse(y), p, atol=1e-12)


def test_phi_hat_displacement_bound(rng):
    for n in (1, 2):
        pts = sample_uniform_U(0.04, n, 300, rng)
        m = PhiHat(0.04, n)
        assert m.displacement(pts).max() <= 2.0 * side_length(n, 0.04)
        npt.assert_allclose(m.inverse(m.forward(pts)), pts, atol=1e-9)


def test_phi_stack_roundtrip_and_composition(rng):
    q = sample_disk(200, rng)
    stack = build_phi(0.04, 3)
    assert len(stack) == 3
    assert [s["name"] for s in stack.metadata()] == ["base_map", "phi_hat_1", "phi_hat_2"]
    assert roundtrip_error(stack, q) <= 1e-9
    comp = composition_consistency(0.04, 3, q)
    npt.assert_array_equal(comp["n"], [1, 2, 3])
    assert comp["composition_error"].max(skipna=True) <= 1e-12
    npt.assert_allclose(comp["in_U_fraction"], 1.0)
    assert np.isnan(comp["moved_fraction"].iloc[-1])


def test_composition_consistency_moves_wing_points():
    # φ_1 的原像落在第 1 层翼内，φ̂_1 必须移动它
    q = build_phi(0.04, 1).inverse(np.array([[0.48016, 0.24]]))
    comp = composition_consistency(0.04, 2, q)
    assert comp["moved_fraction"].iloc[0] == 1.0
    assert comp["composition_error"].iloc[0] <= 1e-12


@pytest.mark.slow
def test_constant_measurements():
    assert measure_c0()["c0"] > 0.0
    assert abs(sigma_lipschitz_scaling()["slope"] - LIPSCHITZ_SLOPE_TARGET) <= LIPSCHITZ_SLOPE_TOL
    rho2 = rho2_jacobian_bound()
    assert rho2["max_partial"] <= rho2["bound"]
    assert 0.0 <= rho2["image_x2_min"] and rho2["image_x2_max"] <= 1.0
