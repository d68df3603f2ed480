# -*- coding: utf-8 -*-
import math

import numpy as np
import numpy.testing as npt
import pytest

from cantor_geometry import KIND_U, classify_points
from lab_config import AREA_CONSTANCY_RTOL, CELL_MASS_RTOL, CHI2_CHUNK, MC_SAMPLES, TransportConfig
from lab_errors import DomainError, MassMismatchError
from measure_transport import (DensityField, KnotheTransport, UniformTables, area_U, assemble_h, augmented_masses,
                               chi_square_uniformity, correction_displacements, cross_area, jacobian_constancy,
                               local_transport, mass_bookkeeping, sample_disk, stabilized_level, uniform_density)


def _uniform(pts):
    return np.ones(pts.shape[0])


def _linear(pts):
    return (2.0 / 3.0) * (1.0 + pts[:, 0])


def test_knothe_linear_density():
    # 目标 x 边缘 CDF (x + x²/2)·2/3，逆为 -1 + sqrt(1 + 3v)；y 条件分布不变
    T = KnotheTransport((0.0, 1.0, 0.0, 1.0), _uniform, _linear, nx=16, ny=16)
    x = np.array([[0.5, 0.3], [0.1, 0.9], [0.9, 0.5]])
    expected = np.column_stack([-1.0 + np.sqrt(1.0 + 3.0 * x[:, 0]), x[:, 1]])
    npt.assert_allclose(T.forward(x), expected, atol=1e-9)
    npt.assert_allclose(T.inverse(expected), x, atol=1e-9)
    assert T.pushforward_error() < 1e-4


def test_knothe_identity_outside_cell():
    T = KnotheTransport((0.0, 1.0, 0.0, 1.0), _uniform, _linear, nx=8, ny=8)
    x = np.array([[1.5, 0.5], [-0.1, 0.2]])
    npt.assert_array_equal(T.forward(x), x)


def test_knothe_mass_mismatch():
    with pytest.raises(MassMismatchError):
        KnotheTransport((0.0, 1.0, 0.0, 1.0), _uniform, lambda p: 2.0 * _linear(p), nx=8, ny=8)


def test_local_transport_uniform_source_is_closed_form():
    cell = (0.0, 2.0, 0.0, 1.0)
    target = DensityField(lambda p: 0.5 * (1.0 + p[:, 0]), 2.0, "rectangle")
    T = local_transport(cell, uniform_density(cell), target, nx=32, ny=8)
    assert isinstance(T.source, UniformTables)
    npt.assert_allclose(T.source.total, 2.0)
    x = np.array([[0.5, 0.3], [1.2, 0.9], [1.9, 0.5]])
    expected = np.column_stack([-1.0 + np.sqrt(1.0 + 2.0 * x[:, 0]), x[:, 1]])
    npt.assert_allclose(T.forward(x), expected, atol=1e-9)
    npt.assert_allclose(T.inverse(expected), x, atol=1e-9)
    assert T.pushforward_error() < 1e-4


def test_c0_rearranges_through_local_transport(transport, rng):
    c0 = transport.c0
    assert isinstance(c0.square, KnotheTransport)
    assert isinstance(c0.square.source, UniformTables)
    assert c0.square.target is c0.target
    q = sample_disk(300, rng, r_max=0.99)
    q = q[np.hypot(q[:, 0], q[:, 1]) > 2.0 * c0.r_core]
    npt.assert_allclose(c0.inverse(c0.forward(q)), q, atol=1e-8)
    with pytest.raises(DomainError):
        c0.square.pushforward_error()


def test_mass_bookkeeping_closes():
    df = mass_bookkeeping(0.04, 5)
    npt.assert_array_equal(df["n"], [1, 2, 3, 4, 5])
    assert df["closure_error"].max() <= CELL_MASS_RTOL
    assert np.isnan(df["M_n"].iloc[-1])
    masses = augmented_masses(0.04, 5)
    assert sorted(masses) == [1, 2, 3, 4]
    assert all(m > 1.0 for m in masses.values())


def test_total_area_is_sum_of_crosses():
    total = sum(4.0 ** (n - 1) * cross_area(0.04, n) for n in range(1, 5))
    npt.assert_allclose(total, area_U(0.04, 4), rtol=1e-12)


def test_stabilized_level():
    assert [stabilized_level(n) for n in (1, 2, 3, 6)] == [1, 1, 1, 4]


def test_core_is_exact_similarity(transport, rng):
    tr = transport
    npt.assert_allclose(tr.lam, math.sqrt(tr.area / math.pi))
    npt.assert_allclose(tr.lam * tr.r_core, tr.alpha / 4.0, rtol=1e-12)
    q = sample_disk(200, rng, r_max=0.9 * tr.r_core)
    npt.assert_allclose(tr.forward(q), tr.center + tr.lam * q, atol=1e-13)


def test_h_roundtrip_and_image(transport, rng):
    q = sample_disk(300, rng, r_max=0.99)
    y = transport.forward(q)
    kind, _ = classify_points(transport.alpha, transport.depth, y)
    assert np.all(kind == KIND_U)
    npt.assert_allclose(transport.inverse(y), q, atol=1e-6)


def test_stack_layout(transport):
    meta = transport.metadata()
    assert meta["stages"] == ["c_0", "base_map", "c_1", "phi_hat_1", "c_2", "phi_hat_2"]
    assert len(transport.psi()) == transport.depth


def test_jacobian_on_core(transport, rng):
    jac = jacobian_constancy(transport, rng, 2000)
    core = jac[jac["in_core"]]
    assert (jac["level"] <= stabilized_level(transport.depth)).all()
    assert len(core) > 0
    assert (core["ratio"] - 1.0).abs().max() <= 1e-6


def test_corrections_fix_outer_levels(transport, rng):
    disp = correction_displacements(transport, rng, 500)
    npt.assert_array_equal(disp["n"], [1, 2])
    assert disp["identity_on_U_prev"].all()
    assert (disp["max_displacement"] <= disp["bound"]).all()


def test_chi_square_uniformity(transport, rng):
    chi2 = chi_square_uniformity(transport, rng, 4000, 4)
    assert chi2["dof"] == 15
    assert chi2["p_value"] >= 1e-3


def test_chi_square_spans_chunks(transport, rng):
    assert MC_SAMPLES >= 1_000_000
    assert TransportConfig().chi2_samples >= 1_000_000
    n = CHI2_CHUNK + 1500
    chi2 = chi_square_uniformity(transport, rng, n, 3)
    assert chi2["samples"] == n
    assert chi2["dof"] == 8
    assert chi2["p_value"] >= 1e-3


@pytest.mark.slow
def test_jacobian_constancy_default_tables(rng):
    tr = assemble_h(0.04, 3, TransportConfig())
    jac = jacobian_constancy(tr, rng, 500)
    assert (jac["ratio"] - 1.0).abs().max() <= AREA_CONSTANCY_RTOL
