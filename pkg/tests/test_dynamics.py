# -*- coding: utf-8 -*-
import numpy as np
import numpy.testing as npt
import pytest

from disk_dynamics import (FlatnessSchedule, IdentityIsotopy, TwistKickIsotopy, build_flatness_schedule,
                           default_isotopy, dense_grid_norm, edge_tangency, flatness_check, isotopy_consistency,
                           phase_schedule)
from lab_config import EDGE_TANGENCY_RATIO, EDGE_WIDTHS, IsotopyConfig
from lab_errors import DomainError


class ShiftedIsotopy(TwistKickIsotopy):
    """反例：整体平移 1e-3，g_0 不再是恒等。"""

    name = "shifted"

    def g(self, q, t):
        return super().g(q, t) + 1e-3

    def inverse(self, y, t):
        return super().inverse(np.atleast_2d(y) - 1e-3, t)


def _disk(n, radius, rng):
    r = radius * np.sqrt(rng.random(n))
    th = 2.0 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def test_phase_schedule():
    second, s, ds, _ = phase_schedule(np.array([0.0, 0.25, 0.5, 0.75, 1.0]))
    npt.assert_array_equal(second, [False, False, False, True, True])
    npt.assert_allclose(s, [0.0, 0.5, 1.0, 0.5, 1.0])
    npt.assert_allclose(ds[[0, 2, 4]], 0.0)


@pytest.mark.parametrize("iso", [TwistKickIsotopy(), TwistKickIsotopy(radius=0.05), IdentityIsotopy()],
                         ids=["twist_kick", "twist_kick_small", "identity"])
def test_isotopy_consistency(iso):
    df = isotopy_consistency(iso, n_samples=300)
    assert df["passed"].all(), df[~df["passed"]]
    assert {"g0_identity", "area_det", "inverse_roundtrip", "gluing_order_2", "flow_property"} <= set(df["check"])


def test_broken_isotopy_is_flagged():
    df = isotopy_consistency(ShiftedIsotopy(), n_samples=100).set_index("check")
    assert not df.loc["g0_identity", "passed"]
    assert not df.loc["identity_outside_support", "passed"]


def test_twist_kick_is_area_preserving(rng):
    iso = TwistKickIsotopy()
    q = _disk(500, 1.0, rng)
    for t in (0.3, 0.5, 0.8, 1.0):
        J = iso.jacobian(q, t)
        npt.assert_allclose(np.linalg.det(J), 1.0, atol=1e-10)


def test_field_vanishes_near_center_and_outside(rng):
    iso = TwistKickIsotopy()
    inner = _disk(200, 0.99 * iso.zero_radius, rng)
    for t in (0.2, 0.4, 0.6, 0.9):
        npt.assert_array_equal(iso.field(inner, t), 0.0)
    outer = np.array([[0.96, 0.0], [0.0, -0.97], [0.7, 0.7]])
    npt.assert_array_equal(iso.g(outer, 0.7), outer)


def test_field_is_divergence_free_and_hamiltonian(rng):
    iso = TwistKickIsotopy()
    q = _disk(200, 1.0, rng)
    h = 1e-6
    for t in (0.3, 0.7):
        Jf = iso.field_jacobian(q, t)
        npt.assert_allclose(Jf[:, 0, 0] + Jf[:, 1, 1], 0.0, atol=1e-9)
        dK1 = (iso.stream(q + [h, 0.0], t) - iso.stream(q - [h, 0.0], t)) / (2 * h)
        dK2 = (iso.stream(q + [0.0, h], t) - iso.stream(q - [0.0, h], t)) / (2 * h)
        npt.assert_allclose(iso.field(q, t), np.column_stack([dK2, -dK1]), atol=1e-6)


def test_default_isotopy_guards():
    assert default_isotopy(IsotopyConfig(name="identity")).name == "identity"
    iso = default_isotopy(IsotopyConfig(), radius=0.1)
    npt.assert_allclose(iso.support_radius, 0.095)
    with pytest.raises(DomainError):
        default_isotopy(IsotopyConfig(name="spiral"))
    with pytest.raises(DomainError):
        default_isotopy(IsotopyConfig(margin=0.6))
    with pytest.raises(DomainError):
        default_isotopy(IsotopyConfig(), radius=0.0)


def test_flatness_schedule_constants():
    sched = FlatnessSchedule(radii=(0.5, 0.6, 0.7, 0.8), bands=(0.01, 0.005, 0.0025, 0.001))
    assert FlatnessSchedule.amplification(3) == 48.0
    assert sched.n_max == 4 and sched.delta0 == 0.01
    table = sched.table()
    npt.assert_array_equal(table["n"], [1, 2, 3, 4])
    assert (np.diff(table["rho_n"]) < 0).all()
    npt.assert_allclose(table["band"], [0.01, 0.005, 0.0025, 0.001])
    npt.assert_allclose(table["radius"], [0.5, 0.6, 0.7, 0.8])


@pytest.mark.parametrize("kwargs", [
    {"radii": (0.5,), "bands": (0.01,), "decay": 1.0},
    {"radii": (0.5,), "bands": (0.0,)},
    {"radii": (), "bands": ()},
    {"radii": (0.5, 0.6), "bands": (0.01,)},
    {"radii": (0.6, 0.5), "bands": (0.01, 0.005)},
    {"radii": (0.5, 0.6), "bands": (0.005, 0.01)},
], ids=["decay", "zero_band", "empty", "length", "radii_order", "band_order"])
def test_flatness_schedule_rejects(kwargs):
    with pytest.raises(DomainError):
        FlatnessSchedule(**kwargs)


@pytest.fixture(scope="module")
def schedule(lab):
    return build_flatness_schedule(lab.transport, lab.isotopy, n_max=3)


def test_calibrated_schedule_reaches_moving_region(lab, schedule):
    iso = lab.isotopy
    assert schedule.n_max == 3
    assert (np.diff(schedule.radii) >= 0.0).all() and (np.diff(schedule.bands) <= 0.0).all()
    assert min(schedule.bands) > 0.0
    assert iso.zero_radius <= schedule.radii[0] and schedule.radii[-1] < iso.support_radius


def test_flatness_near_boundary(lab, schedule):
    df = flatness_check(lab.isotopy, schedule, lab.transport, k_max=2, n_samples=400)
    assert set(df["n"]) == {1, 2, 3}
    assert (df["norm"] - df["rho_n"]).max() <= 0.0
    assert df["passed"].all()
    assert df["moving"].min() >= 1
    assert dense_grid_norm(lab.isotopy, schedule, 1, 0, grid=120) <= schedule.rho(1)
    with pytest.raises(DomainError):
        flatness_check(lab.isotopy, schedule, lab.transport, k_max=5)


def test_edge_tangency_decays_fast():
    iso = TwistKickIsotopy()
    n = edge_tangency(iso, EDGE_WIDTHS)
    assert (np.diff(n) <= 0.0).all()
    assert n[1] > 0.0
    assert n[1] <= EDGE_TANGENCY_RATIO * n[0]
