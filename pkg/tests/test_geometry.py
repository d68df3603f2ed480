# -*- coding: utf-8 -*-
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from cantor_geometry import (KIND_E, KIND_U, TorusPoint, adjacency_tree_check, beta, beta_recursive, build_levels,
                             cantor_measure, check_depth, classify_point, classify_points,
                             closed_form_area_identity, export_levels, gamma, gamma_bound_holds, measure_limit,
                             monte_carlo_areas)
from lab_errors import DepthOverflowError, DomainError


def test_beta_values():
    npt.assert_allclose(beta(1, 0.04), 0.48, rtol=1e-15)
    npt.assert_allclose(beta(2, 0.04), 0.25 * (1.0 - 0.04 - 2 * 0.04 ** 2), rtol=1e-15)


@pytest.mark.parametrize("alpha", [0.01, 0.03, 0.04, 0.049])
def test_beta_closed_form_matches_recursion(alpha):
    for n in range(1, 9):
        npt.assert_allclose(beta(n, alpha), beta_recursive(n, alpha), rtol=1e-12)


def test_gamma_is_ratio_of_side_to_arm_width():
    npt.assert_allclose(gamma(1, 0.04), beta(2, 0.04) / 0.04 ** 2)
    for n in range(1, 6):
        assert gamma_bound_holds(0.04, n)


def test_measure_decreases_to_limit():
    rep = cantor_measure(0.04, 8)
    per = np.array(rep.per_level)
    assert np.all(np.diff(per) < 0.0)
    npt.assert_allclose(rep.limit, (0.88 / 0.92) ** 2, rtol=1e-15)
    assert rep.tail_bound >= 0.0
    npt.assert_allclose(cantor_measure(0.04, 60).per_level[-1], measure_limit(0.04), rtol=1e-12)


def test_area_identity():
    assert closed_form_area_identity(0.04, 8) <= 1e-12
    for lev in build_levels(0.04, 4):
        npt.assert_allclose(lev.area_U(), 1.0 - 4.0 ** lev.n * lev.beta ** 2)


def test_classify_points():
    kind, level = classify_points(0.04, 2, np.array([[0.5, 0.5], [0.1, 0.1], [0.24, 0.1]]))
    npt.assert_array_equal(kind, [KIND_U, KIND_E, KIND_U])
    npt.assert_array_equal(level, [1, 2, 2])


def test_classify_wraps_to_torus():
    kind, _ = classify_points(0.04, 2, np.array([[1.5, -0.5], [1.1, 2.1]]))
    npt.assert_array_equal(kind, [KIND_U, KIND_E])


def test_classify_point_tag():
    levels = build_levels(0.04, 3)
    assert str(classify_point(levels, (0.5, 0.5))) == "U@1"
    assert str(classify_point(levels, (0.01, 0.01))) == "E-candidate@3"


def test_depth_guards():
    with pytest.raises(DepthOverflowError):
        check_depth(0.04, 11, max_depth=10)
    # 0.04^10 低于 64 ulp
    with pytest.raises(DepthOverflowError):
        check_depth(0.04, 9, max_depth=20)
    check_depth(0.04, 8, max_depth=20)


@pytest.mark.parametrize("alpha", [0.0, 0.05, 0.06, -0.01])
def test_alpha_domain(alpha):
    with pytest.raises(DomainError):
        beta(1, alpha)
    with pytest.raises(DomainError):
        build_levels(alpha, 2)


def test_adjacency_is_tree():
    rep = adjacency_tree_check(build_levels(0.04, 3))
    assert rep["nodes"] == 21
    assert rep["edges"] == 20
    assert rep["is_tree"]
    assert rep["subtree_sizes"] == [1, 5]
    assert rep["components"] == 1
    assert rep["orphans"] == 0 and rep["ambiguous"] == 0
    assert rep["index_agreement"] == rep["edges"]


def test_adjacency_detects_detached_cross():
    levels = build_levels(0.04, 3)
    c = levels[2].crosses[0]
    levels[2].crosses[0] = replace(c, center=TorusPoint(c.center.x1 + 0.01, c.center.x2))
    rep = adjacency_tree_check(levels)
    assert rep["orphans"] == 1
    assert rep["components"] == 2
    assert not rep["is_tree"]


def test_export_levels_counts():
    doc = export_levels(build_levels(0.04, 3))
    assert doc["depth"] == 3
    for lev in doc["levels"]:
        n = lev["n"]
        assert len(lev["crosses"]) == 4 ** (n - 1)
        assert len(lev["squares"]) == 4 ** n
        assert len(lev["segments"]) == (4 if n == 1 else 3 * 4 ** (n - 1))
    assert doc["levels"][0]["crosses"][0]["attached_edge"] is None
    assert {c["attached_edge"] for c in doc["levels"][1]["crosses"]} == {"left", "right"}


def test_monte_carlo_agrees_with_closed_form(rng):
    mc = monte_carlo_areas(0.04, 3, 20000, rng)
    z = np.abs(mc["estimate"] - mc["exact"]) / mc["stderr"]
    assert np.all(z < 4.0)
