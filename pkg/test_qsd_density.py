#!/usr/bin/env python3
"""
Tests for the small-theta quasi-stationary density
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, special

# Add the repository root to path
sys.path.insert(0, str(Path(__file__).parent))

from branchdiff.config import QuadratureConfig
from branchdiff.errors import DomainError, ModelError
from branchdiff.qsd_density import SmallThetaQsd, a_default, a_split, rescale_alpha, surface_pairs, to_xu
from branchdiff.qsd_moments import moment_mixed, moment_u, moment_u_cross, second_moments_small_theta
from branchdiff.rates import ThetaP, pim
from branchdiff.specfun import EULER_GAMMA

PI = np.array([0.75, 0.25])
KERNEL3 = np.array([[0.5, 0.3, 0.2], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]])
FAST_QUAD = QuadratureConfig(epsabs=1e-10, epsrel=1e-8)


def pim_qsd(theta: float) -> SmallThetaQsd:
    return SmallThetaQsd(pim(theta, PI).to_theta_p())


@pytest.mark.parametrize("rule", ["default", "split"])
def test_a_rules_satisfy_the_constraint(rule):
    qsd = SmallThetaQsd(ThetaP(0.1, KERNEL3), a_rule=rule)
    for j in range(3):
        for x in (0.01, 1.0, 7.5):
            assert qsd.a_constraint(j, x) == pytest.approx(1.0, rel=1e-14)


def test_a_rules_coincide_for_two_types():
    P = pim(0.1, PI).to_theta_p().P
    x = np.linspace(0.1, 5.0, 7)
    np.testing.assert_allclose(a_split(0, 1, x, P), a_default(1, x, P), rtol=1e-15)
    # PIM kernel: P_jj = pi_j, so a = x (1 - pi_j)
    np.testing.assert_allclose(a_default(0, x, P), 0.25 * x, rtol=1e-15)
    np.testing.assert_allclose(a_default(1, x, P), 0.75 * x, rtol=1e-15)


def test_absorbing_type_is_rejected():
    with pytest.raises(ModelError):
        SmallThetaQsd(ThetaP(0.1, np.array([[1.0, 0.0], [0.5, 0.5]])))
    with pytest.raises(DomainError):
        SmallThetaQsd(ThetaP(0.1, KERNEL3), a_rule="zero")


def test_zeta0_values():
    qsd = pim_qsd(0.05)
    assert qsd.zeta0([0.0, 0.0]) == 1.0
    assert qsd.zeta0([1.0, 0.0]) == pytest.approx(0.625, rel=1e-15)
    assert qsd.zeta0([2.0, 2.0]) == pytest.approx(1.0 / 3.0, rel=1e-15)
    with pytest.raises(DomainError):
        qsd.zeta0([-0.1, 0.0])
    with pytest.raises(DomainError):
        qsd.zeta0([1.0, 1.0, 1.0])


def test_zeta1_vanishes_at_origin_and_on_the_diagonal():
    qsd = SmallThetaQsd(ThetaP(0.1, KERNEL3))
    assert qsd.zeta1([0.0, 0.0, 0.0]) == 0.0
    assert qsd.zeta1([0.7, 0.7, 0.7]) == pytest.approx(0.0, abs=1e-16)
    assert qsd.zeta1([0.1, 5.0, 1.0]) < 0


def test_zeta1_hessian_gives_first_order_second_moments():
    """d2 zeta / d phi_r d phi_s at 0 is E[X_r X_s]"""
    tp = ThetaP(0.1, KERNEL3)
    qsd = SmallThetaQsd(tp)
    theta_part = 2.0 * (second_moments_small_theta(tp) - second_moments_small_theta(tp.with_theta(0.05))) / 0.1
    h = 1e-4
    for r in range(3):
        for s in range(r + 1, 3):
            e_r, e_s = np.eye(3)[r] * h, np.eye(3)[s] * h
            mixed = (qsd.zeta1(e_r + e_s) - qsd.zeta1(e_r) - qsd.zeta1(e_s) + qsd.zeta1(np.zeros(3))) / h ** 2
            assert mixed == pytest.approx(theta_part[r, s], rel=1e-3)


def test_zeroth_order_transform_solves_theta_free_equation():
    qsd = pim_qsd(0.05)
    for phi in ([0.5, 1.0], [1.0, 2.0], [2.0, 0.7]):
        assert abs(qsd.pde_residual(phi, theta=0.0, first_order=False)) < 1e-7


def test_first_order_residual_is_second_order_in_theta():
    qsd = pim_qsd(0.1)
    for phi in ([0.5, 1.0], [1.0, 2.0], [2.0, 0.7]):
        ratio = qsd.pde_residual(phi, theta=0.1) / qsd.pde_residual(phi, theta=0.05)
        assert 3.2 <= ratio <= 4.8
    assert abs(qsd.pde_residual([0.5, 1.0], theta=0.05)) <= 5e-4


def test_pde_residual_rejects_large_step():
    with pytest.raises(DomainError):
        pim_qsd(0.05).pde_residual([0.5, 1e-5], h=1e-4)


def test_surface_density_point_value_and_symmetry():
    qsd = pim_qsd(0.05)
    e = math.exp(-1.0)
    expected = 0.05 * 2 * 0.1875 * (e * special.expn(2, 1.0) + 2 * e * special.exp1(1.0))
    assert qsd.g_surface(0, 1, 1.0, 1.0) == pytest.approx(expected, rel=1e-10)

    a, b = np.array([0.3, 1.7, 4.0]), np.array([2.2, 0.05, 1.1])
    np.testing.assert_allclose(qsd.g_surface(0, 1, a, b), qsd.g_surface(1, 0, b, a), rtol=1e-14)
    with pytest.raises(DomainError):
        qsd.g_surface(0, 0, 1.0, 1.0)
    with pytest.raises(DomainError):
        qsd.g_surface(0, 1, 0.0, 1.0)


def test_line_density_is_linear_in_theta_and_vanishes_at_origin():
    qsd = pim_qsd(0.05)
    x = np.array([0.5, 1.0, 3.0])
    np.testing.assert_allclose(qsd.with_theta(0.1).g_line(0, x), 2.0 * qsd.g_line(0, x), rtol=1e-14)
    assert abs(qsd.g_line(0, 1e-12)) < 1e-9
    with pytest.raises(DomainError):
        qsd.g_line(0, 0.0)


def test_line_mass_closed_form():
    qsd = SmallThetaQsd(ThetaP(0.1, KERNEL3))
    for i in range(3):
        expected = -0.1 * qsd.pi[i] * (1.0 - KERNEL3[i, i]) * (1.0 - EULER_GAMMA)
        assert qsd.line_mass(i) == pytest.approx(expected, rel=1e-6)


def test_density_eval_dispatch():
    qsd = SmallThetaQsd(ThetaP(0.05, KERNEL3))
    assert qsd.density_eval([1.0, 1.0, 1.0]) == 0.0
    assert qsd.density_eval([0.0, 0.0, 0.0]) == 0.0
    assert qsd.density_eval([2.0, 0.0, 0.0]) == qsd.g_line(0, 2.0)
    assert qsd.density_eval([0.0, 0.4, 1.3]) == qsd.g_surface(1, 2, 0.4, 1.3)
    with pytest.raises(DomainError):
        qsd.density_eval([1.0, -1.0, 0.0])


def test_scale_map_is_identity_at_reference_alpha():
    qsd = pim_qsd(0.05)
    point = np.array([0.8, 1.6])
    assert qsd.density_at_alpha(point, -0.5) == qsd.density_eval(point)
    assert rescale_alpha(qsd, point, -0.5) == qsd.density_eval(point)
    with pytest.raises(DomainError):
        qsd.density_at_alpha(point, 0.5)


def test_scale_map_preserves_line_mass():
    qsd = pim_qsd(0.1)
    alpha = -1.5
    mapped, _ = integrate.quad(lambda x: float(qsd.line_at_alpha(0, x, alpha)), 0.0, 30.0, limit=200)
    assert mapped == pytest.approx(qsd.with_theta(0.1 / 3.0).line_mass(0), rel=1e-6)


def test_to_xu():
    assert to_xu(1.0, 1.0) == (2.0, 0.5)
    with pytest.raises(DomainError):
        to_xu(0.0, 1.0)


def test_xu_surface_carries_the_jacobian():
    qsd = pim_qsd(0.05)
    x, u = 2.0, 0.3
    assert qsd.g_surface_xu(x, u) == pytest.approx(x * qsd.g_surface(0, 1, 0.6, 1.4), rel=1e-14)
    with pytest.raises(DomainError):
        qsd.g_surface_xu(1.0, 1.0)


def test_grids_shapes_and_parallel_agreement():
    qsd = pim_qsd(0.05)
    x_grid = np.linspace(0.1, 4.0, 6)
    u_grid = np.linspace(0.05, 0.95, 5)
    serial = qsd.surface_grid(x_grid, u_grid, alpha=-1.0, parallel=False)
    assert serial.shape == (30, 3)
    np.testing.assert_array_equal(qsd.surface_grid(x_grid, u_grid, alpha=-1.0, parallel=True), serial)

    plane = qsd.surface_grid_x1x2(x_grid, x_grid, parallel=False)
    assert plane.shape == (36, 3)
    np.testing.assert_array_equal(qsd.surface_grid_x1x2(x_grid, x_grid), plane)

    lines = qsd.line_grid(x_grid)
    assert lines.shape == (12, 3)
    assert set(lines[:, 0]) == {0.0, 1.0}
    assert surface_pairs(3) == [(0, 1), (0, 2), (1, 2)]


@pytest.mark.slow
def test_total_mass_excess_is_second_order():
    """Mass is 1 + 2 c2 theta^2 sum_j pi_j (1 - P_jj)^2 + O(theta^3)"""
    c2 = 1.0 + EULER_GAMMA + EULER_GAMMA ** 2 / 2.0 + math.pi ** 2 / 12.0
    theta = 0.02
    qsd = pim_qsd(theta)
    excess = qsd.total_mass() - 1.0
    expected = 2.0 * c2 * 0.1875 * theta ** 2 - 2.442482 * theta ** 3
    assert excess == pytest.approx(expected, rel=0.03)


@pytest.mark.slow
def test_surface_mass_split_rule_matches_default_for_three_types():
    theta = 0.02
    default = SmallThetaQsd(ThetaP(theta, KERNEL3))
    split = SmallThetaQsd(ThetaP(theta, KERNEL3), a_rule="split")
    assert abs(split.total_mass(FAST_QUAD) - default.total_mass(FAST_QUAD)) < 10 * theta ** 2


@pytest.mark.slow
@pytest.mark.parametrize("exponents, tolerance", [
    ([1, 0], 3.0),
    ([0, 1], 4.0),
    ([2, 0], 5.0),
    ([0, 2], 12.0),
    ([1, 1], 2.0),
])
def test_quadrature_moments_match_first_order_closed_forms(exponents, tolerance):
    theta = 0.02
    tp = pim(theta, PI).to_theta_p()
    numeric = SmallThetaQsd(tp).moment_by_quadrature(exponents, FAST_QUAD)
    assert abs(numeric - moment_mixed(exponents, tp)) <= tolerance * theta ** 2


def second_order_laplace_coefficient(qsd: SmallThetaQsd, phi) -> float:
    """theta^2 coefficient of the transform of the first-order density

    Each x_i^(a theta - 1) E2(x_i) factor integrates against exp(-phi_i x_i) to
    Gamma(s) int_1^inf (t + phi_i)^(-s) t^-2 dt, s = a theta; its O(s) term
    carries this coefficient.
    """
    total = 0.0
    for i in range(qsd.d):
        a1 = integrate.quad(lambda t: math.log(t + phi[i]) / t ** 2, 1.0, np.inf)[0]
        a2 = integrate.quad(lambda t: math.log(t + phi[i]) ** 2 / t ** 2, 1.0, np.inf)[0]
        c2 = EULER_GAMMA ** 2 / 2.0 + math.pi ** 2 / 12.0 + EULER_GAMMA * a1 + a2 / 2.0
        for j in range(qsd.d):
            if j != i:
                total += qsd.pi[j] * qsd.P[j, i] * (1.0 - qsd.P[j, j]) * 2.0 * c2 / (1.0 + phi[j]) ** 3
    return total


def test_second_order_laplace_coefficient_at_zero_is_the_mass_excess():
    c2 = 1.0 + EULER_GAMMA + EULER_GAMMA ** 2 / 2.0 + math.pi ** 2 / 12.0
    assert second_order_laplace_coefficient(pim_qsd(0.05), [0.0, 0.0]) == pytest.approx(2.0 * c2 * 0.1875, rel=1e-8)


@pytest.mark.slow
def test_quadrature_u_moment_and_laplace_transform():
    theta = 0.02
    tp = pim(theta, PI).to_theta_p()
    qsd = SmallThetaQsd(tp)
    assert qsd.u_moment_by_quadrature([1, 0], FAST_QUAD) == pytest.approx(moment_u(0, 1, tp), abs=1e-3)
    phi = [0.1, 5.0]
    assert abs(qsd.laplace_by_quadrature(phi, FAST_QUAD) - qsd.zeta(phi)) <= 1.5e-3


@pytest.mark.slow
@pytest.mark.parametrize("phi", [[0.5, 0.5], [1.0, 2.0]])
def test_laplace_transform_by_quadrature_at_theta_005(phi):
    theta = 0.05
    qsd = pim_qsd(theta)
    numeric = qsd.laplace_by_quadrature(phi, FAST_QUAD)
    second_order = theta ** 2 * second_order_laplace_coefficient(qsd, phi)
    assert abs(numeric - qsd.zeta(phi) - second_order) <= 5e-4
    if phi == [1.0, 2.0]:
        assert abs(numeric - qsd.zeta(phi)) <= 5e-4


@pytest.mark.slow
def test_cross_u_moment_closure_is_second_order():
    """E[U_1 U_2] by quadrature against its first-order closed form"""
    errors = {}
    for theta in (0.02, 0.04):
        tp = pim(theta, PI).to_theta_p()
        numeric = SmallThetaQsd(tp).u_moment_by_quadrature([1, 1], FAST_QUAD)
        errors[theta] = numeric - moment_u_cross(0, 1, 1, 1, tp)
    assert moment_u_cross(0, 1, 1, 1, pim(0.1, PI).to_theta_p()) == pytest.approx(0.01875, rel=1e-14)
    assert abs(errors[0.02]) <= 0.15 * 0.02 ** 2
    assert 3.2 <= errors[0.04] / errors[0.02] <= 4.8


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
