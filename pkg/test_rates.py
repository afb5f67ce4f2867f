#!/usr/bin/env python3
"""
Tests for the mutation-rate model
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the repository root to path
sys.path.insert(0, str(Path(__file__).parent))

from branchdiff.errors import ModelError
from branchdiff.rates import (RateMatrix, ThetaP, from_theta_p, is_reversible, pim, random_reversible,
                              spectral_decompose, stationary_pi, to_theta_p)

CYCLIC = np.array([[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0], [1.0, 0.0, -1.0]])


def test_theta_p_round_trip():
    P = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]])
    rates = from_theta_p(0.4, P)
    np.testing.assert_allclose(rates.gamma, 0.2 * (P - np.eye(3)), atol=1e-15)
    back = to_theta_p(rates, 0.4)
    np.testing.assert_allclose(back.P, P, atol=1e-14)
    assert back.theta == 0.4


def test_pim_canonical_form_has_rows_equal_to_pi():
    rates = pim(0.1, [0.75, 0.25])
    assert rates.is_pim()
    tp = rates.to_theta_p()
    assert tp.theta == pytest.approx(0.1, rel=1e-14)
    np.testing.assert_allclose(tp.P, [[0.75, 0.25], [0.75, 0.25]], atol=1e-14)
    np.testing.assert_allclose(rates.pi, [0.75, 0.25], atol=1e-14)


def test_every_two_type_matrix_is_pim():
    rates = RateMatrix(np.array([[-0.3, 0.3], [0.1, -0.1]]))
    assert rates.is_pim()
    tp = rates.to_theta_p()
    assert tp.theta == pytest.approx(0.8)
    np.testing.assert_allclose(tp.P, [[0.25, 0.75], [0.25, 0.75]], atol=1e-14)


def test_non_pim_canonical_theta_is_the_floor():
    rates = RateMatrix(CYCLIC * 0.5)
    assert not rates.is_pim()
    tp = to_theta_p(rates)
    assert tp.theta == pytest.approx(1.0)
    np.testing.assert_allclose(np.diag(tp.P), 0.0, atol=1e-15)


def test_theta_below_floor_is_rejected():
    rates = RateMatrix(CYCLIC)
    with pytest.raises(ModelError):
        to_theta_p(rates, 1.0)


@pytest.mark.parametrize("gamma", [
    np.array([[-1.0, 1.0], [-0.5, 0.5]]),
    np.array([[-1.0, 0.9], [0.5, -0.5]]),
    np.array([[0.0, 0.0, 0.0]]),
])
def test_invalid_rate_matrices(gamma):
    with pytest.raises(ModelError):
        RateMatrix(gamma)


def test_invalid_kernels():
    with pytest.raises(ModelError):
        ThetaP(0.1, np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(ModelError):
        ThetaP(0.0, np.eye(2))
    with pytest.raises(ModelError):
        pim(0.1, [0.5, 0.6])


def test_identity_kernel_gives_zero_reducible_rates():
    rates = from_theta_p(1.0, np.eye(2))
    np.testing.assert_array_equal(rates.gamma, np.zeros((2, 2)))
    assert not rates.irreducible
    with pytest.raises(ModelError):
        stationary_pi(rates)


def test_single_type_rate_matrix():
    rates = RateMatrix(np.zeros((1, 1)))
    assert rates.irreducible
    np.testing.assert_allclose(rates.pi, [1.0])


def test_cyclic_rates_are_irreversible():
    rates = RateMatrix(CYCLIC)
    np.testing.assert_allclose(rates.pi, np.full(3, 1.0 / 3.0), atol=1e-14)
    assert not is_reversible(rates)
    with pytest.raises(ModelError):
        spectral_decompose(rates)


def test_stationary_vector_solves_pi_gamma():
    rng = np.random.default_rng(7)
    rates = random_reversible(4, rng)
    np.testing.assert_allclose(rates.pi @ rates.gamma, 0.0, atol=1e-14)
    assert rates.pi.sum() == pytest.approx(1.0, abs=1e-15)
    assert rates.is_reversible()


@pytest.mark.parametrize("d", [2, 3, 4, 5])
def test_spectral_decomposition_reconstructs_gamma(d):
    rng = np.random.default_rng(100 + d)
    rates = random_reversible(d, rng)
    spectral = spectral_decompose(rates)
    assert spectral.nu[0] == 0.0
    assert np.all(spectral.nu[1:] < 0)
    assert np.all(np.diff(spectral.nu) <= 0)
    np.testing.assert_allclose(spectral.reconstruct(), rates.gamma, atol=1e-12)
    assert spectral.orthonormality_error() < 1e-12
    np.testing.assert_allclose(spectral.u[:, 0], 1.0, atol=1e-12)


def test_pim_spectrum():
    theta = 0.4
    spectral = pim(theta, [0.5, 0.3, 0.2]).spectral()
    np.testing.assert_allclose(spectral.nu, [0.0, -theta / 2, -theta / 2], atol=1e-14)


def test_random_reversible_needs_two_types():
    with pytest.raises(ModelError):
        random_reversible(1, np.random.default_rng(0))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
