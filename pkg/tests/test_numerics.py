"""Tests for the dense linear-algebra and seeded-randomness primitives."""

import numpy as np
import pytest

from collapseguard.errors import InputValidationError
from collapseguard.numerics import (
    RngState,
    as_generator,
    gaussian_sample,
    is_spd,
    quad_form,
    sym_eig,
)


class TestSymEig:
    """Symmetric eigendecomposition via cyclic Jacobi rotations."""

    def test_diagonal_matrix_returns_its_entries(self):
        values, vectors = sym_eig(np.diag([2.0, 3.0]))
        np.testing.assert_allclose(values, [2.0, 3.0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(np.abs(vectors), np.eye(2), atol=1e-12)

    def test_identity_has_unit_spectrum(self):
        values, _ = sym_eig(np.eye(4))
        np.testing.assert_allclose(values, np.ones(4), rtol=0, atol=1e-12)

    def test_two_by_two_hand_solved_spectrum(self):
        """[[2,1],[1,2]] has characteristic roots 1 and 3."""
        values, _ = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(values, [1.0, 3.0], atol=1e-12)

    def test_matches_reference_solver_on_random_matrices(self):
        rng = np.random.default_rng(42)
        for dim in (2, 3, 5, 8, 16, 32):
            g = rng.normal(size=(dim, dim))
            m = 0.5 * (g + g.T)
            values, vectors = sym_eig(m)
            np.testing.assert_allclose(values, np.linalg.eigvalsh(m), atol=1e-9)
            # Ascending order and orthonormal columns.
            assert np.all(np.diff(values) >= -1e-12)
            gram_err = np.abs(vectors.T @ vectors - np.eye(dim)).max()
            assert gram_err <= 1e-10
            # Reconstruction within 1e-10 of the input scale.
            recon = vectors @ np.diag(values) @ vectors.T
            scale = max(np.abs(m).max(), 1.0)
            assert np.abs(recon - m).max() <= 1e-10 * scale

    def test_nonfinite_input_rejected(self):
        bad = np.array([[1.0, np.nan], [np.nan, 1.0]])
        with pytest.raises(InputValidationError):
            sym_eig(bad)

    def test_asymmetric_input_rejected(self):
        with pytest.raises(InputValidationError):
            sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestQuadForm:
    """Double contraction v' M v."""

    def test_identity_sums_squares(self):
        assert quad_form(np.eye(2), np.array([1.0, 1.0])) == pytest.approx(2.0)

    def test_diagonal_weights_coordinates(self):
        assert quad_form(np.diag([2.0, 3.0]), np.array([1.0, 1.0])) == pytest.approx(5.0)

    def test_zero_vector_gives_zero(self):
        assert quad_form(np.diag([7.0, 9.0]), np.zeros(2)) == 0.0

    def test_dim_mismatch_rejected(self):
        with pytest.raises(InputValidationError):
            quad_form(np.eye(2), np.ones(3))

    def test_nonnegative_on_positive_definite_matrix(self):
        rng = np.random.default_rng(7)
        g = rng.normal(size=(4, 4))
        m = g @ g.T + 0.1 * np.eye(4)
        assert is_spd(m, tol=0.0)
        for _ in range(10_000):
            v = rng.normal(size=4)
            assert quad_form(m, v) >= 0.0


class TestIsSpd:
    def test_identity_is_positive_definite(self):
        assert is_spd(np.eye(3), tol=0.0)

    def test_indefinite_matrix_rejected(self):
        assert not is_spd(np.diag([1.0, -1.0]), tol=0.0)

    def test_eigenvalue_below_tolerance_fails(self):
        assert not is_spd(np.diag([1e-14, 1.0]), tol=1e-12)


class TestGaussianSample:
    def test_zero_covariance_returns_mean_exactly(self):
        mean = np.array([1.0, 1.0])
        out = gaussian_sample(RngState(seed=3), mean, np.zeros((2, 2)))
        np.testing.assert_array_equal(out, mean)

    def test_sample_mean_concentrates_with_identity_covariance(self):
        """Mean of 1e5 standard-normal draws lands within 0.02 per coordinate."""
        rng = RngState(seed=42).generator()
        draws = np.stack(
            [gaussian_sample(rng, np.zeros(2), np.eye(2)) for _ in range(1000)]
        )
        extra = rng.standard_normal(size=(99_000, 2))
        pooled = np.concatenate([draws, extra])
        assert np.abs(pooled.mean(axis=0)).max() <= 0.02

    def test_seed_replay_is_identical(self):
        a = gaussian_sample(RngState(seed=42, stream=0), np.zeros(3), np.eye(3))
        b = gaussian_sample(RngState(seed=42, stream=0), np.zeros(3), np.eye(3))
        np.testing.assert_array_equal(a, b)

    def test_indefinite_covariance_rejected(self):
        with pytest.raises(InputValidationError):
            gaussian_sample(RngState(seed=1), np.zeros(2), np.diag([1.0, -1.0]))

    def test_empirical_covariance_tracks_factored_covariance(self):
        """Sample covariance converges at the root-n rate: 5 standard errors at n=1e5."""
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        rng = RngState(seed=11).generator()
        draws = np.stack(
            [gaussian_sample(rng, np.zeros(2), cov) for _ in range(100_000)]
        )
        emp = np.cov(draws.T, bias=True)
        n = draws.shape[0]
        for i in range(2):
            for j in range(2):
                stderr = np.sqrt((cov[i, i] * cov[j, j] + cov[i, j] ** 2) / n)
                assert abs(emp[i, j] - cov[i, j]) <= 5.0 * stderr


class TestRngState:
    def test_same_key_same_sequence(self):
        a = RngState(seed=9, stream=4).generator().standard_normal(16)
        b = RngState(seed=9, stream=4).generator().standard_normal(16)
        np.testing.assert_array_equal(a, b)

    def test_different_streams_differ(self):
        a = RngState(seed=9, stream=0).generator().standard_normal(16)
        b = RngState(seed=9, stream=1).generator().standard_normal(16)
        assert not np.array_equal(a, b)

    def test_derive_is_deterministic_and_distinct(self):
        root = RngState(seed=5)
        first = root.derive(3)
        again = root.derive(3)
        assert first == again
        others = {root.derive(i) for i in range(64)}
        assert len(others) == 64

    def test_invalid_seed_rejected(self):
        with pytest.raises(InputValidationError):
            RngState(seed=-1)
        with pytest.raises(InputValidationError):
            RngState(seed=2**64)

    def test_as_generator_accepts_state_and_generator(self):
        state = RngState(seed=21)
        gen = state.generator()
        assert isinstance(as_generator(state), np.random.Generator)
        assert as_generator(gen) is gen
