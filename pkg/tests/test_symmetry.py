import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from persianrug.model import ToyModel
from persianrug.rug import RugSpec, factorize_rug, persian_rug
from persianrug.symmetry import (
    bias_fluctuation,
    diag_fluctuation,
    effective_matrix,
    lyapunov_stat,
    offdiag_symmetry,
    stats_report,
)


def naive_product(A, B):
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += A[i, t] * B[t, j]
            out[i, j] = s
    return out


class TestEffectiveMatrix:
    def test_identity(self):
        m = ToyModel(np.eye(4), np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(effective_matrix(m), np.eye(4))

    def test_matches_naive_product(self, rng):
        for n_d in (2, 5, 8):
            m = random_model(rng, 8, n_d)
            np.testing.assert_allclose(effective_matrix(m), naive_product(m.W_out, m.W_in), rtol=0, atol=1e-12)

    def test_rank_bounded_by_hidden_width(self, rng):
        m = random_model(rng, 20, 6)
        assert np.linalg.matrix_rank(effective_matrix(m)) <= 6


class TestFluctuations:
    def test_diag(self):
        assert diag_fluctuation(np.eye(7)) == 0.0
        W = np.array([[1.0, 5.0], [-3.0, 2.0]])
        assert diag_fluctuation(W) == pytest.approx(0.25)
        with pytest.raises(ValueError):
            diag_fluctuation(np.ones((2, 3)))

    def test_rug_diag_is_exact(self):
        assert diag_fluctuation(persian_rug(RugSpec.for_size(128, 20, seed=1))) == 0.0

    def test_bias(self):
        assert bias_fluctuation(np.full(9, -0.3)) == pytest.approx(0.0, abs=1e-30)
        assert bias_fluctuation([0.0, 1.0]) == pytest.approx(0.25)

    def test_offdiag_equal_rows(self):
        W = np.array([[1.0, 2.0, 0.0], [0.0, 7.0, -2.0], [2.0, 0.0, 3.0]])
        assert offdiag_symmetry(W, 0.3) == pytest.approx(0.0, abs=1e-18)

    def test_offdiag_two_by_two(self):
        W = np.array([[0.5, 1.0], [0.0, 0.5]])
        assert offdiag_symmetry(W, 1.0) == pytest.approx(1 / 576, rel=1e-12)

    def test_offdiag_rug(self):
        R = persian_rug(RugSpec.for_size(256, 40, seed=2))
        row = (256 / 40 - 1) * 0.3 / 12
        assert offdiag_symmetry(R, 0.3) <= 1e-10 * row**2


class TestLyapunov:
    def test_single_offdiag_per_row(self):
        W = np.eye(4) + np.roll(np.eye(4), 1, axis=1) * np.array([0.3, -2.0, 1.0, 5.0])[:, None]
        assert lyapunov_stat(W) == pytest.approx(1.0)

    @pytest.mark.parametrize("n", [2, 5, 30])
    def test_equal_magnitudes(self, n):
        rng = np.random.default_rng(n)
        W = 0.7 * rng.choice([-1.0, 1.0], size=(n + 1, n + 1))
        np.fill_diagonal(W, 3.0)
        assert lyapunov_stat(W) == pytest.approx(n ** -0.5, rel=1e-12)

    def test_shrinks_with_size_for_gaussian_rows(self):
        rng = np.random.default_rng(0)
        small = lyapunov_stat(rng.standard_normal((256, 256)))
        large = lyapunov_stat(rng.standard_normal((4096, 4096)))
        assert large < small

    def test_zero_rows_excluded_with_warning(self):
        W = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 2.0, 1.0]])
        with pytest.warns(RuntimeWarning, match="undefined for 1"):
            assert lyapunov_stat(W) == pytest.approx(1.0)

    def test_all_rows_undefined(self):
        with pytest.warns(RuntimeWarning):
            assert np.isnan(lyapunov_stat(np.eye(3)))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 20))
    def test_range(self, seed, n):
        W = np.random.default_rng(seed).standard_normal((n, n))
        assert 0 < lyapunov_stat(W) <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 16), p=st.floats(0.01, 1.0))
def test_statistics_are_permutation_invariant(seed, n, p):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, n))
    b = rng.standard_normal(n)
    perm = rng.permutation(n)
    Wp = W[np.ix_(perm, perm)]
    assert diag_fluctuation(Wp) == pytest.approx(diag_fluctuation(W), rel=1e-12, abs=1e-15)
    assert bias_fluctuation(b[perm]) == pytest.approx(bias_fluctuation(b), rel=1e-12, abs=1e-15)
    assert offdiag_symmetry(Wp, p) == pytest.approx(offdiag_symmetry(W, p), rel=1e-10, abs=1e-15)
    assert lyapunov_stat(Wp) == pytest.approx(lyapunov_stat(W), rel=1e-12)


class TestReport:
    def test_identity_model(self):
        m = ToyModel(np.eye(6), np.eye(6), np.zeros(6))
        with pytest.warns(RuntimeWarning):
            st_ = stats_report(m, 0.1)
        assert st_.diag_var == 0.0 and st_.delta_var_noise == 0.0
        assert np.isnan(st_.lyapunov)
        assert st_.diag_mean == 1.0

    def test_rug_weights(self):
        layout = RugSpec.for_size(128, 32, seed=4)
        W_in, W_out = factorize_rug(layout)
        st_ = stats_report(ToyModel(W_in, W_out, -0.1 * np.ones(128)), 0.05)
        assert st_.diag_var < 1e-28
        assert st_.delta_var_noise < 1e-20
        assert st_.bias_mean == pytest.approx(-0.1) and st_.bias_var < 1e-30
        assert 0 < st_.lyapunov <= 1
        np.testing.assert_allclose(st_.row_offdiag_sumsq, 128 / 32 - 1, rtol=1e-10)
        assert set(st_.summary()) == {"diag_mean", "diag_var", "bias_mean", "bias_var",
                                      "delta_var_noise", "lyapunov"}
