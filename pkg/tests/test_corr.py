import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import betaln

from consensus_query.corr import (
    chol_backprop,
    chol_to_cpc,
    cpc_log_prior,
    cpc_to_chol,
    dim_from_ncpc,
    lkj_log_density,
    lkj_log_normalizer,
    n_cpc,
    prior_coefficients,
)


def offdiag(y, d):
    L = cpc_to_chol(y, d)
    om = L @ L.T
    return om[np.tril_indices(d, -1)]


def log_abs_jacobian(y, d, h=1e-6):
    """log |d offdiag(Omega) / d y| by central differences."""
    p = y.size
    J = np.empty((p, p))
    for k in range(p):
        e = np.zeros(p)
        e[k] = h
        J[:, k] = (offdiag(y + e, d) - offdiag(y - e, d)) / (2 * h)
    return np.linalg.slogdet(J)[1]


class TestBijection:
    @settings(max_examples=100, deadline=None)
    @given(d=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
    def test_valid_correlation_factor(self, d, seed):
        y = np.random.default_rng(seed).normal(size=n_cpc(d)) * 1.5
        L = cpc_to_chol(y, d)
        om = L @ L.T
        np.testing.assert_allclose(np.diag(om), 1.0, atol=1e-12)
        assert np.all(np.diag(L) > 0)
        np.testing.assert_array_equal(np.triu(L, 1), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(d=st.integers(2, 6), seed=st.integers(0, 2**32 - 1))
    def test_round_trip(self, d, seed):
        y = np.random.default_rng(seed).normal(size=n_cpc(d))
        np.testing.assert_allclose(chol_to_cpc(cpc_to_chol(y, d)), y, atol=1e-8)

    def test_batched(self):
        y = np.random.default_rng(0).normal(size=(4, 3, n_cpc(4)))
        L = cpc_to_chol(y, 4)
        np.testing.assert_allclose(L[2, 1], cpc_to_chol(y[2, 1], 4))

    def test_zero_is_identity(self):
        np.testing.assert_allclose(cpc_to_chol(np.zeros(6), 4), np.eye(4))

    def test_dim_from_ncpc(self):
        assert [dim_from_ncpc(n_cpc(d)) for d in range(1, 8)] == list(range(1, 8))
        with pytest.raises(ValueError):
            dim_from_ncpc(4)


class TestLKJ:
    @pytest.mark.parametrize("d,eta", [(2, 0.75), (3, 0.75), (4, 1.0), (4, 2.5)])
    def test_jacobian(self, d, eta):
        # CPC prior = LKJ density on the off-diagonal entries + log|Jacobian| (+ normaliser)
        rng = np.random.default_rng(d)
        for _ in range(5):
            y = rng.normal(size=n_cpc(d)) * 0.7
            L = cpc_to_chol(y, d)
            lhs, _ = cpc_log_prior(y, d, eta)
            rhs = lkj_log_density(L @ L.T, eta) + log_abs_jacobian(y, d) + lkj_log_normalizer(d, eta)
            np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    @pytest.mark.parametrize("eta", [0.75, 1.0, 3.0])
    def test_normaliser_d2(self, eta):
        integral, _ = quad(lambda r: (1 - r * r) ** (eta - 1), -1, 1)
        np.testing.assert_allclose(lkj_log_normalizer(2, eta), np.log(integral), rtol=1e-8)
        np.testing.assert_allclose(lkj_log_normalizer(2, eta), (2 * eta - 1) * np.log(2) + betaln(eta, eta))

    def test_normaliser_d3_volume(self):
        # volume of 3x3 correlation matrices (eta=1) is pi^2 / 2
        np.testing.assert_allclose(lkj_log_normalizer(3, 1.0), np.log(np.pi**2 / 2), rtol=1e-10)

    def test_identity_density_d1(self):
        assert lkj_log_density(np.eye(1), 0.75) == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(1)
        d, eta = 4, 0.75
        y = rng.normal(size=n_cpc(d))
        _, g = cpc_log_prior(y, d, eta)
        h = 1e-6
        fd = np.array([(cpc_log_prior(y + h * e, d, eta)[0] - cpc_log_prior(y - h * e, d, eta)[0]) / (2 * h)
                       for e in np.eye(y.size)])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)

    def test_coefficients_positive(self):
        for d in range(2, 8):
            assert np.all(prior_coefficients(d, 0.75) > 0)


class TestBackprop:
    @pytest.mark.parametrize("d", [2, 3, 5])
    def test_matches_finite_differences(self, d):
        rng = np.random.default_rng(d)
        y = rng.normal(size=n_cpc(d))
        G = rng.normal(size=(d, d))

        def f(v):
            return float(np.sum(G * cpc_to_chol(v, d)))

        L = cpc_to_chol(y, d)
        got = chol_backprop(np.tril(G), y, L)
        h = 1e-6
        fd = np.array([(f(y + h * e) - f(y - h * e)) / (2 * h) for e in np.eye(y.size)])
        np.testing.assert_allclose(got, fd, rtol=1e-6, atol=1e-8)
