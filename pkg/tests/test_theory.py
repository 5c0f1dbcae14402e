import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import hypergeom

from consensus_query.data import gen_equicorr_voters
from consensus_query.errors import DomainError
from consensus_query.theory import (
    ConsensusSizeDist,
    P3,
    arcsin_bound_check,
    split_vote_population,
    consensus_size_dist,
    err_equicorrelated_3,
    err_random_1or2,
    err_random_nq,
    expected_nc_equicorr_3,
    hypergeom_cdf,
    simulate_random_error,
)

SIMPLE_EXAMPLE = {1: 0.400, 3: 1 / 3, 5: 0.2619, 7: 0.1667, 9: 0.0}


class TestOneOrTwo:
    def test_examples(self):
        assert err_random_1or2(ConsensusSizeDist.point_mass(7, 7)) == 0.0
        np.testing.assert_allclose(err_random_1or2(ConsensusSizeDist.point_mass(10, 6)), 0.4)
        np.testing.assert_allclose(err_random_1or2(ConsensusSizeDist.from_dict(10, {6: 0.5, 10: 0.5})), 0.2)

    def test_mixture_matches_simulation(self):
        rng = np.random.default_rng(0)
        pop = split_vote_population(10, [6, 10], [0.5, 0.5], 20_000, rng)
        est = simulate_random_error(pop, 1, 200_000, rng)
        assert abs(est.value - 0.2) <= 0.01

    @pytest.mark.parametrize("n_c", range(6, 11))
    def test_agrees_with_hypergeometric_at_one(self, n_c):
        np.testing.assert_allclose(hypergeom_cdf(0, 10, n_c, 1), (10 - n_c) / 10)
        np.testing.assert_allclose(err_random_1or2(ConsensusSizeDist.point_mass(10, n_c)),
                                   err_random_nq(ConsensusSizeDist.point_mass(10, n_c), 1))


class TestHypergeometric:
    def test_examples(self):
        np.testing.assert_allclose(hypergeom_cdf(1, 10, 6, 3), 1 / 3, atol=1e-12)
        np.testing.assert_allclose(hypergeom_cdf(2, 10, 6, 5), 0.26190476, atol=1e-8)
        assert hypergeom_cdf(4, 10, 6, 9) == 0.0
        assert hypergeom_cdf(-1, 10, 6, 3) == 0.0

    def test_exact_mode(self):
        assert hypergeom_cdf(1, 10, 6, 3, exact=True) == Fraction(1, 3)
        assert hypergeom_cdf(2, 10, 6, 5, exact=True) == Fraction(11, 42)
        with pytest.raises(DomainError):
            hypergeom_cdf(1, 40, 30, 3, exact=True)

    @settings(max_examples=200, deadline=None)
    @given(H=st.integers(1, 60), data=st.data())
    def test_matches_scipy(self, H, data):
        n_c = data.draw(st.integers(0, H))
        n_q = data.draw(st.integers(1, H))
        r = data.draw(st.integers(-1, n_q))
        expected = hypergeom(H, n_c, n_q).cdf(r) if r >= 0 else 0.0
        np.testing.assert_allclose(hypergeom_cdf(r, H, n_c, n_q), expected, atol=1e-10)

    def test_bad_parameters(self):
        with pytest.raises(DomainError):
            hypergeom_cdf(1, 10, 11, 3)
        with pytest.raises(DomainError):
            hypergeom_cdf(1, 10, 6, 0)
        with pytest.raises(DomainError):
            hypergeom_cdf(-2, 10, 6, 3)


class TestErrRandomNq:
    def test_simple_example(self):
        d = ConsensusSizeDist.point_mass(10, 6)
        for n_q, expected in SIMPLE_EXAMPLE.items():
            np.testing.assert_allclose(err_random_nq(d, n_q), expected, atol=5e-4)

    def test_exact_simple_example(self):
        d = ConsensusSizeDist.point_mass(10, 6)
        got = [err_random_nq(d, n, exact=True) for n in (1, 3, 5, 7, 9)]
        assert got == [Fraction(2, 5), Fraction(1, 3), Fraction(11, 42), Fraction(1, 6), Fraction(0)]

    def test_full_panel_is_exact(self):
        d = ConsensusSizeDist.from_dict(9, {5: 0.3, 7: 0.7})
        assert err_random_nq(d, 9) == 0.0

    def test_mixture_matches_simulation(self):
        rng = np.random.default_rng(3)
        d = ConsensusSizeDist.from_dict(10, {6: 0.4, 8: 0.6})
        pop = split_vote_population(10, [6, 8], [0.4, 0.6], 20_000, rng)
        est = simulate_random_error(pop, 3, 200_000, rng)
        assert abs(est.value - err_random_nq(d, 3)) <= 0.01

    def test_even_rejected(self):
        with pytest.raises(DomainError):
            err_random_nq(ConsensusSizeDist.point_mass(10, 6), 2)

    def test_majority_required(self):
        with pytest.raises(DomainError):
            err_random_nq(ConsensusSizeDist.point_mass(10, 5), 3)

    @settings(max_examples=100, deadline=None)
    @given(H=st.integers(3, 25), seed=st.integers(0, 2**32 - 1))
    def test_non_increasing_in_nq(self, H, seed):
        rng = np.random.default_rng(seed)
        support = np.arange(H // 2 + 1, H + 1)
        d = ConsensusSizeDist(H, np.concatenate([np.zeros(H // 2 + 1), rng.dirichlet(np.ones(support.size))]))
        errs = [err_random_nq(d, n) for n in range(1, H + 1, 2)]
        assert np.all(np.diff(errs) <= 1e-12)


class TestEquicorrelated:
    def test_examples(self):
        assert err_equicorrelated_3(0.0) == 0.25
        np.testing.assert_allclose(err_equicorrelated_3(0.5), 1 / 6)
        np.testing.assert_allclose(P3(0.0), 0.125)
        np.testing.assert_allclose(expected_nc_equicorr_3(0.5), 2 + 2 * (0.125 + 3 / 4 / 6))

    def test_rho_09_matches_simulation(self):
        rng = np.random.default_rng(9)
        ds = gen_equicorr_voters(3, 0.9, 1_000_000, 0.0, rng)
        est = simulate_random_error(ds.votes, 1, 1_000_000, rng)
        assert abs(est.value - err_equicorrelated_3(0.9)) <= 0.003

    def test_strictly_decreasing(self):
        rhos = np.linspace(0, 0.999, 200)
        vals = [err_equicorrelated_3(r) for r in rhos]
        assert np.all(np.diff(vals) < 0)
        assert err_equicorrelated_3(1 - 1e-12) < 1e-5

    def test_range(self):
        for rho in (-0.1, 1.0):
            with pytest.raises(DomainError):
                err_equicorrelated_3(rho)

    def test_identity_with_lemma1(self):
        # error = 1 - E[n_c]/3 with E[n_c] = 2 + 2 P3
        for rho in np.linspace(0, 0.95, 20):
            np.testing.assert_allclose(err_equicorrelated_3(rho), 1 - expected_nc_equicorr_3(rho) / 3, atol=1e-14)


class TestArcsinBound:
    def test_half(self):
        lo, ex, hi = arcsin_bound_check(0.5)
        # upper = 0.5 * (1 + (pi - 2) / 2 * 0.25)
        np.testing.assert_allclose([lo, ex, hi], [0.520833, 0.523599, 0.571350], atol=1e-6)

    def test_small_rho(self):
        lo, ex, hi = arcsin_bound_check(1e-6)
        np.testing.assert_allclose([lo / 1e-6, ex / 1e-6, hi / 1e-6], 1.0, atol=1e-10)

    def test_grid(self):
        for rho in np.linspace(0, 1, 1002)[1:-1]:
            lo, ex, hi = arcsin_bound_check(rho)
            assert lo < ex < hi

    def test_open_interval(self):
        with pytest.raises(DomainError):
            arcsin_bound_check(0.0)


class TestConsensusSize:
    def test_examples(self):
        d = consensus_size_dist(np.ones((4, 5), dtype=int))
        np.testing.assert_array_equal(d.pmf, [0, 0, 0, 0, 0, 1])
        d = consensus_size_dist([[0, 0, 1], [0, 0, 0]])
        np.testing.assert_allclose(d.pmf, [0, 0, 0.5, 0.5])

    def test_equicorrelated_mean(self):
        ds = gen_equicorr_voters(3, 0.5, 100_000, 0.0, np.random.default_rng(0))
        assert abs(consensus_size_dist(ds.votes).mean() - expected_nc_equicorr_3(0.5)) <= 0.01

    def test_ties_excluded_with_warning(self):
        with pytest.warns(UserWarning, match="tied"):
            d = consensus_size_dist([[0, 1], [1, 1], [0, 0], [1, 0]])
        assert d.n_tied == 2 and d.n_total == 4
        np.testing.assert_allclose(d.pmf, [0, 0, 1])

    def test_all_tied(self):
        with pytest.raises(DomainError):
            consensus_size_dist([[0, 1], [1, 0]])

    def test_invalid_pmf(self):
        with pytest.raises(DomainError):
            ConsensusSizeDist(3, [0.5, 0.5, 0.5, 0.0])


class TestSimulation:
    def test_full_panel_zero(self):
        pop = split_vote_population(10, [6], [1.0], 100, np.random.default_rng(0))
        assert simulate_random_error(pop, 10, 1000, np.random.default_rng(0)).value == 0.0

    @pytest.mark.parametrize("n_q,expected", [(2, 0.4), (5, 0.2619)])
    def test_simple_example(self, n_q, expected):
        rng = np.random.default_rng(n_q)
        pop = split_vote_population(10, [6], [1.0], 10_000, rng)
        est = simulate_random_error(pop, n_q, 200_000, rng)
        assert abs(est.value - expected) <= 0.01
        np.testing.assert_allclose(est.se, math.sqrt(est.value * (1 - est.value) / 200_000))

    def test_reproducible(self):
        pop = np.random.default_rng(0).integers(0, 3, (50, 5))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = simulate_random_error(pop, 2, 5000, np.random.default_rng(4))
            b = simulate_random_error(pop, 2, 5000, np.random.default_rng(4))
        assert a == b

    def test_bad_nq(self):
        with pytest.raises(DomainError):
            simulate_random_error([[0, 0, 1]], 4, 10, np.random.default_rng(0))
