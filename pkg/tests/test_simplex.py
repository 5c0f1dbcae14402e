import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consensus_query.errors import DomainError
from consensus_query.simplex import (
    AggregationFn,
    aggregate,
    aggregate_u,
    determined_label,
    entropy,
    floor_probs,
    from_logits,
    is_determined,
    log_temper,
    temper,
    to_logits,
)

CONS = AggregationFn("consensus")
ANY = AggregationFn("any_positive", positive_class=1)
ALL = AggregationFn("unanimous_positive", positive_class=1)


class TestLogits:
    def test_examples(self):
        np.testing.assert_allclose(to_logits([0.5, 0.5]), [0.0])
        np.testing.assert_allclose(to_logits([1 / 3, 1 / 3, 1 / 3]), [0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(to_logits([0.8, 0.2]), [np.log(4.0)])
        np.testing.assert_allclose(from_logits([0.0]), [0.5, 0.5])
        np.testing.assert_allclose(from_logits([0.0, 0.0]), [1 / 3, 1 / 3, 1 / 3])
        np.testing.assert_allclose(from_logits([1.386294]), [0.8, 0.2], atol=1e-6)
        np.testing.assert_allclose(from_logits([np.log(4.0)]), [0.8, 0.2], atol=1e-12)

    def test_rejects_zero_probability(self):
        with pytest.raises(DomainError):
            to_logits([1.0, 0.0])

    def test_rejects_bad_vectors(self):
        with pytest.raises(DomainError):
            to_logits([0.6, 0.6])
        with pytest.raises(DomainError):
            to_logits([1.0])
        with pytest.raises(DomainError):
            from_logits([np.inf])
        with pytest.raises(DomainError):
            from_logits([np.nan, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(K=st.integers(2, 6), seed=st.integers(0, 2**32 - 1))
    def test_round_trip(self, K, seed):
        p = np.random.default_rng(seed).dirichlet(np.ones(K))
        p, _ = floor_probs(p)
        np.testing.assert_allclose(from_logits(to_logits(p)), p, atol=1e-9)

    def test_extreme_logits_stay_finite(self):
        p = from_logits([800.0, -800.0])
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(), 1.0)

    def test_stacked_input(self):
        P = np.random.default_rng(0).dirichlet(np.ones(4), size=(5, 3))
        np.testing.assert_allclose(from_logits(to_logits(P)), P, atol=1e-12)


class TestTemper:
    def test_examples(self):
        np.testing.assert_allclose(temper([0.0, 0.0], 0.5), [1 / 3] * 3)
        np.testing.assert_allclose(temper([1.386294], 1.0), [0.8, 0.2], atol=1e-6)
        np.testing.assert_allclose(temper([np.log(4.0)], 2.0), [2 / 3, 1 / 3], atol=1e-9)

    def test_nonpositive_tau(self):
        for tau in (0.0, -1.0):
            with pytest.raises(DomainError):
                temper([0.1], tau)

    @settings(max_examples=100, deadline=None)
    @given(z=st.lists(st.floats(-20, 20), min_size=1, max_size=5))
    def test_unit_temperature_is_from_logits(self, z):
        np.testing.assert_allclose(temper(z, 1.0), from_logits(z), atol=1e-12)
        np.testing.assert_allclose(np.exp(log_temper(np.array(z), 1.0)), from_logits(z), atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(z=st.floats(-10, 10), t1=st.floats(0.05, 10), t2=st.floats(0.05, 10))
    def test_monotone_in_tau(self, z, t1, t2):
        lo, hi = sorted((t1, t2))
        assert abs(temper([z], hi)[0] - 0.5) <= abs(temper([z], lo)[0] - 0.5) + 1e-12

    def test_large_tau_tends_to_uniform(self):
        np.testing.assert_allclose(temper([3.0, -2.0], 1e8), [1 / 3] * 3, atol=1e-7)


class TestEntropy:
    def test_values(self):
        assert entropy([1.0, 0.0]) == 0.0
        np.testing.assert_allclose(entropy([0.5, 0.5]), np.log(2))
        np.testing.assert_allclose(entropy(np.full(4, 0.25)), np.log(4))


class TestAggregate:
    def test_examples(self):
        rng = np.random.default_rng(0)
        assert aggregate([1, 1, 2], CONS, rng) == 1
        assert aggregate([0, 1, 0], ANY, rng) == 1
        assert aggregate([1, 0, 1], ALL, rng) == 0
        assert aggregate([1, 1, 1], ALL, rng) == 1
        assert aggregate([0, 0], ANY, rng) == 0

    def test_empty(self):
        with pytest.raises(DomainError):
            aggregate([], CONS, np.random.default_rng(0))

    def test_tie_frequency(self):
        rng = np.random.default_rng(1)
        out = np.array([aggregate([0, 1, 0, 1], CONS, rng) for _ in range(10_000)])
        assert abs(out.mean() - 0.5) <= 0.02

    def test_tie_break_by_u(self):
        assert aggregate_u([2, 0, 1], CONS, 0.0) == 0
        assert aggregate_u([2, 0, 1], CONS, 0.5) == 1
        assert aggregate_u([2, 0, 1], CONS, 0.99) == 2

    @settings(max_examples=200, deadline=None)
    @given(votes=st.lists(st.integers(0, 3), min_size=1, max_size=9), u=st.floats(0, 0.999))
    def test_duplicate_mode_keeps_consensus(self, votes, u):
        counts = np.bincount(votes)
        if (counts == counts.max()).sum() > 1:
            return
        mode = int(np.argmax(counts))
        assert aggregate_u(votes + [mode], CONS, u) == mode

    def test_aliases_and_validation(self):
        assert AggregationFn("any").kind == "any_positive"
        assert AggregationFn("all").kind == "unanimous_positive"
        with pytest.raises(DomainError):
            AggregationFn("median")
        with pytest.raises(DomainError):
            ANY.check(3)
        with pytest.raises(DomainError):
            AggregationFn("any", positive_class=2).check(2)


class TestDetermined:
    def test_decided_majority(self):
        assert is_determined([1, 1], 1, CONS, 2)
        assert not is_determined([0, 1], 1, CONS, 2)
        assert not is_determined([], 3, CONS, 2)
        assert is_determined([0, 1], 0, CONS, 2)

    def test_any_and_all(self):
        assert is_determined([1], 2, ANY, 2)
        assert not is_determined([0], 2, ANY, 2)
        assert is_determined([0], 2, ALL, 2)
        assert not is_determined([1], 2, ALL, 2)

    def test_possible_tie_is_undetermined(self):
        # 2 vs 1 with one vote left can still end 2-2
        assert not is_determined([0, 0, 1], 1, CONS, 3)

    @settings(max_examples=300, deadline=None)
    @given(
        votes=st.lists(st.integers(-1, 2), min_size=1, max_size=6),
        u=st.floats(0, 0.999),
        kind=st.sampled_from(["consensus", "any_positive", "unanimous_positive"]),
    )
    def test_determined_label_matches_enumeration(self, votes, u, kind):
        K = 3 if kind == "consensus" else 2
        v = np.array([min(x, K - 1) for x in votes])
        f = AggregationFn(kind)
        missing = np.flatnonzero(v < 0)
        labels = set()
        for fill in np.ndindex(*([K] * missing.size)):
            w = v.copy()
            w[missing] = fill
            labels.add(aggregate_u(w, f, u, K))
        got = determined_label(v, f, K, u)
        if got is not None:
            assert labels == {got}
        elif missing.size:
            # undetermined is only reported when the label could change or a tie could be reached
            obs = v[v >= 0]
            counts = np.sort(np.bincount(obs, minlength=K))[::-1] if obs.size else np.zeros(2)
            assert len(labels) > 1 or counts[0] <= counts[1] + missing.size


class TestFloor:
    def test_floor_renormalises(self):
        p, raised = floor_probs([1.0, 0.0])
        assert raised
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(), 1.0)
        q, raised = floor_probs([0.3, 0.7])
        assert not raised
        np.testing.assert_array_equal(q, [0.3, 0.7])
