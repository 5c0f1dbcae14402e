"""Consensus prediction from a partially queried panel, and which expert to ask next.

Given posterior draws of the panel parameters, every draw gets one fresh
sample of the expert logits conditioned on the classifier logits.  Expert
votes are then simulated from the tempered softmax, the observed votes
enter as importance weights, and the aggregate of each completed panel is
tallied.  All weights live in log space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import DomainError, InferenceError
from .posterior import PosteriorSampleSet
from .simplex import AggregationFn, entropy, floor_probs, is_determined, to_logits

POLICIES = ("bayes", "random", "fixed-order")
# expected entropies closer than this count as tied
ENTROPY_TIE_TOL = 1e-12


@dataclass
class QueryState:
    """Votes gathered so far for one example.

    ``votes[i]`` is the class reported by expert ``i`` or -1 if it has not
    been asked.  ``tie_u`` is the panel's own tie-break draw: a consensus
    tie among all H votes is settled the same way in every simulated panel
    and in the real one.
    """

    votes: np.ndarray
    model_logits: np.ndarray
    tie_u: float = 0.5

    def __post_init__(self):
        self.votes = np.asarray(self.votes, dtype=np.int64).copy()
        self.model_logits = np.asarray(self.model_logits, dtype=float).ravel()
        if self.votes.ndim != 1 or np.any(self.votes < -1):
            raise DomainError("votes must be a vector of class indices or -1")
        if not 0.0 <= self.tie_u < 1.0:
            raise DomainError("tie_u must lie in [0, 1)")

    @classmethod
    def fresh(cls, model_probs, H, tie_u=0.5):
        p, _ = floor_probs(np.asarray(model_probs, dtype=float))
        return cls(np.full(H, -1), to_logits(p).ravel(), tie_u)

    @property
    def H(self):
        return self.votes.size

    @property
    def observed(self):
        return frozenset(np.flatnonzero(self.votes >= 0).tolist())

    @property
    def unobserved(self):
        return frozenset(np.flatnonzero(self.votes < 0).tolist())

    @property
    def vote_map(self):
        return {int(i): int(self.votes[i]) for i in np.flatnonzero(self.votes >= 0)}

    def with_vote(self, j, k):
        if self.votes[j] >= 0:
            raise DomainError(f"expert {j} has already been observed")
        out = QueryState(self.votes, self.model_logits, self.tie_u)
        out.votes[j] = k
        return out


class ConsensusDistribution(NamedTuple):
    probs: np.ndarray
    entropy: float
    est_error: float

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=float)
        K = probs.size
        # summing the other classes keeps tiny errors that 1 - max would round to zero
        others = np.delete(probs, int(np.argmax(probs)))
        err = min(max(float(others.sum()), 0.0), 1.0 - 1.0 / K)
        return cls(probs, entropy(probs), err)

    @property
    def prediction(self):
        return int(np.argmax(self.probs))


def _normalise_log_weights(logw):
    m = np.max(logw)
    if not np.isfinite(m):
        raise InferenceError(
            "every importance weight is zero; accumulate the weights in log space "
            "and normalise with a max-shift"
        )
    w = np.exp(logw - m)
    return w / w.sum()


class VoteSimulator:
    """One conditional draw of the expert logits and votes per posterior sample.

    Built once per example; every query made for that example reuses the
    same draws, so successive decisions compare like with like.  With
    ``exchangeable=True`` each draw's expert blocks are randomly permuted,
    which turns the model into one where expert identity carries no
    information.
    """

    def __init__(self, S: PosteriorSampleSet, model_logits, rng, exchangeable=False):
        dims = S.dims
        self.dims = dims
        self.K, self.H, k1 = dims.K, dims.H, dims.k1
        zM = np.asarray(model_logits, dtype=float).ravel()
        if zM.size != dims.dM:
            raise DomainError(f"expected {dims.dM} classifier logits, got {zM.size}")
        N = len(S)
        A, LHH = S.conditional_blocks
        mean = S.mu[:, dims.dM :] + np.einsum("nij,nj->ni", A, zM - S.mu[:, : dims.dM])
        z = mean + np.einsum("nij,nj->ni", LHH, rng.standard_normal((N, dims.dH)))
        a = z.reshape(N, self.H, k1) / S.tau[:, None, None]
        full = np.concatenate([a, np.zeros((N, self.H, 1))], axis=-1)
        m = full.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(full - m).sum(axis=-1, keepdims=True))
        self.logp = full - lse
        if exchangeable:
            perm = np.argsort(rng.random((N, self.H)), axis=1)
            self.logp = np.take_along_axis(self.logp, perm[:, :, None], axis=1)
        self.p = np.exp(self.logp)
        self.draws = kernels.categorical_draw(np.ascontiguousarray(self.p), rng.random((N, self.H)))
        self.N = N

    def log_weights(self, q: QueryState):
        obs = np.flatnonzero(q.votes >= 0)
        if obs.size == 0:
            return np.zeros(self.N)
        return self.logp[:, obs, q.votes[obs]].sum(axis=1)

    def _labels(self, votes, f: AggregationFn, tie_u):
        panel = self.draws.copy()
        obs = votes >= 0
        panel[:, obs] = votes[obs]
        return kernels.aggregate_batch(
            np.ascontiguousarray(panel), f.code, f.positive_class, self.K, np.full(self.N, tie_u)
        )

    def _tally(self, labels, logw):
        counts = np.bincount(labels, weights=_normalise_log_weights(logw), minlength=self.K)[: self.K]
        # renormalise so a unanimous tally is exactly one
        return counts / counts.sum()

    def consensus(self, q: QueryState, f: AggregationFn):
        if not q.unobserved:
            label = int(kernels.aggregate_batch(
                q.votes[None, :], f.code, f.positive_class, self.K, np.array([q.tie_u])
            )[0])
            probs = np.zeros(self.K)
            probs[label] = 1.0
            return ConsensusDistribution.from_probs(probs)
        probs = self._tally(self._labels(q.votes, f, q.tie_u), self.log_weights(q))
        return ConsensusDistribution.from_probs(probs)

    def vote_posterior(self, q: QueryState, j):
        """p(y_j = k | observed votes), averaging the tempered softmax over weighted draws."""
        if q.votes[j] >= 0:
            raise DomainError(f"expert {j} has already been observed")
        w = _normalise_log_weights(self.log_weights(q))
        return w @ self.p[:, j, :]

    def expected_entropy(self, q: QueryState, j, f: AggregationFn):
        pj = self.vote_posterior(q, j)
        total = 0.0
        for k in range(self.K):
            if pj[k] > 0.0:
                total += pj[k] * self.consensus(q.with_vote(j, k), f).entropy
        return float(total)

    def select(self, q: QueryState, f: AggregationFn):
        U = sorted(q.unobserved)
        if not U:
            return None
        scores = np.array([self.expected_entropy(q, j, f) for j in U])
        best = np.flatnonzero(scores <= scores.min() + ENTROPY_TIE_TOL)[0]
        return int(U[best])


def _check_state(S, q):
    if len(S) == 0:
        raise DomainError("the posterior sample set is empty")
    if q.H != S.dims.H:
        raise DomainError(f"query state has {q.H} experts, samples have {S.dims.H}")
    if np.any(q.votes >= S.dims.K):
        raise DomainError("vote outside 0..K-1")


def consensus_posterior(S: PosteriorSampleSet, q: QueryState, f: AggregationFn, rng):
    """Distribution of the panel's aggregate label given the votes seen so far."""
    _check_state(S, q)
    f.check(S.dims.K)
    return VoteSimulator(S, q.model_logits, rng).consensus(q, f)


def expert_vote_posterior(S: PosteriorSampleSet, q: QueryState, j, rng):
    """Predictive distribution of unobserved expert ``j``'s vote."""
    _check_state(S, q)
    return VoteSimulator(S, q.model_logits, rng).vote_posterior(q, j)


def expected_entropy_after(S: PosteriorSampleSet, q: QueryState, j, f: AggregationFn, rng):
    """Expected entropy of the aggregate once expert ``j`` has answered."""
    _check_state(S, q)
    f.check(S.dims.K)
    if q.votes[j] >= 0:
        raise DomainError(f"expert {j} has already been observed")
    return VoteSimulator(S, q.model_logits, rng).expected_entropy(q, j, f)


def select_next_expert(S: PosteriorSampleSet, q: QueryState, f: AggregationFn, rng):
    """Unobserved expert with the lowest expected entropy (lowest index on ties), or None."""
    _check_state(S, q)
    f.check(S.dims.K)
    if not q.unobserved:
        return None
    return VoteSimulator(S, q.model_logits, rng).select(q, f)


@dataclass
class PerExampleOutcome:
    prediction: int
    n_queries: int
    est_error: float
    queried: tuple
    full_panel_observed: bool
    probs: np.ndarray = field(repr=False, default=None)

    @property
    def confidence(self):
        return 1.0 - self.est_error


def _should_stop(dist, q, f, K, threshold):
    if not q.unobserved:
        return True
    if threshold == 0.0:
        # an estimated error of zero can be a Monte-Carlo accident, so with
        # a zero threshold only a logically settled aggregate ends querying
        obs = q.votes[q.votes >= 0]
        return is_determined(obs, len(q.unobserved), f, K)
    return dist.est_error <= threshold


def run_example(S: PosteriorSampleSet, record, f: AggregationFn, threshold, policy, rng, tie_u=0.5, order=None,
                exchangeable=False, policy_rng=None):
    """Query experts for one example until the estimated error is at most ``threshold``.

    ``record`` supplies the classifier probabilities and, for replay, every
    expert's true vote.  ``policy`` is ``"bayes"`` (lowest expected
    entropy), ``"random"`` or ``"fixed-order"`` (``order``, default by
    index).  With ``threshold == 0`` querying stops only once the aggregate
    can no longer change.  ``exchangeable`` ignores expert identity in the
    posterior (see :class:`VoteSimulator`).  Random picks use ``policy_rng``
    when given, so they do not shift the simulation draws taken from ``rng``.
    """
    if not 0.0 <= threshold < 1.0:
        raise DomainError("threshold must lie in [0, 1)")
    if policy not in POLICIES:
        raise DomainError(f"policy must be one of {POLICIES}")
    dims = S.dims
    f.check(dims.K)
    true_votes = np.asarray(record.expert_votes, dtype=np.int64)
    q = QueryState.fresh(record.model_probs, dims.H, tie_u)
    _check_state(S, q)
    sim = VoteSimulator(S, q.model_logits, rng, exchangeable)
    order = list(range(dims.H)) if order is None else [int(j) for j in order]
    queried = []
    while True:
        dist = sim.consensus(q, f)
        if _should_stop(dist, q, f, dims.K, threshold):
            break
        if policy == "bayes":
            j = sim.select(q, f)
        elif policy == "random":
            j = int((policy_rng or rng).choice(sorted(q.unobserved)))
        else:
            j = next(i for i in order if q.votes[i] < 0)
        q = q.with_vote(j, int(true_votes[j]))
        queried.append(j)
    return PerExampleOutcome(
        prediction=dist.prediction,
        n_queries=len(queried),
        est_error=dist.est_error,
        queried=tuple(queried),
        full_panel_observed=not q.unobserved,
        probs=dist.probs,
    )
