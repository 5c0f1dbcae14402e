"""Comparison methods: exchangeable experts with epsilon-greedy ordering, and confusion matrices.

Both learn only from examples whose panel consensus was pinned down by the
votes that were actually collected.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax

from .errors import DomainError
from .inference import ConsensusDistribution, PerExampleOutcome, QueryState, VoteSimulator, run_example
from .posterior import History
from .simplex import floor_probs

PRIOR_ACCURACY = 0.5
PRIOR_COUNT = 2.0
DEFAULT_EPSILON = 0.1
LOG_TEMP_BOUNDS = (-3.0, 3.0)


# ------------------------------------------------------------- expert accuracy


@dataclass(frozen=True)
class ExpertStats:
    """Agreement counts of each expert with the determined consensus."""

    correct: np.ndarray
    total: np.ndarray
    prior_accuracy: float = PRIOR_ACCURACY
    prior_count: float = PRIOR_COUNT

    def __post_init__(self):
        c = np.asarray(self.correct, dtype=float)
        t = np.asarray(self.total, dtype=float)
        if c.shape != t.shape or np.any(c < 0) or np.any(c > t):
            raise DomainError("need 0 <= correct <= total per expert")
        object.__setattr__(self, "correct", c)
        object.__setattr__(self, "total", t)

    @classmethod
    def fresh(cls, H):
        return cls(np.zeros(H), np.zeros(H))

    @property
    def H(self):
        return self.correct.size

    @property
    def accuracy(self):
        return (self.correct + self.prior_accuracy * self.prior_count) / (self.total + self.prior_count)

    def update(self, votes, consensus):
        """Count every observed vote against ``consensus``; no-op when it is None."""
        if consensus is None:
            return self
        v = np.asarray(votes, dtype=np.int64)
        seen = v >= 0
        return replace(self, correct=self.correct + (seen & (v == consensus)), total=self.total + seen)


def eps_greedy_order(stats: ExpertStats, epsilon, rng):
    """Query order: at each position a uniform pick with probability ``epsilon``, else the most accurate left."""
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError("epsilon must lie in [0, 1]")
    # stable sort keeps lower indices first among equal accuracies
    remaining = list(np.argsort(-stats.accuracy, kind="stable"))
    order = []
    while remaining:
        if epsilon > 0 and rng.random() < epsilon:
            order.append(int(remaining.pop(int(rng.integers(len(remaining))))))
        else:
            order.append(int(remaining.pop(0)))
    return order


def random_policy(q: QueryState, rng):
    """An unobserved expert chosen uniformly."""
    U = sorted(q.unobserved)
    if not U:
        raise DomainError("every expert has already been queried")
    return int(U[rng.integers(len(U))])


# ------------------------------------------------------------------ INFEXP


def scramble_history(history: History, rng):
    """Copy of ``history`` with each record's expert slots randomly permuted.

    A model fitted to it cannot tell experts apart, which is the
    exchangeable-expert assumption.
    """
    votes = history.votes
    perm = np.argsort(rng.random(votes.shape), axis=1)
    out = History.from_arrays(history.K, history.M, history.H, history.model_logits,
                              np.take_along_axis(votes, perm, axis=1))
    out._ids = list(history.ids)
    return out


def infexp_consensus_posterior(S, q: QueryState, f, rng):
    """Consensus posterior when experts are exchangeable (identity ignored)."""
    return VoteSimulator(S, q.model_logits, rng, exchangeable=True).consensus(q, f)


def run_infexp_example(S, record, f, threshold, stats: ExpertStats, rng, epsilon=DEFAULT_EPSILON, tie_u=0.5,
                       policy_rng=None):
    """One example under the exchangeable model, asking experts in epsilon-greedy order."""
    order = eps_greedy_order(stats, epsilon, policy_rng or rng)
    return run_example(S, record, f, threshold, "fixed-order", rng, tie_u=tie_u, order=order, exchangeable=True)


# --------------------------------------------------------- confusion matrices


@dataclass(frozen=True)
class ConfusionModel:
    """Per-expert confusion counts (rows: consensus class, columns: vote) and a classifier temperature."""

    counts: np.ndarray
    smoothing: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=float)
        if c.ndim != 3 or c.shape[1] != c.shape[2]:
            raise DomainError("counts must be H x K x K")
        if not self.smoothing > 0 or np.any(c < self.smoothing - 1e-12):
            raise DomainError("every count must be at least the smoothing constant > 0")
        if not self.temperature > 0:
            raise DomainError("temperature must be positive")
        object.__setattr__(self, "counts", c)

    @classmethod
    def fresh(cls, H, K, smoothing=1.0):
        return cls(np.full((H, K, K), float(smoothing)), smoothing)

    @property
    def H(self):
        return self.counts.shape[0]

    @property
    def K(self):
        return self.counts.shape[1]

    @property
    def rates(self):
        return self.counts / self.counts.sum(axis=2, keepdims=True)

    def calibrated(self, model_probs):
        """Temperature-scaled classifier distribution, averaged over classifiers."""
        p, _ = floor_probs(np.asarray(model_probs, dtype=float).reshape(-1, self.K))
        return np.exp(log_softmax(np.log(p) / self.temperature, axis=-1)).mean(axis=0)


def confusion_posterior(cm: ConfusionModel, model_probs, votes):
    """p(consensus = k) from the calibrated classifier and each observed vote's confusion row."""
    v = np.asarray(votes, dtype=np.int64)
    logp = np.log(cm.calibrated(model_probs))
    logr = np.log(cm.rates)
    for i in np.flatnonzero(v >= 0):
        logp = logp + logr[i, :, v[i]]
    return ConsensusDistribution.from_probs(np.exp(log_softmax(logp)))


def update_confusion(cm: ConfusionModel, votes, consensus):
    """Add one count per observed vote in the consensus row; no-op when the consensus is unknown."""
    if consensus is None:
        return cm
    v = np.asarray(votes, dtype=np.int64)
    counts = cm.counts.copy()
    for i in np.flatnonzero(v >= 0):
        counts[i, consensus, v[i]] += 1.0
    return replace(cm, counts=counts)


def fit_temperature(model_probs, labels):
    """Temperature maximising the likelihood of ``labels`` under the scaled classifier."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 1.0
    p = np.asarray(model_probs, dtype=float)
    p = p.reshape(labels.size, -1, p.shape[-1])
    logp, _ = floor_probs(p)
    logp = np.log(logp)

    def nll(log_t):
        lp = log_softmax(logp / np.exp(log_t), axis=-1)
        return -float(np.log(np.exp(lp).mean(axis=1))[np.arange(labels.size), labels].sum())

    res = minimize_scalar(nll, bounds=LOG_TEMP_BOUNDS, method="bounded")
    return float(np.exp(res.x))


def confusion_expected_entropy(cm: ConfusionModel, model_probs, votes, j):
    """Expected entropy of the confusion posterior after expert ``j`` answers."""
    v = np.asarray(votes, dtype=np.int64)
    post = confusion_posterior(cm, model_probs, v).probs
    pj = post @ cm.rates[j]
    total = 0.0
    for k in range(cm.K):
        if pj[k] > 0:
            vk = v.copy()
            vk[j] = k
            total += pj[k] * confusion_posterior(cm, model_probs, vk).entropy
    return float(total)


def confusion_select(cm: ConfusionModel, model_probs, votes):
    U = np.flatnonzero(np.asarray(votes) < 0)
    if U.size == 0:
        return None
    scores = np.array([confusion_expected_entropy(cm, model_probs, votes, j) for j in U])
    return int(U[np.argmin(scores)])


def run_confusion_example(cm: ConfusionModel, record, threshold):
    """Query by lowest expected entropy under the confusion model until est_error <= threshold."""
    if not 0.0 <= threshold < 1.0:
        raise DomainError("threshold must lie in [0, 1)")
    true_votes = np.asarray(record.expert_votes, dtype=np.int64)
    votes = np.full(cm.H, -1, dtype=np.int64)
    queried = []
    while True:
        dist = confusion_posterior(cm, record.model_probs, votes)
        if dist.est_error <= threshold or np.all(votes >= 0):
            break
        j = confusion_select(cm, record.model_probs, votes)
        votes[j] = true_votes[j]
        queried.append(j)
    return PerExampleOutcome(
        prediction=dist.prediction,
        n_queries=len(queried),
        est_error=dist.est_error,
        queried=tuple(queried),
        full_panel_observed=bool(np.all(votes >= 0)),
        probs=dist.probs,
    )
