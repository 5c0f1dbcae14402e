"""Probability-simplex and logit-space primitives.

Class labels are 0-based everywhere inside the package (``0..K-1``); the
line-delimited dataset format stores them 1-based.  Logits are taken against
the last class, so a probability vector of length K maps to K-1 log-odds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

PROB_FLOOR = 1e-12

CONSENSUS = "consensus"
ANY_POSITIVE = "any_positive"
UNANIMOUS_POSITIVE = "unanimous_positive"
_KINDS = (CONSENSUS, ANY_POSITIVE, UNANIMOUS_POSITIVE)
# integer codes shared with the compiled kernels
KIND_CODES = {CONSENSUS: 0, ANY_POSITIVE: 1, UNANIMOUS_POSITIVE: 2}
_ALIASES = {"any": ANY_POSITIVE, "all": UNANIMOUS_POSITIVE}


def _as_prob(theta, atol=1e-9):
    p = np.asarray(theta, dtype=float)
    if p.shape[-1] < 2:
        raise DomainError("a probability vector needs at least two classes")
    if not np.all(np.isfinite(p)):
        raise DomainError("probabilities must be finite")
    if np.any(p <= 0):
        raise DomainError("log-odds are undefined for a zero probability")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise DomainError("probabilities must sum to one")
    return p


def floor_probs(theta, floor=PROB_FLOOR):
    """Clip probabilities to ``floor`` and renormalise.

    Returns the floored array and whether any entry was raised.
    """
    p = np.asarray(theta, dtype=float)
    raised = bool(np.any(p < floor))
    if raised:
        p = np.maximum(p, floor)
        p = p / p.sum(axis=-1, keepdims=True)
    return p, raised


def to_logits(theta):
    """Additive logistic transform: ``log(theta[k] / theta[K-1])`` for k < K-1.

    Works on the last axis, so stacks of probability vectors are accepted.
    """
    p = _as_prob(theta)
    return np.log(p[..., :-1]) - np.log(p[..., -1:])


def _softmax_ext(a):
    # softmax of (a, 0) along the last axis
    m = np.maximum(a.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(a - m)
    tail = np.exp(-m)
    denom = e.sum(axis=-1, keepdims=True) + tail
    return np.concatenate([e / denom, tail / denom], axis=-1)


def from_logits(z):
    """Inverse of :func:`to_logits`: softmax of ``(z, 0)``."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise DomainError("need at least one logit")
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    return _softmax_ext(z)


def temper(z, tau):
    """Temperature-scaled categorical parameter ``softmax((z, 0) / tau)``."""
    if not tau > 0:
        raise DomainError("temperature must be positive")
    return from_logits(np.asarray(z, dtype=float) / tau)


def log_temper(z, tau):
    """Log of :func:`temper`, computed stably; broadcasts over leading axes."""
    a = np.asarray(z, dtype=float) / tau
    full = np.concatenate([a, np.zeros(a.shape[:-1] + (1,))], axis=-1)
    m = full.max(axis=-1, keepdims=True)
    return full - m - np.log(np.exp(full - m).sum(axis=-1, keepdims=True))


def entropy(p):
    """Shannon entropy in nats along the last axis (0 log 0 = 0)."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


@dataclass(frozen=True)
class AggregationFn:
    """How the panel's votes are reduced to a single label.

    ``positive_class`` is only used by the binary any/unanimous rules.
    """

    kind: str = CONSENSUS
    positive_class: int = 1

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in _KINDS:
            raise DomainError(f"unknown aggregation {self.kind!r}")
        object.__setattr__(self, "kind", kind)

    @property
    def code(self):
        return KIND_CODES[self.kind]

    def check(self, K):
        if self.kind != CONSENSUS:
            if K != 2:
                raise DomainError(f"{self.kind} aggregation needs K=2, got K={K}")
            if self.positive_class not in (0, 1):
                raise DomainError("positive_class must be 0 or 1")
        return self


def aggregate_u(votes, f: AggregationFn, u, K=None):
    """Aggregate one vote vector, resolving consensus ties with uniform ``u``.

    Among tied modes (in increasing class order) the one at position
    ``floor(u * n_ties)`` wins, so a uniform ``u`` gives a uniform choice.
    """
    v = np.asarray(votes, dtype=np.int64)
    if v.size == 0:
        raise DomainError("cannot aggregate an empty vote vector")
    if f.kind == ANY_POSITIVE:
        return f.positive_class if np.any(v == f.positive_class) else 1 - f.positive_class
    if f.kind == UNANIMOUS_POSITIVE:
        return f.positive_class if np.all(v == f.positive_class) else 1 - f.positive_class
    counts = np.bincount(v, minlength=K or 0)
    modes = np.flatnonzero(counts == counts.max())
    return int(modes[min(int(u * len(modes)), len(modes) - 1)])


def aggregate(votes, f: AggregationFn, rng):
    """Aggregate a vote vector; consensus ties are broken with ``rng``."""
    return aggregate_u(votes, f, rng.random())


def is_determined(observed_votes, n_unobserved, f: AggregationFn, K):
    """True when every completion of the unobserved votes yields the same label.

    A consensus that could still end in a tie counts as undetermined unless no
    votes remain (the tie is then settled by the panel's own tie-break).
    """
    v = np.asarray(observed_votes, dtype=np.int64)
    if n_unobserved == 0:
        return True
    if f.kind == ANY_POSITIVE:
        return bool(np.any(v == f.positive_class))
    if f.kind == UNANIMOUS_POSITIVE:
        return bool(np.any(v != f.positive_class))
    if v.size == 0:
        return False
    counts = np.sort(np.bincount(v, minlength=K))[::-1]
    return bool(counts[0] > counts[1] + n_unobserved)


def determined_label(votes, f: AggregationFn, K, tie_u=0.5):
    """The aggregate implied by a partial vote vector (-1 = unobserved), or None.

    Returns a label only when every completion of the missing votes gives
    the same aggregate; a full vector is aggregated with tie-break ``tie_u``.
    """
    v = np.asarray(votes, dtype=np.int64)
    obs = v[v >= 0]
    n_missing = int(v.size - obs.size)
    if not is_determined(obs, n_missing, f, K):
        return None
    # any completion gives the same label, so fill the gaps with class 0
    return aggregate_u(np.where(v >= 0, v, 0), f, tie_u, K)
