"""Error rates for querying a random subset of the expert panel.

Closed forms (hypergeometric error for odd subset sizes, the one-or-two
expert identity, the trivariate equicorrelated orthant result) sit next to
Monte-Carlo simulators that act as independent checks on them.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from . import kernels
from .errors import DomainError

EXACT_MAX_H = 30


@dataclass(frozen=True)
class ConsensusSizeDist:
    """Distribution of the consensus-set size ``n_c`` for an ``H``-expert panel.

    ``pmf[n]`` is the probability that exactly ``n`` experts vote for the
    consensus label.  ``n_tied`` counts the examples dropped because their
    mode was not unique.
    """

    H: int
    pmf: np.ndarray
    n_tied: int = 0
    n_total: int = 0

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float)
        if pmf.shape != (self.H + 1,):
            raise DomainError(f"pmf must have H+1={self.H + 1} entries")
        if np.any(pmf < -1e-15) or abs(pmf.sum() - 1.0) > 1e-9:
            raise DomainError("pmf must be nonnegative and sum to one")
        object.__setattr__(self, "pmf", np.clip(pmf, 0.0, None))

    @classmethod
    def point_mass(cls, H, n_c):
        pmf = np.zeros(H + 1)
        pmf[n_c] = 1.0
        return cls(H, pmf)

    @classmethod
    def from_dict(cls, H, probs):
        pmf = np.zeros(H + 1)
        for n_c, p in probs.items():
            pmf[int(n_c)] += p
        return cls(H, pmf)

    @property
    def support(self):
        return np.flatnonzero(self.pmf > 0)

    def mean(self):
        return float(np.dot(np.arange(self.H + 1), self.pmf))

    def strict_majority(self):
        """True when every size with positive mass exceeds H/2."""
        return bool(np.all(self.support > self.H // 2))


class MCEstimate(NamedTuple):
    value: float
    se: float


def err_random_1or2(d: ConsensusSizeDist):
    """Error of predicting the consensus from one (or two) random experts."""
    return 1.0 - d.mean() / d.H


def _check_hg(H, n_c, n_q):
    if not (0 <= n_c <= H and 1 <= n_q <= H):
        raise DomainError(f"need 0 <= n_c <= H and 1 <= n_q <= H (got H={H}, n_c={n_c}, n_q={n_q})")


def _log_comb(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def hypergeom_cdf(r, H, n_c, n_q, exact=False):
    """P(at most ``r`` consensus experts among ``n_q`` drawn without replacement).

    The panel has ``H`` experts, ``n_c`` of them in the consensus set.  With
    ``exact=True`` (H <= 30) the sum is done in rational arithmetic and a
    :class:`fractions.Fraction` is returned.
    """
    H, n_c, n_q, r = int(H), int(n_c), int(n_q), int(r)
    _check_hg(H, n_c, n_q)
    if r < -1:
        raise DomainError("r must be at least -1")
    lo = max(0, n_q - (H - n_c))
    hi = min(r, n_c, n_q)
    if exact:
        if H > EXACT_MAX_H:
            raise DomainError(f"exact mode is limited to H <= {EXACT_MAX_H}")
        num = sum(math.comb(n_c, i) * math.comb(H - n_c, n_q - i) for i in range(lo, hi + 1))
        return Fraction(num, math.comb(H, n_q))
    if hi < lo:
        return 0.0
    i = np.arange(lo, hi + 1)
    logs = _log_comb(n_c, i) + _log_comb(H - n_c, n_q - i) - _log_comb(H, n_q)
    return float(min(1.0, np.exp(logs).sum()))


def err_random_nq(d: ConsensusSizeDist, n_q, exact=False):
    """Error of the majority of ``n_q`` (odd) randomly chosen experts.

    Valid when every panel has a strict-majority consensus and all dissenting
    votes go to one other class; the second condition is the caller's to
    guarantee.
    """
    n_q = int(n_q)
    if n_q % 2 == 0:
        raise DomainError("n_q must be odd")
    if not d.strict_majority():
        raise DomainError("every consensus set must be a strict majority of the panel")
    r = n_q // 2
    if exact:
        return sum(
            (Fraction(d.pmf[n]).limit_denominator(10**12) * hypergeom_cdf(r, d.H, n, n_q, exact=True) for n in d.support),
            Fraction(0),
        )
    return float(sum(d.pmf[n] * hypergeom_cdf(r, d.H, n, n_q) for n in d.support))


def _check_rho(rho, open_left=False):
    ok = (0 < rho < 1) if open_left else (0 <= rho < 1)
    if not ok:
        raise DomainError(f"rho={rho} outside the valid range")


def P3(rho):
    """Probability that three equicorrelated standard normals share a sign."""
    _check_rho(rho)
    return 0.125 + 3.0 * math.asin(rho) / (4.0 * math.pi)


def expected_nc_equicorr_3(rho):
    """Mean consensus-set size for three equicorrelated sign voters."""
    return 2.0 + 2.0 * P3(rho)


def err_equicorrelated_3(rho):
    """Random one-or-two expert error for three equicorrelated sign voters."""
    _check_rho(rho)
    return 0.25 - math.asin(rho) / (2.0 * math.pi)


def arcsin_bound_check(rho):
    """The two polynomial bounds around ``arcsin(rho)`` for rho in (0, 1)."""
    _check_rho(rho, open_left=True)
    lower = rho * (1.0 + rho * rho / 6.0)
    upper = rho * (1.0 + (math.pi - 2.0) / 2.0 * rho * rho)
    return lower, math.asin(rho), upper


def _mode_counts(pop):
    pop = np.asarray(pop, dtype=np.int64)
    if pop.ndim != 2 or pop.shape[0] == 0 or pop.shape[1] == 0:
        raise DomainError("vote population must be a non-empty T x H matrix")
    if pop.min() < 0:
        raise DomainError("votes must be nonnegative class indices")
    K = int(pop.max()) + 1
    T, H = pop.shape
    counts = np.zeros((T, K), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(T), H), pop.ravel()), 1)
    top = counts.max(axis=1)
    tied = (counts == top[:, None]).sum(axis=1) > 1
    return pop, top, tied


def consensus_size_dist(pop):
    """Empirical distribution of ``n_c`` over a population of panel votes.

    Rows whose mode is not unique are excluded; their number is stored in
    ``n_tied`` and reported with a warning.
    """
    pop, top, tied = _mode_counts(pop)
    T, H = pop.shape
    if tied.all():
        raise DomainError("every example has a tied consensus")
    if tied.any():
        warnings.warn(f"{int(tied.sum())} of {T} examples have tied modes and were excluded", stacklevel=2)
    pmf = np.bincount(top[~tied], minlength=H + 1).astype(float)
    return ConsensusSizeDist(H, pmf / pmf.sum(), n_tied=int(tied.sum()), n_total=T)


def simulate_random_error(pop, n_q, trials, rng):
    """Monte-Carlo error of predicting the panel consensus from ``n_q`` random experts.

    Each trial picks an example uniformly, draws ``n_q`` experts without
    replacement and compares the subset's mode (ties broken uniformly) with
    the panel's.  Examples with a tied panel are left out, as in
    :func:`consensus_size_dist`.  Returns the estimate and its standard error.
    """
    pop, _, tied = _mode_counts(pop)
    T, H = pop.shape
    n_q, trials = int(n_q), int(trials)
    if not 1 <= n_q <= H:
        raise DomainError(f"n_q must lie in 1..{H}")
    if trials < 1:
        raise DomainError("trials must be positive")
    if tied.all():
        raise DomainError("every example has a tied consensus")
    keep = np.ascontiguousarray(pop[~tied])
    if n_q == H:
        return MCEstimate(0.0, 0.0)
    errors = kernels.subset_error_count(keep, int(keep.max()) + 1, n_q, trials, rng)
    p = errors / trials
    return MCEstimate(p, math.sqrt(max(p * (1.0 - p), 0.0) / trials))


def split_vote_population(H, n_c_values, probs, T, rng):
    """Votes where ``n_c`` experts say class 0 and the rest say class 1.

    ``n_c`` is drawn per example from ``probs`` over ``n_c_values``; expert
    positions are shuffled so identity carries no information.
    """
    n_c = rng.choice(np.asarray(n_c_values), size=T, p=np.asarray(probs, dtype=float))
    pop = (np.arange(H)[None, :] >= n_c[:, None]).astype(np.int64)
    return rng.permuted(pop, axis=1)
