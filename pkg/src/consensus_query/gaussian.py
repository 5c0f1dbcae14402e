"""Dense multivariate-normal helpers: factorization, conditioning, sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import DomainError, NumericalError

JITTER = 1e-9
SYM_TOL = 1e-9


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DomainError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, atol=SYM_TOL, rtol=0):
            raise DomainError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size


@dataclass(frozen=True)
class IndexPartition:
    observed: tuple
    unobserved: tuple

    @classmethod
    def from_observed(cls, d, observed):
        obs = tuple(sorted(int(i) for i in observed))
        if len(set(obs)) != len(obs) or any(i < 0 or i >= d for i in obs):
            raise DomainError("observed indices must be distinct and within range")
        rest = tuple(i for i in range(d) if i not in set(obs))
        return cls(obs, rest)


def _potrf(a):
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    return c, info


def cholesky(g):
    """Lower Cholesky factor of ``g.cov`` (a Gaussian or a bare matrix).

    A failed factorization is retried once with ``1e-9 * I`` added; a second
    failure raises :class:`NumericalError` carrying the 0-based pivot.
    """
    cov = g.cov if isinstance(g, Gaussian) else np.asarray(g, dtype=float)
    if cov.size == 0:
        return np.zeros((0, 0))
    c, info = _potrf(cov)
    if info == 0:
        return c
    c, info = _potrf(cov + JITTER * np.eye(cov.shape[0]))
    if info == 0:
        return c
    pivot = info - 1 if info > 0 else None
    raise NumericalError(f"matrix is not positive definite (pivot {pivot})", pivot=pivot)


def condition(g: Gaussian, part: IndexPartition, observed_values):
    """Distribution of the unobserved coordinates given the observed ones."""
    x = np.atleast_1d(np.asarray(observed_values, dtype=float))
    o, u = list(part.observed), list(part.unobserved)
    if x.size != len(o):
        raise DomainError("observed_values length does not match the partition")
    if len(o) + len(u) != g.dim:
        raise DomainError("partition does not cover the Gaussian's coordinates")
    if not o:
        return g
    cov = g.cov
    try:
        L = cholesky(cov[np.ix_(o, o)])
    except NumericalError as exc:
        raise NumericalError("observed block is singular", pivot=exc.pivot) from exc
    # whiten the cross-covariance once: Σ_UO Σ_OO⁻¹ = W^T L^{-1} with W = L^{-1} Σ_OU
    W = solve_triangular(L, cov[np.ix_(o, u)], lower=True)
    r = solve_triangular(L, x - g.mean[o], lower=True)
    mean = g.mean[u] + W.T @ r
    c = cov[np.ix_(u, u)] - W.T @ W
    return Gaussian(mean, 0.5 * (c + c.T))


def sample(g: Gaussian, rng, size=None):
    """Draw ``mean + L eps`` with eps standard normal."""
    L = cholesky(g)
    shape = (g.dim,) if size is None else (size, g.dim)
    eps = rng.standard_normal(shape)
    return g.mean + eps @ L.T


def equicorrelated_cov(d, rho):
    """Unit-variance matrix with every off-diagonal entry equal to ``rho``."""
    if int(d) < 1:
        raise DomainError("dimension must be at least 1")
    if not 0 <= rho < 1:
        raise DomainError("rho must lie in [0, 1)")
    d = int(d)
    return np.full((d, d), float(rho)) + (1.0 - rho) * np.eye(d)
