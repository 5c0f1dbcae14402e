"""Correlation matrices through canonical partial correlations (CPCs).

An unconstrained vector ``y`` of length d(d-1)/2 maps to the Cholesky factor
``L`` of a correlation matrix: ``z = tanh(y)`` are the CPCs, filled row by
row (row i holds i entries), and

    L[i, k] = z_k * prod_{m<k} sqrt(1 - z_m^2),   L[i, i] = prod_{m<i} sqrt(1 - z_m^2).

Everything here accepts leading batch axes.
"""
from __future__ import annotations

import numpy as np
from scipy.special import betaln

LOG_HALFNORM_CONST = 0.5 * np.log(2.0 / np.pi)


def n_cpc(d):
    return d * (d - 1) // 2


def dim_from_ncpc(p):
    d = int(round((1 + np.sqrt(1 + 8 * p)) / 2))
    if n_cpc(d) != p:
        raise ValueError(f"{p} is not a triangular number of CPCs")
    return d


def row_slices(d):
    """Slices of ``y`` belonging to rows 1..d-1 of the factor."""
    out, start = [], 0
    for i in range(1, d):
        out.append(slice(start, start + i))
        start += i
    return out


def log_cosh(y):
    a = np.abs(y)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def cpc_to_chol(y, d):
    """Map unconstrained CPC coordinates to a correlation Cholesky factor."""
    y = np.asarray(y, dtype=float)
    L = np.zeros(y.shape[:-1] + (d, d))
    L[..., 0, 0] = 1.0
    for i, sl in enumerate(row_slices(d), start=1):
        yr = y[..., sl]
        z = np.tanh(yr)
        logc = -log_cosh(yr)
        # exclusive cumulative sum: log of the remaining row norm before entry k
        logw = np.cumsum(logc, axis=-1) - logc
        L[..., i, :i] = z * np.exp(logw)
        L[..., i, i] = np.exp(logc.sum(axis=-1))
    return L


def chol_to_cpc(L):
    """Inverse of :func:`cpc_to_chol` for a single factor."""
    L = np.asarray(L, dtype=float)
    d = L.shape[-1]
    y = np.zeros(L.shape[:-2] + (n_cpc(d),))
    for i, sl in enumerate(row_slices(d), start=1):
        rem = np.ones(L.shape[:-2])
        zs = []
        for k in range(i):
            zk = L[..., i, k] / np.sqrt(rem)
            zk = np.clip(zk, -1 + 1e-15, 1 - 1e-15)
            zs.append(zk)
            rem = rem - L[..., i, k] ** 2
        y[..., sl] = np.arctanh(np.stack(zs, axis=-1))
    return y


def prior_coefficients(d, eta):
    """Per-CPC coefficients c so that LKJ(L) + log|Jacobian| = sum c * log sech(y)."""
    coef = np.zeros(n_cpc(d))
    for i, sl in enumerate(row_slices(d), start=1):
        k = np.arange(i)
        coef[sl] = (d - i - 1 + 2.0 * eta - 2.0) + np.maximum(i - 1 - k, 0) + 2.0
    return coef


def cpc_log_prior(y, d, eta):
    """Unnormalised LKJ(eta) log density in CPC coordinates, Jacobian included.

    Returns ``(value, gradient)``.
    """
    y = np.asarray(y, dtype=float)
    coef = prior_coefficients(d, eta)
    value = (coef * -log_cosh(y)).sum(axis=-1)
    grad = -coef * np.tanh(y)
    return value, grad


def chol_backprop(gL, y, L):
    """Pull a gradient w.r.t. the factor ``L`` back to the CPC coordinates."""
    d = L.shape[-1]
    gy = np.zeros(np.shape(y))
    for i, sl in enumerate(row_slices(d), start=1):
        yr = y[..., sl]
        z = np.tanh(yr)
        logc = -log_cosh(yr)
        w = np.exp(np.cumsum(logc, axis=-1) - logc)
        prod = gL[..., i, : i + 1] * L[..., i, : i + 1]
        # suffix sums over entries k > m (through the diagonal)
        suffix = np.cumsum(prod[..., ::-1], axis=-1)[..., ::-1]
        gy[..., sl] = gL[..., i, :i] * (1.0 - z * z) * w - z * suffix[..., 1:]
    return gy


def lkj_log_normalizer(d, eta):
    """log of the LKJ(eta) normalising integral over d x d correlation matrices."""
    total = 0.0
    for k in range(1, d):
        b = eta + (d - k - 1) / 2.0
        total += (2.0 * eta - 2.0 + d - k) * (d - k) * np.log(2.0) + (d - k) * betaln(b, b)
    return total


def lkj_log_density(omega, eta):
    """Normalised LKJ(eta) log density of a correlation matrix."""
    omega = np.asarray(omega, dtype=float)
    d = omega.shape[-1]
    if d == 1:
        return np.zeros(omega.shape[:-2])
    sign, logdet = np.linalg.slogdet(omega)
    return (eta - 1.0) * logdet - lkj_log_normalizer(d, eta)


def log_halfnormal(x, scale):
    x = np.asarray(x, dtype=float)
    return LOG_HALFNORM_CONST - np.log(scale) - 0.5 * (x / scale) ** 2
