"""Pure-numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` module.  The
deterministic kernels (aggregation, categorical draws, log-densities) match
it exactly; the stochastic ones consume the generator differently, so they
agree in distribution only.
"""
from __future__ import annotations

import numpy as np

from .corr import LOG_HALFNORM_CONST, chol_backprop, cpc_log_prior, cpc_to_chol

TWO_PI = 2.0 * np.pi


def aggregate_batch(votes, kind, positive, K, u):
    votes = np.asarray(votes, dtype=np.int64)
    if kind == 1:
        hit = np.any(votes == positive, axis=1)
        return np.where(hit, positive, 1 - positive).astype(np.int64)
    if kind == 2:
        hit = np.all(votes == positive, axis=1)
        return np.where(hit, positive, 1 - positive).astype(np.int64)
    n = votes.shape[0]
    counts = np.zeros((n, K), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(n), votes.shape[1]), votes.ravel()), 1)
    is_max = counts == counts.max(axis=1, keepdims=True)
    n_ties = is_max.sum(axis=1)
    pick = np.minimum((np.asarray(u) * n_ties).astype(np.int64), n_ties - 1)
    # position of the pick-th tied class
    rank = np.cumsum(is_max, axis=1) - 1
    return np.argmax(is_max & (rank == pick[:, None]), axis=1).astype(np.int64)


def categorical_draw(probs, u):
    cdf = np.cumsum(probs, axis=-1)
    out = (cdf <= np.asarray(u)[..., None]).sum(axis=-1)
    return np.minimum(out, probs.shape[-1] - 1).astype(np.int64)


def subset_error_count(votes, K, n_q, trials, rng, chunk=200_000):
    votes = np.asarray(votes, dtype=np.int64)
    T, H = votes.shape
    errors = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        rows = rng.integers(0, T, size=m)
        keys = rng.random((m, H))
        sub_idx = np.argsort(keys, axis=1)[:, :n_q]
        sub = np.take_along_axis(votes[rows], sub_idx, axis=1)
        sub_label = aggregate_batch(sub, 0, 0, K, rng.random(m))
        panel_label = aggregate_batch(votes[rows], 0, 0, K, rng.random(m))
        errors += int(np.count_nonzero(sub_label != panel_label))
        done += m
    return errors


def _record_loglik(x, votes, tau, K):
    """Vote log-likelihood per (chain, record); x is (C, T, dH)."""
    C, T, _ = x.shape
    H = votes.shape[1]
    a = x.reshape(C, T, H, K - 1) / tau[:, None, None, None]
    full = np.concatenate([a, np.zeros((C, T, H, 1))], axis=-1)
    m = full.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(full - m).sum(axis=-1, keepdims=True)))[..., 0]
    obs = votes >= 0
    picked = np.take_along_axis(full, np.where(obs, votes, 0)[None, :, :, None], axis=-1)[..., 0]
    return np.where(obs[None], picked - lse, 0.0).sum(axis=-1)


def vote_loglik(Z, votes, tau, K, expert=-1):
    """Summed vote log-likelihood per chain; ``expert >= 0`` restricts it to one expert."""
    if Z.shape[1] == 0:
        return np.zeros(Z.shape[0])
    votes = np.asarray(votes, dtype=np.int64)
    if expert >= 0:
        k1 = K - 1
        Z = Z[:, :, expert * k1 : (expert + 1) * k1]
        votes = votes[:, expert : expert + 1]
    return _record_loglik(Z, votes, np.asarray(tau, float), K).sum(axis=1)


def ess_update(Z, prior_mean, chol, votes, tau, K, rng):
    """Elliptical slice sampling of every record's expert logits, in place."""
    C, T, dH = Z.shape
    if T == 0:
        return 0
    votes = np.asarray(votes, dtype=np.int64)
    tau = np.asarray(tau, dtype=float)
    nu = prior_mean + np.einsum("cij,ctj->cti", chol, rng.standard_normal((C, T, dH)))
    has_obs = np.any(votes >= 0, axis=1)
    # records without votes: exact draw from the conditional prior
    Z[:, ~has_obs] = nu[:, ~has_obs]
    if not has_obs.any():
        return 0
    idx = np.flatnonzero(has_obs)
    x0 = Z[:, idx] - prior_mean[:, idx]
    v0 = nu[:, idx] - prior_mean[:, idx]
    mean = prior_mean[:, idx]
    vsub = votes[idx]
    logy = _record_loglik(Z[:, idx], vsub, tau, K) + np.log(rng.random((C, idx.size)))
    theta = rng.uniform(0.0, TWO_PI, size=(C, idx.size))
    lo, hi = theta - TWO_PI, theta.copy()
    active = np.ones((C, idx.size), dtype=bool)
    new = Z[:, idx].copy()
    evals = 0
    for _ in range(200):
        prop = mean + x0 * np.cos(theta)[..., None] + v0 * np.sin(theta)[..., None]
        ll = _record_loglik(prop, vsub, tau, K)
        evals += int(active.sum())
        ok = active & (ll > logy)
        new[ok] = prop[ok]
        active &= ~ok
        if not active.any():
            break
        neg = theta < 0
        lo = np.where(active & neg, theta, lo)
        hi = np.where(active & ~neg, theta, hi)
        theta = np.where(active, rng.uniform(lo, hi), theta)
    Z[:, idx] = new
    return evals


def cov_logp_grad(pos, S, n, eta, sigma_sigma):
    """Log density (up to a constant) and gradient of the covariance block.

    ``pos = (log sigma, CPC coordinates)``; ``S`` is the scatter matrix of
    ``n`` centred latent vectors.
    """
    pos = np.asarray(pos, dtype=float)
    d = S.shape[-1]
    logsig, y = pos[:d], pos[d:]
    sig = np.exp(logsig)
    L = cpc_to_chol(y, d)
    Ls = sig[:, None] * L
    B = np.linalg.inv(Ls)
    BS = B @ S
    trace = float(np.sum(BS * B))
    diag = np.diag(Ls)
    lp_y, g_y = cpc_log_prior(y, d, eta)
    lp = (
        -n * np.log(diag).sum()
        - 0.5 * trace
        + (LOG_HALFNORM_CONST - np.log(sigma_sigma) - 0.5 * (sig / sigma_sigma) ** 2 + logsig).sum()
        + lp_y
    )
    gLs = np.tril(B.T @ (BS @ B.T))
    gLs[np.diag_indices(d)] -= n / diag
    g_logsig = sig * (gLs * L).sum(axis=1) - (sig / sigma_sigma) ** 2 + 1.0
    gL = sig[:, None] * gLs
    grad = np.concatenate([g_logsig, chol_backprop(gL, y, L) + g_y])
    return lp, grad


def cov_hmc(pos, S, n, eta, sigma_sigma, step, inv_mass, n_leap, rng):
    """One HMC transition per chain for the covariance block."""
    targets = [lambda x, Sc=Sc: cov_logp_grad(x, Sc, n, eta, sigma_sigma) for Sc in S]
    return _hmc(targets, pos, step, inv_mass, n_leap, rng)


def ncp_logp_grad(theta, zM, votes, K, eta, sigma_mu, sigma_sigma, sigma_tau):
    """Joint non-centred log density (constants dropped) and gradient.

    ``theta = (mu, log sigma, CPCs, log tau, eps_H)`` where ``eps_H`` holds the
    whitened expert logits of every record.  Classifier logits ``zM`` are
    observed, so their whitened values follow from ``mu`` and the Cholesky
    factor.
    """
    theta = np.asarray(theta, dtype=float)
    votes = np.asarray(votes, dtype=np.int64)
    T, H = votes.shape
    k1 = K - 1
    dM, dH = zM.shape[1], H * k1
    d = dM + dH
    P = d * (d - 1) // 2
    mu, logsig, y = theta[:d], theta[d : 2 * d], theta[2 * d : 2 * d + P]
    logtau = theta[2 * d + P]
    epsH = theta[2 * d + P + 1 :].reshape(T, dH)
    sig = np.exp(logsig)
    tau = float(np.exp(logtau))
    L = cpc_to_chol(y, d)
    Ls = sig[:, None] * L
    LMM, LHM, LHH = Ls[:dM, :dM], Ls[dM:, :dM], Ls[dM:, dM:]
    epsM = np.linalg.solve(LMM, (zM - mu[:dM]).T).T if dM and T else np.zeros((T, dM))
    zH = mu[dM:] + epsM @ LHM.T + epsH @ LHH.T
    a = zH.reshape(T, H, k1) / tau
    full = np.concatenate([a, np.zeros((T, H, 1))], axis=-1)
    m = full.max(axis=-1, keepdims=True)
    e = np.exp(full - m)
    tot = e.sum(axis=-1, keepdims=True)
    logp = full - m - np.log(tot)
    obs = votes >= 0
    onehot = np.zeros_like(full)
    ti, hi = np.nonzero(obs)
    onehot[ti, hi, votes[ti, hi]] = 1.0
    resid = np.where(obs[..., None], onehot - e / tot, 0.0)[..., :k1]
    ll = np.where(obs, np.take_along_axis(logp, np.where(obs, votes, 0)[..., None], axis=-1)[..., 0], 0.0).sum()
    G = (resid / tau).reshape(T, dH)
    lp_y, g_y = cpc_log_prior(y, d, eta)
    lp = (
        ll
        - T * np.log(np.diag(LMM)).sum()
        - 0.5 * (epsM**2).sum()
        - 0.5 * (epsH**2).sum()
        - 0.5 * np.sum((mu / sigma_mu) ** 2)
        + np.sum(-0.5 * (sig / sigma_sigma) ** 2 + logsig)
        + lp_y
        - 0.5 * (tau / sigma_tau) ** 2
        + logtau
    )
    g = np.zeros_like(theta)
    g[:d] = -mu / sigma_mu**2
    g[dM:d] += G.sum(axis=0)
    gLs = np.zeros((d, d))
    if dM:
        gepsM = G @ LHM - epsM
        g[:dM] -= np.linalg.solve(LMM.T, gepsM.sum(axis=0))
        gLs[:dM, :dM] = -np.tril(np.linalg.solve(LMM.T, gepsM.T @ epsM))
        gLs[np.arange(dM), np.arange(dM)] -= T / np.diag(LMM)
        gLs[dM:, :dM] = G.T @ epsM
    gLs[dM:, dM:] = np.tril(G.T @ epsH)
    g[d : 2 * d] = sig * (gLs * L).sum(axis=1) - (sig / sigma_sigma) ** 2 + 1.0
    g[2 * d : 2 * d + P] = chol_backprop(sig[:, None] * gLs, y, L) + g_y
    g[2 * d + P] = -np.sum(resid * a) - (tau / sigma_tau) ** 2 + 1.0
    g[2 * d + P + 1 :] = (G @ LHH - epsH).ravel()
    return float(lp), g


def ncp_hmc(theta, zM, votes, K, eta, sigma_mu, sigma_sigma, sigma_tau, step, inv_mass, n_leap, rng):
    """One HMC transition per chain on the joint non-centred parameterisation."""

    def target(x):
        return ncp_logp_grad(x, zM, votes, K, eta, sigma_mu, sigma_sigma, sigma_tau)

    return _hmc([target] * len(theta), theta, step, inv_mass, n_leap, rng)


def _hmc(targets, pos, step, inv_mass, n_leap, rng):
    """Fixed-length leapfrog HMC, one transition per chain; ``targets[c]`` gives (lp, grad)."""
    pos = np.array(pos, dtype=float)
    C, P = pos.shape
    out = pos.copy()
    accept = np.zeros(C)
    lps = np.zeros(C)
    for c in range(C):
        target = targets[c]
        x = pos[c].copy()
        lp0, g = target(x)
        p = rng.standard_normal(P) / np.sqrt(inv_mass[c])
        h0 = lp0 - 0.5 * np.sum(inv_mass[c] * p * p)
        eps = step[c]
        lp = lp0
        ok = bool(np.isfinite(lp0))
        with np.errstate(all="ignore"):
            for _ in range(n_leap if ok else 0):
                p = p + 0.5 * eps * g
                x = x + eps * inv_mass[c] * p
                try:
                    lp, g = target(x)
                except (np.linalg.LinAlgError, OverflowError, FloatingPointError):
                    ok = False
                    break
                if not np.isfinite(lp):
                    ok = False
                    break
                p = p + 0.5 * eps * g
        u = rng.random()
        a = 0.0
        if ok:
            h1 = lp - 0.5 * np.sum(inv_mass[c] * p * p)
            a = 1.0 if h1 >= h0 else float(np.exp(h1 - h0))
            if not np.isfinite(a):
                a = 0.0
        accept[c] = a
        if u < a:
            out[c] = x
            lps[c] = lp
        else:
            lps[c] = lp0
    return out, accept, lps
