"""The panel model's joint density and an MCMC sampler for its posterior.

Layout of the joint logit vector for one example: the M classifiers' K-1
logits come first, then the H experts', so ``d = (K-1)(M+H)``.  The model is

    z ~ N(mu, diag(sigma) Omega diag(sigma)),   vote_i ~ Cat(softmax((z_i, 0) / tau))

with mu ~ N(0, sigma_mu^2), sigma ~ HalfNormal(sigma_sigma),
Omega ~ LKJ(eta) and tau ~ HalfNormal(sigma_tau).

The sampler keeps a whitened latent expert-logit block for every record.
Each iteration runs an elliptical slice pass over the latents, one HMC
trajectory over all unknowns jointly (non-centred, so the latents move with
the global parameters), and an exact draw along the direction that scales
mu_H, sigma_H and tau together; the vote likelihood only sees z / tau, so
that direction would otherwise mix slowly.  All chains advance together in
vectorised form.  A Metropolis-within-Gibbs sampler is kept as a slower
alternative for cross-checking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .corr import (
    LOG_HALFNORM_CONST,
    chol_to_cpc,
    cpc_to_chol,
    lkj_log_density,
    lkj_log_normalizer,
    n_cpc,
    prior_coefficients,
)
from .errors import DomainError, SamplerError
from .simplex import floor_probs, to_logits

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HyperParams:
    sigma_mu: float = 0.1
    sigma_sigma: float = 1.0
    eta: float = 0.75
    sigma_tau: float = 0.4

    def __post_init__(self):
        for name in ("sigma_mu", "sigma_sigma", "eta", "sigma_tau"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")


@dataclass(frozen=True)
class ChainConfig:
    """MCMC settings.

    ``method="hmc"`` runs joint HMC over all unknowns; ``"gibbs"`` is the
    slower Metropolis-within-Gibbs sampler kept for cross-checking.
    ``refit_warmup`` is the warmup length used when a fit is warm-started
    from a previous sampler state.
    """

    chains: int = 3
    warmup: int = 500
    draws: int = 500
    refit_warmup: int = 150
    n_leapfrog: int = 16
    target_accept: float = 0.8
    method: str = "hmc"

    def __post_init__(self):
        if self.method not in ("hmc", "gibbs"):
            raise DomainError("method must be 'hmc' or 'gibbs'")
        if self.chains < 1 or self.draws < 1 or self.warmup < 0 or self.refit_warmup < 0:
            raise DomainError("chains and draws must be positive, warmup nonnegative")
        if self.n_leapfrog < 1 or not 0 < self.target_accept < 1:
            raise DomainError("invalid HMC settings")


@dataclass(frozen=True)
class Dims:
    K: int
    M: int
    H: int

    @property
    def k1(self):
        return self.K - 1

    @property
    def dM(self):
        return self.M * (self.K - 1)

    @property
    def dH(self):
        return self.H * (self.K - 1)

    @property
    def d(self):
        return self.dM + self.dH

    def expert_slice(self, h):
        start = self.dM + h * self.k1
        return slice(start, start + self.k1)


@dataclass(frozen=True)
class PanelParams:
    mu: np.ndarray
    sigma: np.ndarray
    omega: np.ndarray
    tau: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        d = mu.size
        if sigma.shape != (d,) or omega.shape != (d, d):
            raise DomainError("mu, sigma and omega dimensions disagree")
        if not np.all(np.isfinite(mu)) or np.any(~(sigma > 0)):
            raise DomainError("mu must be finite and sigma positive")
        if not np.allclose(omega, omega.T, atol=1e-9) or not np.allclose(np.diag(omega), 1.0, atol=1e-9):
            raise DomainError("omega must be a symmetric matrix with unit diagonal")
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError:
            raise DomainError("omega must be positive definite") from None
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise DomainError("tau must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def cov(self):
        return self.sigma[:, None] * self.omega * self.sigma[None, :]


class History:
    """Observed data so far: classifier logits and partially observed votes.

    ``votes`` uses -1 for experts that were not queried.  ``ids`` identify
    records so a warm-started sampler can carry latents across windows.
    """

    def __init__(self, K, M, H):
        self.dims = Dims(K, M, H)
        self._logits = []
        self._votes = []
        self._ids = []

    @property
    def K(self):
        return self.dims.K

    @property
    def M(self):
        return self.dims.M

    @property
    def H(self):
        return self.dims.H

    def __len__(self):
        return len(self._votes)

    def append(self, model_probs, votes, rid=None):
        """Add one record; ``votes`` has length H with -1 for unobserved experts."""
        p = np.asarray(model_probs, dtype=float).reshape(self.M, self.K)
        p, _ = floor_probs(p)
        v = np.asarray(votes, dtype=np.int64).reshape(self.H)
        if np.any(v < -1) or np.any(v >= self.K):
            raise DomainError("votes must be -1 or a class index")
        self._logits.append(to_logits(p).reshape(-1))
        self._votes.append(v.copy())
        self._ids.append(len(self._ids) if rid is None else int(rid))

    @property
    def model_logits(self):
        return np.array(self._logits, dtype=float).reshape(len(self), self.dims.dM)

    @property
    def votes(self):
        return np.ascontiguousarray(np.array(self._votes, dtype=np.int64).reshape(len(self), self.H))

    @property
    def ids(self):
        return np.array(self._ids, dtype=np.int64)

    def vote_counts(self):
        """Number of observed votes per expert."""
        return (self.votes >= 0).sum(axis=0)

    def tail(self, n):
        """The most recent ``n`` records as a new History."""
        out = History(self.K, self.M, self.H)
        out._logits = list(self._logits[-n:]) if n else []
        out._votes = list(self._votes[-n:]) if n else []
        out._ids = list(self._ids[-n:]) if n else []
        return out

    def permuted(self, order):
        out = History(self.K, self.M, self.H)
        out._logits = [self._logits[i] for i in order]
        out._votes = [self._votes[i] for i in order]
        out._ids = [self._ids[i] for i in order]
        return out

    @classmethod
    def from_arrays(cls, K, M, H, model_logits, votes):
        out = cls(K, M, H)
        out._logits = [np.asarray(r, dtype=float) for r in np.asarray(model_logits, dtype=float).reshape(-1, M * (K - 1))]
        out._votes = [np.asarray(r, dtype=np.int64) for r in np.asarray(votes, dtype=np.int64).reshape(-1, H)]
        out._ids = list(range(len(out._votes)))
        return out


# ------------------------------------------------------------------ densities


def _vote_terms(x, votes, tau, K):
    """Per-record vote log-likelihood, d/dx and d/dlog tau for one parameter set.

    ``x`` is (T, dH); returns (ll (T,), grad_x (T, dH), dlogtau scalar).
    """
    T, dH = x.shape
    H = votes.shape[1]
    a = x.reshape(T, H, K - 1) / tau
    full = np.concatenate([a, np.zeros((T, H, 1))], axis=-1)
    m = full.max(axis=-1, keepdims=True)
    e = np.exp(full - m)
    p = e / e.sum(axis=-1, keepdims=True)
    logp = full - m - np.log(e.sum(axis=-1, keepdims=True))
    obs = votes >= 0
    onehot = np.zeros_like(full)
    idx_t, idx_h = np.nonzero(obs)
    onehot[idx_t, idx_h, votes[idx_t, idx_h]] = 1.0
    resid = np.where(obs[..., None], onehot - p, 0.0)
    ll = np.where(obs, np.take_along_axis(logp, np.where(obs, votes, 0)[..., None], axis=-1)[..., 0], 0.0).sum(axis=1)
    grad_x = (resid[..., :-1] / tau).reshape(T, dH)
    dlogtau = -float(np.sum(resid[..., :-1] * a[...]))
    return ll, grad_x, dlogtau


def _gauss_logpdf_rows(X, mean, cov):
    d = mean.size
    if d == 0 or X.shape[0] == 0:
        return np.zeros(X.shape[0])
    L = np.linalg.cholesky(cov)
    r = np.linalg.solve(L, (X - mean).T)
    return -0.5 * d * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * (r * r).sum(axis=0)


def log_prior(params: PanelParams, hp: HyperParams):
    """Normalised log prior density of the global parameters."""
    mu, sigma = params.mu, params.sigma
    lp = float(np.sum(-0.5 * LOG_2PI - math.log(hp.sigma_mu) - 0.5 * (mu / hp.sigma_mu) ** 2))
    lp += float(np.sum(LOG_HALFNORM_CONST - math.log(hp.sigma_sigma) - 0.5 * (sigma / hp.sigma_sigma) ** 2))
    lp += float(lkj_log_density(params.omega, hp.eta))
    lp += LOG_HALFNORM_CONST - math.log(hp.sigma_tau) - 0.5 * (params.tau / hp.sigma_tau) ** 2
    return lp


def log_joint(params: PanelParams, history: History, hp: HyperParams, latent=None):
    """Log joint density of the global parameters, latents and observed data.

    ``latent`` is a (T, dH) array of expert logits.  A row of NaN (or
    ``latent=None``) marks a record whose expert block is integrated out;
    this is only allowed for records without observed votes, which then
    contribute the marginal density of their classifier logits.
    """
    dims = history.dims
    if params.mu.size != dims.d:
        raise DomainError(f"parameters have dimension {params.mu.size}, history needs {dims.d}")
    lp = log_prior(params, hp)
    T = len(history)
    if T == 0:
        return lp
    zM = history.model_logits
    votes = history.votes
    if latent is None:
        latent = np.full((T, dims.dH), np.nan)
    latent = np.asarray(latent, dtype=float).reshape(T, dims.dH)
    missing = np.all(np.isnan(latent), axis=1)
    if np.any(missing & np.any(votes >= 0, axis=1)):
        raise DomainError("records with observed votes need a latent expert block")
    if np.any(np.isnan(latent[~missing])):
        raise DomainError("latent rows must be fully given or fully NaN")
    cov = params.cov
    full = ~missing
    if full.any():
        X = np.concatenate([zM[full], latent[full]], axis=1)
        lp += float(_gauss_logpdf_rows(X, params.mu, cov).sum())
        ll, _, _ = _vote_terms(latent[full], votes[full], params.tau, dims.K)
        lp += float(ll.sum())
    if missing.any():
        dM = dims.dM
        lp += float(_gauss_logpdf_rows(zM[missing], params.mu[:dM], cov[:dM, :dM]).sum())
    return lp


@dataclass(frozen=True)
class UnconstrainedLayout:
    """Packing of (mu, log sigma, CPCs, log tau, latents) into one flat vector."""

    d: int
    T: int
    dH: int

    @property
    def P(self):
        return n_cpc(self.d)

    @property
    def size(self):
        return 2 * self.d + self.P + 1 + self.T * self.dH

    def unpack(self, theta):
        d, P = self.d, self.P
        theta = np.asarray(theta, dtype=float)
        mu = theta[:d]
        pos = theta[d : 2 * d + P]
        logtau = theta[2 * d + P]
        Z = theta[2 * d + P + 1 :].reshape(self.T, self.dH)
        return mu, pos, logtau, Z

    def pack(self, mu, pos, logtau, Z):
        return np.concatenate([mu, pos, [logtau], np.asarray(Z, dtype=float).ravel()])

    def from_params(self, params: PanelParams, Z):
        L = np.linalg.cholesky(params.omega)
        pos = np.concatenate([np.log(params.sigma), chol_to_cpc(L) if self.d > 1 else np.zeros(0)])
        return self.pack(params.mu, pos, math.log(params.tau), Z)

    def to_params(self, theta):
        mu, pos, logtau, Z = self.unpack(theta)
        L = cpc_to_chol(pos[self.d :], self.d)
        return PanelParams(mu, np.exp(pos[: self.d]), L @ L.T, math.exp(logtau)), Z


def log_density(theta, history: History, hp: HyperParams):
    """Log posterior density on the unconstrained scale and its gradient.

    Every record carries a latent expert block here.  The value equals
    :func:`log_joint` plus the log-Jacobian of the transform.
    """
    dims = history.dims
    lay = UnconstrainedLayout(dims.d, len(history), dims.dH)
    mu, pos, logtau, Z = lay.unpack(theta)
    d, T = dims.d, len(history)
    tau = math.exp(logtau)
    X = np.concatenate([history.model_logits, Z], axis=1)
    R = X - mu
    S = R.T @ R
    cov_lp, cov_grad = kernels.python_backend.cov_logp_grad(pos, S, float(T), hp.eta, hp.sigma_sigma)
    L = cpc_to_chol(pos[d:], d)
    Ls = np.exp(pos[:d])[:, None] * L
    # Sigma^{-1} R^T through two triangular solves
    W = np.linalg.solve(Ls.T, np.linalg.solve(Ls, R.T)) if T else np.zeros((d, 0))
    lp = cov_lp - 0.5 * T * d * LOG_2PI - lkj_log_normalizer(d, hp.eta)
    lp += float(np.sum(-0.5 * LOG_2PI - math.log(hp.sigma_mu) - 0.5 * (mu / hp.sigma_mu) ** 2))
    lp += LOG_HALFNORM_CONST - math.log(hp.sigma_tau) - 0.5 * (tau / hp.sigma_tau) ** 2 + logtau
    g_mu = W.sum(axis=1) - mu / hp.sigma_mu**2
    g_Z = -W[dims.dM :].T.copy()
    g_logtau = -((tau / hp.sigma_tau) ** 2) + 1.0
    if T:
        ll, gx, dlt = _vote_terms(Z, history.votes, tau, dims.K)
        lp += float(ll.sum())
        g_Z += gx
        g_logtau += dlt
    return lp, lay.pack(g_mu, cov_grad, g_logtau, g_Z)


# ------------------------------------------------------------------ sampler


@dataclass
class SamplerState:
    """Everything needed to resume the chains (one row per chain).

    Expert latents are stored whitened: ``eps`` maps to logits through
    ``z_H = mu_H + A (z_M - mu_M) + L_HH eps``, so they stay meaningful when
    the global parameters change and a new record can start from N(0, I).
    """

    method: str
    eps: np.ndarray
    ids: np.ndarray
    mu: np.ndarray
    pos: np.ndarray
    logtau: np.ndarray
    step: np.ndarray
    inv_mass: np.ndarray
    tau_scale: np.ndarray | None = None
    rescale_scale: np.ndarray | None = None
    shift_scale: np.ndarray | None = None
    scale_scale: np.ndarray | None = None

    def copy(self):
        return SamplerState(
            **{k: (np.array(v, copy=True) if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        )


@dataclass
class PosteriorSampleSet:
    """Pooled MCMC draws of the global parameters, chain-major order."""

    dims: Dims
    mu: np.ndarray
    sigma: np.ndarray
    chol_omega: np.ndarray
    tau: np.ndarray
    chains: int = 1
    warmup: int = 0
    rhat: dict = field(default_factory=dict)
    state: SamplerState | None = None
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return self.tau.shape[0]

    @property
    def draws_per_chain(self):
        return len(self) // self.chains

    @property
    def omega(self):
        return self.chol_omega @ np.swapaxes(self.chol_omega, -1, -2)

    @property
    def cov_chol(self):
        return self.sigma[:, :, None] * self.chol_omega

    def params(self, i):
        L = self.chol_omega[i]
        om = L @ L.T
        return PanelParams(self.mu[i], self.sigma[i], 0.5 * (om + om.T), self.tau[i])

    @cached_property
    def conditional_blocks(self):
        """Per draw: (A, L_HH) so that z_H | z_M = mu_H + A (z_M - mu_M) + L_HH eps."""
        Ls = self.cov_chol
        dM = self.dims.dM
        LMM, LHM, LHH = Ls[:, :dM, :dM], Ls[:, dM:, :dM], Ls[:, dM:, dM:]
        if dM:
            A = np.swapaxes(np.linalg.solve(np.swapaxes(LMM, -1, -2), np.swapaxes(LHM, -1, -2)), -1, -2)
        else:
            A = np.zeros((len(self), self.dims.dH, 0))
        return A, np.ascontiguousarray(LHH)

    def max_rhat(self):
        vals = [np.max(v) for v in self.rhat.values() if np.size(v)]
        return float(max(vals)) if vals else float("nan")

    @classmethod
    def from_params(cls, dims: Dims, params):
        """A sample set made of hand-picked parameter values (one per draw)."""
        params = list(params)
        chol = np.array([np.linalg.cholesky(p.omega) for p in params])
        return cls(
            dims,
            np.array([p.mu for p in params]),
            np.array([p.sigma for p in params]),
            chol,
            np.array([p.tau for p in params]),
            chains=1,
        )


def should_refit(t, window=None):
    """Whether to refit after example ``t`` (1-based)."""
    if t < 1:
        raise DomainError("t must be at least 1")
    if window is not None:
        return True
    return t <= 20 or (t <= 100 and t % 10 == 0) or t % 50 == 0


def rhat(chains):
    """Split-R-hat of a (chains, draws) array of scalar traces."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError("need at least two chains")
    if x.shape[1] < 4:
        raise DomainError("need at least four draws per chain")
    half = x.shape[1] // 2
    split = np.concatenate([x[:, :half], x[:, -half:]], axis=0)
    n = split.shape[1]
    means = split.mean(axis=1)
    W = split.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0 or not np.isfinite(W):
        return 1.0 if B <= 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def effective_sample_size(chains):
    """Multi-chain ESS with Geyer's initial positive sequence truncation."""
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None]
    m, n = x.shape
    if n < 4:
        return float(m * n)
    xc = x - x.mean(axis=1, keepdims=True)
    var = xc.var(axis=1)
    if np.all(var == 0):
        return float(m * n)
    f = np.fft.rfft(xc, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    W = x.var(axis=1, ddof=1).mean()
    var_plus = (n - 1) / n * W + (x.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1.0 / math.log10(m * n + 10))
    return float(m * n / tau)


def _halfnormal_lp(x, scale):
    return LOG_HALFNORM_CONST - math.log(scale) - 0.5 * (x / scale) ** 2


class _Chains:
    """State construction shared by both samplers."""

    def __init__(self, history: History, hp: HyperParams, cfg: ChainConfig, rng):
        self.h = history
        self.hp = hp
        self.cfg = cfg
        self.rng = rng
        self.dims = history.dims
        self.C = cfg.chains
        self.T = len(history)
        self.zM = np.ascontiguousarray(history.model_logits)
        self.votes = history.votes
        self.d = self.dims.d
        self.P = self.d + n_cpc(self.d)

    def n_mass(self):
        raise NotImplementedError

    def cold_state(self):
        C, d, dims, rng = self.C, self.d, self.dims, self.rng
        hp = self.hp
        mu = rng.normal(0.0, hp.sigma_mu, size=(C, d))
        logsig = np.log(np.clip(rng.uniform(0.5, 1.5, size=(C, d)) * min(1.0, hp.sigma_sigma), 1e-3, None))
        if self.T > 1 and dims.dM:
            spread = np.clip(self.zM.std(axis=0), 0.1, 5.0)
            logsig[:, : dims.dM] = np.log(spread) + rng.normal(0.0, 0.1, size=(C, dims.dM))
        y = rng.normal(0.0, 0.1, size=(C, n_cpc(d)))
        return SamplerState(
            method=self.cfg.method,
            eps=rng.standard_normal((C, self.T, dims.dH)),
            ids=self.h.ids,
            mu=mu,
            pos=np.concatenate([logsig, y], axis=1),
            logtau=np.log(hp.sigma_tau * 0.8) + rng.normal(0.0, 0.2, size=C),
            step=np.full(C, 0.1),
            inv_mass=np.ones((C, self.n_mass())),
            tau_scale=np.full(C, 0.3),
            rescale_scale=np.full(C, 0.1),
            shift_scale=np.full((C, dims.dH), 0.3),
            scale_scale=np.full((C, dims.dH), 0.2),
        )

    def warm_state(self, prev: SamplerState):
        if prev.method != self.cfg.method or prev.mu.shape != (self.C, self.d):
            raise DomainError("warm-start state does not match the chain configuration")
        state = prev.copy()
        pos_of = {int(r): i for i, r in enumerate(prev.ids)}
        # records seen before keep their whitened latents, new ones start from N(0, I)
        eps = self.rng.standard_normal((self.C, self.T, self.dims.dH))
        for i, r in enumerate(self.h.ids):
            j = pos_of.get(int(r))
            if j is not None:
                eps[:, i] = prev.eps[:, j]
        state.eps = eps
        state.ids = self.h.ids
        return state

    def _chol(self, pos):
        d = self.d
        L = cpc_to_chol(pos[:, d:], d)
        return np.exp(pos[:, :d])[:, :, None] * L

    def _conditional_prior(self, mu, pos):
        """Mean (C, T, dH) of z_H given z_M, and L_HH (C, dH, dH)."""
        Ls = self._chol(pos)
        dM = self.dims.dM
        mean = np.broadcast_to(mu[:, None, dM:], (self.C, self.T, self.dims.dH)).copy()
        if dM and self.T:
            eps = np.linalg.solve(Ls[:, :dM, :dM], (self.zM - mu[:, None, :dM]).transpose(0, 2, 1))
            mean += np.einsum("chm,cmt->cth", Ls[:, dM:, :dM], eps)
        return np.ascontiguousarray(mean), np.ascontiguousarray(Ls[:, dM:, dM:])

    def latents(self, state):
        """Expert logits (C, T, dH) implied by the whitened state."""
        mean, LHH = self._conditional_prior(state.mu, state.pos)
        return mean + np.einsum("cij,ctj->cti", LHH, state.eps)

    def whiten(self, state, Z):
        mean, LHH = self._conditional_prior(state.mu, state.pos)
        if self.T == 0:
            return np.zeros_like(Z)
        return np.linalg.solve(LHH, (Z - mean).transpose(0, 2, 1)).transpose(0, 2, 1)

    def check(self, state):
        if not (np.all(np.isfinite(state.mu)) and np.all(np.isfinite(state.pos)) and np.all(np.isfinite(state.logtau))):
            raise SamplerError("non-finite parameter values in the sampler state", state=state)


class _JointHMC(_Chains):
    """HMC on every unknown at once, with the expert latents whitened.

    The position is (mu, log sigma, CPCs, log tau, eps_H of every record);
    only the global part gets an adapted mass, the whitened latents have
    unit mass since their prior is standard normal.
    """

    def n_mass(self):
        return self.P + self.d + 1

    def begin(self, state):
        self.G = self.n_mass()
        self.theta = np.ascontiguousarray(
            np.concatenate([state.mu, state.pos, state.logtau[:, None], state.eps.reshape(self.C, -1)], axis=1)
        )

    def end(self, state):
        d, P, G = self.d, self.P, self.G
        state.mu = self.theta[:, :d].copy()
        state.pos = self.theta[:, d : d + P].copy()
        state.logtau = self.theta[:, d + P].copy()
        state.eps = self.theta[:, G:].reshape(self.C, self.T, self.dims.dH).copy()

    def globals(self):
        return self.theta[:, : self.G]

    def update_latents(self):
        """Elliptical slice pass over the expert latents, globals held fixed."""
        if self.T == 0:
            return
        d, P, G, C = self.d, self.P, self.G, self.C
        mu, pos = self.theta[:, :d], self.theta[:, d : d + P]
        mean, LHH = self._conditional_prior(mu, pos)
        eps = self.theta[:, G:].reshape(C, self.T, self.dims.dH)
        Z = np.ascontiguousarray(mean + np.einsum("cij,ctj->cti", LHH, eps))
        kernels.ess_update(Z, mean, LHH, self.votes, np.exp(self.theta[:, d + P]), self.dims.K, self.rng)
        eps = np.linalg.solve(LHH, (Z - mean).transpose(0, 2, 1)).transpose(0, 2, 1)
        self.theta[:, G:] = eps.reshape(C, -1)

    def transition(self, state, step):
        hp = self.hp
        self.update_latents()
        inv_mass = np.ones_like(self.theta)
        inv_mass[:, : self.G] = state.inv_mass
        self.theta, acc, _ = kernels.ncp_hmc(
            self.theta, self.zM, self.votes, self.dims.K, hp.eta, hp.sigma_mu, hp.sigma_sigma, hp.sigma_tau,
            np.ascontiguousarray(step), inv_mass, self.cfg.n_leapfrog, self.rng,
        )
        if not np.all(np.isfinite(self.theta[:, : self.G])):
            raise SamplerError("non-finite parameter values in the sampler state", state=state)
        self.rescale()
        return acc

    def rescale(self):
        """Exact draw along the orbit that scales mu_H, sigma_H and tau together.

        With the latents whitened this leaves z_H / tau, hence the vote
        likelihood, unchanged, so only the priors matter: the factor c
        satisfies c^2 ~ Gamma(dH + 1/2, rate A / 2) where A is the sum of the
        squared prior z-scores of the scaled parameters.
        """
        d, dM, dH, P, hp = self.d, self.dims.dM, self.dims.dH, self.P, self.hp
        th = self.theta
        muH = th[:, dM:d]
        sigH = np.exp(th[:, d + dM : 2 * d])
        tau = np.exp(th[:, d + P])
        A = (muH**2).sum(axis=1) / hp.sigma_mu**2 + (sigH**2).sum(axis=1) / hp.sigma_sigma**2 + (tau / hp.sigma_tau) ** 2
        log_c = 0.5 * np.log(self.rng.gamma(dH + 0.5, 2.0 / A))
        th[:, dM:d] *= np.exp(log_c)[:, None]
        th[:, d + dM : 2 * d] += log_c[:, None]
        th[:, d + P] += log_c

    def current(self):
        d, P = self.d, self.P
        return self.theta[:, :d], self.theta[:, d : d + P], self.theta[:, d + P]


class _Gibbs(_Chains):
    """Metropolis-within-Gibbs on the centred latents, for debugging.

    Each sweep: elliptical slice updates of the latents, a conjugate draw of
    mu, HMC on (log sigma, CPCs), random-walk Metropolis on log tau, a joint
    rescaling of the expert block with tau and per-coordinate shift/scale
    moves.  Step sizes of the random-walk moves adapt during warmup.
    """

    COV_LEAPFROG = 8

    def n_mass(self):
        return self.P

    def begin(self, state):
        self.Z = self.latents(state)
        self._adapt = False
        self._it = 0

    def end(self, state):
        state.eps = self.whiten(state, self.Z)

    def globals(self):
        return self._state.pos

    def current(self):
        st = self._state
        return st.mu, st.pos, st.logtau

    def _full(self, state):
        zM = np.broadcast_to(self.zM, (self.C, self.T, self.dims.dM))
        return np.concatenate([zM, self.Z], axis=2)

    def update_latents(self, state):
        if self.T == 0:
            return
        mean, LHH = self._conditional_prior(state.mu, state.pos)
        kernels.ess_update(self.Z, mean, LHH, self.votes, np.exp(state.logtau), self.dims.K, self.rng)

    def update_mu(self, state):
        C, d, T = self.C, self.d, self.T
        Ls = self._chol(state.pos)
        eye = np.eye(d)
        Linv = np.linalg.solve(Ls, np.broadcast_to(eye, (C, d, d)))
        prec_lik = np.swapaxes(Linv, -1, -2) @ Linv
        prec = eye / self.hp.sigma_mu**2 + T * prec_lik
        zsum = self._full(state).sum(axis=1) if T else np.zeros((C, d))
        b = np.einsum("cij,cj->ci", prec_lik, zsum)
        Lp = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, b[..., None])[..., 0]
        eps = self.rng.standard_normal((C, d))
        state.mu = mean + np.linalg.solve(np.swapaxes(Lp, -1, -2), eps[..., None])[..., 0]

    def scatter(self, state):
        if self.T == 0:
            return np.zeros((self.C, self.d, self.d))
        R = self._full(state) - state.mu[:, None, :]
        return np.ascontiguousarray(np.einsum("cti,ctj->cij", R, R))

    def update_cov(self, state, step):
        S = self.scatter(state)
        out, acc, _ = kernels.cov_hmc(
            np.ascontiguousarray(state.pos), S, float(self.T), self.hp.eta, self.hp.sigma_sigma,
            np.ascontiguousarray(step), np.ascontiguousarray(state.inv_mass), self.COV_LEAPFROG, self.rng,
        )
        state.pos = out
        return acc

    def _tau_target(self, logtau):
        tau = np.exp(logtau)
        ll = kernels.vote_loglik(self.Z, self.votes, tau, self.dims.K) if self.T else np.zeros(self.C)
        return ll + _halfnormal_lp(tau, self.hp.sigma_tau) + logtau

    def update_tau(self, state):
        cur = self._tau_target(state.logtau)
        prop = state.logtau + state.tau_scale * self.rng.standard_normal(self.C)
        new = self._tau_target(prop)
        with np.errstate(over="ignore"):
            acc = np.minimum(1.0, np.exp(new - cur))
        ok = self.rng.random(self.C) < acc
        state.logtau = np.where(ok, prop, state.logtau)
        # independence proposal from the prior: accepted on the likelihood
        # ratio alone, it crosses the flat region near tau = 0 in one step
        if self.T:
            cur = np.where(ok, new, cur) - _halfnormal_lp(np.exp(state.logtau), self.hp.sigma_tau) - state.logtau
            tau_new = np.maximum(np.abs(self.rng.normal(0.0, self.hp.sigma_tau, size=self.C)), 1e-300)
            ll_new = kernels.vote_loglik(self.Z, self.votes, tau_new, self.dims.K)
            with np.errstate(over="ignore"):
                a2 = np.minimum(1.0, np.exp(ll_new - cur))
            ok2 = self.rng.random(self.C) < a2
            state.logtau = np.where(ok2, np.log(tau_new), state.logtau)
        return acc

    def update_rescale(self, state):
        """Multiply the expert latents, mu_H, sigma_H and tau by a common factor."""
        dims, hp, C = self.dims, self.hp, self.C
        dM, dH = dims.dM, dims.dH
        s = state.rescale_scale * self.rng.standard_normal(C)
        c = np.exp(s)
        muH = state.mu[:, dM:]
        sigH = np.exp(state.pos[:, dM : dM + dH])
        tau = np.exp(state.logtau)
        log_ratio = (
            -0.5 * ((c[:, None] * muH) ** 2 - muH**2).sum(axis=1) / hp.sigma_mu**2
            - 0.5 * ((c[:, None] * sigH) ** 2 - sigH**2).sum(axis=1) / hp.sigma_sigma**2
            - 0.5 * ((c * tau) ** 2 - tau**2) / hp.sigma_tau**2
            + (2 * dH + 1) * s
        )
        with np.errstate(over="ignore"):
            acc = np.minimum(1.0, np.exp(log_ratio))
        ok = self.rng.random(C) < acc
        if ok.any():
            self.Z[ok] *= c[ok, None, None]
            state.mu[ok, dM:] *= c[ok, None]
            state.pos[ok, dM : dM + dH] += s[ok, None]
            state.logtau[ok] += s[ok]
        return acc

    def update_coordinates(self, state):
        """Per expert coordinate: shift (latents and mu) and scale (latents about mu, and sigma).

        Both moves leave the Gaussian part of the density unchanged up to the
        Jacobian, so only the affected expert's votes and the priors enter.
        """
        if self.T == 0:
            return np.zeros((self.C, 0)), np.zeros((self.C, 0))
        dims, hp, C, rng, Z = self.dims, self.hp, self.C, self.rng, self.Z
        tau = np.exp(state.logtau)
        acc_shift = np.zeros((C, dims.dH))
        acc_scale = np.zeros((C, dims.dH))
        for j in range(dims.dH):
            h, g = j // dims.k1, dims.dM + j
            base = kernels.vote_loglik(Z, self.votes, tau, dims.K, h)
            delta = state.shift_scale[:, j] * rng.standard_normal(C)
            old = Z[:, :, j].copy()
            Z[:, :, j] = old + delta[:, None]
            new = kernels.vote_loglik(Z, self.votes, tau, dims.K, h)
            mu_g = state.mu[:, g]
            log_a = new - base - 0.5 * ((mu_g + delta) ** 2 - mu_g**2) / hp.sigma_mu**2
            a = np.exp(np.minimum(log_a, 0.0))
            ok = rng.random(C) < a
            Z[~ok, :, j] = old[~ok]
            state.mu[ok, g] += delta[ok]
            base = np.where(ok, new, base)
            acc_shift[:, j] = a
            s = state.scale_scale[:, j] * rng.standard_normal(C)
            c = np.exp(s)
            mu_g = state.mu[:, g][:, None]
            old = Z[:, :, j].copy()
            Z[:, :, j] = mu_g + c[:, None] * (old - mu_g)
            new = kernels.vote_loglik(Z, self.votes, tau, dims.K, h)
            sig = np.exp(state.pos[:, g])
            log_a = new - base - 0.5 * ((c * sig) ** 2 - sig**2) / hp.sigma_sigma**2 + s
            a = np.exp(np.minimum(log_a, 0.0))
            ok = rng.random(C) < a
            Z[~ok, :, j] = old[~ok]
            state.pos[ok, g] += s[ok]
            acc_scale[:, j] = a
        return acc_shift, acc_scale

    def transition(self, state, step):
        self._state = state
        self.update_latents(state)
        self.update_mu(state)
        acc = self.update_cov(state, step)
        acc_tau = self.update_tau(state)
        acc_rs = self.update_rescale(state)
        acc_sh, acc_sc = self.update_coordinates(state)
        if self._adapt:
            it = self._it
            state.tau_scale = _robbins_monro(state.tau_scale, acc_tau, 0.44, it)
            state.rescale_scale = _robbins_monro(state.rescale_scale, acc_rs, 0.44, it)
            if acc_sh.size:
                state.shift_scale = _robbins_monro(state.shift_scale, acc_sh, 0.44, it)
                state.scale_scale = _robbins_monro(state.scale_scale, acc_sc, 0.44, it)
            self._it += 1
        self.check(state)
        return acc


class _DualAveraging:
    def __init__(self, step, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * step)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.hbar = np.zeros_like(step)
        self.log_bar = np.log(step)
        self.log_step = np.log(step)
        self.m = 0

    def update(self, accept):
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept)
        self.log_step = self.mu - np.sqrt(m) / self.gamma * self.hbar
        eta = m ** (-self.kappa)
        self.log_bar = eta * self.log_step + (1 - eta) * self.log_bar
        return np.exp(self.log_step)

    def final(self):
        return np.exp(self.log_bar)


def _robbins_monro(scale, accept, target, it):
    return scale * np.exp((accept - target) / math.sqrt(it + 1.0))


def _global_traces(draws_mu, draws_pos, draws_logtau, d):
    """Scalar traces (chains, draws) keyed by parameter name."""
    C, n, _ = draws_mu.shape
    L = cpc_to_chol(draws_pos[..., d:], d)
    om = L @ np.swapaxes(L, -1, -2)
    iu = np.tril_indices(d, -1)
    return {
        "mu": draws_mu,
        "sigma": np.exp(draws_pos[..., :d]),
        "omega": om[..., iu[0], iu[1]],
        "tau": np.exp(draws_logtau)[..., None],
    }, L


_SAMPLERS = {"hmc": _JointHMC, "gibbs": _Gibbs}


def sample_posterior(history: History, hp: HyperParams | None = None, cfg: ChainConfig | None = None, rng=None,
                     init: SamplerState | None = None):
    """Draw from the posterior of (mu, sigma, Omega, tau) given ``history``.

    With ``init`` the chains resume from a previous state (new records get
    latents from their conditional prior) and run ``cfg.refit_warmup``
    adaptation iterations instead of ``cfg.warmup``.
    """
    hp = hp or HyperParams()
    cfg = cfg or ChainConfig()
    rng = rng if rng is not None else np.random.default_rng()
    smp = _SAMPLERS[cfg.method](history, hp, cfg, rng)
    C, d = cfg.chains, smp.d
    state = smp.warm_state(init) if init is not None else smp.cold_state()
    W = cfg.refit_warmup if init is not None else cfg.warmup
    smp.begin(state)

    # warmup: step size by dual averaging throughout; the diagonal mass is
    # estimated on the middle window, after which step adaptation restarts
    win_lo, win_hi = int(0.2 * W), int(0.8 * W)
    da = _DualAveraging(state.step, cfg.target_accept)
    collected = []
    step = state.step
    smp._adapt = True
    for it in range(W):
        acc = smp.transition(state, step * rng.uniform(0.8, 1.2, size=C))
        step = da.update(acc)
        if win_lo <= it < win_hi:
            collected.append(smp.globals().copy())
        if it == win_hi - 1 and len(collected) >= 20:
            X = np.concatenate(collected, axis=0)
            n = X.shape[0]
            var = (n / (n + 5.0)) * X.var(axis=0) + 1e-3 * (5.0 / (n + 5.0))
            state.inv_mass = np.broadcast_to(var, state.inv_mass.shape).copy()
            da = _DualAveraging(step, cfg.target_accept)
    smp._adapt = False
    if W:
        state.step = da.final()

    n = cfg.draws
    mu_tr = np.empty((C, n, d))
    pos_tr = np.empty((C, n, smp.P))
    lt_tr = np.empty((C, n))
    acc_sum = np.zeros(C)
    for i in range(n):
        acc_sum += smp.transition(state, state.step * rng.uniform(0.8, 1.2, size=C))
        mu, pos, logtau = smp.current()
        mu_tr[:, i] = mu
        pos_tr[:, i] = pos
        lt_tr[:, i] = logtau
    smp.end(state)

    traces, L = _global_traces(mu_tr, pos_tr, lt_tr, d)
    rh = {}
    if C >= 2 and n >= 4:
        for name, tr in traces.items():
            rh[name] = np.array([rhat(tr[..., j]) for j in range(tr.shape[-1])])
    return PosteriorSampleSet(
        dims=history.dims,
        mu=mu_tr.reshape(C * n, d),
        sigma=np.exp(pos_tr[..., :d]).reshape(C * n, d),
        chol_omega=L.reshape(C * n, d, d),
        tau=np.exp(lt_tr).reshape(C * n),
        chains=C,
        warmup=W,
        rhat=rh,
        state=state,
        stats={"accept": acc_sum / n, "step": state.step.copy()},
    )


def prior_sample_set(dims: Dims, hp: HyperParams, n, rng):
    """Independent draws from the prior (no MCMC), e.g. for an empty history."""
    d = dims.d
    mu = rng.normal(0.0, hp.sigma_mu, size=(n, d))
    sigma = np.abs(rng.normal(0.0, hp.sigma_sigma, size=(n, d)))
    tau = np.abs(rng.normal(0.0, hp.sigma_tau, size=n))
    # the CPCs are independent under LKJ, each a Beta(c/2, c/2) variable on [-1, 1]
    half = prior_coefficients(d, hp.eta) / 2.0
    z = 2.0 * rng.beta(half, half, size=(n, half.size)) - 1.0
    y = np.arctanh(np.clip(z, -1 + 1e-15, 1 - 1e-15))
    L = cpc_to_chol(y, d)
    return PosteriorSampleSet(dims, mu, sigma, L, tau, chains=1)


def simulate_from_model(params: PanelParams, dims: Dims, T, rng, observe_prob=1.0):
    """Synthetic history drawn from the model itself.

    Returns the history (each vote observed independently with probability
    ``observe_prob``), the full vote matrix and the latent logits.
    """
    d = dims.d
    L = np.linalg.cholesky(params.cov)
    z = params.mu + rng.standard_normal((T, d)) @ L.T
    zH = z[:, dims.dM :].reshape(T, dims.H, dims.k1) / params.tau
    full = np.concatenate([zH, np.zeros((T, dims.H, 1))], axis=-1)
    p = np.exp(full - full.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    votes = kernels.categorical_draw(np.ascontiguousarray(p), rng.random((T, dims.H)))
    shown = np.where(rng.random((T, dims.H)) < observe_prob, votes, -1)
    hist = History.from_arrays(dims.K, dims.M, dims.H, z[:, : dims.dM], shown)
    return hist, votes, z
