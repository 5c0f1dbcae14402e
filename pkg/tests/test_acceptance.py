"""Exit criteria, each printed as one PASS/FAIL line.

Criteria 5 to 8 share one set of online runs and criterion 9 runs the
shift scenario, so the whole module takes roughly 45 minutes on one core.
"""
import time
import warnings

import numpy as np
import pytest

from _oracles import consensus_oracle, expected_entropy_oracle, joint_vote_table, pinned_set
from conftest import ACCEPTANCE_LINES
from consensus_query.baselines import ConfusionModel, confusion_posterior, update_confusion
from consensus_query.data import gen_equicorr_voters, preset_classwise, preset_shift
from consensus_query.harness import RunConfig, ece, explore_exploit_report, run_experiment
from consensus_query.inference import QueryState, consensus_posterior, expected_entropy_after
from consensus_query.posterior import (
    ChainConfig,
    Dims,
    History,
    HyperParams,
    PanelParams,
    UnconstrainedLayout,
    effective_sample_size,
    log_density,
    prior_sample_set,
    sample_posterior,
    simulate_from_model,
)
from consensus_query.simplex import AggregationFn, determined_label
from consensus_query.theory import (
    ConsensusSizeDist,
    consensus_size_dist,
    err_equicorrelated_3,
    err_random_nq,
    expected_nc_equicorr_3,
    simulate_random_error,
)

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

CONS = AggregationFn("consensus")
HP = HyperParams()
RUNS = 12
THRESHOLDS = (0.0, 0.05, 0.025, 0.01)


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_golden_table():
    t0 = time.perf_counter()
    got = [err_random_nq(ConsensusSizeDist.point_mass(10, 6), n) for n in (1, 3, 5, 7, 9)]
    elapsed = time.perf_counter() - t0
    want = [0.400, 0.3333, 0.2619, 0.1667, 0.0]
    worst = max(abs(g - w) for g, w in zip(got, want))
    report(1, worst <= 5e-4 and elapsed < 1.0,
           f"errors {[round(g, 4) for g in got]}, max deviation {worst:.1e}, {elapsed:.3f} s")


def test_criterion_02_equicorrelated_voters():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2002)
    T = 1_000_000
    bad = []
    worst_z, worst_nc = 0.0, 0.0
    for rho in np.round(np.arange(10) * 0.1, 1):
        ds = gen_equicorr_voters(3, float(rho), T, 0.0, rng)
        est = simulate_random_error(ds.votes, 1, T, rng)
        z = abs(est.value - err_equicorrelated_3(rho)) / est.se
        n_c = np.maximum(ds.votes.sum(axis=1), 3 - ds.votes.sum(axis=1)).mean()
        dnc = abs(n_c - expected_nc_equicorr_3(rho))
        worst_z, worst_nc = max(worst_z, z), max(worst_nc, dnc)
        if z > 3 or dnc > 0.01:
            bad.append(float(rho))
    elapsed = time.perf_counter() - t0
    report(2, not bad and elapsed < 120,
           f"max |diff|/SE {worst_z:.2f}, max |E[n_c] diff| {worst_nc:.4f}, failing rho {bad}, {elapsed:.0f} s")


def _population(kind, rng):
    T = 20_000
    H = int(rng.integers(3, 10))
    K = int(rng.integers(2, 5))
    if kind == "two_class":
        n_c = rng.integers((H + 2) // 2, H + 1, T)
        pop = (np.arange(H)[None, :] >= n_c[:, None]).astype(np.int64)
        return rng.permuted(pop, axis=1)
    if kind == "experts":
        # expert-specific accuracies, so identities matter
        truth = rng.integers(0, K, T)
        acc = rng.uniform(0.4, 0.95, H)
        wrong = (truth[:, None] + rng.integers(1, K, (T, H))) % K
        return np.where(rng.random((T, H)) < acc, truth[:, None], wrong)
    # per-example class distributions drawn from a Dirichlet
    p = rng.dirichlet(np.full(K, 0.5), T)
    cdf = np.cumsum(p, axis=1)
    return (rng.random((T, H, 1)) > cdf[:, None, :]).sum(axis=2).clip(max=K - 1)


def test_criterion_03_random_query_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2003)
    trials = 400_000
    bad = []
    worst = 0.0
    kinds = ["two_class"] * 6 + ["experts"] * 7 + ["dirichlet"] * 7
    for i, kind in enumerate(kinds):
        pop = _population(kind, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            closed = 1 - consensus_size_dist(pop).mean() / pop.shape[1]
        e1 = simulate_random_error(pop, 1, trials, rng)
        e2 = simulate_random_error(pop, 2, trials, rng)
        z = max(abs(e1.value - closed) / e1.se, abs(e2.value - closed) / e2.se,
                abs(e1.value - e2.value) / np.hypot(e1.se, e2.se))
        worst = max(worst, z)
        if z > 3:
            bad.append(i)
    elapsed = time.perf_counter() - t0
    report(3, not bad and elapsed < 60,
           f"20 populations, max deviation {worst:.2f} SE, failing {bad}, {elapsed:.0f} s")


def _oracle_case(rng):
    H = int(rng.choice([2, 3]))
    dims = Dims(2, 1, H)
    d = dims.d
    A = rng.normal(size=(d, d))
    cov = A @ A.T + d * np.eye(d)
    s = np.sqrt(np.diag(cov))
    params = PanelParams(rng.normal(0, 0.5, d), rng.uniform(0.5, 1.5, d), cov / np.outer(s, s),
                         float(rng.uniform(0.3, 1.2)))
    p0 = float(rng.uniform(0.1, 0.9))
    votes = np.full(H, -1)
    n_obs = int(rng.integers(0, H))
    obs = rng.choice(H, n_obs, replace=False)
    votes[obs] = rng.integers(0, 2, n_obs)
    return dims, params, p0, votes, float(rng.random())


def test_criterion_04_inference_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2004)
    n = 1_000_000
    worst = 0.0
    for case in range(10):
        dims, params, p0, votes, tie_u = _oracle_case(rng)
        zM = np.log([p0 / (1 - p0)])
        table = joint_vote_table(params, dims, zM, rng=rng, n=n)
        S = pinned_set(dims, params, n)
        q = QueryState.fresh([p0, 1 - p0], dims.H, tie_u)
        q.votes[:] = votes
        got = consensus_posterior(S, q, CONS, np.random.default_rng(case))
        worst = max(worst, np.abs(got.probs - consensus_oracle(table, votes, CONS, 2, tie_u)).max())
        for j in np.flatnonzero(votes < 0):
            h = expected_entropy_after(S, q, j, CONS, np.random.default_rng(100 + case))
            worst = max(worst, abs(h - expected_entropy_oracle(table, votes, j, CONS, 2, tie_u)))
        del S
    elapsed = time.perf_counter() - t0
    report(4, worst <= 0.01 and elapsed < 300, f"10 cases, max abs deviation {worst:.4f}, {elapsed:.0f} s")


# --------------------------------------------------------------- online runs


@pytest.fixture(scope="module")
def classwise_runs():
    ds = preset_classwise(250, np.random.default_rng(0))
    out = {"bayes": {e: [] for e in THRESHOLDS}, "random": [], "confusion": [], "seconds": 0.0}
    t0 = time.perf_counter()
    for r in range(RUNS):
        for e in THRESHOLDS:
            out["bayes"][e].append(run_experiment(ds, RunConfig(policy="bayes", threshold=e, run=r)))
    out["seconds"] = time.perf_counter() - t0
    for r in range(RUNS):
        out["random"].append(run_experiment(ds, RunConfig(policy="random", threshold=0.0, run=r)))
        out["confusion"].append(run_experiment(ds, RunConfig(policy="confusion", threshold=0.0, run=r)))
    out["dataset"] = ds
    return out


def test_criterion_05_stop_rule(classwise_runs):
    runs = classwise_runs["bayes"]
    exact = all(res.error_rate == 0.0 for res in runs[0.0])
    counts = {e: sum(res.error_rate <= e for res in runs[e]) for e in THRESHOLDS[1:]}
    minutes = classwise_runs["seconds"] / 60
    ok = exact and all(c >= 11 for c in counts.values()) and minutes < 30
    report(5, ok, f"e=0 errors {[res.error_rate for res in runs[0.0]]}, runs with error <= e {counts} of 12, "
                  f"{minutes:.1f} min for the bayes runs")


def test_criterion_06_calibration(classwise_runs):
    rows = [row for res in classwise_runs["bayes"][0.05] for row in res.rows]
    value = ece([r["confidence"] for r in rows], [r["prediction"] == r["truth"] for r in rows], bins=10)
    report(6, value <= 0.02, f"pooled ECE at e=0.05 over {len(rows)} examples: {value:.4f}")


def test_criterion_07_explore_exploit(classwise_runs):
    pairs = [explore_exploit_report(res) for res in classwise_runs["bayes"][0.01]]
    wins = sum(a > b for a, b in pairs)
    report(7, wins >= 10, f"first50 > last50 in {wins} of 12 runs; pairs {[(round(a, 2), round(b, 2)) for a, b in pairs]}")


def test_criterion_08_policy_dominance(classwise_runs):
    bayes = [res.mean_queries for res in classwise_runs["bayes"][0.0]]
    rand = [res.mean_queries for res in classwise_runs["random"]]
    wins = sum(b <= r for b, r in zip(bayes, rand))
    # the confusion baseline's estimated error stays strictly positive on every example
    min_err = min(row["est_error"] for res in classwise_runs["confusion"] for row in res.rows)
    ds = classwise_runs["dataset"]
    cm = ConfusionModel.fresh(ds.H, ds.K)
    interior = True
    for rec in ds:
        cm = update_confusion(cm, rec.expert_votes, determined_label(rec.expert_votes, CONS, ds.K, 0.5))
        probs = confusion_posterior(cm, rec.model_probs, rec.expert_votes).probs
        interior &= bool(np.all(probs > 0) and np.all(probs < 1))
    ok = wins >= 10 and min_err > 0 and interior
    report(8, ok, f"bayes <= random in {wins} of 12 runs (means {np.mean(bayes):.3f} vs {np.mean(rand):.3f}); "
                  f"confusion min est_error {min_err:.2e}, strictly interior {interior}")


def test_criterion_09_distribution_shift():
    t0 = time.perf_counter()
    ds = preset_shift(125, np.random.default_rng(0))
    wins, errors, pairs = 0, [], []
    for r in range(RUNS):
        res = run_experiment(ds, RunConfig(policy="bayes", threshold=0.01, run=r, window=50))
        q = res.queries()
        before, after = q[100:125].mean(), q[125:150].mean()
        pairs.append((round(float(before), 2), round(float(after), 2)))
        wins += after > before
        errors.append(res.error_rate)
    minutes = (time.perf_counter() - t0) / 60
    ok = wins >= 10 and max(errors) <= 0.01 and minutes < 45
    report(9, ok, f"queries rise after the shift in {wins} of 12 runs {pairs}; per-run errors {errors} "
                  f"(max {max(errors):.3f}, pooled {np.mean(errors):.4f}); {minutes:.1f} min")


# ---------------------------------------------------------- sampler health


def _gradient_check(rng):
    dims = Dims(3, 1, 2)
    truth = prior_sample_set(dims, HP, 1, rng).params(0)
    hist, _, _ = simulate_from_model(truth, dims, 6, rng, observe_prob=0.6)
    lay = UnconstrainedLayout(dims.d, len(hist), dims.dH)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        theta = rng.normal(size=lay.size) * 0.5
        _, g = log_density(theta, hist, HP)
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fd[i] = (log_density(theta + e, hist, HP)[0] - log_density(theta - e, hist, HP)[0]) / (2 * h)
        # relative error, with components near zero judged on a 1e-2 scale
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-2))))
    return worst


def _prior_recovery(rng):
    dims = Dims(3, 1, 2)
    S = sample_posterior(History(3, 1, 2), HP, ChainConfig(chains=3, warmup=300, draws=1000, n_leapfrog=16), rng)
    zs = []
    for trace, mean, sd in ((S.tau, HP.sigma_tau * np.sqrt(2 / np.pi), HP.sigma_tau * np.sqrt(1 - 2 / np.pi)),):
        zs.append(abs(trace.mean() - mean) / (sd / np.sqrt(effective_sample_size(trace.reshape(3, -1)))))
    for j in range(dims.d):
        m = S.mu[:, j]
        zs.append(abs(m.mean()) / (HP.sigma_mu / np.sqrt(effective_sample_size(m.reshape(3, -1)))))
    return max(zs)


def _coverage(rng):
    dims = Dims(2, 1, 3)
    cfg = ChainConfig(chains=3, warmup=300, draws=300, n_leapfrog=32)
    hits = np.zeros(dims.d, dtype=int)
    for _ in range(20):
        truth = prior_sample_set(dims, HP, 1, rng).params(0)
        hist, _, _ = simulate_from_model(truth, dims, 200, rng)
        S = sample_posterior(hist, HP, cfg, rng)
        lo, hi = np.quantile(S.mu, [0.05, 0.95], axis=0)
        hits += (lo <= truth.mu) & (truth.mu <= hi)
    return hits


def _long_fit():
    dims = Dims(2, 1, 3)
    rng = np.random.default_rng(2)
    truth = prior_sample_set(dims, HP, 1, rng).params(0)
    hist, _, _ = simulate_from_model(truth, dims, 200, rng)
    cfg = ChainConfig(chains=3, warmup=1000, draws=8000, n_leapfrog=64)
    return sample_posterior(hist, HP, cfg, np.random.default_rng(5)).max_rhat()


def test_criterion_10_sampler_health():
    t0 = time.perf_counter()
    grad = _gradient_check(np.random.default_rng(2010))
    prior_z = _prior_recovery(np.random.default_rng(2011))
    hits = _coverage(np.random.default_rng(2012))
    r = _long_fit()
    minutes = (time.perf_counter() - t0) / 60
    ok = grad <= 1e-4 and prior_z <= 3 and hits.min() >= 16 and abs(r - 1) <= 0.01 and minutes < 10
    report(10, ok, f"max relative gradient error {grad:.1e}; prior recovery max {prior_z:.2f} SE; "
                   f"90% interval coverage of mu {hits.tolist()} of 20; max R-hat {r:.4f}; {minutes:.1f} min")
