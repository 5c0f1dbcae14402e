"""Online experiments: run a querying policy over a dataset, sweep thresholds, report metrics.

Seeding: run ``r`` of base seed ``s`` uses ``s * 1000 + r``; independent
streams for shuffling, truth tie-breaks, MCMC, policy choices and
inference draws are derived from it with fixed labels, so one component
can be re-run without disturbing the others.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import baselines
from .data import Dataset
from .errors import DomainError
from .inference import run_example
from .posterior import ChainConfig, History, HyperParams, prior_sample_set, sample_posterior, should_refit
from .simplex import AggregationFn, aggregate_u, determined_label
from .theory import (
    ConsensusSizeDist,
    err_equicorrelated_3,
    err_random_nq,
    expected_nc_equicorr_3,
    simulate_random_error,
)

POLICIES = ("bayes", "infexp", "confusion", "random")
DEFAULT_THRESHOLDS = (0.3, 0.2, 0.1, 0.05, 0.025, 0.01, 0.0)
STREAMS = {"shuffle": 0, "truth": 1, "mcmc": 2, "policy": 3, "inference": 4}
ONLINE_CHAINS = ChainConfig(chains=3, warmup=300, draws=200, refit_warmup=100, n_leapfrog=32)
RESULT_FORMAT = "consensus-query-result"
ECE_BINS = 10


def run_seed(base_seed, run):
    return int(base_seed) * 1000 + int(run)


def streams(base_seed, run):
    """Named generators for one run."""
    rs = run_seed(base_seed, run)
    return {name: np.random.default_rng(np.random.SeedSequence([rs, label])) for name, label in STREAMS.items()}


@dataclass(frozen=True)
class RunConfig:
    policy: str = "bayes"
    threshold: float = 0.05
    seed: int = 0
    run: int = 0
    window: int | None = None
    chains: ChainConfig = ONLINE_CHAINS
    hp: HyperParams = HyperParams()
    agg: AggregationFn = AggregationFn()
    epsilon: float = baselines.DEFAULT_EPSILON
    shuffle: bool = True

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise DomainError(f"policy must be one of {POLICIES}")
        if not 0.0 <= self.threshold < 1.0:
            raise DomainError("threshold must lie in [0, 1)")
        if self.window is not None and self.window < 1:
            raise DomainError("window must be positive")

    def echo(self):
        return {
            "policy": self.policy, "threshold": self.threshold, "seed": self.seed, "run": self.run,
            "window": self.window, "agg": self.agg.kind, "epsilon": self.epsilon, "shuffle": self.shuffle,
            "chains": asdict(self.chains), "hp": asdict(self.hp),
        }


def ece(confidences, correct, bins=ECE_BINS):
    """Expected calibration error with equal-width bins on [0, 1]."""
    conf = np.asarray(confidences, dtype=float)
    ok = np.asarray(correct, dtype=float)
    if conf.shape != ok.shape:
        raise DomainError("confidences and correctness flags differ in length")
    if bins < 1:
        raise DomainError("bins must be positive")
    if conf.size == 0:
        return 0.0
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    total = 0.0
    for b in np.unique(idx):
        sel = idx == b
        total += sel.mean() * abs(ok[sel].mean() - conf[sel].mean())
    return float(total)


def summarize(rows):
    n = len(rows)
    if n == 0:
        return {"n": 0, "error_rate": 0.0, "mean_queries": 0.0, "ece": 0.0, "first50": None, "last50": None}
    wrong = [r["prediction"] != r["truth"] for r in rows]
    q = [r["n_queries"] for r in rows]
    out = {
        "n": n,
        "error_rate": float(np.mean(wrong)),
        "mean_queries": float(np.mean(q)),
        "ece": ece([r["confidence"] for r in rows], [not w for w in wrong]),
        "first50": None,
        "last50": None,
    }
    if n >= 100:
        out["first50"] = float(np.mean(q[:50]))
        out["last50"] = float(np.mean(q[-50:]))
    return out


@dataclass
class ExperimentResult:
    rows: list
    summary: dict
    config: dict

    @property
    def error_rate(self):
        return self.summary["error_rate"]

    @property
    def mean_queries(self):
        return self.summary["mean_queries"]

    def queries(self):
        return np.array([r["n_queries"] for r in self.rows])

    def dumps(self):
        head = {"format": RESULT_FORMAT, "version": 1, "config": self.config, "summary": self.summary}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.rows]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())


def explore_exploit_report(result: ExperimentResult):
    """Mean queries over the first 50 and the last 50 examples."""
    q = result.queries()
    if q.size < 100:
        raise DomainError("need at least 100 examples")
    return float(q[:50].mean()), float(q[-50:].mean())


def _segment_shuffle(segments, rng):
    """Permutation that shuffles inside each run of equal segment tags, keeping run order."""
    order = []
    start = 0
    T = len(segments)
    for t in range(1, T + 1):
        if t == T or segments[t] != segments[start]:
            block = np.arange(start, t)
            order.extend(rng.permutation(block).tolist())
            start = t
    return np.array(order, dtype=np.int64)


class _Learner:
    """Posterior refits on the schedule, plus the baselines' running statistics."""

    def __init__(self, ds: Dataset, cfg: RunConfig, mcmc_rng):
        self.cfg = cfg
        self.rng = mcmc_rng
        self.K, self.H = ds.K, ds.H
        self.history = History(ds.K, ds.M, ds.H)
        self.state = None
        self.needs_mcmc = cfg.policy != "confusion"
        n_prior = cfg.chains.chains * cfg.chains.draws
        self.S = prior_sample_set(self.history.dims, cfg.hp, n_prior, mcmc_rng) if self.needs_mcmc else None
        self.stats = baselines.ExpertStats.fresh(ds.H)
        self.cm = baselines.ConfusionModel.fresh(ds.H, ds.K)
        self.cal_probs = []
        self.cal_labels = []
        self.n_refits = 0

    def observe(self, t, probs, votes, consensus):
        cfg = self.cfg
        if cfg.policy == "infexp":
            # expert identity is hidden from the exchangeable model
            votes_fit = self.rng.permutation(votes)
        else:
            votes_fit = votes
        self.history.append(probs, votes_fit, rid=t)
        self.stats = self.stats.update(votes, consensus)
        self.cm = baselines.update_confusion(self.cm, votes, consensus)
        if consensus is not None:
            self.cal_probs.append(probs)
            self.cal_labels.append(consensus)
        if not should_refit(t, cfg.window):
            return
        self.n_refits += 1
        if cfg.policy == "confusion":
            if self.cal_labels:
                temp = baselines.fit_temperature(np.array(self.cal_probs), np.array(self.cal_labels))
                self.cm = replace(self.cm, temperature=temp)
            return
        hist = self.history.tail(cfg.window) if cfg.window else self.history
        self.S = sample_posterior(hist, cfg.hp, cfg.chains, self.rng, init=self.state)
        self.state = self.S.state


def run_experiment(dataset: Dataset, cfg: RunConfig):
    """Process the (shuffled) dataset online with one policy and threshold."""
    st = streams(cfg.seed, cfg.run)
    T = len(dataset)
    order = _segment_shuffle(dataset.segments, st["shuffle"]) if cfg.shuffle else np.arange(T)
    tie_u = st["truth"].random(T)
    f = cfg.agg.check(dataset.K)
    learner = _Learner(dataset, cfg, st["mcmc"])
    rows = []
    for t, idx in enumerate(order, start=1):
        rec = dataset[int(idx)]
        u = float(tie_u[t - 1])
        truth = aggregate_u(rec.expert_votes, f, u, dataset.K)
        if cfg.policy in ("bayes", "random"):
            out = run_example(learner.S, rec, f, cfg.threshold, cfg.policy, st["inference"], tie_u=u,
                              policy_rng=st["policy"])
        elif cfg.policy == "infexp":
            out = baselines.run_infexp_example(learner.S, rec, f, cfg.threshold, learner.stats, st["inference"],
                                               cfg.epsilon, tie_u=u, policy_rng=st["policy"])
        else:
            out = baselines.run_confusion_example(learner.cm, rec, cfg.threshold)
        seen = np.full(dataset.H, -1, dtype=np.int64)
        q = list(out.queried)
        seen[q] = np.asarray(rec.expert_votes)[q]
        consensus = determined_label(seen, f, dataset.K, u)
        rows.append({
            "t": t,
            "index": int(idx),
            "segment": rec.segment,
            "prediction": int(out.prediction),
            "truth": int(truth),
            "n_queries": int(out.n_queries),
            "confidence": float(out.confidence),
            "est_error": float(out.est_error),
            "queried": [int(j) for j in out.queried],
            "full_panel_observed": bool(out.full_panel_observed),
        })
        learner.observe(t, rec.model_probs, seen, consensus)
    config = cfg.echo()
    config["n_refits"] = learner.n_refits
    config["dataset"] = dataset.meta
    return ExperimentResult(rows, summarize(rows), config)


@dataclass
class SweepResult:
    rows: list
    results: list = field(default_factory=list, repr=False)

    def table(self):
        """Per-threshold averages across runs."""
        out = []
        for e in sorted({r["threshold"] for r in self.rows}, reverse=True):
            sel = [r for r in self.rows if r["threshold"] == e]
            out.append({
                "threshold": e,
                "runs": len(sel),
                "error_rate": float(np.mean([r["error_rate"] for r in sel])),
                "mean_queries": float(np.mean([r["mean_queries"] for r in sel])),
                "ece": float(np.mean([r["ece"] for r in sel])),
            })
        return out


def sweep(dataset: Dataset, policy, thresholds, runs, cfg: RunConfig | None = None, keep_results=True):
    """Run every threshold on ``runs`` reshufflings of the dataset."""
    if runs < 1:
        raise DomainError("runs must be at least 1")
    thresholds = [float(e) for e in thresholds]
    if any(not 0.0 <= e < 1.0 for e in thresholds):
        raise DomainError("thresholds must lie in [0, 1)")
    base = cfg or RunConfig()
    rows, results = [], []
    for r in range(runs):
        for e in thresholds:
            cfg_r = RunConfig(**{**base.__dict__, "policy": policy, "threshold": e, "run": r})
            res = run_experiment(dataset, cfg_r)
            rows.append({
                "run": r, "threshold": e, "error_rate": res.error_rate,
                "mean_queries": res.mean_queries, "ece": res.summary["ece"],
            })
            if keep_results:
                results.append(res)
    return SweepResult(rows, results)


# ------------------------------------------------------------------ theory


def _flag(delta, se):
    return bool(delta > 3.0 * se) if se > 0 else bool(delta > 1e-12)


def theory_report(H=10, n_c=None, rho=None, n_q=(1, 3, 5, 7, 9), trials=100_000, rng=None, population=20_000):
    """Closed-form random-querying errors next to Monte-Carlo estimates.

    Give ``n_c`` for panels where exactly ``n_c`` of ``H`` experts form the
    consensus, or a list ``rho`` for three equicorrelated sign voters.
    Each row has the closed form, the simulation, its standard error, the
    absolute difference and a flag set when the difference exceeds three
    standard errors.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    if rho is not None:
        from .data import gen_equicorr_voters

        for r in rho:
            ds = gen_equicorr_voters(3, float(r), int(trials), 0.0, rng)
            est = simulate_random_error(ds.votes, 1, int(trials), rng)
            closed = err_equicorrelated_3(float(r))
            n_c_mean = float(np.mean(np.maximum(ds.votes.sum(axis=1), 3 - ds.votes.sum(axis=1))))
            delta = abs(closed - est.value)
            rows.append({
                "rho": float(r), "closed_form": closed, "simulated": est.value, "se": est.se, "abs_diff": delta,
                "flag": _flag(delta, est.se), "mean_nc": n_c_mean, "mean_nc_closed_form": expected_nc_equicorr_3(float(r)),
            })
        return rows
    if n_c is None:
        raise DomainError("give either n_c or rho")
    d = ConsensusSizeDist.point_mass(int(H), int(n_c))
    pop = (np.arange(int(H))[None, :] >= int(n_c)).astype(np.int64).repeat(population, axis=0)
    pop = rng.permuted(pop, axis=1)
    for k in n_q:
        k = int(k)
        closed = err_random_nq(d, k) if k % 2 == 1 else None
        est = simulate_random_error(pop, k, int(trials), rng)
        delta = abs(closed - est.value) if closed is not None else None
        rows.append({
            "H": int(H), "n_c": int(n_c), "n_q": k, "closed_form": closed, "simulated": est.value, "se": est.se,
            "abs_diff": delta, "flag": _flag(delta, est.se) if closed is not None else False,
        })
    return rows
