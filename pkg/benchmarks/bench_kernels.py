"""Time every hot kernel on the compiled and the pure-Python backend.

Run with ``python benchmarks/bench_kernels.py``.  Prints the mean wall time
per call and the speed-up of the compiled extension over numpy.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from consensus_query import kernels
from consensus_query.posterior import HyperParams


def _time(fn, min_seconds):
    fn()
    n, start = 0, time.perf_counter()
    while True:
        fn()
        n += 1
        elapsed = time.perf_counter() - start
        if elapsed >= min_seconds:
            return elapsed / n


def cases(rng, T=200, K=3, H=3, M=1, chains=3, N=600):
    hp = HyperParams()
    dH, dM = H * (K - 1), M * (K - 1)
    d = dH + dM
    P = d * (d - 1) // 2
    Q = 2 * d + P + 1 + T * dH
    votes = np.ascontiguousarray(rng.integers(0, K, (T, H)))
    zM = np.ascontiguousarray(rng.normal(size=(T, dM)))
    theta = np.ascontiguousarray(rng.normal(size=(chains, Q)) * 0.3)
    Z = np.ascontiguousarray(rng.normal(size=(chains, T, dH)))
    mean = np.zeros_like(Z)
    chol = np.ascontiguousarray(np.broadcast_to(np.eye(dH), (chains, dH, dH)))
    tau = np.full(chains, 0.5)
    panels = np.ascontiguousarray(rng.integers(0, K, (N, H)))
    probs = np.ascontiguousarray(rng.dirichlet(np.ones(K), size=(N, H)))
    u = rng.random((N, H))
    step = np.full(chains, 0.05)
    inv_mass = np.ones((chains, Q))
    ncp = (zM, votes, K, hp.eta, hp.sigma_mu, hp.sigma_sigma, hp.sigma_tau)
    return {
        "aggregate_batch": lambda b, r: b.aggregate_batch(panels, 0, 1, K, u[:, 0]),
        "categorical_draw": lambda b, r: b.categorical_draw(probs, u),
        "subset_error_count": lambda b, r: b.subset_error_count(panels, K, 1, 20_000, r),
        "vote_loglik": lambda b, r: b.vote_loglik(Z, votes, tau, K),
        "ess_update": lambda b, r: b.ess_update(Z.copy(), mean, chol, votes, tau, K, r),
        "ncp_logp_grad": lambda b, r: b.ncp_logp_grad(theta[0], *ncp),
        "ncp_hmc (16 steps)": lambda b, r: b.ncp_hmc(theta, *ncp, step, inv_mass, 16, r),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--min-seconds", type=float, default=0.5, help="time budget per kernel and backend")
    args = ap.parse_args(argv)
    backs = kernels.backends()
    if "compiled" not in backs:
        print("compiled extension not built; timing the python backend only")
    print(f"{'kernel':<22}" + "".join(f"{name:>14}" for name in backs) + ("     speed-up" if len(backs) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for bname, backend in backs.items():
            rng = np.random.default_rng(1)
            times[bname] = _time(lambda: fn(backend, rng), args.min_seconds)
        line = f"{name:<22}" + "".join(f"{times[b] * 1e3:>11.3f} ms" for b in backs)
        if len(backs) > 1:
            line += f"{times['python'] / times['compiled']:>12.1f}x"
        print(line)


if __name__ == "__main__":
    main()
