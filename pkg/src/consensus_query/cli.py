"""Command-line entry point: ``consensus-query {run,sweep,gen,theory,validate}``."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import data, harness
from .errors import ConsensusQueryError
from .posterior import ChainConfig
from .simplex import AggregationFn

EXIT_INVALID = 2


def _floats(text):
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text):
    return [int(x) for x in text.replace(",", " ").split()]


def _write(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _add_run_flags(p):
    p.add_argument("--data", required=True, help="dataset file (line-delimited JSON)")
    p.add_argument("--policy", choices=harness.POLICIES, default="bayes")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--window", type=int, default=None, help="refit on the most recent W records after every example")
    p.add_argument("--chains", type=int, default=harness.ONLINE_CHAINS.chains)
    p.add_argument("--warmup", type=int, default=harness.ONLINE_CHAINS.warmup)
    p.add_argument("--refit-warmup", type=int, default=harness.ONLINE_CHAINS.refit_warmup)
    p.add_argument("--draws", type=int, default=harness.ONLINE_CHAINS.draws)
    p.add_argument("--leapfrog", type=int, default=harness.ONLINE_CHAINS.n_leapfrog)
    p.add_argument("--agg", choices=("consensus", "any", "all"), default="consensus")
    p.add_argument("--positive-class", type=int, default=1, help="positive class for --agg any/all")
    p.add_argument("--epsilon", type=float, default=harness.baselines.DEFAULT_EPSILON)
    p.add_argument("--no-shuffle", action="store_true", help="keep the file order")
    p.add_argument("--out", default=None, help="output file (default: stdout)")


def _run_config(args, threshold, run=0):
    chains = ChainConfig(
        chains=args.chains, warmup=args.warmup, draws=args.draws,
        refit_warmup=args.refit_warmup, n_leapfrog=args.leapfrog,
    )
    return harness.RunConfig(
        policy=args.policy, threshold=threshold, seed=args.seed, run=run, window=args.window,
        chains=chains, agg=AggregationFn(args.agg, args.positive_class), epsilon=args.epsilon,
        shuffle=not args.no_shuffle,
    )


def cmd_run(args):
    ds = data.load_dataset(args.data)
    res = harness.run_experiment(ds, _run_config(args, args.threshold, args.run))
    _write(res.dumps(), args.out)
    if args.out not in (None, "-"):
        print(json.dumps(res.summary, sort_keys=True))
    return 0


def cmd_sweep(args):
    ds = data.load_dataset(args.data)
    base = _run_config(args, 0.0)
    out = harness.sweep(ds, args.policy, args.thresholds, args.runs, base, keep_results=False)
    lines = [json.dumps({"format": harness.RESULT_FORMAT, "version": 1, "kind": "sweep", "config": base.echo()},
                        sort_keys=True)]
    lines += [json.dumps({"row": r}, sort_keys=True) for r in out.rows]
    lines += [json.dumps({"summary": r}, sort_keys=True) for r in out.table()]
    _write("\n".join(lines) + "\n", args.out)
    if args.out not in (None, "-"):
        for r in out.table():
            print(json.dumps(r, sort_keys=True))
    return 0


def cmd_gen(args):
    rng = np.random.default_rng(args.seed)
    if args.kind == "equicorr":
        ds = data.gen_equicorr_voters(args.H, args.rho, args.T, args.classifier_corr, rng)
    elif args.kind == "classwise":
        ds = data.preset_classwise(args.T, rng, args.sharpness)
    else:
        ds = data.preset_shift(args.T // 2, rng, args.sharpness)
    ds.meta["seed"] = args.seed
    data.save_dataset(ds, args.out)
    return 0


def cmd_theory(args):
    rng = np.random.default_rng(args.seed)
    if (args.nc is None) == (args.rho is None):
        raise ConsensusQueryError("give exactly one of --nc and --rho")
    rows = harness.theory_report(H=args.H, n_c=args.nc, rho=args.rho, n_q=args.nq, trials=args.trials, rng=rng)
    _write("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), args.out)
    return 0


def cmd_validate(args):
    ds = data.load_dataset(args.data)
    print(json.dumps({"valid": True, "K": ds.K, "M": ds.M, "H": ds.H, "T": len(ds)}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="consensus-query", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one online pass over a dataset")
    _add_run_flags(p)
    p.add_argument("--threshold", type=float, default=0.05, help="error threshold e in [0, 1)")
    p.add_argument("--run", type=int, default=0, help="run index (selects the shuffle)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="error-cost rows over thresholds and reshuffled runs")
    _add_run_flags(p)
    p.add_argument("--thresholds", type=_floats, default=list(harness.DEFAULT_THRESHOLDS))
    p.add_argument("--runs", type=int, default=12)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("kind", choices=("equicorr", "classwise", "shift"))
    p.add_argument("--T", type=int, default=250, help="number of examples (split evenly for shift)")
    p.add_argument("--H", type=int, default=3, help="experts (equicorr only)")
    p.add_argument("--rho", type=float, default=0.3, help="expert correlation (equicorr only)")
    p.add_argument("--classifier-corr", type=float, default=0.3, help="classifier-expert correlation (equicorr)")
    p.add_argument("--sharpness", type=float, default=data.DEFAULT_SHARPNESS, help="classifier confidence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("theory", help="closed-form vs simulated random-querying error")
    p.add_argument("--H", type=int, default=10)
    p.add_argument("--nc", type=int, default=None, help="consensus-set size")
    p.add_argument("--rho", type=_floats, default=None, help="equicorrelation values (three experts)")
    p.add_argument("--nq", type=_ints, default=[1, 3, 5, 7, 9])
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("validate", help="check a dataset file against the format")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConsensusQueryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
