"""
Command-line entry point.

Exit codes: 0 on success (for fits: converged), 2 when a fit stopped at
``max_iter`` without converging (its artifacts are still written), 1 on
any error.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import io
from .config import RunConfig
from .em import MMMParams, fit
from .errors import MMMError
from .selection import ari, mape_blocks, select_k
from .simulate import SCENARIOS, Scenario, generate, run_scenario

log = logging.getLogger("mmm")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def _load_config(args):
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    threads = args.threads if getattr(args, "threads", None) is not None else os.environ.get("MMM_THREADS")
    return config.with_overrides(seed=getattr(args, "seed", None), threads=threads)


def _load_dataset(args):
    schema = io.read_schema(args.schema)
    return io.read_data(args.data, schema)


def _write_fit(result, ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    io.write_params(result, os.path.join(out_dir, "params.json"), ds.schema.expanded()[0])
    io.write_assignments(result, ds.units, os.path.join(out_dir, "assignments.csv"))
    io.write_loglik_history(result.loglik_history, os.path.join(out_dir, "loglik_history.csv"))


def cmd_fit(args):
    config = _load_config(args)
    ds = _load_dataset(args)
    result = fit(ds, args.k, config)
    _write_fit(result, ds, args.out_dir)
    log.info("K=%d: %d iterations, loglik %.4f, BIC %.4f", args.k, result.iterations, result.loglik, result.bic)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_select_k(args):
    config = _load_config(args)
    ds = _load_dataset(args)
    report = select_k(ds, args.kmax, config)
    os.makedirs(args.out_dir, exist_ok=True)
    report.to_csv(os.path.join(args.out_dir, "ksweep.csv"))
    best = report.best_fit
    _write_fit(best, ds, args.out_dir)
    log.info("best K = %d", report.best_k)
    return EXIT_OK if best.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args):
    gen = SCENARIOS[args.scenario](n=args.n, noise=args.noise, seed=args.seed)
    ds, truth = generate(gen)
    os.makedirs(args.out_dir, exist_ok=True)
    io.write_data(ds, os.path.join(args.out_dir, "data.csv"))
    io.write_schema(ds.schema, os.path.join(args.out_dir, "schema.json"))
    io.write_truth(truth, ds.units, os.path.join(args.out_dir, "truth.json"), gen)
    return EXIT_OK


def _fit_paths(path):
    if os.path.isdir(path):
        return os.path.join(path, "params.json"), os.path.join(path, "assignments.csv")
    return path, os.path.join(os.path.dirname(path) or ".", "assignments.csv")


def cmd_evaluate(args):
    truth = io.read_truth(args.truth)
    params_path, assign_path = _fit_paths(args.fit)
    est = io.read_params(params_path)
    units, labels = io.read_assignments(assign_path)
    pos = {u: i for i, u in enumerate(truth["units"])}
    missing = [u for u in units if u not in pos]
    if missing or len(units) != len(pos):
        raise MMMError(f"fit and truth cover different units (e.g. {missing[:1] or 'count mismatch'})")
    true_labels = np.asarray(truth["labels"])[[pos[u] for u in units]]
    noisy = set(truth.get("noisy_units", []))
    clean = np.array([u not in noisy for u in units])

    rows = [("ari", ari(true_labels, labels))]
    if noisy:
        rows.append(("ari_clean_units", ari(true_labels[clean], labels[clean])))
    true_params = MMMParams.from_dict(truth["params"])
    if est.K == true_params.K and est.M.shape == true_params.M.shape:
        for name, value in mape_blocks(est, true_params).items():
            rows.append((f"mape_{name}", value))
    else:
        log.warning("K or dimensions differ from the truth; MAPE skipped")
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, value in rows:
            w.writerow([name, repr(float(value))])
    return EXIT_OK


def cmd_scenario(args):
    config = _load_config(args)
    scenario = Scenario(
        name=args.scenario,
        N=tuple(args.n),
        tau=tuple(args.noise),
        seeds=tuple(args.seeds),
        kmax=args.kmax,
        config=config,
        bayes=not args.no_bayes,
    )
    run_scenario(scenario, args.out_dir)
    return EXIT_OK


def _noise(value):
    x = float(value)
    if not 0.0 <= x < 1.0:
        raise argparse.ArgumentTypeError(f"noise fraction must lie in [0, 1), got {value}")
    return x


def _positive(value):
    x = int(value)
    if x < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return x


def build_parser():
    p = argparse.ArgumentParser(prog="mmm", description="Clustering of longitudinal mixed-type data.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def run_options(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--threads", help="worker count or 'auto' (default: $MMM_THREADS or 1)")

    sp = sub.add_parser("fit", help="fit a K-cluster model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--schema", required=True)
    sp.add_argument("--k", type=_positive, required=True)
    sp.add_argument("--out-dir", required=True)
    run_options(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("select-k", help="fit K = 1..kmax and keep the lowest BIC")
    sp.add_argument("--data", required=True)
    sp.add_argument("--schema", required=True)
    sp.add_argument("--kmax", type=_positive, required=True)
    sp.add_argument("--out-dir", required=True)
    run_options(sp)
    sp.set_defaults(func=cmd_select_k)

    sp = sub.add_parser("simulate", help="draw a synthetic dataset")
    sp.add_argument("--scenario", choices=sorted(SCENARIOS), default="paper-4.1")
    sp.add_argument("--n", type=_positive, default=500)
    sp.add_argument("--noise", type=_noise, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("evaluate", help="compare a fit with the ground truth")
    sp.add_argument("--truth", required=True)
    sp.add_argument("--fit", required=True, help="fit directory or its params.json")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("scenario", help="run the simulation grid and write report CSVs")
    sp.add_argument("--scenario", choices=sorted(SCENARIOS), default="paper-4.1")
    sp.add_argument("--n", type=_positive, nargs="+", default=[500])
    sp.add_argument("--noise", type=_noise, nargs="+", default=[0.0])
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sp.add_argument("--kmax", type=int, default=0, help="0 skips the K sweep")
    sp.add_argument("--no-bayes", action="store_true", help="skip the true-parameter reference ARI")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--config", help="JSON run configuration")
    sp.add_argument("--threads", help="worker count or 'auto'")
    sp.set_defaults(func=cmd_scenario)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; that code is reserved
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (MMMError, OSError, ValueError, KeyError) as exc:
        print(f"mmm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
