"""Command-line interface: fit models, generate knockoffs, run diagnostics,
reproduce the simulation study, and tune vine knockoff machines."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from . import knockoffs as ko
from .diagnostics import diagnostics_report
from .harness import ExperimentConfig, run_experiment, write_results
from .knockoffs import KnockoffConfig, KnockoffKind, KnockoffMachine
from .margins import MarginKind
from .tune import TuneConfig, sgd_tune

logger = logging.getLogger(__name__)

_METHODS = {"gaussian": KnockoffKind.GAUSSIAN,
            "gausscop": KnockoffKind.GAUSSIAN_COPULA,
            "vine": KnockoffKind.VINE_COPULA}


def read_data_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [[float(v) for v in row] for row in reader if row]
    return header, np.asarray(data, dtype=float)


def write_data_csv(path, header, x):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.atleast_2d(x):
            writer.writerow([repr(float(v)) for v in row])


def _cmd_fit(args):
    _, x = read_data_csv(args.data)
    config = KnockoffConfig(margin_kind=MarginKind(args.margins))
    machine = ko.fit(_METHODS[args.method], x, config)
    machine.save(args.output)
    logger.info("fitted %s machine for %d variables -> %s",
                args.method, machine.d, args.output)
    return 0


def _cmd_knockoff(args):
    header, x = read_data_csv(args.data)
    machine = KnockoffMachine.load(args.model)
    xt = ko.generate(machine, x, np.random.default_rng(args.seed))
    write_data_csv(args.output, [f"{name}_knockoff" for name in header], xt)
    return 0


def _cmd_diagnose(args):
    _, x = read_data_csv(args.data)
    _, xt = read_data_csv(args.knockoffs)
    report = diagnostics_report(x, xt, seed=args.seed)
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "ks", "ks_average", "mmd_full_swap",
                         "mmd_bandwidth"])
        for j, ks in enumerate(report.ks_per_variable):
            writer.writerow([j, repr(float(ks)), repr(report.ks_average),
                             repr(report.mmd_full_swap), repr(report.mmd_bandwidth)])
    return 0


def _cmd_simulate(args):
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config.seed = args.seed
    output = args.output or config.output
    if output is None:
        raise SystemExit("no output path: pass --output or set it in the config")
    rows, failures = run_experiment(config, threads=args.threads)
    write_results(rows, output)
    logger.info("wrote %d rows (%d failed replications) -> %s",
                len(rows), failures, output)
    return 0 if failures == 0 else 1


def _cmd_tune(args):
    _, x = read_data_csv(args.data)
    machine = KnockoffMachine.load(args.model)
    config = TuneConfig(learning_rate=args.lr, batch_size=args.batch,
                        n_iterations=args.iterations, seed=args.seed or 0)
    tuned, trace = sgd_tune(machine, x, config)
    tuned.save(args.output)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss"])
            for it, loss in enumerate(trace):
                writer.writerow([it, repr(float(loss))])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copulaknockoffs",
        description="Model-X knockoffs via Gaussian, Gaussian-copula and "
                    "vine-copula models")
    parser.add_argument("--verbose", action="store_true", help="log to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a knockoff machine from a data CSV")
    p_fit.add_argument("data")
    p_fit.add_argument("--method", choices=sorted(_METHODS), required=True)
    p_fit.add_argument("--margins", choices=[k.value for k in MarginKind],
                       default="kde")
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--output", required=True)
    p_fit.set_defaults(func=_cmd_fit)

    p_ko = sub.add_parser("knockoff", help="generate knockoffs from a model file")
    p_ko.add_argument("model")
    p_ko.add_argument("data")
    p_ko.add_argument("--seed", type=int, default=0)
    p_ko.add_argument("--output", required=True)
    p_ko.set_defaults(func=_cmd_knockoff)

    p_diag = sub.add_parser("diagnose", help="KS and MMD diagnostics")
    p_diag.add_argument("data")
    p_diag.add_argument("knockoffs")
    p_diag.add_argument("--seed", type=int, default=None)
    p_diag.add_argument("--output", required=True)
    p_diag.set_defaults(func=_cmd_diagnose)

    p_sim = sub.add_parser("simulate", help="run the simulation study from a config")
    p_sim.add_argument("config")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.add_argument("--output", default=None)
    p_sim.set_defaults(func=_cmd_simulate)

    p_tune = sub.add_parser("tune", help="SGD-tune a vine knockoff model")
    p_tune.add_argument("model")
    p_tune.add_argument("data")
    p_tune.add_argument("--lr", type=float, default=0.05)
    p_tune.add_argument("--batch", type=int, default=64)
    p_tune.add_argument("--iterations", type=int, default=50)
    p_tune.add_argument("--seed", type=int, default=None)
    p_tune.add_argument("--trace", default=None)
    p_tune.add_argument("--output", required=True)
    p_tune.set_defaults(func=_cmd_tune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
