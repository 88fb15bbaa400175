"""``bench`` command line: scenario runs, oracle truth and single-dataset fits."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bench import (
    ALL_ESTIMATORS,
    ConfigurationError,
    ScenarioSpec,
    default_triplets,
    emit_report,
    estimate_repetition,
    run_scenario,
)
from .ctmle import StoppingPolicy
from .data import DataError, RngSpec, read_csv
from .lasso import PropensityBounds
from .synthetic import SyntheticConfig, oracle_psi0

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2

_WORKING_MODELS = ("probit", "probit-intercept")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for partial failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_like(text: str) -> int:
    """Accepts ``10000000`` as well as ``1e7``."""
    value = float(text)
    if not value.is_integer():
        raise argparse.ArgumentTypeError(f"expected an integer, got {text}")
    return int(value)


def _list(kind):
    def parse(text: str):
        return [kind(t) for t in text.replace(",", " ").split()]

    return parse


def _default_cache() -> Path:
    root = os.environ.get("XDG_CACHE_HOME") or Path.home() / ".cache"
    return Path(root) / "ctmle_cont" / "oracle.json"


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="Monte-Carlo run of a scenario")
    run.add_argument("--scenario", required=True, help="1..6 or 'transfer'")
    run.add_argument("--b", type=int, default=200, help="repetitions per triplet")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", type=Path, required=True)
    run.add_argument("--n-list", type=_list(int))
    run.add_argument("--p-list", type=_list(int))
    run.add_argument("--delta-list", type=_list(float))
    run.add_argument("--estimators", type=_list(str))
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--stopping", choices=("grid", "plateau"), default="grid")
    run.add_argument("--g-bound", type=float, default=0.005, help="propensity truncation level")
    run.add_argument("--oracle-draws", type=_int_like, default=10_000_000)
    run.add_argument("--oracle-cache", type=Path, default=_default_cache())
    run.add_argument("--working-model", choices=_WORKING_MODELS, default="probit-intercept")

    orc = sub.add_parser("oracle", help="Monte-Carlo truth of the treatment effect")
    orc.add_argument("--p", type=int, required=True)
    orc.add_argument("--delta", type=float, default=0.0)
    orc.add_argument("--draws", type=_int_like, default=10_000_000)
    orc.add_argument("--seed", type=int, default=0)

    fit = sub.add_parser("fit", help="one estimator on a CSV dataset")
    fit.add_argument("--data", type=Path, required=True)
    fit.add_argument("--estimator", required=True, choices=ALL_ESTIMATORS)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--g-bound", type=float, default=0.005)
    fit.add_argument("--working-model", choices=_WORKING_MODELS, default="probit-intercept")
    return parser


def _scenario_id(text: str):
    if text == "transfer":
        return text
    try:
        return int(text)
    except ValueError:
        raise ConfigurationError(f"unknown scenario {text!r}") from None


def _triplets(scenario, args):
    base = default_triplets(scenario, args.n_list)
    if args.p_list:
        base = [(n, p, d) for n, _, d in dict.fromkeys((n, 0, d) for n, _, d in base) for p in args.p_list]
    if args.delta_list:
        base = [(n, p, d) for n, p, _ in dict.fromkeys((n, p, 0) for n, p, _ in base) for d in args.delta_list]
    return tuple(base)


def _cmd_run(args) -> int:
    scenario = _scenario_id(args.scenario)
    policy = StoppingPolicy(plateau_eta_rule=args.stopping == "plateau")
    spec = ScenarioSpec(
        id=scenario,
        triplets=_triplets(scenario, args),
        b=args.b,
        estimators=tuple(args.estimators or ()),
        seed=args.seed,
        policy=policy,
        bounds=PropensityBounds(args.g_bound),
        threads=args.threads,
        oracle_draws=args.oracle_draws,
        oracle_cache=args.oracle_cache,
        working_intercept=args.working_model == "probit-intercept",
    )
    report = run_scenario(spec)
    meta = {"stopping": args.stopping, "g_bound": args.g_bound, "working_model": args.working_model}
    emit_report(report, args.out, {**meta, "triplets": spec.triplets})
    print(f"wrote {args.out}/summary.csv ({len(report.cells)} cells, {len(report.failures)} failures)")
    return EXIT_OK if report.complete else EXIT_PARTIAL


def _cmd_oracle(args) -> int:
    psi0, se = oracle_psi0(SyntheticConfig(args.p, args.delta), args.draws, RngSpec(args.seed))
    print(json.dumps({"p": args.p, "delta": args.delta, "draws": args.draws, "psi0": psi0, "se": se}))
    return EXIT_OK


def _cmd_fit(args) -> int:
    dataset = read_csv(args.data)
    est, failed = estimate_repetition(
        dataset,
        [args.estimator],
        RngSpec(args.seed),
        StoppingPolicy(),
        PropensityBounds(args.g_bound),
        intercept=args.working_model == "probit-intercept",
    )
    if failed:
        print(json.dumps({"estimator": args.estimator, "error": failed[args.estimator]}))
        return EXIT_PARTIAL
    e = est[args.estimator]
    print(json.dumps({"estimator": args.estimator, "psi": e.psi, "se": e.se, "ci_low": e.ci_low, "ci_high": e.ci_high}))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"run": _cmd_run, "oracle": _cmd_oracle, "fit": _cmd_fit}
    try:
        return handlers[args.command](args)
    except (ConfigurationError, DataError, ValueError, FileNotFoundError) as exc:
        print(f"bench: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
