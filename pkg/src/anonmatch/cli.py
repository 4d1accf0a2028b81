"""Command-line entry point.

    anonmatch run --config dar60 --set learner=dedqn --seeds 0-4 --out results/dar60
    anonmatch sweep --learners dqn,dedqn --scenarios dar25,dar60 --out results/sweep
    anonmatch gradcheck
    anonmatch oracle

Exit codes are listed in ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import MissingConfigError, canned_names, load_config, parse_seeds
from .errors import ConfigError, TrainingError, UnknownLearnerError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_UNKNOWN_LEARNER = 5
EXIT_RUNTIME = 6
EXIT_VERIFY = 7

EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_USAGE: "usage error",
    EXIT_MISSING_FILE: "config file not found",
    EXIT_SCHEMA: "config schema or type violation",
    EXIT_UNKNOWN_LEARNER: "unknown learner kind",
    EXIT_RUNTIME: "run failed (non-finite values, I/O)",
    EXIT_VERIFY: "verification failed (gradcheck/oracle)",
}

log = logging.getLogger("anonmatch")


def _add_config_args(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        p.add_argument("--config", help="JSON config file or a shipped config name (%s)" % ", ".join(canned_names()))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, dotted for nested ones (repeatable)")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0-4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anonmatch", description=__doc__.split("\n")[0],
                                     epilog="exit codes: " + "; ".join(f"{k} {v}" for k, v in EXIT_CODES.items()))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="train and evaluate one config over its seeds")
    _add_config_args(run)

    sweep = sub.add_parser("sweep", help="learners x scenarios grid")
    _add_config_args(sweep, with_config=False)
    sweep.add_argument("--learners", required=True, help="comma-separated learner kinds")
    sweep.add_argument("--scenarios", required=True, help="comma-separated config files or shipped names")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every training loss")
    gc.add_argument("--trials", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)

    orc = sub.add_parser("oracle", help="small-instance oracles")
    orc.add_argument("--which", default="vi,bandit,assignment", help="subset of vi,bandit,assignment")
    orc.add_argument("--seed", type=int, default=0)
    return parser


def _prepare(args, config_ref, extra_overrides=()):
    overrides = list(args.overrides) + list(extra_overrides)
    if args.seeds:
        overrides.append("seeds=" + json.dumps(parse_seeds(args.seeds)))
    if args.out:
        overrides.append("output_dir=" + json.dumps(args.out))
    return load_config(config_ref, overrides)


def _execute(config, scenario: str = "", jobs: int = 1, out=None) -> list:
    out = Path(out or config.output_dir)
    logs = harness.run_experiment(config, jobs=jobs)
    harness.write_results(logs, out, config, scenario=scenario)
    for row in harness.summary_rows(logs, scenario):
        print("{} {}: welfare {} (std {}), fairness std {}".format(row[0] or "-", row[1], _short(row[3]),
                                                                  _short(row[4]), _short(row[5])))
    return logs


def _short(text: str) -> str:
    return f"{float(text):.4g}"


def cmd_run(args) -> int:
    config, _ = _prepare(args, args.config)
    _execute(config, scenario=config.name, jobs=args.jobs)
    print(f"results in {config.output_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    learners = [k.strip() for k in args.learners.split(",") if k.strip()]
    scenarios = [s.strip() for s in args.scenarios.split(",") if s.strip()]
    root = Path(args.out or "results/sweep")
    # validate the whole grid before starting any run
    grid = []
    for scenario in scenarios:
        for kind in learners:
            config, _ = _prepare(args, scenario, [f"learner={json.dumps(kind)}"])
            label = Path(scenario).stem
            config.output_dir = str(root / label / kind)
            grid.append((label, config))
    rows, failures = [], 0
    for label, config in grid:
        try:
            logs = _execute(config, scenario=label, jobs=args.jobs)
            rows += harness.summary_rows(logs, label)
        except (TrainingError, OSError) as exc:
            failures += 1
            log.error("%s/%s failed: %s", label, config.learner, exc)
    root.mkdir(parents=True, exist_ok=True)
    harness.write_summary(rows, root / "summary.csv")
    print(f"results in {root}")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .oracles import GRAD_TOLERANCE, loss_gradient_suite

    worst = loss_gradient_suite(trials=args.trials, seed=args.seed)
    for name, err in worst.items():
        print(f"{name:14s} max relative error {err:.3e}")
    overall = max(worst.values())
    ok = overall < GRAD_TOLERANCE
    print(f"overall {overall:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRAD_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_oracle(args) -> int:
    from . import oracles

    which = {w.strip() for w in args.which.split(",") if w.strip()}
    unknown = which - {"vi", "bandit", "assignment"}
    if unknown:
        raise ConfigError(f"--which: unknown oracle {sorted(unknown)[0]!r}")
    ok = True
    if "vi" in which:
        gap, q_tab, q_vi = oracles.tabular_vs_value_iteration(seed=args.seed)
        passed = gap < oracles.VI_TOLERANCE
        ok &= passed
        print(f"tabular Q vs value iteration: max gap {gap:.3e} ({'ok' if passed else 'FAIL'})")
        print(f"  Q_vi  = {q_vi.round(6).tolist()}\n  Q_tab = {q_tab.round(6).tolist()}")
    if "bandit" in which:
        wins, probs = oracles.bandit_suite()
        passed = wins >= 9
        ok &= passed
        print(f"actor-critic bandit: {wins}/10 seeds prefer the paying arm with p > 0.95 "
              f"({'ok' if passed else 'FAIL'}); min p = {min(probs):.4f}")
    if "assignment" in which:
        freq = oracles.assignment_frequencies(seed=args.seed)
        passed = bool((abs(freq - 2 / 3) <= 0.02).all())
        ok &= passed
        print(f"assignment frequency, 3 idle / 2 jobs: {freq.round(4).tolist()} ({'ok' if passed else 'FAIL'})")
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck, "oracle": cmd_oracle}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except MissingConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except UnknownLearnerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_LEARNER
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
