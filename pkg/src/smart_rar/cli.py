"""Command-line entry point: ``smart-rar {simulate,oracle,diagnose}``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import pandas as pd

from . import adapt_weights as aw
from .core_model import write_records_csv
from .harness import (ConfigError, StudyAborted, aggregate, format_float, load_config,
                      oracle_for, oracle_table, resolve_threads, run_monte_carlo,
                      with_overrides, write_report)
from .inference import martingale_diagnostics
from .rng import TrialStreams

EXIT_OK, EXIT_CONFIG, EXIT_ABORTED = 0, 2, 3
log = logging.getLogger("smart_rar")

SUMMARY_METRICS = ("mean_y", "prop_a1_opt", "prop_regime_opt")


def _print_oracle(table: pd.DataFrame) -> None:
    print("regime  oracle_theta  mc_se      reference  contrast_diff")
    for _, r in table.iterrows():
        print(f"{r.regime_label:<6}  {format_float(r.theta_hat):>12}  {format_float(r.mc_se):>9}"
              f"  {format_float(r.reference_theta):>9}  {format_float(r.contrast_diff):>13}")


def _write_frame(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")


def cmd_simulate(args) -> int:
    config = with_overrides(load_config(args.config), n_reps=args.reps, seed=args.seed,
                            out=args.out)
    threads = resolve_threads(config, args.threads)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    oracle = oracle_for(config)
    try:
        table = run_monte_carlo(config, oracle.theta, threads=threads, policies=args.policy)
    except StudyAborted as exc:
        if exc.table is not None:
            _write_frame(exc.table, out / "replications.csv")
        print(f"study aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    _write_frame(table, out / "replications.csv")
    _write_frame(oracle_table(oracle), out / "oracle.csv")
    report = aggregate(table, oracle.theta, oracle.labels, config.design.direction, oracle)
    write_report(report, "csv", out / "report.csv")
    write_report(report, "json", out / "report.json")
    _print_oracle(oracle_table(oracle))
    print()
    print(f"{'policy':<14}" + "".join(f"{m:>26}" for m in SUMMARY_METRICS))
    for pol in report.policies:
        if pol == "oracle":
            continue
        cells = []
        for m in SUMMARY_METRICS:
            try:
                r = report.get(pol, m)
                cells.append(f"{format_float(r.value)} ({format_float(r.mc_se)})")
            except KeyError:
                cells.append("nan")
        print(f"{pol:<14}" + "".join(f"{c:>26}" for c in cells))
    print(f"\n{len(table)} replications on {threads} worker(s) in "
          f"{time.perf_counter() - t0:.1f} s; outputs in {out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    config = load_config(args.config)
    oracle = oracle_for(config, n_mc=args.n_mc, seed=args.seed)
    table = oracle_table(oracle)
    _print_oracle(table)
    if args.out:
        _write_frame(table, Path(args.out))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    config = with_overrides(load_config(args.config), seed=args.seed, out=args.out)
    try:
        policy = config.policy(args.policy)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), key=f"policy {args.policy}") from None
    index = [n for n, _ in config.policies].index(args.policy)
    checkpoints = [int(w) for w in args.checkpoints.split(",")] if args.checkpoints else None
    oracle = oracle_for(config)
    streams = TrialStreams(config.master_seed, index, args.rep)
    rep = martingale_diagnostics(config.design, config.scenario, policy, args.histories,
                                 args.inner, streams, oracle.theta, checkpoints=checkpoints)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = rep.record
    write_records_csv(record.final.records, out / "records.csv")
    _write_frame(pd.DataFrame(record.prob_history, columns=["week", "unit", "probability"]),
                 out / "prob_history.csv")
    if record.weight_state is not None:
        rows = [(kind, week, lab, xi[j], w[j])
                for kind, weeks in record.weight_state.weekly.items()
                for week, (xi, w) in sorted(weeks.items())
                for j, lab in enumerate(oracle.labels)]
        _write_frame(pd.DataFrame(rows, columns=["kind", "week", "regime", "xi_hat", "weight"]),
                     out / "weights.csv")
    _write_frame(pd.DataFrame([r.__dict__ for r in rep.rows]), out / "diagnostics.csv")
    print(f"policy {args.policy}: burn-in ended week {record.t_star}, "
          f"checkpoints {rep.checkpoints[0]}..{rep.checkpoints[-1]}")
    for kind in (aw.WIPW, aw.WAIPW):
        for weighted in (True, False):
            print(f"{kind:<6} {'weighted' if weighted else 'unweighted':<10} "
                  f"max |mean|/se = {rep.max_abs_t(kind, weighted):.2f}   "
                  f"second-moment max/min = {rep.second_moment_ratio(kind, weighted):.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smart-rar",
                                description="Response-adaptive SMART simulation studies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo study and write reports")
    s.add_argument("--config", required=True)
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--out")
    s.add_argument("--policy", action="append", help="restrict to named policies (repeatable)")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle", help="Monte Carlo true regime values")
    o.add_argument("--config", required=True)
    o.add_argument("--n-mc", type=int)
    o.add_argument("--seed", type=int)
    o.add_argument("--out", help="CSV path for the oracle table")
    o.set_defaults(func=cmd_oracle)

    d = sub.add_parser("diagnose", help="martingale diagnostics for one trial")
    d.add_argument("--config", required=True)
    d.add_argument("--policy", required=True)
    d.add_argument("--checkpoints", help="comma-separated weeks (default: 20 after burn-in)")
    d.add_argument("--histories", type=int, default=20)
    d.add_argument("--inner", type=int, default=100_000)
    d.add_argument("--rep", type=int, default=0)
    d.add_argument("--seed", type=int)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
