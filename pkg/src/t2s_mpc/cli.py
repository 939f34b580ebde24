"""Command line: ``t2s-mpc {run,suite,selfcheck,plot}``.

Exit codes: 0 success, 1 runtime fault, 2 usage or config error.  Outputs go
under ``--out`` (default ``$T2S_MPC_OUT`` or ``./t2s_out``).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings
from dataclasses import replace


from . import config as config_mod
from .harness import LOG_COLUMNS, METHODS, RunLog, emit_plots, run_once, run_suite, timing_report

OUT_ENV = "T2S_MPC_OUT"

EXIT_OK, EXIT_FAULT, EXIT_USAGE = 0, 1, 2


def _out_dir(args) -> str:
    out = args.out or os.environ.get(OUT_ENV) or "t2s_out"
    os.makedirs(out, exist_ok=True)
    return out


def _methods(text: str):
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {', '.join(bad)}; expected from {', '.join(METHODS)}")
    return tuple(names)


def _load(name):
    try:
        return config_mod.load(name)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None


def cmd_run(args) -> int:
    loaded = _load(args.config)
    if loaded is None:
        return EXIT_USAGE
    cfg, _ = loaded
    if args.method:
        cfg = replace(cfg, method=args.method)
    seed = cfg.base_seed if args.seed is None else args.seed
    out = _out_dir(args)
    log = run_once(cfg, seed)
    stem = f"run_{cfg.task}_{cfg.method}_seed{seed}"
    path = os.path.join(out, stem + ".csv")
    with open(path, "w", newline="") as fh:
        fh.write(log.to_csv())
    if not args.no_plots:
        emit_plots([log], out, stem)
    print(f"{cfg.method} {cfg.task} {cfg.disturbance.label()} seed={seed}: mean error {log.mean_error:.6f} m"
          f" over {len(log.rows)} steps -> {path}")
    if log.failed:
        print(f"simulation fault: {log.message}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK


def cmd_suite(args) -> int:
    loaded = _load(args.config)
    if loaded is None:
        return EXIT_USAGE
    cfg, suite = loaded
    if suite is None:
        print(f"config error: {args.config}: grid: missing (suite needs a grid section)", file=sys.stderr)
        return EXIT_USAGE
    base = suite.base
    if args.n_runs is not None:
        if args.n_runs < 1:
            print("config error: --n-runs: must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        base = replace(base, n_runs=args.n_runs)
    if args.seed is not None:
        base = replace(base, base_seed=args.seed)
    suite = replace(suite, base=base, methods=args.methods or suite.methods)
    if not suite.cells():
        print("config error: grid: no cells to run", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table = run_suite(suite, jobs=args.jobs)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        fh.write(table.to_csv())
    text = table.format()
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(text)
    print(text)
    empty = [c for c in table.cells if c.n == 0]
    for c in empty:
        print(f"cell failed completely: {c.method}/{c.task}/{c.disturbance.label()}", file=sys.stderr)
    if args.timing:
        rep = timing_report(base, base.base_seed, check=False)
        print(rep.format())
    return EXIT_FAULT if empty else EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all
    results = run_all(seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:22s} {r.detail}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAULT
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def read_log_csv(path: str) -> RunLog:
    """Load a run CSV written by ``run`` back into a :class:`RunLog` for plotting."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != LOG_COLUMNS:
            raise ValueError(f"{path}: not a run log (unexpected columns)")
        rows = [tuple(float(v) for v in r) for r in reader]
    log = RunLog(config=None, seed=-1, rows=rows)
    log.label = os.path.splitext(os.path.basename(path))[0]
    return log


def cmd_plot(args) -> int:
    logs = []
    for path in args.logs:
        try:
            logs.append(read_log_csv(path))
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    out = _out_dir(args)
    for path in emit_plots(logs, out, args.stem):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2s-mpc", description="Online residual-learning MPC for a planar quadrotor.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, default_config):
        sp.add_argument("--config", default=default_config,
                        help=f"YAML file or preset name ({', '.join(config_mod.preset_names())})")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./t2s_out)")
        sp.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="one closed-loop simulation")
    common(r, "stabilize_periodic")
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="seeded multi-run grid with a summary table")
    common(s, "default_suite")
    s.add_argument("--methods", type=_methods, help="comma-separated subset of methods")
    s.add_argument("--n-runs", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--timing", action="store_true", help="also report per-update wall time")
    s.set_defaults(func=cmd_suite)

    c = sub.add_parser("selfcheck", help="oracle and invariant checks")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_selfcheck)

    pl = sub.add_parser("plot", help="regenerate plots from run CSVs")
    pl.add_argument("logs", nargs="+")
    pl.add_argument("--out")
    pl.add_argument("--stem", default="replot")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
