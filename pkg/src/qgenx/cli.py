"""Command line entry point: ``qgenx run|fit|golden|bounds``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import golden
from .bench import fit_rate, format_fit, read_metrics_csv, run_experiment
from .codec import code_length_stats
from .config import ConfigError, load_config
from .quantizer import CoordinateCDF, LevelSchedule, level_weights, variance_bound
from .vi import make_problem


def cmd_run(args):
    summary = run_experiment(args.config, args.output)
    fit = summary["rate_fit"]
    print(f"wrote {summary['csv']}")
    for t, g in zip(summary["checkpoints"], summary["median_gap"]):
        print(f"  T={t:>7d}  median gap={g:.6g}")
    if fit:
        print(f"  rate fit: slope={fit['slope']:.4f} r2={fit['r2']:.4f}")
    print(f"  bound violations: {summary['violations']}")
    return 0 if not any(summary["violations"].values()) else 3


def cmd_fit(args):
    med = read_metrics_csv(args.csv)
    fit = fit_rate(list(med), list(med.values()))
    print(format_fit(fit))
    return 0


def cmd_golden(args):
    if args.emit:
        with open(args.emit, "w") as fh:
            json.dump(golden.compute(), fh, indent=2)
            fh.write("\n")
        print(f"wrote {args.emit}")
        return 0
    ok = True
    for name, good, want, got in golden.verify():
        print(f"{'PASS' if good else 'FAIL'} {name} {got}" + ("" if good else f" (expected {want})"))
        ok &= good
    return 0 if ok else 1


def cmd_bounds(args):
    cfg = load_config(args.config)
    op, _ = make_problem(cfg.problem)
    d = op.dimension
    if cfg.scheme == "fp32":
        print(f"d={d} scheme=fp32: no quantization (eps_Q=0, {32 * d} payload bits)")
        return 0
    sch = LevelSchedule.uniform(cfg.s, q=cfg.q)
    rep = variance_bound(sch, d)
    w = level_weights(CoordinateCDF.uniform(), sch)
    stats = code_length_stats(w, d)
    print(f"d={d} s={cfg.s} q={cfg.q} levels={sch.levels.tolist()}")
    print(f"eps_Q={rep.eps_q:.6g} level_ratio={rep.level_ratio:.6g} d_th={rep.d_threshold:.6g} "
          f"regime={rep.regime} p*={rep.p_star:.6g} K_p={rep.k_p:.6g}")
    print(f"N_Q={stats.bound:.6g} bits (H={stats.entropy:.6g}, p_0={w[0]:.6g}, uniform coordinate CDF)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qgenx", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="override the CSV output path")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("fit", help="log-log rate fit of median gaps in a metrics CSV")
    p.add_argument("csv")
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("golden", help="verify (or emit) codec and wire golden vectors")
    p.add_argument("--emit", metavar="PATH")
    p.set_defaults(func=cmd_golden)
    p = sub.add_parser("bounds", help="print eps_Q and N_Q for a config's schedule")
    p.add_argument("config")
    p.set_defaults(func=cmd_bounds)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
