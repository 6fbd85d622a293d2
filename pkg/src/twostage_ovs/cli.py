"""Command-line entry point: ``run``, ``evaluate`` and ``sweep``."""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys

import numpy as np

from .algorithm import evaluate_true_objective
from .design import make_rng
from .errors import ConfigError, OvsError
from .experiment import (ALGOS, ExperimentConfig, _write_csv, apply_setting, load_config,
                         run_experiment, summary_row, x_columns)
from .problem import make_problem


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        apply_setting(cfg, *item.split("=", 1))
    if args.problem:
        cfg.problem = args.problem
    if args.algo:
        cfg.algo = args.algo
    for name in ("budget", "reps", "seed", "workers", "nb"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.out:
        cfg.out = args.out
    return cfg


def _print_summary(cfg, stats):
    xs = ", ".join(f"{m:.4g} (SD {s:.3g})" for m, s in zip(stats.mean_x, stats.sd_x))
    print(f"{cfg.problem} / {cfg.algo} / C={cfg.budget} / reps={stats.n}")
    print(f"  x*: {xs}")
    print(f"  G(x*): mean {stats.mean_G:.6g}  SD {stats.sd_G:.4g}  SE {stats.se_G:.4g}")
    print(f"  rE: mean {stats.mean_rE:.3g}%  SD {stats.sd_rE:.3g}%")
    if stats.rdeltaG is not None:
        print(f"  rdeltaG: {stats.rdeltaG:.3g}%")


def cmd_run(args) -> int:
    cfg = _base_config(args).validate()
    res = run_experiment(cfg)
    _print_summary(cfg, res.summary)
    if cfg.out:
        print(f"  wrote {cfg.out}/{{reps,traces,summary,timings}}.csv")
    return 0


def cmd_sweep(args) -> int:
    base = _base_config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    rows = []
    for v in values:
        cfg = copy.deepcopy(base)
        apply_setting(cfg, args.param, v)
        if base.out:
            cfg.out = os.path.join(base.out, f"{args.param}={v.strip()}")
        cfg.validate()
        res = run_experiment(cfg)
        _print_summary(cfg, res.summary)
        problem = make_problem(cfg.problem, **cfg.problem_params)
        rows.append({args.param: v.strip(),
                     **summary_row(cfg, res.summary, x_columns(problem.first_stage_points.shape[1]))})
    if base.out:
        _write_csv(os.path.join(base.out, "sweep.csv"), rows)
    return 0


def cmd_evaluate(args) -> int:
    params = {}
    for item in args.param or []:
        k, _, v = item.partition("=")
        params[k] = float(v)
    try:
        problem = make_problem(args.problem, **params)
    except (KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    x = np.array([float(v) for v in args.x.split(",")])
    hits = np.flatnonzero(np.all(np.isclose(problem.first_stage_points, x), axis=1))
    if hits.size == 0:
        raise ConfigError(f"x={args.x} is not in the first-stage set of {args.problem}")
    g = evaluate_true_objective(problem, int(hits[0]), args.nb, make_rng(args.seed))
    print(f"G({args.x}) = {g:.10g}  (N_B={args.nb})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twostage-ovs", description="Two-stage optimization via simulation")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--problem")
        p.add_argument("--algo", choices=ALGOS)
        p.add_argument("--budget", type=int)
        p.add_argument("--reps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--nb", type=int, help="oracle scenarios for true objective values")
        p.add_argument("--out", help="output directory for CSV files")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("run", help="run macro-replications of one method")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="repeat a run over values of one config key")
    common(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="estimate G(x) with exact recourse")
    p.add_argument("--problem", required=True)
    p.add_argument("--x", required=True, help="first-stage coordinates, comma-separated")
    p.add_argument("--nb", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="problem parameter")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OvsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
