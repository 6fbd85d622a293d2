"""Macro-replication driver: configuration, per-rep runs, statistics and CSV output.

Configuration is flat ``key = value`` text with dotted sections::

    problem.name = supplychain
    problem.sigma = 20
    algo.name = ours
    algo.alpha0 = 0.1
    experiment.budget = 1000
    experiment.reps = 20

Every replication draws from its own stream keyed by ``(seed, rep_id)`` and
true objective values come from a cached oracle whose scenario set does not
depend on the replication, so results are independent of worker count and
execution order.
"""

from __future__ import annotations

import ast
import csv
import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .algorithm import AlgoConfig, RunRecord, TrueObjective, run_algorithm1
from .baselines import DlhGpsConfig, RandomSaaConfig, run_dlh_gps, run_random_saa
from .design import make_rng
from .errors import ConfigError, ZeroDenominator
from .problem import PROBLEMS, make_problem

ALGOS = ("ours", "random-saa", "dlh-gps")
SIGMA_GPS_DEFAULT = {"linear": 5.0, "supplychain": 15.0, "supplychain-ext": 15.0}
ORACLE_SEED = 20240601
CSV_VERSION = 1


@dataclass
class ExperimentConfig:
    problem: str = "linear"
    problem_params: Dict[str, Any] = field(default_factory=dict)
    algo: str = "ours"
    algo_params: Dict[str, Any] = field(default_factory=dict)
    budget: int = 600
    reps: int = 100
    nb: int = 5000
    seed: int = 0
    out: Optional[str] = None
    workers: int = 1
    oracle_seed: int = ORACLE_SEED

    def validate(self) -> "ExperimentConfig":
        make_problem("linear")  # populates the registry
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; known: {sorted(PROBLEMS)}")
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algorithm {self.algo!r}; known: {list(ALGOS)}")
        if self.reps < 1:
            raise ConfigError("experiment.reps must be at least 1")
        if self.nb < 1:
            raise ConfigError("experiment.nb must be at least 1")
        if self.workers < 1:
            raise ConfigError("experiment.workers must be at least 1")
        if self.budget < 1:
            raise ConfigError("experiment.budget must be at least 1")
        try:
            make_problem(self.problem, **self.problem_params)
        except TypeError as exc:
            raise ConfigError(f"bad problem parameters: {exc}") from None
        self.algo_config(0).validate()
        return self

    def algo_config(self, seed: int):
        cls = {"ours": AlgoConfig, "random-saa": RandomSaaConfig, "dlh-gps": DlhGpsConfig}[self.algo]
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(self.algo_params) - names
        if unknown:
            raise ConfigError(f"unknown parameters for {self.algo}: {sorted(unknown)}")
        params = dict(self.algo_params)
        if self.algo == "dlh-gps" and "sigma_gps" not in params:
            params["sigma_gps"] = SIGMA_GPS_DEFAULT.get(self.problem, 5.0)
        return cls(C=self.budget, seed=seed, **params)


_SECTION_KEYS = {
    "experiment": {"budget", "reps", "nb", "seed", "out", "workers", "oracle_seed"},
}


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def apply_setting(cfg: ExperimentConfig, key: str, value) -> None:
    """Set one dotted key (``problem.sigma``, ``algo.alpha0``, ``experiment.reps``...)."""
    if isinstance(value, str):
        value = _parse_value(value)
    section, _, name = key.strip().partition(".")
    if not name:
        raise ConfigError(f"config key {key!r} needs a section prefix")
    if section == "problem":
        if name == "name":
            cfg.problem = str(value)
        else:
            cfg.problem_params[name] = value
    elif section == "algo":
        if name == "name":
            cfg.algo = str(value)
        else:
            cfg.algo_params[name] = value
    elif section == "experiment" and name in _SECTION_KEYS["experiment"]:
        if name == "out":
            cfg.out = None if value in ("", None) else str(value)
        else:
            if not isinstance(value, (int, float)) or isinstance(value, bool) or int(value) != value:
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            setattr(cfg, name, int(value))
    else:
        raise ConfigError(f"unknown config key {key!r}")


def parse_config_text(text: str, cfg: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        apply_setting(cfg, key, value)
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def compute_rE(gbar_hat: float, g_true: float) -> float:
    """Relative estimation error in percent, ``|Gbar - G| / |G| * 100``."""
    if g_true == 0:
        raise ZeroDenominator("relative error undefined at G = 0")
    return abs(gbar_hat - g_true) / abs(g_true) * 100.0


def compute_rdeltaG(mean_g_hat: float, g_star: float) -> float:
    """Signed relative excess of the mean achieved cost over the optimum, in percent."""
    if g_star == 0:
        raise ZeroDenominator("relative difference undefined at G* = 0")
    return (mean_g_hat - g_star) / g_star * 100.0


def _sd(v: np.ndarray) -> float:
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


@dataclass
class SummaryStats:
    n: int
    mean_x: Tuple[float, ...]
    sd_x: Tuple[float, ...]
    se_x: Tuple[float, ...]
    mean_G: float
    sd_G: float
    se_G: float
    mean_gbar: float
    mean_rE: float
    sd_rE: float
    rdeltaG: Optional[float] = None


def summarize(rows: Sequence[dict], x_cols: Sequence[str], g_star: Optional[float] = None) -> SummaryStats:
    n = len(rows)
    X = np.array([[float(r[c]) for c in x_cols] for r in rows])
    G = np.array([float(r["gtrue"]) for r in rows])
    gbar = np.array([float(r["gbar"]) for r in rows])
    rE = np.array([float(r["rE"]) for r in rows if r["rE"] not in ("", None)])
    sd_x = tuple(_sd(X[:, i]) for i in range(X.shape[1]))
    sd_G = _sd(G)
    root = math.sqrt(n)
    return SummaryStats(
        n=n,
        mean_x=tuple(float(v) for v in X.mean(axis=0)),
        sd_x=sd_x,
        se_x=tuple(s / root for s in sd_x),
        mean_G=float(G.mean()),
        sd_G=sd_G,
        se_G=sd_G / root,
        mean_gbar=float(gbar.mean()),
        mean_rE=float(rE.mean()) if rE.size else float("nan"),
        sd_rE=_sd(rE) if rE.size else float("nan"),
        rdeltaG=None if not g_star else compute_rdeltaG(float(G.mean()), g_star),
    )


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

_ORACLES: Dict[tuple, TrueObjective] = {}


def _oracle(cfg: ExperimentConfig, problem) -> TrueObjective:
    key = (cfg.problem, tuple(sorted(cfg.problem_params.items())), cfg.nb, cfg.oracle_seed)
    if key not in _ORACLES:
        _ORACLES[key] = TrueObjective(problem, cfg.nb, cfg.oracle_seed)
    return _ORACLES[key]


def run_method(problem, cfg: ExperimentConfig, rep_id: int) -> RunRecord:
    rng = make_rng(cfg.seed, rep_id)
    acfg = cfg.algo_config(cfg.seed)
    if cfg.algo == "ours":
        return run_algorithm1(problem, acfg, rng=rng)
    if cfg.algo == "random-saa":
        return run_random_saa(problem, acfg, rng=rng)
    return run_dlh_gps(problem, acfg, rng=rng)


def x_columns(dim: int) -> List[str]:
    return ["xstar"] if dim == 1 else [f"xstar_{i + 1}" for i in range(dim)]


def run_rep(cfg: ExperimentConfig, rep_id: int):
    """One macro-replication: returns ``(rep_row, trace_rows, wallclock_ms)``."""
    problem = make_problem(cfg.problem, **cfg.problem_params)
    t0 = time.perf_counter()
    rec = run_method(problem, cfg, rep_id)
    ms = (time.perf_counter() - t0) * 1e3
    oracle = _oracle(cfg, problem)
    gtrue = oracle(rec.ix)
    cols = x_columns(len(rec.x))
    row = {"rep_id": rep_id, **dict(zip(cols, rec.x)), "gbar": rec.gbar, "gtrue": gtrue,
           "rE": compute_rE(rec.gbar, gtrue) if gtrue != 0 and np.isfinite(rec.gbar) else "",
           "spent": rec.spent, "truncated": int(rec.truncated)}
    trace = []
    for t in rec.trace:
        xc = problem.first_stage(t.ix).coords
        trace.append({"rep_id": rep_id, "iter": t.iter, "spent": t.spent,
                      **{c.replace("xstar", "xhat"): v for c, v in zip(cols, xc)},
                      "gbar_incumbent": t.gbar, "gtrue_incumbent": oracle(t.ix)})
    return row, trace, ms


def _run_rep_star(args):
    return run_rep(*args)


def _write_csv(path: str, rows: List[dict], header: Optional[List[str]] = None):
    header = header or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def summary_row(cfg: ExperimentConfig, stats: SummaryStats, x_cols: Sequence[str]) -> dict:
    row = {"csv_version": CSV_VERSION, "problem": cfg.problem, "algo": cfg.algo,
           "budget": cfg.budget, "reps": stats.n, "nb": cfg.nb}
    for c, m, s, e in zip(x_cols, stats.mean_x, stats.sd_x, stats.se_x):
        row[f"mean_{c}"], row[f"sd_{c}"], row[f"se_{c}"] = m, s, e
    row.update(mean_G=stats.mean_G, sd_G=stats.sd_G, se_G=stats.se_G, mean_gbar=stats.mean_gbar,
               mean_rE=stats.mean_rE, sd_rE=stats.sd_rE,
               rdeltaG="" if stats.rdeltaG is None else stats.rdeltaG)
    return row


@dataclass
class ExperimentResult:
    summary: SummaryStats
    reps: List[dict]
    traces: List[dict]
    wallclock_ms: List[float]


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run ``cfg.reps`` macro-replications and, if ``cfg.out`` is set, write the CSVs.

    Files: ``reps.csv`` (one row per replication), ``traces.csv`` (incumbent
    after every iteration), ``summary.csv`` and ``timings.csv`` (wall-clock per
    replication, kept apart so that the other files are reproducible bit for bit).
    """
    cfg.validate()
    jobs = [(cfg, r) for r in range(cfg.reps)]
    if cfg.workers > 1 and cfg.reps > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_run_rep_star, jobs))
    else:
        results = [run_rep(*j) for j in jobs]
    reps = [r[0] for r in results]
    traces = [t for r in results for t in r[1]]
    ms = [r[2] for r in results]
    problem = make_problem(cfg.problem, **cfg.problem_params)
    x_cols = x_columns(problem.first_stage_points.shape[1])
    # statistics are computed from the values exactly as written to disk
    stats = summarize([{k: (float(repr(v)) if isinstance(v, float) else v) for k, v in r.items()} for r in reps],
                      x_cols, getattr(problem, "reference_optimum", None))
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        _write_csv(os.path.join(cfg.out, "reps.csv"), reps)
        _write_csv(os.path.join(cfg.out, "traces.csv"), traces)
        _write_csv(os.path.join(cfg.out, "summary.csv"), [summary_row(cfg, stats, x_cols)])
        _write_csv(os.path.join(cfg.out, "timings.csv"),
                   [{"rep_id": r["rep_id"], "wallclock_ms": round(m, 3)} for r, m in zip(reps, ms)])
    return ExperimentResult(stats, reps, traces, ms)


def read_reps_csv(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
