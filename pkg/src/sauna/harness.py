"""Multi-seed runs, summaries, run comparison and plot-data export.

A run directory holds::

    config.txt            archived ExperimentConfig
    seed_<s>.csv          one metrics row per update
    seed_<s>_timing.csv   wall-clock per update (kept apart so metrics are reproducible)
    seed_<s>.ckpt         final parameters
    status.csv            seed, status, message
    summary.csv           cross-seed mean/std of evaluation returns per checkpoint
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import METRICS_COLUMNS, save_agent, train, write_metrics, write_timing
from .config import ExperimentConfig, Variant
from .exceptions import ConfigurationError, SaunaError

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["update", "env_steps", "n_seeds", "eval_return_mean", "eval_return_std"]
STATUS_COLUMNS = ["seed", "status", "message"]
COMPARE_COLUMNS = ["env", "variant_a", "variant_b", "n_a", "n_b", "mean_a", "std_a",
                   "mean_b", "std_b", "improvement_pct"]

#: per-environment settings used by the ``paper-suite`` experiment
_SUITE_COMMON = dict(total_steps=150_000, horizon=2048, minibatch_size=128, learning_rate=1e-3,
                     lr_schedule="linear", normalize_reward=True, eval_every=1, eval_episodes=10)
SUITE_PRESETS = {
    # pendulum values calibrated on 6-seed sweeps at 150k steps
    "pendulum": {**_SUITE_COMMON, "gamma": 0.9},
    "pointmass": dict(_SUITE_COMMON),
}
SUITE_VARIANTS = ("ppo_baseline", "sauna", "no_filter_aux", "random_filter")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(text):
    return float(text) if text not in ("", None) else float("nan")


def sample_std(values):
    """Sample standard deviation (ddof=1); 0 for fewer than two values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1))


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def run_seed(config: ExperimentConfig, seed: int, out_dir) -> tuple:
    """Train one seed and write its files; returns ``(seed, status, message)``."""
    out_dir = Path(out_dir)
    try:
        result = train(config, seed)
    except (SaunaError, FloatingPointError, ValueError) as exc:
        logger.error("seed %s aborted: %s", seed, exc)
        return seed, "aborted", str(exc)
    write_metrics(result.records, out_dir / f"seed_{seed}.csv")
    write_timing(result.records, out_dir / f"seed_{seed}_timing.csv")
    if config.save_checkpoint:
        save_agent(out_dir / f"seed_{seed}.ckpt", result.nets, result.normalizer,
                   {"seed": seed, "env": config.env, "variant": config.variant})
    return seed, "ok", ""


@dataclass
class RunOutcome:
    out_dir: Path
    statuses: list

    @property
    def ok(self):
        return all(s == "ok" for _, s, _ in self.statuses)


def run_experiment(config: ExperimentConfig, out_dir=None, workers=1) -> RunOutcome:
    """One training run per seed, then the cross-seed summary."""
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = config.replace(output_dir=str(out_dir))
    config.save(out_dir / "config.txt")
    seeds = config.effective_seeds()
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            statuses = list(pool.map(run_seed, [config] * len(seeds), seeds,
                                     [out_dir] * len(seeds)))
    else:
        statuses = [run_seed(config, s, out_dir) for s in seeds]
    _write_csv(out_dir / "status.csv", STATUS_COLUMNS, statuses)
    write_summary(out_dir)
    return RunOutcome(out_dir, statuses)


def completed_seeds(run_dir):
    run_dir = Path(run_dir)
    status_path = run_dir / "status.csv"
    if status_path.exists():
        return [int(r["seed"]) for r in read_rows(status_path) if r["status"] == "ok"]
    return sorted(int(p.stem.split("_")[1]) for p in run_dir.glob("seed_*.csv")
                  if not p.stem.endswith("_timing"))


def load_seed_metrics(run_dir):
    """``{seed: [row dict, ...]}`` for every completed seed."""
    run_dir = Path(run_dir)
    return {s: read_rows(run_dir / f"seed_{s}.csv") for s in completed_seeds(run_dir)}


def summarize(per_seed: dict):
    """Rows of :data:`SUMMARY_COLUMNS` for updates evaluated in every seed."""
    by_update = {}
    for rows in per_seed.values():
        for r in rows:
            if r["eval_return"] != "":
                by_update.setdefault(int(r["update"]), []).append(
                    (int(r["env_steps"]), float(r["eval_return"])))
    n = len(per_seed)
    out = []
    for update in sorted(by_update):
        entries = by_update[update]
        if len(entries) != n:
            continue
        steps = np.array([e[0] for e in entries], dtype=np.float64)
        values = np.array([e[1] for e in entries])
        out.append([update, float(steps.mean()), n, float(values.mean()), sample_std(values)])
    return out


def write_summary(run_dir):
    run_dir = Path(run_dir)
    rows = summarize(load_seed_metrics(run_dir))
    _write_csv(run_dir / "summary.csv", SUMMARY_COLUMNS, [[_fmt(x) for x in r] for r in rows])
    return rows


def load_run_config(run_dir) -> ExperimentConfig:
    path = Path(run_dir) / "config.txt"
    if not path.exists():
        raise ConfigurationError(f"{run_dir} is not a run directory (no config.txt)")
    return ExperimentConfig.load(path)


def final_performance(run_dir, window=10):
    """Per-seed mean of the last ``window`` evaluation returns."""
    out = {}
    for seed, rows in load_seed_metrics(run_dir).items():
        evals = [float(r["eval_return"]) for r in rows if r["eval_return"] != ""]
        if evals:
            out[seed] = float(np.mean(evals[-window:]))
    return out


def _schedule(cfg: ExperimentConfig):
    return (cfg.env, cfg.total_steps, cfg.horizon, cfg.eval_every)


def compare(run_a, run_b, window=10):
    """Final-performance table for run B relative to run A."""
    for d in (run_a, run_b):
        if not Path(d).is_dir():
            raise ConfigurationError(f"run directory {d} does not exist")
    cfg_a, cfg_b = load_run_config(run_a), load_run_config(run_b)
    if _schedule(cfg_a) != _schedule(cfg_b):
        raise ConfigurationError(
            f"runs have different schedules: {_schedule(cfg_a)} vs {_schedule(cfg_b)}")
    perf_a = np.array(list(final_performance(run_a, window).values()))
    perf_b = np.array(list(final_performance(run_b, window).values()))
    if perf_a.size == 0 or perf_b.size == 0:
        raise ConfigurationError("a run has no evaluated seeds")
    mean_a, mean_b = float(perf_a.mean()), float(perf_b.mean())
    if mean_a == mean_b:
        improvement = 0.0
    elif mean_a == 0.0:
        improvement = float("inf") if mean_b > 0 else float("-inf")
    else:
        improvement = 100.0 * (mean_b - mean_a) / abs(mean_a)
    return [{
        "env": cfg_a.env, "variant_a": cfg_a.variant, "variant_b": cfg_b.variant,
        "n_a": int(perf_a.size), "n_b": int(perf_b.size),
        "mean_a": mean_a, "std_a": sample_std(perf_a),
        "mean_b": mean_b, "std_b": sample_std(perf_b),
        "improvement_pct": improvement,
    }]


def write_table(rows, columns, fh):
    w = csv.writer(fh, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])


EXPORTABLE = [c for c in METRICS_COLUMNS if c not in ("update",)]


def export_plotdata(run_dirs, metric):
    """Long-format per-seed rows and per-update cross-seed aggregates.

    Returns ``(long_rows, agg_rows)``: ``(steps, variant, seed, value)`` and
    ``(steps, variant, mean, std)``. ``steps`` of an aggregate row is the mean
    visited-step count across seeds at that update.
    """
    if metric not in EXPORTABLE:
        raise ConfigurationError(
            f"unknown metric {metric!r}; available: {', '.join(EXPORTABLE)}")
    long_rows, agg_rows = [], []
    for d in run_dirs:
        cfg = load_run_config(d)
        by_update = {}
        for seed, rows in sorted(load_seed_metrics(d).items()):
            for r in rows:
                if r[metric] == "":
                    continue
                steps, value = int(r["env_steps"]), float(r[metric])
                long_rows.append({"steps": steps, "variant": cfg.variant, "seed": seed,
                                  "value": value})
                by_update.setdefault(int(r["update"]), []).append((steps, value))
        for update in sorted(by_update):
            steps = np.mean([e[0] for e in by_update[update]])
            values = [e[1] for e in by_update[update]]
            agg_rows.append({"steps": float(steps), "variant": cfg.variant,
                             "mean": float(np.mean(values)), "std": sample_std(values)})
    return long_rows, agg_rows


def suite_config(env, variant, out_root, overrides=(), seeds=None) -> ExperimentConfig:
    base = ExperimentConfig(env=env, variant=variant).replace(**SUITE_PRESETS.get(env, {}))
    if seeds is not None:
        base = base.replace(seeds=tuple(seeds))
    cfg = base.with_overrides(overrides)
    return cfg.replace(output_dir=str(Path(out_root) / env / variant))


def run_suite(out_root, envs=("pendulum", "pointmass"), variants=SUITE_VARIANTS,
              overrides=(), workers=1):
    """Baseline vs SAUNA vs ablations for each environment.

    ``random_filter`` replays the per-update rejection fractions of the
    matching ``sauna`` seed, so ``sauna`` always runs first.
    """
    order = sorted(variants, key=lambda v: v == Variant.RANDOM_FILTER.value)
    outcomes = {}
    for env in envs:
        for variant in order:
            cfg = suite_config(env, variant, out_root, overrides)
            if variant == Variant.RANDOM_FILTER.value and Variant.SAUNA.value in variants:
                outcomes[(env, variant)] = _run_paired_random(cfg, Path(out_root) / env / "sauna",
                                                              workers)
            else:
                outcomes[(env, variant)] = run_experiment(cfg, workers=workers)
    return outcomes


def _run_paired_random(cfg: ExperimentConfig, sauna_dir: Path, workers):
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    statuses = []
    for seed in cfg.effective_seeds():
        schedule = sauna_dir / f"seed_{seed}.csv"
        if not schedule.exists():
            statuses.append((seed, "aborted", f"no paired sauna run at {schedule}"))
            continue
        seed_cfg = cfg.replace(random_filter_schedule=str(schedule))
        statuses.append(run_seed(seed_cfg, seed, out_dir))
    _write_csv(out_dir / "status.csv", STATUS_COLUMNS, statuses)
    write_summary(out_dir)
    return RunOutcome(out_dir, statuses)
