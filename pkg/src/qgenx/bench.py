"""Experiment orchestration, CSV/summary output and rate diagnostics."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, load_config
from .simnet import Simulation, default_checkpoints

log = logging.getLogger(__name__)

CSV_COLUMNS = ("seed", "t", "gap", "bits_total", "bits_per_iter_mean", "eps_Q_bound", "var_empirical",
               "schedule_version")
GAP_FLOOR = 1e-14


@dataclass
class RateFit:
    checkpoints: list
    gaps: list
    slope: float
    intercept: float
    r2: float
    clamped: int = 0


def fit_rate(checkpoints: Sequence[float], gaps: Sequence[float]) -> RateFit:
    """Least-squares line through ``(log T, log gap)``.

    Gaps below ``1e-14`` are clamped to the floor and counted in ``clamped``.
    """
    T = np.asarray(checkpoints, dtype=np.float64)
    g = np.asarray(gaps, dtype=np.float64)
    if T.size != g.size:
        raise ValueError("checkpoints and gaps differ in length")
    if T.size < 3:
        raise ValueError("need at least 3 checkpoints for a rate fit")
    if np.any(T <= 0):
        raise ValueError("checkpoints must be positive")
    if np.any(~np.isfinite(g)):
        raise ValueError("gaps must be finite")
    low = g < GAP_FLOOR
    g = np.where(low, GAP_FLOOR, g)
    x, y = np.log(T), np.log(g)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(T.tolist(), g.tolist(), float(slope), float(intercept), r2, int(low.sum()))


@dataclass
class TradeoffReport:
    """Projection from the convergence bound, not a measurement."""

    epsilon: float
    eps_q_bar: float
    iterations: float
    bits_per_iteration: float
    total_bits: float
    label: str = "bound-derived projection"


def report_tradeoff(metrics, epsilon: float, *, sigma: float | None, M: float | None, D: float | None) -> TradeoffReport:
    """``T(eps) = (eps_Q_bar M^2 + sigma^2)^2 D^4 / eps^2`` and the implied bit budget."""
    if sigma is None or M is None or D is None:
        raise ValueError("trade-off report needs sigma, M and D")
    if not metrics:
        raise ValueError("trade-off report needs per-round metrics")
    if epsilon <= 0:
        raise ValueError("target gap must be positive")
    eps_bar = float(np.mean([m.eps_q for m in metrics]))
    iters = (eps_bar * M**2 + sigma**2) ** 2 * D**4 / epsilon**2
    per_iter = float(np.mean([m.bits_total for m in metrics]))
    return TradeoffReport(epsilon, eps_bar, iters, per_iter, iters * per_iter)


def tradeoff_iterations(eps_q_bar: float, sigma: float, M: float, D: float, epsilon: float) -> float:
    return (eps_q_bar * M**2 + sigma**2) ** 2 * D**4 / epsilon**2


def run_seed(config: RunConfig, seed: int):
    sim = Simulation(config, seed)
    traj, metrics = sim.run()
    return sim, traj, metrics


def _rows(seed, metrics, K):
    total = 0
    for m in metrics:
        total += m.bits_total
        yield {
            "seed": seed,
            "t": m.t,
            "gap": "" if m.gap is None else repr(m.gap),
            "bits_total": total,
            "bits_per_iter_mean": repr(total / (m.t * K)),
            "eps_Q_bound": repr(m.eps_q),
            "var_empirical": repr(m.var_empirical),
            "schedule_version": m.schedule_version,
        }


def run_experiment(config, output: str | Path | None = None) -> dict:
    """Run every seed of a config; write the metrics CSV and a JSON summary.

    ``config`` is a path to a TOML file or a :class:`RunConfig`.  Returns the
    summary dictionary.
    """
    cfg = load_config(config) if not isinstance(config, RunConfig) else config
    out = Path(output or cfg.output or "qgenx_metrics.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoints = sorted(set(cfg.checkpoints or default_checkpoints(cfg.T)))
    gaps = {c: [] for c in checkpoints}
    violations = {"variance_bound": 0, "code_length": 0}
    all_metrics = []
    clips = 0
    radius = None
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for seed in cfg.seeds:
            log.info("seed %d: %d rounds on %d workers", seed, cfg.T, cfg.K)
            sim, traj, metrics = run_seed(cfg, seed)
            radius = sim.domain.radius
            writer.writerows(_rows(seed, metrics, cfg.K))
            for c in checkpoints:
                gaps[c].append(traj.gaps[c])
            violations["variance_bound"] += sum(m.variance_bound_violations for m in metrics)
            violations["code_length"] += sim.codebook_violations
            clips += sum(m.clip_events for m in metrics)
            all_metrics.extend(metrics)
    median = [float(np.median(gaps[c])) for c in checkpoints]
    fit = None
    if len(checkpoints) >= 3:
        fit = asdict(fit_rate(checkpoints, median))
    summary = {
        "csv": str(out),
        "seeds": list(cfg.seeds),
        "K": cfg.K,
        "T": cfg.T,
        "variant": cfg.variant,
        "scheme": cfg.scheme,
        "s": cfg.s,
        "domain_radius": radius,
        "checkpoints": checkpoints,
        "median_gap": median,
        "rate_fit": fit,
        "violations": violations,
        "eps_Q_bar": float(np.mean([m.eps_q for m in all_metrics])),
        "bits_per_iter_mean": float(np.mean([m.bits_total for m in all_metrics])) / cfg.K,
        "clip_events": clips,
    }
    noise = cfg.problem.get("noise", {})
    bound = cfg.problem.get("bound")
    if cfg.tradeoff_epsilon is not None and noise.get("kind") == "absolute" and bound is not None:
        summary["tradeoff"] = asdict(report_tradeoff(all_metrics, cfg.tradeoff_epsilon, sigma=float(noise["sigma"]),
                                                     M=float(bound), D=radius))
    with open(out.with_suffix(".summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def read_metrics_csv(path) -> dict:
    """Median gap per checkpoint across seeds from a metrics CSV."""
    per_t: dict[int, list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            if row["gap"]:
                per_t.setdefault(int(row["t"]), []).append(float(row["gap"]))
    return {t: float(np.median(v)) for t, v in sorted(per_t.items())}


def format_fit(fit: RateFit) -> str:
    return (f"slope={fit.slope:.4f} intercept={fit.intercept:.4f} r2={fit.r2:.4f}"
            + (f" clamped={fit.clamped}" if fit.clamped else ""))
