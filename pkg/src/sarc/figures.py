"""Figures for the report path: each delimited artifact gets a rendering.

Everything draws through the Agg backend straight to files, with the
Software metadata stripped so identical inputs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bench import (  # noqa: E402
    MODEL_PASS_MS,
    BenchmarkResult,
    SensitivityCurves,
    SweepResult,
    miss_probability,
)

__all__ = [
    "save_benchmark_figure",
    "save_sweep_figure",
    "save_queue_figure",
    "save_curves_figures",
]

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Software": None}}

_COUNT_PANELS = (
    ("hard_executed", "hard violations executed"),
    ("soft_overages", "soft window overages"),
    ("suppliers_no_review", "first-time suppliers unreviewed"),
    ("escalations", "escalations raised"),
)


def save_benchmark_figure(result: BenchmarkResult, path: Path) -> Path:
    """Four panels of per-regime means with 95% error bars."""
    path = Path(path)
    regimes = list(result.summary)
    labels = [r.value.replace("_", "\n") for r in regimes]
    fig, axes = plt.subplots(2, 2, figsize=(9, 7), sharex=True)
    for ax, (metric, title) in zip(axes.flat, _COUNT_PANELS):
        stats = [result.summary[r][metric] for r in regimes]
        ax.bar(labels, [s.mean for s in stats],
               yerr=[s.ci95_halfwidth for s in stats],
               capsize=3, color="#4878a8")
        ax.set_title(title, fontsize=10)
        ax.set_ylabel("count / episode", fontsize=9)
        ax.tick_params(labelsize=8)
    fig.suptitle(f"procurement regimes, n={max(s.n for m in result.summary.values() for s in m.values())} seeds")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def save_sweep_figure(sweep: SweepResult, path: Path) -> Path:
    """Residual violations against miss probability, with the linear fit."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 5))
    by_exec: dict = {}
    for cell in sweep.cells:
        by_exec.setdefault(cell.eps_exec, []).append(cell)
    for eps_exec, cells in sorted(by_exec.items()):
        xs = [miss_probability(c.eps_pred, c.eps_exec) for c in cells]
        ys = [c.hard_executed_stats.mean for c in cells]
        errs = [c.hard_executed_stats.ci95_halfwidth for c in cells]
        ax.errorbar(xs, ys, yerr=errs, fmt="o", capsize=3,
                    label=f"eps_exec={eps_exec:g}")
    span = [0.0, max(miss_probability(c.eps_pred, c.eps_exec)
                     for c in sweep.cells)]
    ax.plot(span, [sweep.intercept + sweep.slope * x for x in span],
            "k--", linewidth=1,
            label=f"fit: {sweep.slope:.1f}p (opportunities {sweep.opportunity_rate:.1f})")
    ax.set_xlabel("miss probability  eps_pred + (1-eps_pred) eps_exec")
    ax.set_ylabel("hard violations executed / episode")
    ax.set_title("residual violations under injected noise")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def _draw_queue(ax, rows: Sequence[Mapping], tau_rev_s: float) -> None:
    by_c: dict = {}
    for row in rows:
        by_c.setdefault(row["c"], []).append(row)
    for c, group in sorted(by_c.items()):
        finite = [(r["rho"], r["w_q_s"]) for r in group
                  if r["w_q_s"] != float("inf")]
        ax.plot([p[0] for p in finite], [p[1] for p in finite],
                marker=".", label=f"c={c}")
    ax.axhline(tau_rev_s, color="firebrick", linestyle="--", linewidth=1,
               label=f"reversibility window {tau_rev_s:g}s")
    ax.set_xlabel("utilisation rho")
    ax.set_ylabel("expected wait W_q (s)")
    ax.set_ylim(0, 4 * tau_rev_s)
    ax.legend(fontsize=8)


def save_queue_figure(rows: Sequence[Mapping], tau_rev_s: float,
                      path: Path) -> Path:
    """Erlang-C expected wait against utilisation; divergence leaves the axes."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 5))
    _draw_queue(ax, rows, tau_rev_s)
    ax.set_title("escalation wait vs operator utilisation")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def save_curves_figures(curves: SensitivityCurves, out_dir: Path) -> list:
    """One PNG beside each sensitivity CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(7, 5))
    eps = [r["eps"] for r in curves.residual_rows]
    ax.plot(eps, [r["posthoc_violation_pct"] for r in curves.residual_rows],
            marker=".", label="after-the-fact detector")
    ax.plot(eps, [r["sarc_violation_pct"] for r in curves.residual_rows],
            marker=".", label="inline enforcement")
    ax.set_xlabel("detector miss rate eps")
    ax.set_ylabel("executed violations (%)")
    ax.set_title("residual violations vs detector sensitivity")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "curves_residual.png"
    fig.savefig(p, **_SAVE_KWARGS)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(7, 5))
    tau = curves.queue_rows[0]["tau_rev_s"] if curves.queue_rows else 600.0
    _draw_queue(ax, curves.queue_rows, tau)
    ax.set_title("escalation wait vs operator utilisation")
    fig.tight_layout()
    p = out_dir / "curves_queue.png"
    fig.savefig(p, **_SAVE_KWARGS)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(7, 5))
    for row in curves.latency_rows:
        ax.scatter(row["latency_ms"], row["violation_pct"],
                   color="firebrick" if row["crosses_model_pass"] else "#4878a8",
                   zorder=3)
        ax.annotate(row["label"], (row["latency_ms"], row["violation_pct"]),
                    textcoords="offset points", xytext=(6, 6), fontsize=8)
    ax.axvline(MODEL_PASS_MS, color="grey", linestyle=":",
               label=f"model forward pass ~{MODEL_PASS_MS:g}ms")
    ax.set_xlabel("enforcement latency (ms)")
    ax.set_ylabel("executed violations (%)")
    ax.set_title("latency cost vs enforcement strength")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "curves_latency.png"
    fig.savefig(p, **_SAVE_KWARGS)
    plt.close(fig)
    paths.append(p)
    return paths
