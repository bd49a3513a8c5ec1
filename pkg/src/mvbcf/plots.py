"""Matplotlib figure rendering for the report-style CLI outputs.

Figures are written straight to files with the Agg backend so everything
works headless; PNG metadata is pinned so rerunning a seeded command gives
byte-identical artifacts.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 - must follow the backend pin
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .pipeline import AteReport, ModerationCurve  # noqa: E402

_SAVE_KWARGS = {"dpi": 150, "metadata": {"Software": "mvbcf"}}


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def save_ate_density(report: AteReport, path: str | Path,
                     outcome_names: list[str] | None = None) -> Path:
    """Joint scatter of pooled ATE draws (pairwise for p >= 2, histogram for p = 1)."""
    draws = report.draws
    p = draws.shape[1]
    names = outcome_names or [f"y{k + 1}" for k in range(p)]
    if p == 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(draws[:, 0], bins=40, color="steelblue", alpha=0.8)
        ax.axvline(report.mean[0], color="black", lw=1.2)
        ax.set_xlabel(f"ATE ({names[0]})")
        ax.set_ylabel("draws")
    else:
        pairs = [(a, b) for a in range(p) for b in range(a + 1, p)]
        fig, axes = plt.subplots(1, len(pairs), figsize=(5 * len(pairs), 4.5),
                                 squeeze=False)
        for ax, (a, b) in zip(axes[0], pairs):
            ax.scatter(draws[:, a], draws[:, b], s=4, alpha=0.25, color="steelblue")
            ax.axhline(0.0, color="gray", lw=0.6)
            ax.axvline(0.0, color="gray", lw=0.6)
            ax.set_xlabel(f"ATE ({names[a]})")
            ax.set_ylabel(f"ATE ({names[b]})")
    fig.suptitle("Posterior average treatment effects")
    fig.tight_layout()
    return _finish(fig, path)


def save_moderation(curve: ModerationCurve, path: str | Path,
                    outcome_names: list[str] | None = None) -> Path:
    """ICE spaghetti plus the bold PDP line, one panel per outcome component."""
    p = curve.pdp.shape[1]
    names = outcome_names or [f"y{k + 1}" for k in range(p)]
    fig, axes = plt.subplots(1, p, figsize=(5.5 * p, 4.2), squeeze=False)
    for k, ax in enumerate(axes[0]):
        for u in range(curve.ice.shape[0]):
            ax.plot(curve.grid, curve.ice[u, :, k], color="steelblue",
                    alpha=0.15, lw=0.7)
        ax.plot(curve.grid, curve.pdp[:, k], color="black", lw=2.2, label="PDP")
        ax.set_xlabel(curve.covariate)
        ax.set_ylabel(f"treatment effect ({names[k]})")
        ax.legend(loc="best")
    fig.suptitle(f"Moderation of the treatment effect by {curve.covariate}")
    fig.tight_layout()
    return _finish(fig, path)


def save_benchmark_figure(table: pd.DataFrame, path: str | Path) -> Path:
    """Grouped bars of mean PEHE per method and outcome."""
    sub = table[table["metric"] == "pehe_tau"]
    methods = sorted(sub["method"].unique())
    outcomes = sorted(sub["outcome"].unique())
    fig, ax = plt.subplots(figsize=(7, 4.2))
    width = 0.8 / max(len(outcomes), 1)
    xs = np.arange(len(methods))
    for i, outcome in enumerate(outcomes):
        vals = [
            float(sub[(sub["method"] == m) & (sub["outcome"] == outcome)]["value"].iloc[0])
            for m in methods
        ]
        ax.bar(xs + i * width, vals, width=width, label=f"y{outcome}")
    ax.set_xticks(xs + width * (len(outcomes) - 1) / 2)
    ax.set_xticklabels(methods)
    ax.set_ylabel("mean PEHE")
    ax.legend()
    fig.suptitle("Benchmark: precision in estimating heterogeneous effects")
    fig.tight_layout()
    return _finish(fig, path)
