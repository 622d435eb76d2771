"""Report figures written straight to image files.

Uses the object-oriented Figure API with the Agg canvas, so nothing here
touches pyplot's global state or needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "figsize": (6.0, 3.6),
    "dpi": 120,
}


def _new_axes(title: str, xlabel: str, ylabel: str):
    fig = Figure(figsize=STYLE["figsize"], dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(1, 1, 1)
    ax.set_title(title, fontsize=10)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig, ax


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    return path


def loss_curve(records, path, title: str = "training loss") -> Path:
    """Per-step L1 loss from run-log records, with held-out PSNR on a second axis if present."""
    steps = [r["step"] for r in records if r.get("event") == "step"]
    losses = [r["loss"] for r in records if r.get("event") == "step"]
    fig, ax = _new_axes(title, "step", "L1 loss")
    if losses:
        ax.plot(steps, losses, lw=1.0, color="tab:blue")
        if min(losses) > 0:
            ax.set_yscale("log")
    evals = [r for r in records if r.get("event") == "eval" and np.isfinite(r.get("psnr", np.nan))]
    if evals:
        ax2 = ax.twinx()
        ax2.plot([r["step"] for r in evals], [r["psnr"] for r in evals], "o-", ms=3,
                 color="tab:orange")
        ax2.set_ylabel("held-out PSNR (dB)")
    return _save(fig, path)


def ablation_bars(rows, path, title: str = "ablation: final loss") -> Path:
    """Mean final loss per variant with per-seed points overlaid."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = _new_axes(title, "variant", "final L1 loss (fixed patches)")
    for i, name in enumerate(variants):
        vals = [r["final_loss"] for r in rows if r["variant"] == name]
        ax.bar(i, np.mean(vals), color="tab:gray" if name != "full" else "tab:blue", alpha=0.8)
        ax.plot([i] * len(vals), vals, "k.", ms=4)
    ax.set_xticks(range(len(variants)))
    ax.set_xticklabels(variants, rotation=30, ha="right", fontsize=8)
    return _save(fig, path)


def gradcheck_scatter(samples, path, tolerance: float | None = None) -> Path:
    """Analytic against numeric gradient per sampled scalar, coloured by parameter group."""
    from .train import param_group

    fig, ax = _new_axes("gradient check", "|numeric|", "relative error")
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(param_group(s.name), []).append(s)
    for name, members in sorted(groups.items()):
        x = [max(abs(s.numeric), 1e-30) for s in members]
        y = [max(s.rel_error, 1e-18) for s in members]
        ax.scatter(x, y, s=12, label=name)
    if tolerance is not None:
        ax.axhline(tolerance, color="tab:red", lw=0.8, ls="--")
    ax.set_xscale("log")
    ax.set_yscale("log")
    if groups:
        ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)
