"""Figures for the CLI report paths. Always rendered off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _num(v):
    return float(v) if v not in ("", None) else None


def plot_training(rows, path):
    """Loss and clip fraction per stage from metrics.csv rows."""
    fig, (ax_loss, ax_clip) = plt.subplots(2, 1, figsize=(7, 6), sharex=False)
    offset = 0
    for stage in dict.fromkeys(r["stage"] for r in rows):
        sub = [r for r in rows if r["stage"] == stage]
        steps = [offset + int(r["step"]) for r in sub]
        ax_loss.plot(steps, [_num(r["loss"]) for r in sub], lw=0.8, label=stage)
        ev = [(s, _num(r["eval_metric"])) for s, r in zip(steps, sub) if _num(r["eval_metric"]) is not None]
        if ev:
            ax_loss.plot(*zip(*ev), "o", ms=4, label=f"{stage} eval")
        clip = [(s, _num(r["clip_fraction"])) for s, r in zip(steps, sub) if _num(r["clip_fraction"]) is not None]
        if clip:
            ax_clip.plot(*zip(*clip), lw=0.8, label=stage)
        offset = steps[-1] if steps else offset
    ax_loss.set_ylabel("masked prediction loss")
    ax_loss.legend(fontsize=8)
    ax_clip.set_ylabel("clip fraction")
    ax_clip.set_xlabel("step (stages concatenated)")
    ax_clip.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_curves(rows, path, target_eps=10.0):
    """Epsilon against scale factor k, one line per (mode, z0)."""
    fig, ax = plt.subplots(figsize=(7, 5))
    keys = dict.fromkeys((r["mode"], r["z0"]) for r in rows)
    for mode, z0 in keys:
        sub = [r for r in rows if r["mode"] == mode and r["z0"] == z0]
        ax.plot([r["k"] for r in sub], [r["epsilon"] for r in sub], lw=1, label=f"{mode} z0={z0:g}")
    ax.axhline(target_eps, color="k", ls="--", lw=0.7)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("scale factor k")
    ax.set_ylabel("epsilon")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_layer_scores(plan, path):
    """Per-layer mean squared gradient, selected layers highlighted."""
    names = list(plan.scores)
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(names)), 4))
    colors = ["tab:red" if n in plan.top_layers else "tab:blue" for n in names]
    ax.bar(range(len(names)), [plan.scores[n] for n in names], color=colors)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=75, fontsize=7)
    ax.set_yscale("log")
    ax.set_ylabel("mean squared gradient")
    ax.set_title(f"p={plan.p:g}, red = selected")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
