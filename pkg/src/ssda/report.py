"""Report rendering: loss/metric curves and confusion-matrix figures saved
next to the delimited outputs of each run."""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_training_curves(metrics_jsonl: str, out_path: str) -> str:
    steps: dict = {"L_main": [], "L_p": [], "L_adv": [], "L_d": []}
    iters: dict = {k: [] for k in steps}
    evals: dict = {}
    with open(metrics_jsonl, "r", encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            if "eval" in rec:
                ev = rec["eval"]
                evals.setdefault(ev["domain"], []).append(
                    (rec["iter"], ev["value"]))
                continue
            for key in steps:
                if rec.get(key) is not None:
                    steps[key].append(rec[key])
                    iters[key].append(rec["iter"])

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key, vals in steps.items():
        if vals:
            axes[0].plot(iters[key], vals, label=key, linewidth=0.8)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[0].set_title("training losses")
    for domain, pts in sorted(evals.items()):
        xs, ys = zip(*pts)
        axes[1].plot(xs, ys, marker="o", label=domain)
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("held-out metric")
    axes[1].set_ylim(0, 1)
    axes[1].legend()
    axes[1].set_title("evaluation")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_confusion(conf: np.ndarray, out_path: str,
                   title: str = "confusion matrix") -> str:
    conf = np.asarray(conf, dtype=np.float64)
    row_sums = conf.sum(axis=1, keepdims=True)
    norm = np.divide(conf, row_sums, out=np.zeros_like(conf),
                     where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(norm, cmap="viridis", vmin=0, vmax=1)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    ax.set_title(title)
    for i in range(conf.shape[0]):
        for j in range(conf.shape[1]):
            ax.text(j, i, f"{int(conf[i, j])}", ha="center", va="center",
                    color="white" if norm[i, j] < 0.6 else "black",
                    fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
