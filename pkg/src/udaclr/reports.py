"""Static plots for training runs and ablations."""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("sup", "edge", "adv", "inter", "dis", "aug", "d_mask", "d_edge")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def training_curves(run_dir, out_path=None):
    run_dir = Path(run_dir)
    hist = read_jsonl(run_dir / "history.jsonl")
    out_path = Path(out_path or run_dir / "plots" / "training.png")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [h["epoch"] for h in hist]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for k in LOSS_KEYS:
        vals = [h.get(k, 0.0) for h in hist]
        if any(vals):
            axes[0].plot(epochs, vals, label=k)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("epoch")
    axes[0].set_title("mean loss per epoch")
    axes[0].legend(fontsize=7)
    if "dice_cup" in hist[0]:
        axes[1].plot(epochs, [h["dice_disc"] for h in hist], label="disc")
        axes[1].plot(epochs, [h["dice_cup"] for h in hist], label="cup")
        axes[1].set_ylim(0, 1)
        axes[1].legend()
    axes[1].set_xlabel("epoch")
    axes[1].set_title("target test Dice")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def ablation_bar_chart(table, out_path):
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    names = list(table)
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 4))
    w = 0.38
    ax.bar([i - w / 2 for i in x], [table[n]["disc_mean"] for n in names], w,
           yerr=[table[n]["disc_std"] for n in names], label="disc", capsize=3)
    ax.bar([i + w / 2 for i in x], [table[n]["cup_mean"] for n in names], w,
           yerr=[table[n]["cup_std"] for n in names], label="cup", capsize=3)
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    lo = min(min(t["disc_mean"], t["cup_mean"]) for t in table.values())
    ax.set_ylim(max(0.0, lo - 0.1), 1.0)
    ax.set_ylabel("Dice (target test)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
