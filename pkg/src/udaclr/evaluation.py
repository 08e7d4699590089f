"""Dice scoring, checkpoint evaluation and the ablation runner."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
from PIL import Image

from udaclr.config import TrainConfig
from udaclr.datasets import ArrayDataset, Benchmark, encode_mask, stack_samples
from udaclr.errors import ValidationError

log = logging.getLogger(__name__)


def dice(pred, truth) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValidationError(f"dice: shape mismatch {pred.shape} vs {truth.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(truth, (0, 1)).all()):
        raise ValidationError("dice needs binary masks")
    a, b = pred.astype(bool), truth.astype(bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


@dataclass
class EvalResult:
    dice_disc: float
    dice_cup: float
    per_image: list = field(default_factory=list)  # (id, dice_disc, dice_cup)
    config_id: str = ""

    def to_json(self, **kw):
        return json.dumps(asdict(self), **kw)


def _predict_fn(model) -> Callable:
    if hasattr(model, "trunk"):
        def predict(x):
            with torch.no_grad():
                return model(x, dropout_enabled=False).mask_probs
        return predict
    return model


def predict_masks(model, dataset: ArrayDataset, threshold, batch_size=32):
    predict = _predict_fn(model)
    out = []
    for i in range(0, len(dataset), batch_size):
        x = torch.from_numpy(dataset.images[i:i + batch_size]).contiguous(memory_format=torch.channels_last)
        out.append((predict(x) >= threshold).to(torch.uint8).cpu().numpy())
    return np.concatenate(out)


def evaluate_arrays(model, dataset: ArrayDataset, threshold=0.75, config_id="") -> EvalResult:
    """Binarise mask probabilities at ``threshold`` and score each image.

    ``model`` is a SegmentationNet or any callable mapping a B x 3 x H x W
    tensor to B x C x H x W probabilities."""
    if not dataset.labeled:
        raise ValidationError("evaluation needs a labelled dataset")
    preds = predict_masks(model, dataset, threshold)
    truth = dataset.masks.astype(np.uint8)
    per_image = [(sid, dice(p[0], t[0]), dice(p[1], t[1])) for sid, p, t in zip(dataset.ids, preds, truth)]
    return EvalResult(float(np.mean([r[1] for r in per_image])), float(np.mean([r[2] for r in per_image])),
                      per_image, config_id)


def evaluate(checkpoint, dataset, beta=0.75, out_dir=None, dump_masks=False) -> EvalResult:
    """Score a checkpoint path, TrainState or model on a labelled dataset."""
    from udaclr.trainer import TrainState, load_checkpoint

    config_id = ""
    if isinstance(checkpoint, (str, Path)):
        state = load_checkpoint(checkpoint)
        model, config_id = state.model, state.config.config_hash()
    elif isinstance(checkpoint, TrainState):
        model, config_id = checkpoint.model, checkpoint.config.config_hash()
    else:
        model = checkpoint
    if not isinstance(dataset, ArrayDataset):
        if any(s.masks is None for s in dataset):
            raise ValidationError("evaluation needs a labelled dataset")
        dataset = stack_samples(dataset)
    res = evaluate_arrays(model, dataset, beta, config_id)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(res.to_json(indent=2))
        if dump_masks:
            (out / "masks").mkdir(exist_ok=True)
            for sid, m in zip(dataset.ids, predict_masks(model, dataset, beta)):
                m = m.copy()
                m[1] &= m[0]  # thresholded cup can leak outside the disc
                Image.fromarray(encode_mask(m), "L").save(out / "masks" / f"{sid}.png")
    return res


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    name: str
    src_reg: bool = False  # lambda3
    trg_reg: bool = False  # lambda4
    inter_reg: bool = False  # lambda2
    ugna: bool = True  # False sets xi = inf

    def apply(self, base: TrainConfig, on_weight=0.01) -> TrainConfig:
        def w(flag, current):
            return (current if current > 0 else on_weight) if flag else 0.0
        cfg = base.override(lambda3=w(self.src_reg, base.lambda3), lambda4=w(self.trg_reg, base.lambda4),
                            lambda2=w(self.inter_reg, base.lambda2))
        if not self.ugna:
            cfg = cfg.override(xi=math.inf)
        return cfg


def _row_name(src, trg, inter):
    parts = [n for n, f in (("src_reg", src), ("trg_reg", trg), ("inter_reg", inter)) if f]
    return "baseline" + "".join("+" + p for p in parts)


# row order of the component ablation table
TABLE2_GRID = [AblationRow(_row_name(s, t, i), s, t, i) for s, t, i in
               [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)]]
TABLE3_GRID = [AblationRow("inter_reg(w/o UGNA)", inter_reg=True, ugna=False),
               AblationRow("inter_reg", inter_reg=True, ugna=True)]
GRIDS = {
    "table2": TABLE2_GRID,
    "table3": TABLE3_GRID,
    "single": [TABLE2_GRID[i] for i in (0, 1, 2, 3, 7)],
    "baseline": TABLE2_GRID[:1],
}


def full_grid():
    return [AblationRow(_row_name(s, t, i), bool(s), bool(t), bool(i))
            for s, t, i in product((0, 1), repeat=3)]


@dataclass
class AblationRecord:
    name: str
    seed: int
    src_reg: bool
    trg_reg: bool
    inter_reg: bool
    ugna: bool
    dice_disc: float
    dice_cup: float
    best_dice_disc: float
    best_dice_cup: float
    config_hash: str


def run_ablation(base_config: TrainConfig, grid, data: Benchmark, seeds=(0, 1, 2),
                 out_dir=None, progress=False) -> list:
    """Train every grid row for every seed on the same data and report
    target-test Dice of the final epoch (and the best epoch, for reference)."""
    from udaclr.trainer import fit

    if isinstance(grid, str):
        grid = GRIDS[grid]
    src = stack_samples(data.source)
    tgt = stack_samples(data.target, use_masks=False)
    test = stack_samples(data.target_test)
    out = Path(out_dir) if out_dir else None
    records = []
    for row in grid:
        for seed in seeds:
            cfg = row.apply(base_config).override(seed=seed)
            run_dir = out / "runs" / f"{row.name}_seed{seed}" if out else None
            _, hist = fit(cfg, src, tgt, test, out_dir=run_dir)
            last = hist[-1]
            best = max(hist, key=lambda h: h["dice_disc"] + h["dice_cup"])
            rec = AblationRecord(row.name, seed, row.src_reg, row.trg_reg, row.inter_reg, row.ugna,
                                 last["dice_disc"], last["dice_cup"], best["dice_disc"], best["dice_cup"],
                                 cfg.config_hash())
            records.append(rec)
            if progress:
                log.info("%s seed %d: disc %.4f cup %.4f", row.name, seed, rec.dice_disc, rec.dice_cup)
            if out:
                write_ablation_csv(records, out / "ablation.csv")
    if out:
        write_ablation_report(records, out)
    return records


def summarize(records) -> dict:
    """name -> dict(mean/std of disc and cup over seeds), in first-seen order."""
    names = list(dict.fromkeys(r.name for r in records))
    table = {}
    for n in names:
        rs = [r for r in records if r.name == n]
        d = np.array([r.dice_disc for r in rs])
        c = np.array([r.dice_cup for r in rs])
        table[n] = {"disc_mean": float(d.mean()), "disc_std": float(d.std()),
                    "cup_mean": float(c.mean()), "cup_std": float(c.std()), "n": len(rs)}
    return table


def write_ablation_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(AblationRecord.__dataclass_fields__))
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))


def read_ablation_csv(path) -> list:
    out = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            out.append(AblationRecord(
                row["name"], int(row["seed"]),
                *(row[k] == "True" for k in ("src_reg", "trg_reg", "inter_reg", "ugna")),
                *(float(row[k]) for k in ("dice_disc", "dice_cup", "best_dice_disc", "best_dice_cup")),
                row["config_hash"]))
    return out


def write_ablation_report(records, out_dir):
    from udaclr.reports import ablation_bar_chart

    out = Path(out_dir)
    table = summarize(records)
    lines = ["| configuration | Dice disc | Dice cup | seeds |", "|---|---|---|---|"]
    for name, t in table.items():
        lines.append(f"| {name} | {t['disc_mean']:.4f} ± {t['disc_std']:.4f} "
                     f"| {t['cup_mean']:.4f} ± {t['cup_std']:.4f} | {t['n']} |")
    (out / "summary.md").write_text("# Ablation (target test, final epoch)\n\n" + "\n".join(lines) + "\n")
    (out / "results.json").write_text(json.dumps(table, indent=2))
    ablation_bar_chart(table, out / "plots" / "ablation.png")
    return table
