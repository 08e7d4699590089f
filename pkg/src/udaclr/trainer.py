"""Alternating adversarial training with category-level regularisation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from udaclr.config import TrainConfig
from udaclr.datasets import ArrayDataset, perturb
from udaclr.errors import TrainingAbort, ValidationError
from udaclr.losses import (adversarial_generator_loss, assemble_total, consistency_loss,
                           discriminator_loss, edge_loss, supervised_loss)
from udaclr.model import Discriminators, SegmentationNet, discriminate
from udaclr.prototypes import discriminative_total, inter_domain_total
from udaclr.pseudo_uncertainty import pseudo_label, reliability_mask, uncertainty

log = logging.getLogger(__name__)

CL = torch.channels_last


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    return config.seg_lr * config.lr_decay ** (epoch // config.lr_decay_every)


def set_deterministic(flag=True):
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


def _step_seed(seed, step):
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def param_hash(module):
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    config: TrainConfig
    model: SegmentationNet
    discs: Discriminators
    seg_opt: torch.optim.Optimizer
    disc_opts: dict
    epoch: int = 0
    step: int = 0
    best_metric: float = -1.0
    best_epoch: int = -1
    skip_counts: dict = field(default_factory=dict)


def build_state(config: TrainConfig) -> TrainState:
    config.validate()
    torch.manual_seed(config.seed)
    model = SegmentationNet(base=config.base_width, feature_dim=config.feature_dim,
                            dropout=config.dropout, input_size=config.input_size)
    discs = Discriminators(ndf=config.disc_width)
    model.to(memory_format=CL)
    discs.to(memory_format=CL)
    seg_opt = torch.optim.Adam(model.parameters(), lr=config.seg_lr)
    disc_opts = {k: torch.optim.SGD(getattr(discs, k).parameters(), lr=config.disc_lr,
                                    momentum=config.disc_momentum)
                 for k in ("mask", "edge")}
    return TrainState(config, model, discs, seg_opt, disc_opts)


def _to_tensor(a):
    return torch.from_numpy(np.ascontiguousarray(a)).contiguous(memory_format=CL)


def segmentation_update(state: TrainState, src_images, src_masks, src_edges, tgt_images):
    """Update the segmentation network on the weighted total with the
    discriminators frozen. Returns the LossReport and the detached prediction
    maps the discriminator update needs."""
    cfg, model, discs = state.config, state.model, state.discs
    # per-step reseeding: every ablation variant draws the same dropout masks
    # for the shared forward passes regardless of which optional terms run
    torch.manual_seed(_step_seed(cfg.seed, state.step))
    np_rng = np.random.default_rng([cfg.seed, state.step, 17])
    category_on = state.epoch >= cfg.warmup_epochs
    use_inter = category_on and cfg.lambda2 > 0
    use_dis = category_on and cfg.lambda3 > 0
    use_aug = category_on and cfg.lambda4 > 0

    discs.requires_grad_(False)
    out_s = model(src_images, dropout_enabled=True)
    out_t = model(tgt_images, dropout_enabled=True)
    comps, skipped = {}, []
    comps["sup"] = supervised_loss(out_s.mask_probs, src_masks)
    comps["edge"] = edge_loss(out_s.edge_probs, src_edges, cfg.normalize_losses)
    comps["adv"] = adversarial_generator_loss(discriminate(discs, out_t.mask_probs, "mask"),
                                              discriminate(discs, out_t.edge_probs, "edge"))

    if use_inter or use_aug:
        with torch.no_grad():
            h_t = out_t.features.detach()
            mc = model.mc_forward(None, cfg.mc_samples, features=h_t)
            S = uncertainty(mc)
    if use_inter:
        # MC mean for the prototype pseudo-labels
        selection = pseudo_label(mc.mean(0), cfg.beta) * reliability_mask(S, cfg.xi)
        comps["inter"], skip = inter_domain_total(out_s.features, src_masks, out_t.features, selection)
        if skip:
            skipped.append("inter")
    if use_dis:
        comps["dis"], skip = discriminative_total(out_s.features, src_masks, cfg.delta, cfg.normalize_losses)
        if skip:
            skipped.append("dis")
    if use_aug:
        with torch.no_grad():
            # single dropout-off pass for the consistency pseudo-labels
            hard = pseudo_label(model.heads(h_t, False)[0], cfg.beta)
            reliable = reliability_mask(S, cfg.mu)
            x_np = tgt_images.permute(0, 2, 3, 1).cpu().numpy()
            x_pert = np.stack([perturb(x, np_rng, cfg.perturb) for x in x_np])
            x_pert = _to_tensor(x_pert.transpose(0, 3, 1, 2))
        p_pert = model(x_pert, dropout_enabled=True).mask_probs
        comps["aug"], skip = consistency_loss(p_pert, hard, reliable, cfg.normalize_losses)
        if skip:
            skipped.append("aug")
    for name in skipped:
        state.skip_counts[name] = state.skip_counts.get(name, 0) + 1

    try:
        report = assemble_total(comps, cfg.lambdas, skipped)
    except TrainingAbort as exc:
        exc.diagnostics.update(step=state.step, epoch=state.epoch,
                               source_hash=_tensor_hash(src_images), target_hash=_tensor_hash(tgt_images),
                               components={k: float(v.detach()) for k, v in comps.items()})
        raise
    state.seg_opt.zero_grad(set_to_none=True)
    report.total.backward()
    state.seg_opt.step()
    maps = {"mask": (out_s.mask_probs.detach(), out_t.mask_probs.detach()),
            "edge": (out_s.edge_probs.detach(), out_t.edge_probs.detach())}
    return report, maps


def discriminator_update(state: TrainState, maps):
    """One SGD step per discriminator: source maps labelled 1, target maps 0."""
    state.discs.requires_grad_(True)
    d_losses = {}
    for which, (ps, pt) in maps.items():
        opt = state.disc_opts[which]
        opt.zero_grad(set_to_none=True)
        loss = discriminator_loss(discriminate(state.discs, ps, which), discriminate(state.discs, pt, which))
        if not math.isfinite(loss.item()):
            raise TrainingAbort(f"non-finite discriminator loss ({which})", {"step": state.step})
        loss.backward()
        opt.step()
        d_losses["d_" + which] = loss.item()
    return d_losses


def train_step(state: TrainState, src_images, src_masks, src_edges, tgt_images):
    """Segmentation update, then discriminator update. Tensors are
    B x C x H x W. Returns ``(LossReport, {"d_mask": .., "d_edge": ..})``."""
    report, maps = segmentation_update(state, src_images, src_masks, src_edges, tgt_images)
    d_losses = discriminator_update(state, maps)
    state.step += 1
    return report, d_losses


def _tensor_hash(t):
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path, history=None):
    meta = {"config": state.config.to_dict(), "config_hash": state.config.config_hash(),
            "epoch": state.epoch, "step": state.step, "best_metric": state.best_metric,
            "history": history or []}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"model": state.model.state_dict(), "discriminators": state.discs.state_dict(),
                "seg_opt": state.seg_opt.state_dict(),
                "disc_opts": {k: o.state_dict() for k, o in state.disc_opts.items()},
                "meta": json.dumps(meta)}, path)


def load_checkpoint(path) -> TrainState:
    from udaclr.config import apply_overrides
    blob = torch.load(path, map_location="cpu", weights_only=True)
    meta = json.loads(blob["meta"])
    cfg = apply_overrides(TrainConfig(), meta["config"])
    state = build_state(cfg)
    state.model.load_state_dict(blob["model"])
    state.discs.load_state_dict(blob["discriminators"])
    state.seg_opt.load_state_dict(blob["seg_opt"])
    for k, o in state.disc_opts.items():
        o.load_state_dict(blob["disc_opts"][k])
    state.epoch, state.step = meta["epoch"], meta["step"]
    state.best_metric = meta["best_metric"]
    return state


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _epoch_batches(cfg, n_source, n_target, epoch):
    rng = np.random.default_rng([cfg.seed, epoch, 29])
    src = rng.permutation(n_source)
    steps = math.ceil(n_source / cfg.batch_size)
    reps = math.ceil(steps * cfg.batch_size / n_target)
    tgt = np.concatenate([rng.permutation(n_target) for _ in range(reps)])
    for i in range(steps):
        s = src[i * cfg.batch_size:(i + 1) * cfg.batch_size]
        yield s, tgt[i * cfg.batch_size:i * cfg.batch_size + len(s)]


def _fmt(x):
    return round(x, 10) if isinstance(x, float) else x


def fit(config: TrainConfig, source: ArrayDataset, target: ArrayDataset,
        target_test: Optional[ArrayDataset] = None, out_dir=None, progress=False):
    """Train from scratch. Target masks are never read here; ``target_test``
    (when labelled) is only scored after each epoch for benchmarking.

    Returns ``(state, history)`` where history holds one record per epoch."""
    from udaclr.evaluation import evaluate_arrays

    config.validate()
    if len(source) == 0 or len(target) == 0:
        raise ValidationError("source and target datasets must be nonempty")
    if not source.labeled:
        raise ValidationError("source dataset must be labelled")
    if config.deterministic:
        set_deterministic(True)
    state = build_state(config)
    src_x = _to_tensor(source.images)
    src_y = _to_tensor(source.masks)
    src_e = _to_tensor(source.edges)
    tgt_x = _to_tensor(target.images)

    out = Path(out_dir) if out_dir else None
    metrics_fh = None
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(config.to_json(indent=2, sort_keys=True))
        metrics_fh = open(out / "metrics.jsonl", "w")
    history = []
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            lr = lr_schedule(config, epoch)
            for g in state.seg_opt.param_groups:
                g["lr"] = lr
            sums = {}
            n = 0
            for s_idx, t_idx in _epoch_batches(config, len(source), len(target), epoch):
                try:
                    report, d = train_step(state, src_x[s_idx], src_y[s_idx], src_e[s_idx], tgt_x[t_idx])
                except TrainingAbort as exc:
                    if out:
                        (out / "abort_diagnostics.json").write_text(json.dumps(exc.diagnostics, indent=2))
                    raise
                rec = {"step": state.step - 1, "epoch": epoch, "lr": lr, **report.as_dict(), **d}
                if metrics_fh:
                    metrics_fh.write(json.dumps({k: _fmt(v) for k, v in rec.items()}) + "\n")
                for k in ("sup", "edge", "adv", "inter", "dis", "aug", "total", "d_mask", "d_edge"):
                    sums[k] = sums.get(k, 0.0) + rec[k]
                n += 1
            ep = {"epoch": epoch, "lr": lr, **{k: v / n for k, v in sums.items()}}
            if target_test is not None and target_test.labeled:
                res = evaluate_arrays(state.model, target_test, config.eval_threshold)
                ep.update(dice_disc=res.dice_disc, dice_cup=res.dice_cup)
                score = (res.dice_disc + res.dice_cup) / 2
                if score > state.best_metric:
                    state.best_metric, state.best_epoch = score, epoch
                    if out:
                        save_checkpoint(state, out / "checkpoints" / "best.pt", history + [ep])
            history.append(ep)
            if progress:
                log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in ep.items() if isinstance(v, float)})
        if out:
            save_checkpoint(state, out / "checkpoints" / "last.pt", history)
            if state.best_epoch < 0:
                save_checkpoint(state, out / "checkpoints" / "best.pt", history)
            with open(out / "history.jsonl", "w") as fh:
                for ep in history:
                    fh.write(json.dumps(ep) + "\n")
    finally:
        if metrics_fh:
            metrics_fh.close()
    return state, history
