"""Supervised, edge, consistency and adversarial objectives plus the weighted
total for the segmentation network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from udaclr.errors import TrainingAbort, ValidationError

EPS = 1e-7
TERMS = ("sup", "edge", "adv", "inter", "dis", "aug")


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(p, y, reduction="mean"):
    p = p.clamp(EPS, 1 - EPS)
    ll = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
    return ll.mean() if reduction == "mean" else ll if reduction == "none" else ll.sum()


def soft_dice_loss(p, y, smooth=1e-6):
    """Per class (axis 1), pooled over batch and pixels."""
    dims = [0] + list(range(2, p.dim()))
    inter = (p * y).sum(dims)
    denom = p.sum(dims) + y.sum(dims)
    return 1 - (2 * inter + smooth) / (denom + smooth)


def supervised_loss(p_m, y):
    """Mean over classes of (BCE + soft Dice) / 2."""
    _check_shapes(p_m, y, "supervised_loss")
    per_class_bce = bce(p_m, y, "none").mean([0] + list(range(2, p_m.dim())))
    return ((per_class_bce + soft_dice_loss(p_m.clamp(EPS, 1 - EPS), y)) / 2).mean()


def edge_loss(p_e, y_e, normalize=True):
    _check_shapes(p_e, y_e, "edge_loss")
    sq = (y_e - p_e) ** 2
    return sq.mean() if normalize else sq.sum()


def consistency_loss(p_pert, hard_labels, reliable, normalize=True):
    """BCE between predictions on the perturbed image and the pseudo-labels of
    the clean image, restricted to reliable pixels. Returns ``(loss, skipped)``."""
    _check_shapes(p_pert, hard_labels, "consistency_loss")
    _check_shapes(p_pert, reliable, "consistency_loss")
    n = reliable.sum()
    if n.item() == 0:
        return p_pert.sum() * 0, True
    ll = bce(p_pert, hard_labels, "none") * reliable
    return (ll.sum() / n if normalize else ll.sum()), False


def _bce_logits(logits, target):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, float(target)))


def adversarial_generator_loss(d_out_mask, d_out_edge):
    """Target-domain predictions labelled as source (1) for both discriminators."""
    return _bce_logits(d_out_mask, 1) + _bce_logits(d_out_edge, 1)


def discriminator_loss(d_source_out, d_target_out):
    return _bce_logits(d_source_out, 1) + _bce_logits(d_target_out, 0)


@dataclass
class LossReport:
    sup: torch.Tensor
    edge: torch.Tensor
    adv: torch.Tensor
    inter: torch.Tensor
    dis: torch.Tensor
    aug: torch.Tensor
    total: torch.Tensor
    skipped_terms: list = field(default_factory=list)

    def as_dict(self):
        out = {k: float(getattr(self, k).detach()) for k in TERMS + ("total",)}
        out["skipped_terms"] = list(self.skipped_terms)
        return out


def assemble_total(components, lambdas=(0.01, 0.01, 0.01, 0.01), skipped=()) -> LossReport:
    """sup + edge + l1*adv + l2*inter + l3*dis + l4*aug, leaving out skipped
    terms. Missing components count as zero and skipped."""
    l1, l2, l3, l4 = lambdas
    weights = {"sup": 1.0, "edge": 1.0, "adv": l1, "inter": l2, "dis": l3, "aug": l4}
    skipped = list(skipped)
    ref = next((v for v in components.values() if torch.is_tensor(v)), None)
    vals = {}
    for k in TERMS:
        v = components.get(k)
        if v is None:
            if k not in skipped:
                skipped.append(k)
            v = 0.0
        if not torch.is_tensor(v):
            v = torch.tensor(float(v), dtype=ref.dtype if ref is not None else torch.float32)
        if not math.isfinite(float(v.detach())):
            raise TrainingAbort(f"non-finite loss component {k!r}: {float(v.detach())}",
                                {k: float(v.detach())})
        vals[k] = v
    total = sum(weights[k] * vals[k] for k in TERMS if k not in skipped and weights[k] != 0)
    if not torch.is_tensor(total):
        total = torch.zeros((), dtype=vals["sup"].dtype)
    return LossReport(total=total, skipped_terms=[k for k in TERMS if k in skipped], **vals)
