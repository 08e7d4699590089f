"""Class prototypes and the two prototype losses: cross-domain alignment of
object prototypes and the source-side margin (discriminative) loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from udaclr import CLASSES
from udaclr.errors import ValidationError


@dataclass
class Prototype:
    vector: torch.Tensor  # D
    class_id: str
    domain: str
    support: int

    @property
    def valid(self):
        return self.support >= 1


def safe_norm(x, dim=-1):
    """Euclidean norm whose gradient is 0 (not NaN) at the origin."""
    sq = (x * x).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _flatten(h, selection):
    """h: [B x] D x H x W, selection: [B x] [1 x] H x W -> (N x D, N)."""
    if h.dim() == 3:
        h = h.unsqueeze(0)
    sel = selection
    if sel.dim() == 2:
        sel = sel.unsqueeze(0)
    if sel.dim() == 4:
        sel = sel.squeeze(1)
    if sel.shape != (h.shape[0],) + tuple(h.shape[2:]):
        raise ValidationError(f"selection shape {tuple(selection.shape)} does not match features {tuple(h.shape)}")
    feats = h.permute(0, 2, 3, 1).reshape(-1, h.shape[1])
    return feats, sel.reshape(-1).to(h.dtype)


def class_prototype(h, selection, class_id="disc", domain="source") -> Prototype:
    """Mean feature over selected pixels; support 0 marks an empty selection."""
    feats, w = _flatten(h, selection)
    n = int(w.sum().item())
    if n == 0:
        return Prototype(torch.zeros(feats.shape[1], dtype=h.dtype, device=h.device), class_id, domain, 0)
    return Prototype((w[:, None] * feats).sum(0) / w.sum(), class_id, domain, n)


def inter_domain_loss(f_s: Prototype, f_t: Prototype):
    """Euclidean distance between matching object prototypes of the two
    domains. Returns ``(loss, skipped)``."""
    if f_s.vector.shape != f_t.vector.shape:
        raise ValidationError(f"prototype dims differ: {tuple(f_s.vector.shape)} vs {tuple(f_t.vector.shape)}")
    if f_s.class_id != f_t.class_id:
        raise ValidationError(f"cannot align {f_s.class_id} with {f_t.class_id}")
    if f_s.class_id == "background":
        raise ValidationError("only object prototypes are aligned across domains")
    if not (f_s.valid and f_t.valid):
        return f_s.vector.new_zeros(()), True
    return safe_norm(f_s.vector - f_t.vector), False


def inter_domain_total(h_s, y_s, h_t, selection_t):
    """Sum of per-class alignment losses. y_s and selection_t are B x C x H x W."""
    total, skipped = h_s.new_zeros(()), []
    for c, name in enumerate(CLASSES):
        f_s = class_prototype(h_s, y_s[:, c], name, "source")
        f_t = class_prototype(h_t, selection_t[:, c], name, "target")
        loss, skip = inter_domain_loss(f_s, f_t)
        total = total + loss
        if skip:
            skipped.append(name)
    return total, len(skipped) == len(CLASSES)


def discriminative_loss(h, y, f_obj: Prototype, f_bg: Prototype, delta, normalize=True):
    """Hinge pulling each pixel towards its own class prototype and away from
    the other one by at least ``delta``. ``y`` is the binary object mask for
    one class. With ``normalize`` each of the two sums is divided by its pixel
    count. Returns ``(loss, skipped)``."""
    if delta < 0:
        raise ValidationError("margin delta must be >= 0")
    if not (f_obj.valid and f_bg.valid):
        return h.new_zeros(()), True
    feats, w = _flatten(h, y)
    d_obj = safe_norm(feats - f_obj.vector)
    d_bg = safe_norm(feats - f_bg.vector)
    obj_term = (w * torch.clamp(d_obj - d_bg + delta, min=0)).sum()
    bg_term = ((1 - w) * torch.clamp(d_bg - d_obj + delta, min=0)).sum()
    if normalize:
        obj_term = obj_term / w.sum().clamp(min=1)
        bg_term = bg_term / (1 - w).sum().clamp(min=1)
    return obj_term + bg_term, False


def discriminative_total(h_s, y_s, delta, normalize=True):
    """Per-class margin loss with prototypes from the current features, summed
    over classes. y_s is B x C x H x W ground truth."""
    total, n_skipped = h_s.new_zeros(()), 0
    for c, name in enumerate(CLASSES):
        y = y_s[:, c]
        f_obj = class_prototype(h_s, y, name, "source")
        f_bg = class_prototype(h_s, 1 - y, "background", "source")
        loss, skip = discriminative_loss(h_s, y, f_obj, f_bg, delta, normalize)
        total = total + loss
        n_skipped += skip
    return total, n_skipped == len(CLASSES)
