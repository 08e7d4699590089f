"""Thresholded pseudo-labels, MC-dropout uncertainty and the reliability filter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from udaclr.errors import ValidationError


@dataclass
class PseudoLabel:
    hard_labels: torch.Tensor  # {0,1}, same shape as the probabilities
    uncertainty: torch.Tensor  # per-pixel std over MC passes
    reliable: torch.Tensor  # {0,1}: uncertainty < threshold


def pseudo_label(p, beta):
    """1[p >= beta], per class. The comparison is inclusive."""
    if not 0.0 < beta < 1.0:
        raise ValidationError(f"beta must lie in (0, 1), got {beta}")
    return (p >= beta).to(p.dtype)


def uncertainty(samples):
    """Population std over the leading (MC) axis.

    Deviations are taken relative to the first pass, which leaves the
    variance unchanged and makes identical passes give exactly zero."""
    if isinstance(samples, (list, tuple)):
        if len(samples) < 2:
            raise ValidationError("uncertainty needs at least 2 samples")
        samples = torch.stack(list(samples))
    if samples.shape[0] < 2:
        raise ValidationError("uncertainty needs at least 2 samples")
    d = samples - samples[:1]
    dm = d.mean(0, keepdim=True)
    return ((d - dm) ** 2).mean(0).sqrt()


def reliability_mask(S, threshold):
    """1[S < threshold]; ``threshold=inf`` keeps every pixel."""
    if not threshold >= 0:
        raise ValidationError(f"uncertainty threshold must be >= 0, got {threshold}")
    if math.isinf(threshold):
        return torch.ones_like(S)
    return (S < threshold).to(S.dtype)


def build_pseudo_label(samples, beta, threshold) -> PseudoLabel:
    """Pseudo-label from the MC mean plus its reliability mask."""
    if isinstance(samples, (list, tuple)):
        samples = torch.stack(list(samples))
    S = uncertainty(samples)
    return PseudoLabel(pseudo_label(samples.mean(0), beta), S, reliability_mask(S, threshold))
