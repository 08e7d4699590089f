"""Segmentation network (mask head, edge head, penultimate features) and the
two patch discriminators."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from udaclr.errors import ValidationError


@dataclass
class ModelOutputs:
    mask_probs: torch.Tensor  # B x C x H x W
    edge_probs: torch.Tensor  # B x C x H x W
    features: torch.Tensor  # B x D x H x W, taken before dropout and the 1x1 heads


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class SegmentationNet(nn.Module):
    """Four-level encoder-decoder. Any backbone exposing ``trunk(x) -> h`` with
    ``h`` at input resolution can replace it; the heads and dropout stay."""

    def __init__(self, in_channels=3, num_classes=2, base=8, feature_dim=64,
                 dropout=0.3, input_size=64, depth=4):
        super().__init__()
        if input_size % (2 ** depth):
            raise ValidationError(f"input_size must be divisible by {2 ** depth}")
        self.input_size = input_size
        self.dropout = dropout
        widths = [base * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(_block(cin, w))
            cin = w
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w_hi, w_lo in zip(widths[::-1][:-1], widths[::-1][1:]):
            self.up.append(nn.ConvTranspose2d(w_hi, w_lo, 2, stride=2))
            self.merge.append(_block(2 * w_lo, w_lo))
        self.project = nn.Sequential(nn.Conv2d(widths[0], feature_dim, 3, padding=1), nn.ReLU(inplace=True))
        self.mask_head = nn.Conv2d(feature_dim, num_classes, 1)
        self.edge_head = nn.Conv2d(feature_dim, num_classes, 1)
        # He init: without normalisation layers the default init shrinks
        # activations level by level and training stalls
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def trunk(self, x):
        skips = []
        for i, blk in enumerate(self.down):
            x = blk(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([up(x), skips.pop()], 1))
        return self.project(x)

    def heads(self, h, dropout_enabled):
        z = F.dropout2d(h, self.dropout, training=dropout_enabled) if self.dropout > 0 else h
        return torch.sigmoid(self.mask_head(z)), torch.sigmoid(self.edge_head(z))

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (self.input_size, self.input_size):
            raise ValidationError(
                f"expected B x 3 x {self.input_size} x {self.input_size} input, got {tuple(x.shape)}")

    def forward(self, x, dropout_enabled=False) -> ModelOutputs:
        self.check_input(x)
        h = self.trunk(x)
        p_m, p_e = self.heads(h, dropout_enabled)
        return ModelOutputs(p_m, p_e, h)

    def mc_forward(self, x, M, features=None):
        """M dropout-enabled passes, returned stacked as M x B x C x H x W.

        Only the heads are stochastic, so the trunk runs once and its output
        (or ``features`` when already computed) is reused for every pass."""
        if M < 2:
            raise ValidationError("MC dropout needs M >= 2 passes")
        if features is None:
            self.check_input(x)
            features = self.trunk(x)
        return torch.stack([self.heads(features, True)[0] for _ in range(M)])


class PatchDiscriminator(nn.Module):
    """Strided conv classifier over a C x H x W probability map; one logit per patch."""

    def __init__(self, in_channels=2, ndf=16, n_layers=4, slope=0.2):
        super().__init__()
        layers, cin = [], in_channels
        for i in range(n_layers - 1):
            cout = ndf * 2 ** i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(slope, inplace=True)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)
        self.in_channels = in_channels
        self.n_layers = n_layers

    def output_size(self, size):
        for _ in range(self.n_layers):
            size = (size + 2 - 4) // 2 + 1
        return size

    def forward(self, x):
        return self.net(x)


class Discriminators(nn.Module):
    def __init__(self, num_classes=2, ndf=16, n_layers=4):
        super().__init__()
        self.mask = PatchDiscriminator(num_classes, ndf, n_layers)
        self.edge = PatchDiscriminator(num_classes, ndf, n_layers)


def discriminate(discs: Discriminators, prob_map, which, expected_shape=None):
    """Patch logits from the mask or edge discriminator."""
    if which not in ("mask", "edge"):
        raise ValidationError(f"unknown discriminator {which!r}")
    net = discs.mask if which == "mask" else discs.edge
    if prob_map.dim() != 4 or prob_map.shape[1] != net.in_channels:
        raise ValidationError(f"discriminator input must be B x {net.in_channels} x H x W, got {tuple(prob_map.shape)}")
    if expected_shape is not None and tuple(prob_map.shape[1:]) != tuple(expected_shape):
        raise ValidationError(f"map shape {tuple(prob_map.shape[1:])} != segmentation output {tuple(expected_shape)}")
    return net(prob_map)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
