"""Training configuration, presets and JSON / ``key=value`` overrides."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from udaclr.datasets import PerturbConfig
from udaclr.errors import ValidationError


@dataclass(frozen=True)
class TrainConfig:
    # pseudo-labels and uncertainty
    beta: float = 0.75
    mu: float = 0.05  # consistency reliability threshold
    xi: float = 0.05  # prototype reliability threshold; inf disables filtering
    mc_samples: int = 10
    # category regularisation
    delta: float = 0.01
    lambda1: float = 0.01  # adversarial
    lambda2: float = 0.01  # inter-domain prototype alignment
    lambda3: float = 0.01  # source discriminative margin
    lambda4: float = 0.01  # target augmented consistency
    normalize_losses: bool = True  # False: raw pixel sums where the formulas sum
    warmup_epochs: int = 0
    # optimisation
    epochs: int = 500
    seg_lr: float = 1e-3
    lr_decay: float = 0.2
    lr_decay_every: int = 100
    disc_lr: float = 2e-5
    disc_momentum: float = 0.0
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = False
    # model
    input_size: int = 512
    base_width: int = 8
    feature_dim: int = 64
    dropout: float = 0.3
    disc_width: int = 16
    # evaluation
    eval_threshold: float = 0.75
    # target perturbation
    jitter_brightness: float = 0.4
    jitter_contrast: float = 0.4
    jitter_saturation: float = 0.4
    jitter_hue: float = 0.1
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 1.0

    def validate(self):
        errors = []
        if not 0 < self.beta < 1:
            errors.append("beta must lie in (0, 1)")
        if not 0 < self.eval_threshold < 1:
            errors.append("eval_threshold must lie in (0, 1)")
        for name in ("mu", "xi", "delta", "disc_lr", "disc_momentum"):
            if not getattr(self, name) >= 0:
                errors.append(f"{name} must be >= 0")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                errors.append(f"{name} must be finite and >= 0")
        if self.mc_samples < 2:
            errors.append("mc_samples must be >= 2")
        for name in ("epochs", "batch_size", "lr_decay_every", "base_width", "feature_dim", "disc_width"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.warmup_epochs < 0:
            errors.append("warmup_epochs must be >= 0")
        if not 0 <= self.dropout < 1:
            errors.append("dropout must lie in [0, 1)")
        if self.seg_lr <= 0 or not 0 < self.lr_decay <= 1:
            errors.append("seg_lr must be > 0 and lr_decay in (0, 1]")
        if self.input_size < 16 or self.input_size % 16:
            errors.append("input_size must be a positive multiple of 16")
        if not 0 <= self.blur_sigma_min <= self.blur_sigma_max:
            errors.append("need 0 <= blur_sigma_min <= blur_sigma_max")
        if errors:
            raise ValidationError("; ".join(errors))
        return self

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def perturb(self):
        return PerturbConfig(self.jitter_brightness, self.jitter_contrast, self.jitter_saturation,
                             self.jitter_hue, (self.blur_sigma_min, self.blur_sigma_max))

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def config_hash(self):
        return hashlib.sha256(self.to_json(sort_keys=True).encode()).hexdigest()[:16]

    def override(self, **kw):
        return apply_overrides(self, kw)


PRESETS = {
    "paper": {},
    # same decay-interval / total-epoch ratio as the full schedule
    "desk": {"epochs": 60, "lr_decay_every": 12, "batch_size": 8, "input_size": 64, "warmup_epochs": 5},
}

ALIASES = {"M": "mc_samples", "lambda_1": "lambda1", "lambda_2": "lambda2",
           "lambda_3": "lambda3", "lambda_4": "lambda4"}


def _coerce(name, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValidationError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if isinstance(default, int):
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        return float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name}: cannot interpret {value!r} as {type(default).__name__}") from None


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    known = {f.name: f.default for f in fields(TrainConfig)}
    clean = {}
    for key, value in overrides.items():
        name = ALIASES.get(key, key)
        if name not in known:
            raise ValidationError(f"unknown config field {key!r}")
        clean[name] = _coerce(name, value, known[name])
    return replace(config, **clean)


def parse_set(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def make_config(preset="desk", config_path=None, overrides=None) -> TrainConfig:
    """defaults < preset < config file < overrides."""
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}")
    cfg = apply_overrides(TrainConfig(), PRESETS[preset])
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ValidationError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError(f"config file {path} must hold a JSON object")
        cfg = apply_overrides(cfg, data)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def load_config(path) -> TrainConfig:
    return apply_overrides(TrainConfig(), json.loads(Path(path).read_text())).validate()
