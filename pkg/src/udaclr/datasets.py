"""Samples, synthetic domain-shift generation, real-data ingestion and the
photometric perturbation used for target consistency."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

from udaclr import CLASSES
from udaclr.errors import ValidationError

# mask file coding: 0 background, 128 disc only, 255 cup (cup implies disc)
MASK_BG, MASK_DISC, MASK_CUP = 0, 128, 255


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    masks: Optional[np.ndarray] = None  # C x H x W uint8, class order = CLASSES
    domain_tag: str = "source"
    id: str = ""

    @property
    def shape(self):
        return self.image.shape[:2]

    def mask(self, name):
        if self.masks is None:
            return None
        return self.masks[CLASSES.index(name)]

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"image must be HxWx3, got {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValidationError("image values must lie in [0, 1]")
        if self.masks is not None:
            if self.masks.shape != (len(CLASSES),) + self.shape:
                raise ValidationError(
                    f"masks shape {self.masks.shape} does not match image {self.shape}")
            disc, cup = self.masks
            if np.any(cup.astype(bool) & ~disc.astype(bool)):
                raise ValidationError("cup mask is not contained in disc mask")
        return self


@dataclass
class EdgeMap:
    edges: np.ndarray  # C x H x W uint8


@dataclass(frozen=True)
class DomainSpec:
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    hue_rotation: float = 0.0  # fraction of the hue circle
    blur_sigma: float = 0.0
    texture_seed: int = 0
    shape_jitter: float = 0.1

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise ValidationError("blur_sigma must be >= 0")
        if self.contrast_scale <= 0:
            raise ValidationError("contrast_scale must be > 0")
        if self.shape_jitter < 0:
            raise ValidationError("shape_jitter must be >= 0")


SOURCE_SPEC = DomainSpec()

# half-widths of the uniform per-image appearance jitter applied in every domain
IMAGE_JITTER = {"gain": 0.06, "contrast": 0.15, "brightness": 0.06}

SHIFT_PRESETS = {
    "mild": DomainSpec(brightness_shift=-0.05, contrast_scale=0.85, hue_rotation=0.03,
                       blur_sigma=0.5, texture_seed=1, shape_jitter=0.1),
    "strong": DomainSpec(brightness_shift=-0.12, contrast_scale=0.6, hue_rotation=0.08,
                         blur_sigma=0.9, texture_seed=2, shape_jitter=0.2),
}


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _smooth_field(rng, size, sigma, amplitude):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    f /= np.abs(f).max() + 1e-12
    return amplitude * f


def _ellipse_radius(xx, yy, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _vessel_alpha(rng, xx, yy, cx, cy, size):
    alpha = np.zeros_like(xx)
    for _ in range(rng.integers(4, 7)):
        angle0 = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-0.6, 0.6)
        width = rng.uniform(0.5, 1.0) * size / 64
        t = np.linspace(0.05, 1.0, 48)
        r = t * size * 0.7
        ang = angle0 + bend * t ** 2
        px, py = cx + r * np.cos(ang), cy + r * np.sin(ang)
        d2 = (xx[..., None] - px) ** 2 + (yy[..., None] - py) ** 2
        alpha = np.maximum(alpha, np.exp(-d2.min(-1) / (2 * width ** 2)))
    return 0.75 * alpha


def apply_photometric(image, spec: DomainSpec):
    """Domain-level appearance shift: hue, contrast, brightness, blur (in that order)."""
    img = image.astype(np.float64)
    if spec.hue_rotation:
        hsv = rgb_to_hsv(np.clip(img, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + spec.hue_rotation) % 1.0
        img = hsv_to_rgb(hsv)
    if spec.contrast_scale != 1.0:
        img = (img - img.mean()) * spec.contrast_scale + img.mean()
    img = img + spec.brightness_shift
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, (spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
    return np.clip(img, 0, 1).astype(np.float32)


def generate_synthetic_sample(spec: DomainSpec, rng_seed: int, size: int = 64,
                              domain_tag: str = "source", sample_id=None) -> Sample:
    """Draw one fundus-like image: background texture, a disc ellipse with a
    strictly interior cup ellipse, dark vessel curves, then the domain's
    photometric shift. Geometry depends only on ``rng_seed`` and
    ``spec.shape_jitter``."""
    rng = np.random.default_rng(rng_seed)
    scale = size / 64
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    # geometry
    cx = size / 2 + rng.uniform(-0.15, 0.15) * size
    cy = size / 2 + rng.uniform(-0.15, 0.15) * size
    j = spec.shape_jitter
    a = np.clip(size * 0.17 * (1 + j * rng.standard_normal()), 0.1 * size, 0.26 * size)
    b = np.clip(a * (1 + 0.5 * j * rng.uniform(-1, 1)), 0.1 * size, 0.26 * size)
    theta = rng.uniform(0, np.pi)
    ratio = rng.uniform(0.35, 0.6)
    ca, cb = max(ratio * a, 1.5 * scale), max(ratio * b, 1.5 * scale)
    slack = (1 - ratio) * 0.4 * min(a, b)
    off_ang = rng.uniform(0, 2 * np.pi)
    off = rng.uniform(0, slack)
    ccx, ccy = cx + off * np.cos(off_ang), cy + off * np.sin(off_ang)
    ctheta = theta + rng.uniform(-0.3, 0.3)

    r_disc = _ellipse_radius(xx, yy, cx, cy, a, b, theta)
    r_cup = _ellipse_radius(xx, yy, ccx, ccy, ca, cb, ctheta)
    disc = r_disc <= 1
    interior = ndimage.binary_erosion(disc)
    cup = (r_cup <= 1) & interior
    if not cup.any():
        cup[int(round(ccy)), int(round(ccx))] = interior[int(round(ccy)), int(round(ccx))]
        if not cup.any():
            cup = interior & (r_disc == r_disc[interior].min())

    # appearance
    tex_rng = np.random.default_rng([spec.texture_seed, 7919])
    illum = _smooth_field(tex_rng, size, 10 * scale, 0.10)
    vign = 1 - 0.35 * ((xx - size / 2) ** 2 + (yy - size / 2) ** 2) / (size / 2) ** 2
    grain = _smooth_field(rng, size, 1.0 * scale, 0.04)
    base = np.array([0.62, 0.26, 0.12])
    img = base * np.clip(vign + illum + grain, 0.2, 1.3)[..., None]

    soft = 1.2 * scale
    w_disc = 1 / (1 + np.exp(-(1 - r_disc) * min(a, b) / soft))
    w_cup = 1 / (1 + np.exp(-(1 - r_cup) * min(ca, cb) / soft)) * w_disc
    disc_color = np.array([0.88, 0.58, 0.30]) * (1 + rng.uniform(-0.05, 0.05))
    cup_color = np.array([0.97, 0.80, 0.56]) * (1 + rng.uniform(-0.04, 0.04))
    img = img * (1 - w_disc[..., None]) + disc_color * w_disc[..., None]
    img = img * (1 - w_cup[..., None]) + cup_color * w_cup[..., None]
    vessel = _vessel_alpha(rng, xx, yy, cx, cy, size)[..., None]
    img = img * (1 - vessel) + np.array([0.38, 0.08, 0.05]) * vessel
    img = img + rng.normal(0, 0.01, img.shape)
    # per-image acquisition variability inside a domain (drawn after the
    # geometry, so masks do not depend on it)
    gain = rng.uniform(1 - IMAGE_JITTER["gain"], 1 + IMAGE_JITTER["gain"], 3)
    contrast = rng.uniform(1 - IMAGE_JITTER["contrast"], 1 + IMAGE_JITTER["contrast"])
    offset = rng.uniform(-IMAGE_JITTER["brightness"], IMAGE_JITTER["brightness"])
    img = (img * gain - img.mean()) * contrast + img.mean() + offset
    img = apply_photometric(np.clip(img, 0, 1), spec)

    masks = np.stack([disc, cup]).astype(np.uint8)
    sid = sample_id if sample_id is not None else f"{domain_tag}_{rng_seed}"
    return Sample(image=img, masks=masks, domain_tag=domain_tag, id=sid)


@dataclass
class Benchmark:
    source: list
    target: list
    target_test: list
    preset: str = "strong"


def make_benchmark(preset="strong", n_source=200, n_target=100, n_test=50,
                   size=64, seed=0) -> Benchmark:
    """Source, unlabeled-in-use target train, and labeled target test splits.

    Target-train samples keep their masks on the Sample object (so benchmark
    code can audit them) but nothing in training reads them."""
    if preset not in SHIFT_PRESETS:
        raise ValidationError(f"unknown shift preset {preset!r}; choose from {sorted(SHIFT_PRESETS)}")
    tspec = SHIFT_PRESETS[preset]
    base = 1_000_003 * (seed + 1)
    src = [generate_synthetic_sample(SOURCE_SPEC, base + i, size, "source", f"s{i:04d}")
           for i in range(n_source)]
    tgt = [generate_synthetic_sample(tspec, base + 100_000 + i, size, "target", f"t{i:04d}")
           for i in range(n_target)]
    test = [generate_synthetic_sample(tspec, base + 200_000 + i, size, "target", f"v{i:04d}")
            for i in range(n_test)]
    return Benchmark(src, tgt, test, preset)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def decode_mask(coded: np.ndarray) -> np.ndarray:
    coded = np.asarray(coded)
    bad = np.setdiff1d(np.unique(coded), [MASK_BG, MASK_DISC, MASK_CUP])
    if bad.size:
        raise ValidationError(f"unknown mask value {int(bad[0])} (expected 0, 128 or 255)")
    disc = coded >= MASK_DISC
    cup = coded == MASK_CUP
    return np.stack([disc, cup]).astype(np.uint8)


def encode_mask(masks: np.ndarray) -> np.ndarray:
    disc, cup = masks.astype(bool)
    if np.any(cup & ~disc):
        raise ValidationError("cup mask is not contained in disc mask")
    out = np.zeros(disc.shape, np.uint8)
    out[disc] = MASK_DISC
    out[cup] = MASK_CUP
    return out


def _open(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc


def load_sample(image_path, mask_path=None, domain_tag="source") -> Sample:
    image_path = Path(image_path)
    img = np.asarray(_open(image_path).convert("RGB"), dtype=np.float32) / 255.0
    masks = None
    if mask_path is not None:
        coded = np.asarray(_open(mask_path).convert("L"))
        if coded.shape != img.shape[:2]:
            raise ValidationError(
                f"mask size {coded.shape} does not match image size {img.shape[:2]} for {image_path.name}")
        masks = decode_mask(coded)
    return Sample(image=img, masks=masks, domain_tag=domain_tag, id=image_path.stem)


def save_sample(sample: Sample, domain_dir):
    domain_dir = Path(domain_dir)
    (domain_dir / "images").mkdir(parents=True, exist_ok=True)
    img8 = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img8, "RGB").save(domain_dir / "images" / f"{sample.id}.png")
    if sample.masks is not None:
        (domain_dir / "masks").mkdir(parents=True, exist_ok=True)
        Image.fromarray(encode_mask(sample.masks), "L").save(domain_dir / "masks" / f"{sample.id}.png")


def load_domain(domain_dir, domain_tag=None, require_masks=False) -> list:
    """Read ``<domain_dir>/images/*.png`` with optional ``masks/<id>.png``."""
    domain_dir = Path(domain_dir)
    tag = domain_tag or domain_dir.name
    img_dir = domain_dir / "images"
    if not img_dir.is_dir():
        raise ValidationError(f"{domain_dir} has no images/ directory")
    samples = []
    for p in sorted(img_dir.glob("*.png")):
        m = domain_dir / "masks" / p.name
        if require_masks and not m.exists():
            raise ValidationError(f"missing mask for {p.name} in {domain_dir}")
        samples.append(load_sample(p, m if m.exists() else None, tag))
    return samples


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def crop_roi(sample: Sample, size: int, center=None) -> Sample:
    """Square crop centred on the disc centroid, or on ``center`` (row, col),
    or the image centre when no disc mask is available. The window is
    clamped inside the image."""
    h, w = sample.shape
    if size > min(h, w) or size < 1:
        raise ValidationError(f"crop size {size} does not fit image {h}x{w}")
    if center is None:
        if sample.masks is not None and sample.masks[0].any():
            rows, cols = np.nonzero(sample.masks[0])
            center = (rows.mean(), cols.mean())
        else:
            center = ((h - 1) / 2, (w - 1) / 2)
    top = int(np.floor(center[0] + 0.5)) - size // 2
    left = int(np.floor(center[1] + 0.5)) - size // 2
    top = min(max(top, 0), h - size)
    left = min(max(left, 0), w - size)
    win = (slice(top, top + size), slice(left, left + size))
    masks = None if sample.masks is None else sample.masks[(slice(None),) + win].copy()
    return replace(sample, image=sample.image[win].copy(), masks=masks)


def derive_edge_map(masks) -> EdgeMap:
    """Inner 4-connected boundary of each binary mask along the last two axes.
    Out-of-image neighbours count as equal to the pixel itself."""
    m = np.asarray(masks)
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("edge derivation needs binary masks")
    m = m.astype(bool)
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(m, pad, mode="edge")
    c = p[..., 1:-1, 1:-1]
    differs = ((p[..., :-2, 1:-1] != c) | (p[..., 2:, 1:-1] != c)
               | (p[..., 1:-1, :-2] != c) | (p[..., 1:-1, 2:] != c))
    return EdgeMap(edges=(m & differs).astype(np.uint8))


# ---------------------------------------------------------------------------
# target perturbation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbConfig:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    blur_sigma: tuple = (0.1, 1.0)


IDENTITY_PERTURB = PerturbConfig(0.0, 0.0, 0.0, 0.0, (0.0, 0.0))


def perturb(image, rng=None, config: PerturbConfig = PerturbConfig()):
    """Random colour jitter (brightness, contrast, saturation, hue) followed
    by Gaussian blur. Purely photometric, so labels carry over unchanged."""
    rng = rng if rng is not None else np.random.default_rng()
    img = np.asarray(image, dtype=np.float64)

    def factor(r):
        return rng.uniform(max(0.0, 1 - r), 1 + r) if r > 0 else 1.0

    b, c, s = factor(config.brightness), factor(config.contrast), factor(config.saturation)
    hshift = rng.uniform(-config.hue, config.hue) if config.hue > 0 else 0.0
    lo, hi = config.blur_sigma
    sigma = rng.uniform(lo, hi) if hi > lo else lo

    if b != 1.0:
        img = img * b
    if c != 1.0:
        gray_mean = (img @ np.array([0.299, 0.587, 0.114])).mean()
        img = (img - gray_mean) * c + gray_mean
    if s != 1.0:
        gray = (img @ np.array([0.299, 0.587, 0.114]))[..., None]
        img = (img - gray) * s + gray
    if hshift != 0.0:
        hsv = rgb_to_hsv(np.clip(img, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + hshift) % 1.0
        img = hsv_to_rgb(hsv)
    if sigma > 0:
        img = ndimage.gaussian_filter(img, (sigma, sigma, 0), mode="nearest")
    return np.clip(img, 0, 1).astype(np.asarray(image).dtype)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """Stacked arrays for fast in-memory minibatching (channels-first)."""

    images: np.ndarray  # N x 3 x H x W float32
    masks: Optional[np.ndarray]  # N x C x H x W float32 or None
    edges: Optional[np.ndarray]
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self):
        return self.masks is not None


def stack_samples(samples: Sequence[Sample], use_masks=True) -> ArrayDataset:
    if not samples:
        raise ValidationError("dataset is empty")
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    have = use_masks and all(s.masks is not None for s in samples)
    masks = edges = None
    if have:
        m = np.stack([s.masks for s in samples])
        masks = m.astype(np.float32)
        edges = derive_edge_map(m).edges.astype(np.float32)
    return ArrayDataset(images, masks, edges, [s.id for s in samples])
