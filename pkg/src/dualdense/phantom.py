"""Synthetic axial lumbar-CT-like phantoms with exact 4-class ground truth.

Anatomy is composed from ellipses in a local frame (x lateral, y posterior):
a vertebral body with a posterior notch, the spinal canal sitting in that
notch, the dural sac inside the canal, and a bony posterior arch labelled as
background. Canal and sac intensities differ only slightly and edges are
blurred, so that boundary is deliberately low contrast.

Each phantom draws from its own PCG64 stream seeded by ``(seed, index)``,
so corpus generation is order independent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (
    NUM_CLASSES,
    REFERENCE_DISTRIBUTION,
    ClassId,
    CorpusError,
    ImageSample,
    class_counts,
    normalize_image,
    to_uint16,
    write_png,
)

MIN_CANVAS = 64
# Anatomy sizes below are in pixels for a 512x512 canvas at scale 1.
_BODY_AXES = (70.0, 54.0)
_CANAL_AXES = (24.0, 19.5)
_CANAL_OFFSET = 64.0  # canal centre, posterior of the body centre
_SAC_AXES = (14.0, 10.6)
_SAC_OFFSET = 1.5


def default_bands(centers=REFERENCE_DISTRIBUTION, rel=0.5) -> tuple[tuple[float, float], ...]:
    return tuple((c * (1 - rel), min(1.0, c * (1 + rel))) for c in centers)


@dataclass(frozen=True)
class PhantomConfig:
    canvas: tuple[int, int] = (512, 512)
    count: int = 200
    seed: int = 1
    scale_range: tuple[float, float] = (0.85, 1.15)
    rotation_range: tuple[float, float] = (-0.35, 0.35)
    noise_level: float = 0.03
    target_bands: tuple[tuple[float, float], ...] = field(default_factory=default_bands)

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(int(c) for c in self.canvas))
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "rotation_range", tuple(float(v) for v in self.rotation_range))
        object.__setattr__(self, "target_bands", tuple(tuple(map(float, b)) for b in self.target_bands))

    def validate(self) -> "PhantomConfig":
        if min(self.canvas) < MIN_CANVAS:
            raise CorpusError(f"canvas {self.canvas} too small to place anatomy (min {MIN_CANVAS}x{MIN_CANVAS})")
        for name in ("scale_range", "rotation_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise CorpusError(f"{name} must be a non-empty interval, got {(lo, hi)}")
        if self.scale_range[0] <= 0:
            raise CorpusError("scale_range must be positive")
        if len(self.target_bands) != NUM_CLASSES or any(lo > hi for lo, hi in self.target_bands):
            raise CorpusError(f"target_bands must be {NUM_CLASSES} [lo, hi] pairs")
        if self.count < 0 or self.noise_level < 0:
            raise CorpusError("count and noise_level must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def phantom_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _ellipse(u, v, cx, cy, ax, ay):
    return ((u - cx) / ax) ** 2 + ((v - cy) / ay) ** 2 <= 1.0


def render_phantom(config: PhantomConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw intensities in roughly [0, 1] plus the class mask."""
    config.validate()
    if not 0 <= index < config.count:
        raise CorpusError(f"index {index} out of range for count {config.count}")
    rng = phantom_rng(config.seed, index)
    h, w = config.canvas
    unit = min(h, w) / 512.0
    s = rng.uniform(*config.scale_range) * unit
    theta = rng.uniform(*config.rotation_range)
    cx = w / 2 + rng.uniform(-0.06, 0.06) * w
    cy = h / 2 + rng.uniform(-0.06, 0.06) * h - 20 * unit
    jitter = lambda: rng.uniform(0.93, 1.07)

    # Local frame: u lateral, v posterior (rotated about the body centre).
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    c, sn = np.cos(theta), np.sin(theta)
    u = c * (xx - cx) + sn * (yy - cy)
    v = -sn * (xx - cx) + c * (yy - cy)

    bax, bay = _BODY_AXES[0] * s * jitter(), _BODY_AXES[1] * s * jitter()
    kax, kay = _CANAL_AXES[0] * s * jitter(), _CANAL_AXES[1] * s * jitter()
    kcy = bay + (_CANAL_OFFSET - _BODY_AXES[1]) * s
    sax, say = _SAC_AXES[0] * s * jitter(), _SAC_AXES[1] * s * jitter()
    scy = kcy + _SAC_OFFSET * s

    body = _ellipse(u, v, 0, 0, bax, bay)
    canal_outer = _ellipse(u, v, 0, kcy, kax, kay)
    sac = _ellipse(u, v, 0, scy, sax, say)
    arch = _ellipse(u, v, 0, kcy, kax * 1.5, kay * 1.6) & ~canal_outer & (v > kcy - 0.3 * kay)
    spinous = (np.abs(u) < 5 * s) & (v > kcy) & (v < kcy + kay * 3.4)
    transverse = (np.abs(v - (kcy - 0.2 * kay)) < 5 * s) & (np.abs(u) < kax * 3.2) & (np.abs(u) > kax)
    torso = _ellipse(u, v, 0, 25 * s, 205 * unit * jitter(), 160 * unit * jitter())

    mask = np.zeros((h, w), np.uint8)
    mask[body] = ClassId.VERTEBRAL_BODY
    mask[canal_outer] = ClassId.SPINAL_CANAL
    mask[sac] = ClassId.DURAL_SAC

    img = np.zeros((h, w))
    img[torso] = 0.33
    # A few fat pockets for texture.
    for _ in range(rng.integers(2, 6)):
        fu, fv = rng.uniform(-150, 150) * unit, rng.uniform(-60, 140) * unit
        img[_ellipse(u, v, fu, fv, rng.uniform(8, 30) * unit, rng.uniform(8, 25) * unit) & torso] = 0.24
    bone = arch | spinous | transverse
    img[bone & torso] = 0.85
    # Vertebral body: cortical rim, cancellous interior with a radial ramp.
    r = np.sqrt((u / bax) ** 2 + (v / bay) ** 2)
    img[body] = 0.62 + 0.12 * np.clip(r[body], 0, 1) ** 4
    rim = body & (r > 1.0 - 4.0 * s / min(bax, bay))
    img[rim] = 0.9
    img[canal_outer] = 0.40
    img[sac] = 0.44
    img = ndimage.gaussian_filter(img, sigma=1.2 * max(unit, 0.5))

    brightness = rng.uniform(0.85, 1.15)
    offset = rng.uniform(-0.05, 0.05)
    img = img * brightness + offset
    img += rng.normal(0.0, config.noise_level * rng.uniform(0.5, 1.5), size=(h, w))
    if rng.random() < 0.3:  # vertical streak artefact
        col = rng.integers(0, w)
        img[:, col : col + max(1, int(2 * unit))] += rng.uniform(0.05, 0.15)
    return img.astype(np.float32), mask


def generate_phantom(config: PhantomConfig, index: int) -> ImageSample:
    raw, mask = render_phantom(config, index)
    counts = class_counts(mask)
    if not (counts[0] > counts[1] > counts[2] > counts[3] > 0):
        raise CorpusError(f"phantom {index}: degenerate class counts {counts.tolist()}")
    return ImageSample(normalize_image(raw), mask, phantom_id(index), tuple(raw.shape))


def phantom_id(index: int) -> str:
    return f"phantom_{index:05d}"


def generate_corpus(config: PhantomConfig) -> list[ImageSample]:
    return [generate_phantom(config, i) for i in range(config.count)]


def write_phantom_corpus(config: PhantomConfig, root: str | Path) -> Path:
    """Write ``count`` phantoms in the corpus layout plus a ``phantoms.json`` sidecar."""
    config.validate()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(config.count):
        raw, mask = render_phantom(config, i)
        name = f"{phantom_id(i)}.png"
        write_png(root / "images" / name, to_uint16(raw))
        write_png(root / "masks" / name, mask)
    sidecar = root / "phantoms.json"
    sidecar.write_text(json.dumps({"generator": "dualdense.phantom", "config": config.to_dict()}, indent=2) + "\n")
    return sidecar


def within_bands(fractions, bands) -> list[bool]:
    return [lo <= f <= hi for f, (lo, hi) in zip(fractions, bands)]
