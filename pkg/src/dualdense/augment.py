"""Training-time augmentation: rotate -> horizontal flip -> crop -> Gaussian noise.

Every random choice lives in an explicit :class:`AugmentDraw`, so ``augment``
itself is a pure function. Draws for copy ``j`` of source ``i`` come from a
generator seeded by ``(seed, i, j)``; precomputed expansion and on-the-fly
sampling therefore produce identical samples.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import ClassId, CorpusError, ImageSample


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max: float = 2 * math.pi
    flip_probability: float = 0.5
    crop_size: tuple[int, int] = (400, 400)
    noise_sigma_base: float = 0.15
    noise_sigma_span: float = 1.15
    multiplicity: int = 100
    seed: int = 0
    # Copy 0 of every source is a plain centre crop.
    include_identity: bool = True

    def __post_init__(self):
        object.__setattr__(self, "crop_size", tuple(int(c) for c in self.crop_size))

    def validate(self) -> "AugmentConfig":
        if self.multiplicity < 1:
            raise CorpusError("multiplicity must be >= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise CorpusError("flip_probability must lie in [0, 1]")
        if self.noise_sigma_base < 0 or self.noise_sigma_span < 0:
            raise CorpusError("noise sigma parameters must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AugmentDraw:
    angle: float = 0.0
    flip: bool = False
    offset: tuple[int, int] = (0, 0)
    sigma: float = 0.0
    noise_seed: int = 0


def identity_draw(source_shape: tuple[int, int], crop_size: tuple[int, int]) -> AugmentDraw:
    h, w = source_shape
    return AugmentDraw(offset=((h - crop_size[0]) // 2, (w - crop_size[1]) // 2))


def crop_offset_range(source_shape, crop_size) -> tuple[int, int]:
    """Largest valid (top, left) offsets; valid offsets are 0..max inclusive."""
    h, w = source_shape
    ch, cw = crop_size
    if ch > h or cw > w:
        raise CorpusError(f"sample {source_shape} is smaller than crop size {tuple(crop_size)}")
    return h - ch, w - cw


def draw_augmentation(rng: np.random.Generator, config: AugmentConfig, source_shape) -> AugmentDraw:
    max_top, max_left = crop_offset_range(source_shape, config.crop_size)
    angle = float(rng.uniform(0.0, config.rotation_max))
    flip = bool(rng.random() < config.flip_probability)
    offset = (int(rng.integers(0, max_top + 1)), int(rng.integers(0, max_left + 1)))
    sigma = config.noise_sigma_base + config.noise_sigma_span * float(rng.random())
    noise_seed = int(rng.integers(0, 2**63 - 1))
    return AugmentDraw(angle, flip, offset, sigma, noise_seed)


def draw_rng(seed: int, source_index: int, copy_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(source_index), int(copy_index)])


def rotate(image: np.ndarray, mask: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about the centre; bilinear for the image, nearest for the mask.

    Pixels rotated in from outside the frame become background with the
    mean background intensity.
    """
    if angle == 0.0:
        return image, mask
    bg = mask == ClassId.BACKGROUND
    fill = float(image[bg].mean()) if bg.any() else float(image.mean())
    degrees = math.degrees(angle)
    img = ndimage.rotate(image, degrees, reshape=False, order=1, mode="constant", cval=fill)
    msk = ndimage.rotate(mask, degrees, reshape=False, order=0, mode="constant", cval=ClassId.BACKGROUND)
    return img.astype(image.dtype, copy=False), msk


def hflip(array: np.ndarray) -> np.ndarray:
    return array[..., ::-1].copy()


def crop(array: np.ndarray, offset: tuple[int, int], size: tuple[int, int]) -> np.ndarray:
    top, left = offset
    return array[top : top + size[0], left : left + size[1]]


def augment(sample: ImageSample, config: AugmentConfig, draw: AugmentDraw) -> ImageSample:
    max_top, max_left = crop_offset_range(sample.shape, config.crop_size)
    top, left = draw.offset
    if not (0 <= top <= max_top and 0 <= left <= max_left):
        raise CorpusError(f"crop offset {draw.offset} outside 0..{(max_top, max_left)}")
    image, mask = rotate(sample.image, sample.mask, draw.angle)
    if draw.flip:
        image, mask = hflip(image), hflip(mask)
    image = crop(image, draw.offset, config.crop_size).astype(np.float32)
    mask = crop(mask, draw.offset, config.crop_size)
    if draw.sigma > 0:
        noise = np.random.default_rng(draw.noise_seed).standard_normal(image.shape)
        image = (image + draw.sigma * noise).astype(np.float32)
    return ImageSample(image, mask, sample.source_id, sample.native_size)


class AugmentedView(Sequence):
    """Lazy corpus of ``len(samples) * multiplicity`` augmented copies.

    Item ``i * multiplicity + j`` is copy ``j`` of source ``i``.
    """

    def __init__(self, samples: Sequence[ImageSample], config: AugmentConfig):
        self.samples = list(samples)
        self.config = config.validate()
        for s in self.samples:
            crop_offset_range(s.shape, config.crop_size)

    def __len__(self):
        return len(self.samples) * self.config.multiplicity

    def draw(self, index: int) -> AugmentDraw:
        src, copy = divmod(index, self.config.multiplicity)
        shape = self.samples[src].shape
        if copy == 0 and self.config.include_identity:
            return identity_draw(shape, self.config.crop_size)
        return draw_augmentation(draw_rng(self.config.seed, src, copy), self.config, shape)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        src = index // self.config.multiplicity
        return augment(self.samples[src], self.config, self.draw(index))


def expand_corpus(samples: Sequence[ImageSample], config: AugmentConfig) -> list[ImageSample]:
    return list(AugmentedView(samples, config))

