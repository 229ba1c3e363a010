"""Images, masks, class identities and the on-disk corpus layout.

Corpus layout::

    <root>/images/<id>.png   8- or 16-bit grayscale
    <root>/masks/<id>.png    8-bit, pixel value = class id (0..3)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

NUM_CLASSES = 4


class ClassId(IntEnum):
    BACKGROUND = 0
    VERTEBRAL_BODY = 1
    SPINAL_CANAL = 2
    DURAL_SAC = 3

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


CLASS_NAMES = tuple(c.label for c in ClassId)

PALETTE = np.array(
    [
        [0, 0, 0],  # background
        [255, 0, 0],  # vertebral body
        [0, 255, 0],  # spinal canal
        [255, 255, 255],  # dural sac
    ],
    dtype=np.uint8,
)

# Reference class fractions of the clinical corpus (bg, body, canal, sac).
REFERENCE_DISTRIBUTION = (0.9502, 0.0443, 0.0037, 0.0018)

SPLIT_RATIOS = (0.5, 0.2, 0.3)


class CorpusError(ValueError):
    pass


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Per-image zero mean / unit variance (constant images map to zeros)."""
    raw = np.asarray(raw, dtype=np.float64)
    std = raw.std()
    out = raw - raw.mean()
    if std > 0:
        out /= std
    return out.astype(np.float32)


def check_mask(mask: np.ndarray, what: str = "mask") -> None:
    if mask.size and (mask.min() < 0 or mask.max() >= NUM_CLASSES):
        bad = sorted(set(np.unique(mask).tolist()) - set(range(NUM_CLASSES)))
        raise CorpusError(f"{what}: class values {bad} outside 0..{NUM_CLASSES - 1}")


@dataclass
class ImageSample:
    image: np.ndarray
    mask: np.ndarray
    source_id: str = ""
    native_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 2 or self.image.shape != self.mask.shape:
            raise CorpusError(
                f"{self.source_id or 'sample'}: image {self.image.shape} and mask "
                f"{self.mask.shape} must be equal 2-D grids"
            )
        check_mask(self.mask, self.source_id or "mask")
        self.mask = self.mask.astype(np.uint8, copy=False)
        if self.native_size is None:
            self.native_size = tuple(self.image.shape)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.image.shape)


@dataclass
class DatasetSplit:
    train: list[ImageSample]
    validation: list[ImageSample]
    test: list[ImageSample]
    seed: int = 0

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)

    def ids(self) -> dict[str, list[str]]:
        return {
            "train": [s.source_id for s in self.train],
            "validation": [s.source_id for s in self.validation],
            "test": [s.source_id for s in self.test],
        }


@dataclass
class ClassDistribution:
    counts: np.ndarray
    fraction: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        total = int(self.counts.sum())
        if total == 0:
            raise CorpusError("class distribution of zero pixels is undefined")
        self.fraction = self.counts / total

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def as_dict(self) -> dict[str, float]:
        return {name: float(f) for name, f in zip(CLASS_NAMES, self.fraction)}


# --------------------------------------------------------------------------
# Disk I/O


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 3:
        raise CorpusError(f"{path}: expected a single-channel image, got {arr.shape[2]} channels")
    return arr


def load_sample(image_path: Path, mask_path: Path) -> ImageSample:
    image_path, mask_path = Path(image_path), Path(mask_path)
    if not mask_path.exists():
        raise CorpusError(f"missing mask for image {image_path.name} (expected {mask_path})")
    raw = _read_png(image_path)
    mask = _read_png(mask_path)
    check_mask(mask, str(mask_path))
    if raw.shape != mask.shape:
        raise CorpusError(f"{image_path.name}: image {raw.shape} and mask {mask.shape} differ")
    return ImageSample(normalize_image(raw), mask.astype(np.uint8), image_path.stem, tuple(raw.shape))


def load_corpus(root: str | Path) -> list[ImageSample]:
    """Load every image/mask pair under ``root``, sorted by source id."""
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        return []
    return [
        load_sample(p, root / "masks" / p.name)
        for p in sorted(image_dir.glob("*.png"), key=lambda p: p.stem)
    ]


def load_images(paths: Sequence[str | Path]) -> list[ImageSample]:
    """Images without ground truth; masks are all background placeholders."""
    out = []
    for p in sorted(map(Path, paths), key=lambda p: p.stem):
        raw = _read_png(p)
        out.append(ImageSample(normalize_image(raw), np.zeros(raw.shape, np.uint8), p.stem, tuple(raw.shape)))
    return out


def to_uint16(image: np.ndarray) -> np.ndarray:
    """Min-max rescale to the full 16-bit range (normalization undoes it on load)."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros(image.shape, np.uint16)
    return np.round((image - lo) / (hi - lo) * 65535.0).astype(np.uint16)


def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def write_sample(root: Path, sample: ImageSample, raw_image: np.ndarray | None = None) -> None:
    root = Path(root)
    pixels = to_uint16(sample.image if raw_image is None else raw_image)
    write_png(root / "images" / f"{sample.source_id}.png", pixels)
    write_png(root / "masks" / f"{sample.source_id}.png", sample.mask.astype(np.uint8))


def write_corpus(samples: Sequence[ImageSample], root: str | Path) -> None:
    for s in samples:
        if not s.source_id:
            raise CorpusError("samples need a source_id to be written")
        write_sample(Path(root), s)


# --------------------------------------------------------------------------
# Splitting and statistics


def split_sizes(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> tuple[int, int, int]:
    n_train = math.floor(n * ratios[0] + 0.5)
    n_val = math.floor(n * ratios[1] + 0.5)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_corpus(
    samples: Sequence[ImageSample],
    seed: int,
    ratios: Sequence[float] = SPLIT_RATIOS,
    group_key: Callable[[ImageSample], str] | None = None,
) -> DatasetSplit:
    """Random 50/20/30 partition, deterministic for ``seed``.

    By default the split is per image. With ``group_key`` (e.g. a patient id)
    whole groups are assigned to one part, so sizes can only approximate the
    ratios.
    """
    samples = list(samples)
    if not samples:
        raise CorpusError("cannot split an empty corpus")
    rng = np.random.default_rng(seed)
    n_train, n_val, _ = split_sizes(len(samples), ratios)
    if group_key is None:
        order = rng.permutation(len(samples))
        parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
        return DatasetSplit(*([samples[i] for i in sorted(p)] for p in parts), seed=seed)

    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(group_key(s), []).append(i)
    keys = sorted(groups)
    targets = (n_train, n_val)
    parts: list[list[int]] = [[], [], []]
    for gi in rng.permutation(len(keys)):
        members = groups[keys[gi]]
        for p in range(3):
            if p == 2 or len(parts[p]) + len(members) / 2 <= targets[p]:
                parts[p].extend(members)
                break
    return DatasetSplit(*([samples[i] for i in sorted(p)] for p in parts), seed=seed)


def class_counts(mask: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(mask).ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES].astype(np.int64)


def class_distribution(samples: Sequence[ImageSample]) -> ClassDistribution:
    if not samples:
        raise CorpusError("class distribution needs at least one sample")
    return ClassDistribution(sum(class_counts(s.mask) for s in samples))


# --------------------------------------------------------------------------
# Rendering


def colorize_mask(mask: np.ndarray) -> np.ndarray:
    check_mask(mask)
    return PALETTE[np.asarray(mask, dtype=np.intp)]


def grayscale_u8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros(image.shape, np.uint8)
    return np.round((image - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_overlay(sample: ImageSample, predicted: np.ndarray) -> np.ndarray:
    """RGB uint8 image: grayscale where predicted background, palette colour elsewhere."""
    predicted = np.asarray(predicted)
    if predicted.shape != sample.image.shape:
        raise CorpusError(
            f"prediction {predicted.shape} does not match image {sample.image.shape}"
        )
    check_mask(predicted, "prediction")
    gray = grayscale_u8(sample.image)
    out = np.repeat(gray[..., None], 3, axis=2)
    fg = predicted != ClassId.BACKGROUND
    out[fg] = PALETTE[predicted[fg].astype(np.intp)]
    return out


def center_crop(array: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = array.shape[-2:]
    ch, cw = size
    if ch > h or cw > w:
        raise CorpusError(f"cannot crop {size} out of {(h, w)}")
    top, left = (h - ch) // 2, (w - cw) // 2
    return array[..., top : top + ch, left : left + cw]


def center_crop_sample(sample: ImageSample, size: tuple[int, int]) -> ImageSample:
    if sample.shape == tuple(size):
        return sample
    return ImageSample(
        center_crop(sample.image, size), center_crop(sample.mask, size), sample.source_id, sample.native_size
    )
