import hashlib

import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial import Delaunay

from dualdense.data import ClassId, CorpusError, class_distribution, load_corpus
from dualdense.phantom import (
    PhantomConfig,
    default_bands,
    generate_corpus,
    generate_phantom,
    within_bands,
    write_phantom_corpus,
)

CONFIG = PhantomConfig(count=12, seed=1)


def test_same_seed_and_index_is_bit_identical():
    a, b = generate_phantom(CONFIG, 0), generate_phantom(CONFIG, 0)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    c = generate_phantom(PhantomConfig(count=12, seed=2), 0)
    assert not np.array_equal(a.mask, c.mask)


def test_generation_is_order_independent():
    corpus = generate_corpus(CONFIG)
    assert np.array_equal(corpus[7].mask, generate_phantom(CONFIG, 7).mask)


@pytest.mark.parametrize("index", range(6))
def test_anatomy(index):
    mask = generate_phantom(CONFIG, index).mask
    counts = np.bincount(mask.ravel(), minlength=4)
    assert counts[0] > counts[1] > counts[2] > counts[3] > 0

    body = mask == ClassId.VERTEBRAL_BODY
    _, n = ndimage.label(body)
    assert n == 1
    assert np.array_equal(ndimage.binary_fill_holes(body), body)

    canal = mask == ClassId.SPINAL_CANAL
    assert (ndimage.binary_dilation(canal) & body).any()

    hull = Delaunay(np.argwhere(canal))
    sac = np.argwhere(mask == ClassId.DURAL_SAC)
    assert (hull.find_simplex(sac) >= 0).all()


def test_canal_and_sac_have_low_contrast():
    s = generate_phantom(CONFIG, 0)
    means = [s.image[s.mask == c].mean() for c in range(4)]
    assert abs(means[2] - means[3]) < abs(means[1] - means[0])


def test_aggregate_distribution_within_bands():
    corpus = generate_corpus(PhantomConfig(count=40, seed=1))
    assert all(within_bands(class_distribution(corpus).fraction, default_bands()))


def test_default_bands_are_half_width_around_reference():
    lo, hi = default_bands()[1]
    assert (lo, hi) == pytest.approx((0.0443 * 0.5, 0.0443 * 1.5))


def test_validation():
    with pytest.raises(CorpusError):
        PhantomConfig(canvas=(63, 200)).validate()
    with pytest.raises(CorpusError):
        PhantomConfig(scale_range=(1.2, 1.0)).validate()
    with pytest.raises((CorpusError, IndexError, ValueError)):
        generate_phantom(CONFIG, 12)
    PhantomConfig(canvas=(64, 64)).validate()
    assert generate_phantom(PhantomConfig(canvas=(64, 64), count=1), 0).shape == (64, 64)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_written_corpus_is_byte_identical(tmp_path):
    config = PhantomConfig(canvas=(96, 96), count=4, seed=5)
    write_phantom_corpus(config, tmp_path / "a")
    write_phantom_corpus(config, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    loaded = load_corpus(tmp_path / "a")
    assert len(loaded) == 4
    assert np.array_equal(loaded[2].mask, generate_phantom(config, 2).mask)
    assert (tmp_path / "a" / "phantoms.json").exists()
