import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualdense.data import REFERENCE_DISTRIBUTION
from dualdense.loss import (
    LossShapeError,
    batch_class_weights,
    class_weights,
    class_weights_from_fractions,
    loss_from_logits,
    loss_gradient_check,
    one_hot,
    weighted_ce_loss,
)

UNIFORM_BCE = -(math.log(0.25) + 3 * math.log(0.75))  # 2.2493


def quarter_mask(n=4):
    return torch.arange(4).repeat_interleave(n * n // 4).reshape(1, n, n)


def test_weights_of_reference_fractions():
    w = class_weights_from_fractions(REFERENCE_DISTRIBUTION)
    assert w == pytest.approx([0.3867, 0.9567, 0.9963, 0.9982], abs=1e-4)


def test_equal_fractions_give_exp_minus_quarter():
    w = class_weights(quarter_mask().numpy()[0])
    assert w == pytest.approx([0.7788] * 4, abs=1e-4)


def test_uniform_prediction_loss():
    mask = quarter_mask()
    probs = torch.full((1, 4, 4, 4), 0.25, dtype=torch.float64)
    target = one_hot(mask, dtype=torch.float64)
    assert UNIFORM_BCE == pytest.approx(2.2493, abs=1e-4)
    assert weighted_ce_loss(probs, target, torch.ones(4)).item() == pytest.approx(UNIFORM_BCE, abs=1e-9)
    per_image = weighted_ce_loss(probs, target, batch_class_weights(mask)).item()
    assert per_image == pytest.approx(math.exp(-0.25) * UNIFORM_BCE, abs=1e-9)


def test_absent_class_has_weight_one():
    assert class_weights(np.zeros((3, 3), np.uint8))[1:] == pytest.approx([1, 1, 1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (2, 5, 5), elements=st.integers(0, 3)))
def test_batch_weights_match_per_image_weights(masks):
    w = batch_class_weights(torch.from_numpy(masks))
    for i in range(2):
        assert w[i].numpy() == pytest.approx(class_weights(masks[i]))
    assert ((w >= math.exp(-1) - 1e-12) & (w <= 1)).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 4, 3, 3), elements=st.floats(-5, 5)), arrays(np.uint8, (1, 3, 3), elements=st.integers(0, 3)))
def test_loss_non_negative_and_finite(logits, mask):
    loss = loss_from_logits(torch.from_numpy(logits), torch.from_numpy(mask))
    assert math.isfinite(loss.item()) and loss.item() >= 0


def test_confident_correct_prediction_beats_wrong_one():
    mask = quarter_mask()
    good = 10 * one_hot(mask, dtype=torch.float64)
    bad = 10 * one_hot((mask + 1) % 4, dtype=torch.float64)
    assert loss_from_logits(good, mask).item() < 1e-3 < loss_from_logits(bad, mask).item()


def test_shape_mismatch_raises():
    with pytest.raises(LossShapeError):
        weighted_ce_loss(torch.rand(1, 4, 2, 2), torch.rand(1, 3, 2, 2), torch.ones(4))
    with pytest.raises(LossShapeError):
        weighted_ce_loss(torch.rand(2, 4, 2, 2), torch.rand(2, 4, 2, 2), torch.ones(3, 4))


def test_gradient_check_small_sample():
    report = loss_gradient_check(seed=1, num_params=40)
    assert report.num_checked == 40
    assert report.passed, report
