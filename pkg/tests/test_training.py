import copy
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from dualdense.data import DatasetSplit, center_crop_sample, split_corpus
from dualdense.loss import loss_from_logits
from dualdense.network import build_network
from dualdense.training import (
    TRACE_COLUMNS,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    _lr_at,
    make_optimizer,
    overfit_probe,
    predict,
    train,
)

FAST = TrainConfig.from_preset("desk", max_steps=4, eval_every=2, augment=False)


@pytest.fixture()
def split(small_corpus):
    return split_corpus(small_corpus, seed=0)


def params(net):
    return [p.detach().clone() for p in net.parameters()]


def test_paper_preset_values():
    c = TrainConfig.from_preset("paper")
    assert (c.batch_size, c.momentum, c.learning_rate, c.weight_decay, c.max_epochs) == (4, 0.95, 1e-7, 5e-4, 100)
    assert c.lr_schedule == "constant"
    d = TrainConfig.from_preset("desk")
    assert (d.learning_rate, d.lr_schedule) == (1e-3, "cosine")


def test_config_validation():
    for bad in (dict(learning_rate=-1.0), dict(momentum=1.0), dict(batch_size=0), dict(weight_mode="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_preset("fast")


def test_cosine_schedule():
    c = TrainConfig(learning_rate=1.0, lr_schedule="cosine")
    assert _lr_at(c, 0, 10) == 1.0
    assert _lr_at(c, 5, 10) == pytest.approx(0.5)
    assert _lr_at(replace(c, lr_schedule="constant"), 7, 10) == 1.0


def test_single_step_is_plain_gradient_descent(tiny_config, split):
    net = build_network(tiny_config, seed=0).double()
    ref = copy.deepcopy(net).train()
    config = TrainConfig(
        learning_rate=0.05, momentum=0.0, weight_decay=0.0, lr_schedule="constant",
        batch_size=len(split.train), max_steps=1, augment=False,
    )
    train(net, DatasetSplit(split.train, [], []), config)
    crops = [center_crop_sample(s, tiny_config.input_size) for s in split.train]
    x = torch.from_numpy(np.stack([s.image for s in crops])[:, None]).double()
    m = torch.from_numpy(np.stack([s.mask for s in crops]).astype(np.int64))
    loss_from_logits(ref(x), m).backward()
    for p, q in zip(net.parameters(), ref.parameters()):
        assert torch.allclose(p, q - 0.05 * q.grad, atol=1e-10, rtol=0)


def test_weight_decay_is_coupled():
    p = torch.nn.Parameter(torch.tensor([2.0, -4.0], dtype=torch.float64))
    opt = make_optimizer([p], TrainConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.01))
    p.grad = torch.zeros_like(p)
    opt.step()
    assert p.detach().tolist() == pytest.approx([2.0 * (1 - 0.1 * 0.01), -4.0 * (1 - 0.1 * 0.01)], abs=1e-15)


def test_zero_learning_rate_keeps_parameters(tiny_config, split):
    net = build_network(tiny_config, seed=0)
    before = params(net)
    train(net, split, replace(FAST, learning_rate=0.0, max_steps=None, max_epochs=1))
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_same_seed_gives_identical_traces(tiny_config, split):
    runs = []
    for _ in range(2):
        net = build_network(tiny_config, seed=0)
        ckpt, trace = train(net, split, replace(FAST, augment=True))
        runs.append((ckpt, trace))
    (a, ta), (b, tb) = runs
    assert ta.rows(include_time=False) == tb.rows(include_time=False)
    assert all(torch.equal(a.state_dict[k], b.state_dict[k]) for k in a.state_dict)


def test_trace_records_every_round(tiny_config, split, tmp_path):
    net = build_network(tiny_config, seed=0)
    ckpt, trace = train(net, split, FAST, out_dir=tmp_path)
    assert [r.epoch for r in trace.records] == [1, 2]
    assert all(r.val_metrics is not None for r in trace.records)
    best = max(trace.records, key=lambda r: r.val_metrics.miou)
    assert ckpt.epoch == best.epoch
    header = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == TRACE_COLUMNS
    assert (tmp_path / "loss_curve.png").stat().st_size > 0
    assert (tmp_path / "best.pt").exists()


def test_epoch_budget_without_step_budget(tiny_config, split):
    net = build_network(tiny_config, seed=0)
    config = replace(FAST, max_steps=None, max_epochs=2, eval_every=None, batch_size=2)
    ckpt, trace = train(net, split, config)
    assert [r.step for r in trace.records] == [3, 6]


def test_dataset_level_weights(tiny_config, split):
    net = build_network(tiny_config, seed=0)
    _, trace = train(net, split, replace(FAST, weight_mode="dataset"))
    assert math.isfinite(trace.records[-1].train_loss)


def test_divergence_guard_reports_step(tiny_config, split):
    net = build_network(tiny_config, seed=0)
    with pytest.raises(TrainingDivergedError) as info:
        train(net, split, replace(FAST, learning_rate=1e30, momentum=0.0, max_steps=10))
    assert 1 <= info.value.step < 10


def test_empty_training_split_rejected(tiny_config, split):
    with pytest.raises(ValueError):
        train(build_network(tiny_config), DatasetSplit([], split.validation, []), FAST)


def test_checkpoint_round_trip(tiny_config, tmp_path):
    net = build_network(tiny_config, seed=1)
    ckpt = Checkpoint.from_network(net, step=7, epoch=2, metrics={"miou": 0.5})
    ckpt.save(tmp_path / "c.pt")
    back = Checkpoint.load(tmp_path / "c.pt")
    assert back.network_config == tiny_config and back.step == 7 and back.metrics == {"miou": 0.5}
    rebuilt = back.build_network()
    assert all(torch.equal(a, b) for a, b in zip(net.state_dict().values(), rebuilt.state_dict().values()))


def test_checkpoint_errors(tiny_config, tmp_path):
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "missing.pt")
    ckpt = Checkpoint.from_network(build_network(tiny_config), step=0)
    ckpt.format_version = 99
    ckpt.save(tmp_path / "v.pt")
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "v.pt")
    wrong = Checkpoint(replace(tiny_config, growth_rate=8), ckpt.state_dict, 0)
    with pytest.raises(CheckpointError):
        wrong.build_network()


def test_predict_is_argmax(tiny_config):
    net = build_network(tiny_config, seed=0)
    head = net.head[2]
    with torch.no_grad():
        head.weight.zero_()
        head.bias.copy_(torch.tensor([0.0, 0.0, 5.0, 0.0]))
    masks = predict(net, [np.random.default_rng(0).normal(size=(64, 64))])
    assert (masks[0] == 2).all() and masks[0].dtype == np.uint8


def test_predict_batch_matches_single(tiny_config, small_corpus):
    ckpt = Checkpoint.from_network(build_network(tiny_config, seed=2), step=0)
    images = [s.image for s in small_corpus[:5]]
    batched = predict(ckpt, images, center_crop_inputs=True, batch_size=4)
    single = [predict(ckpt, [im], center_crop_inputs=True)[0] for im in images]
    again = predict(ckpt, images, center_crop_inputs=True, batch_size=4)
    assert all(np.array_equal(a, b) for a, b in zip(batched, single))
    assert all(np.array_equal(a, b) for a, b in zip(batched, again))


def test_predict_rejects_wrong_size_without_crop(tiny_config, small_corpus):
    with pytest.raises(ValueError, match="centre cropping"):
        predict(build_network(tiny_config), [small_corpus[0].image])


def test_untrained_probe_scores_low(tiny_config, small_corpus):
    report = overfit_probe(build_network(tiny_config, seed=0), small_corpus[:8], steps=0)
    assert report.miou < 0.5


def test_probe_stops_at_target(tiny_config, small_corpus):
    config = TrainConfig.from_preset("desk", learning_rate=0.05)
    report = overfit_probe(
        build_network(tiny_config, seed=0), small_corpus[:4], steps=40, config=config, target=0.0, check_every=5
    )
    assert report.meta["steps"] == 5
