"""Mini-batch SGD training, validation-driven checkpointing and prediction."""

from __future__ import annotations

import csv
import copy
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, AugmentedView
from .data import (
    DatasetSplit,
    ImageSample,
    center_crop,
    center_crop_sample,
    class_distribution,
)
from .loss import batch_class_weights, class_weights_from_fractions, loss_from_logits
from .metrics import ConfusionMatrix, MetricsReport, accumulate, evaluate
from .network import DualDenseUNet, NetworkConfig, set_memory_efficient
from .seeding import derive_seed

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1

PRESETS = {
    "paper": dict(
        batch_size=4, momentum=0.95, learning_rate=1e-7, weight_decay=5e-4, max_epochs=100, lr_schedule="constant"
    ),
    "desk": dict(
        batch_size=4, momentum=0.95, learning_rate=1e-3, weight_decay=5e-4, max_epochs=100, lr_schedule="cosine"
    ),
}
WEIGHT_MODES = ("per-image", "dataset")
LR_SCHEDULES = ("constant", "cosine")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    batch_size: int = 4
    momentum: float = 0.95
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 100
    # A step budget overrides max_epochs.
    max_steps: int | None = None
    lr_schedule: str = "cosine"
    # Steps between validation rounds; None means once per epoch.
    eval_every: int | None = None
    seed: int = 0
    weight_mode: str = "per-image"
    augment: bool = True
    device: str = "cpu"
    # Recompute dense-layer bottlenecks in backward; numerically identical.
    memory_efficient: bool = False

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(preset=name, **{**PRESETS[name], **overrides})

    def validate(self) -> "TrainConfig":
        # Zero is allowed so a run can be a pure no-op on the weights.
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_loss: float | None
    val_metrics: MetricsReport | None
    seconds: float


TRACE_COLUMNS = ("epoch", "train_loss", "val_loss", "val_miou", "val_pa", "val_mpa", "val_fwiou", "seconds")


@dataclass
class TrainingTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def rows(self, include_time: bool = True) -> list[dict]:
        out = []
        for r in self.records:
            m = r.val_metrics
            out.append(
                {
                    "epoch": r.epoch,
                    "train_loss": r.train_loss,
                    "val_loss": r.val_loss,
                    "val_miou": m.miou if m else None,
                    "val_pa": m.pa if m else None,
                    "val_mpa": m.mpa if m else None,
                    "val_fwiou": m.fwiou if m else None,
                    "seconds": round(r.seconds, 3) if include_time else None,
                }
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        epochs = [r.epoch for r in self.records]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, [r.train_loss for r in self.records], label="training loss")
        if any(r.val_loss is not None for r in self.records):
            ax.plot(epochs, [r.val_loss for r in self.records], label="validation loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("weighted cross-entropy")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)


@dataclass
class Checkpoint:
    network_config: NetworkConfig
    state_dict: dict
    step: int
    epoch: int = 0
    metrics: dict | None = None
    format_version: int = CHECKPOINT_FORMAT

    def save(self, path: str | Path) -> None:
        payload = {
            "format_version": self.format_version,
            "network_config": self.network_config.to_dict(),
            "state_dict": self.state_dict,
            "step": self.step,
            "epoch": self.epoch,
            "metrics": self.metrics,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=True)
        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unsupported checkpoint format {version!r}")
        return cls(
            NetworkConfig.from_dict(payload["network_config"]),
            payload["state_dict"],
            int(payload["step"]),
            int(payload.get("epoch", 0)),
            payload.get("metrics"),
            version,
        )

    @classmethod
    def from_network(cls, network: DualDenseUNet, step: int, epoch: int = 0, metrics=None) -> "Checkpoint":
        state = {k: v.detach().clone().cpu() for k, v in network.state_dict().items()}
        return cls(network.config, state, step, epoch, metrics)

    def build_network(self) -> DualDenseUNet:
        net = DualDenseUNet(self.network_config)
        try:
            net.load_state_dict(self.state_dict, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint does not match its network config: {exc}") from exc
        return net.eval()


# --------------------------------------------------------------------------
# Batching helpers


def _stack(samples: Sequence[ImageSample], device, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])[:, None]).to(device, dtype)
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64)).to(device)
    return images, masks


def _dtype(network: torch.nn.Module) -> torch.dtype:
    return next(network.parameters()).dtype


def make_optimizer(params, config: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum; L2 decay is coupled, i.e. ``g <- g + weight_decay * theta``."""
    return torch.optim.SGD(
        params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "cosine" and total > 0:
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return config.learning_rate


def training_view(samples: Sequence[ImageSample], config: TrainConfig, augment: AugmentConfig, input_size):
    """The sequence of training inputs: augmented copies or plain centre crops."""
    if config.augment:
        aug = replace(augment, crop_size=tuple(input_size), seed=derive_seed(config.seed, "augment"))
        return AugmentedView(samples, aug)
    return [center_crop_sample(s, input_size) for s in samples]


def evaluate_network(
    network: DualDenseUNet,
    samples: Sequence[ImageSample],
    batch_size: int = 4,
    weights=None,
    device="cpu",
) -> tuple[MetricsReport, float]:
    """Metrics and mean loss on centre crops, batch norm in evaluation mode."""
    size = network.config.input_size
    was_training = network.training
    network.eval()
    cm = ConfusionMatrix(network.config.num_classes)
    losses = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = [center_crop_sample(s, size) for s in samples[i : i + batch_size]]
            images, masks = _stack(chunk, device, _dtype(network))
            logits = network(images)
            losses.append(loss_from_logits(logits, masks, weights).item() * len(chunk))
            preds = logits.argmax(dim=1).cpu().numpy()
            for p, s in zip(preds, chunk):
                cm = accumulate(cm, p, s.mask)
    network.train(was_training)
    return evaluate(cm), float(sum(losses) / max(len(samples), 1))


def train(
    network: DualDenseUNet,
    split: DatasetSplit,
    config: TrainConfig,
    augment: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
    progress: Callable[[EpochRecord], bool | None] | None = None,
) -> tuple[Checkpoint, TrainingTrace]:
    """Train ``network`` in place; return the best checkpoint and the trace.

    The best checkpoint is the validation round with the highest mIoU (the
    final weights when there is no validation data). Data order, augmentation
    draws and initial weights depend only on ``config.seed``. ``progress`` is
    called after every validation round; a truthy return ends training early.
    """
    config.validate()
    if not split.train:
        raise ValueError("training split is empty")
    augment = augment or AugmentConfig()
    device = torch.device(config.device)
    network.to(device).train()
    if config.memory_efficient:
        set_memory_efficient(network)
    torch.manual_seed(derive_seed(config.seed, "torch"))

    view = training_view(split.train, config, augment, network.config.input_size)
    steps_per_epoch = math.ceil(len(view) / config.batch_size)
    total = config.max_steps if config.max_steps is not None else config.max_epochs * steps_per_epoch
    eval_every = config.eval_every or steps_per_epoch

    fixed_weights = None
    if config.weight_mode == "dataset":
        fixed_weights = torch.as_tensor(class_weights_from_fractions(class_distribution(split.train).fraction))

    optimizer = make_optimizer(network.parameters(), config)
    trace = TrainingTrace()
    best: Checkpoint | None = None
    best_miou = -math.inf
    step, epoch_index, running, running_n = 0, 0, 0.0, 0
    stop = False
    t0 = time.perf_counter()

    def record():
        nonlocal best, best_miou, running, running_n, t0, stop
        val_metrics, val_loss = None, None
        if split.validation:
            val_metrics, val_loss = evaluate_network(
                network, split.validation, config.batch_size, fixed_weights, device
            )
        rec = EpochRecord(
            epoch=len(trace.records) + 1,
            step=step,
            train_loss=running / max(running_n, 1),
            val_loss=val_loss,
            val_metrics=val_metrics,
            seconds=time.perf_counter() - t0,
        )
        trace.records.append(rec)
        score = val_metrics.miou if val_metrics else -math.inf
        if best is None or score > best_miou or not split.validation:
            best_miou = score
            best = Checkpoint.from_network(network, step, rec.epoch, val_metrics.to_dict() if val_metrics else None)
        running, running_n = 0.0, 0
        t0 = time.perf_counter()
        if progress and progress(rec):
            stop = True
        log.info("round %d step %d train_loss %.5f val_miou %s", rec.epoch, step, rec.train_loss,
                 f"{val_metrics.miou:.4f}" if val_metrics else "-")

    while step < total and not stop:
        order = np.random.default_rng(derive_seed(config.seed, f"order/{epoch_index}")).permutation(len(view))
        epoch_index += 1
        for start in range(0, len(order), config.batch_size):
            if step >= total or stop:
                break
            batch = [view[int(i)] for i in order[start : start + config.batch_size]]
            images, masks = _stack(batch, device, _dtype(network))
            weights = fixed_weights if fixed_weights is not None else batch_class_weights(masks)
            for group in optimizer.param_groups:
                group["lr"] = _lr_at(config, step, total)
            optimizer.zero_grad(set_to_none=True)
            loss = loss_from_logits(network(images), masks, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            loss.backward()
            optimizer.step()
            step += 1
            running += value
            running_n += 1
            if step % eval_every == 0 or step == total:
                record()
    if not trace.records:
        record()

    if out_dir is not None:
        write_training_outputs(out_dir, best, trace)
    return best, trace


def write_training_outputs(out_dir: str | Path, checkpoint: Checkpoint, trace: TrainingTrace) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "best.pt")
    (out / "trace.csv").write_text(trace.to_csv())
    trace.plot(out / "loss_curve.png")


# --------------------------------------------------------------------------
# Inference


def _as_network(model) -> DualDenseUNet:
    if isinstance(model, Checkpoint):
        return model.build_network()
    if isinstance(model, (str, Path)):
        return Checkpoint.load(model).build_network()
    return model


def prepare_inputs(images: Sequence[np.ndarray], input_size, center_crop_inputs: bool = False) -> list[np.ndarray]:
    out = []
    for img in images:
        img = np.asarray(img, dtype=np.float32)
        if img.shape != tuple(input_size):
            if not center_crop_inputs:
                raise ValueError(
                    f"image of size {img.shape} does not match network input {tuple(input_size)}; "
                    "enable centre cropping to accept larger inputs"
                )
            img = center_crop(img, input_size)
        out.append(img)
    return out


def predict(model, images: Sequence[np.ndarray], center_crop_inputs: bool = False, batch_size: int = 4,
            device="cpu") -> list[np.ndarray]:
    """Per-pixel argmax class masks (uint8) in evaluation mode."""
    network = _as_network(model)
    network.eval().to(device)
    inputs = prepare_inputs(images, network.config.input_size, center_crop_inputs)
    masks = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            x = torch.from_numpy(np.stack(inputs[i : i + batch_size])[:, None]).to(device, _dtype(network))
            masks.extend(network(x).argmax(dim=1).cpu().numpy().astype(np.uint8))
    return masks


def overfit_probe(
    network: DualDenseUNet,
    samples: Sequence[ImageSample],
    steps: int,
    config: TrainConfig | None = None,
    target: float | None = None,
    check_every: int = 50,
    progress: Callable[[EpochRecord], None] | None = None,
    time_limit: float | None = None,
) -> MetricsReport:
    """Train on ``samples`` without augmentation and score the same samples.

    With ``target`` set, the training-set mIoU is checked every
    ``check_every`` steps and training stops once it is reached. A
    ``time_limit`` in seconds ends training at the first check past it.
    """
    config = config or TrainConfig.from_preset("desk")
    every = check_every if target is not None else max(steps, 1)
    config = replace(config, augment=False, max_steps=steps, eval_every=every)
    samples = list(samples)
    step, timed_out = 0, False
    start = time.perf_counter()

    def watch(rec: EpochRecord):
        nonlocal step, timed_out
        step = rec.step
        if progress:
            progress(rec)
        if target is not None and rec.val_metrics is not None and rec.val_metrics.miou >= target:
            return True
        timed_out = time_limit is not None and time.perf_counter() - start > time_limit
        return timed_out

    if steps > 0:
        train(network, DatasetSplit(samples, [], []) if target is None else DatasetSplit(samples, samples, []),
              config, progress=watch)
    report, _ = evaluate_network(network, samples, config.batch_size, device=config.device)
    report.meta.update(budget=steps, steps=step, probe="training-set", timed_out=timed_out)
    return report


def copy_network(network: DualDenseUNet) -> DualDenseUNet:
    return copy.deepcopy(network)
