"""Class-balanced weighted cross-entropy.

For pixel ``i`` and class ``c`` with softmax probability ``p`` and one-hot
target ``y``::

    L = -(1/N) * sum_i sum_c w_c * [y log p + (1 - y) log(1 - p)]
    w_c = exp(-N_c / N)

``N`` is the pixel count of the image and ``N_c`` the pixels of class ``c``.
Both log terms are kept, so each class contributes a binary cross-entropy
term on top of the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import NUM_CLASSES, check_mask

EPS = 1e-7


class LossShapeError(ValueError):
    pass


def class_weights_from_fractions(fractions) -> np.ndarray:
    return np.exp(-np.asarray(fractions, dtype=np.float64))


def class_weights(mask: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """``exp(-count_c / total)``; absent classes get weight 1."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise LossShapeError("class weights of an empty mask are undefined")
    check_mask(mask)
    counts = np.bincount(mask.ravel(), minlength=num_classes)[:num_classes]
    return class_weights_from_fractions(counts / mask.size)


def batch_class_weights(masks: torch.Tensor, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """Per-image weights for a (B, H, W) integer mask batch -> (B, C)."""
    b = masks.shape[0]
    flat = masks.reshape(b, -1).long()
    counts = torch.zeros(b, num_classes, dtype=torch.float64, device=masks.device)
    counts.scatter_add_(1, flat, torch.ones_like(flat, dtype=torch.float64))
    return torch.exp(-counts / flat.shape[1])


def one_hot(masks: torch.Tensor, num_classes: int = NUM_CLASSES, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W) -> (B, C, H, W)."""
    return F.one_hot(masks.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


def weighted_ce_loss(probs: torch.Tensor, target: torch.Tensor, weights, eps: float = EPS) -> torch.Tensor:
    """Weighted cross-entropy of probabilities ``probs`` against one-hot ``target``.

    ``probs``/``target`` are (B, C, H, W) or (C, H, W). ``weights`` is (C,)
    shared by the batch or (B, C) per image. The per-image loss is averaged
    over pixels, and the batch loss is the mean over images.
    """
    if probs.shape != target.shape:
        raise LossShapeError(f"probabilities {tuple(probs.shape)} vs targets {tuple(target.shape)}")
    if probs.dim() == 3:
        probs, target = probs.unsqueeze(0), target.unsqueeze(0)
    if probs.dim() != 4:
        raise LossShapeError("expected (B, C, H, W) or (C, H, W) tensors")
    b, c = probs.shape[:2]
    w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
    if w.dim() == 1:
        w = w.expand(b, c)
    if w.shape != (b, c):
        raise LossShapeError(f"weights {tuple(w.shape)} do not match {c} classes / batch {b}")
    p = probs.clamp(eps, 1.0 - eps)
    per_class = target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)
    per_pixel = (per_class * w[:, :, None, None]).sum(dim=1)
    return -per_pixel.mean(dim=(1, 2)).mean()


def loss_from_logits(logits: torch.Tensor, masks: torch.Tensor, weights=None) -> torch.Tensor:
    """Softmax the logits and apply :func:`weighted_ce_loss`.

    ``weights=None`` computes per-image weights from ``masks``.
    """
    c = logits.shape[1]
    if weights is None:
        weights = batch_class_weights(masks, c)
    return weighted_ce_loss(torch.softmax(logits, dim=1), one_hot(masks, c, logits.dtype), weights)


# --------------------------------------------------------------------------
# Finite-difference verification harness


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_checked: int
    num_skipped: int
    worst_parameter: str
    loss: float
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def tiny_network_config():
    from .network import NetworkConfig

    return NetworkConfig(growth_rate=4, block_sizes=(1, 1, 1, 1), input_size=(32, 32))


class _KinkRecorder:
    """Records ReLU signs and max-pool argmaxes seen during a forward pass.

    Two evaluations with identical records lie on the same smooth piece of
    the loss, so their central difference is a valid derivative estimate.
    """

    def __init__(self, network: torch.nn.Module):
        self.records: list[torch.Tensor] = []
        self.handles = []
        for m in network.modules():
            if isinstance(m, torch.nn.ReLU):
                self.handles.append(m.register_forward_hook(self._relu))
            elif isinstance(m, torch.nn.MaxPool2d):
                self.handles.append(m.register_forward_hook(self._pool))

    def _relu(self, mod, inputs, out):
        self.records.append(inputs[0] > 0)

    def _pool(self, mod, inputs, out):
        _, idx = F.max_pool2d(inputs[0], mod.kernel_size, mod.stride, mod.padding, return_indices=True)
        self.records.append(idx)

    def take(self) -> list[torch.Tensor]:
        out, self.records = self.records, []
        return out

    def remove(self):
        for handle in self.handles:
            handle.remove()


def _off_kink(network: torch.nn.Module, gen: torch.Generator) -> None:
    # Fresh batch-norm affine maps (weight 1, bias 0) send exact zeros from a
    # previous ReLU straight onto the next ReLU's kink.
    with torch.no_grad():
        for m in network.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.weight.add_(0.2 * torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype))
                m.bias.add_(0.2 * torch.randn(m.bias.shape, generator=gen, dtype=m.bias.dtype))


def loss_gradient_check(
    network=None,
    sample=None,
    *,
    seed: int = 0,
    num_params: int = 128,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    max_attempts: int = 20000,
) -> GradCheckReport:
    """Compare autograd against central differences on sampled parameters.

    Runs in float64 with batch norm in evaluation mode. By default builds the
    reduced network (k=4, blocks 1/1/1/1, 32x32 input) and a random
    image/mask pair. Parameters whose +/-h evaluations straddle a ReLU,
    max-pool or probability-clamp switch are resampled (and counted in
    ``num_skipped``). Failures are reported, never raised.
    """
    from .network import build_network

    gen = torch.Generator().manual_seed(seed)
    if network is None:
        network = build_network(tiny_network_config(), seed=seed)
        _off_kink(network, gen)
    network = network.double().eval()
    cfg = network.config
    if sample is None:
        image = torch.randn(2, cfg.in_channels, *cfg.input_size, generator=gen, dtype=torch.float64)
        masks = torch.randint(0, cfg.num_classes, (2, *cfg.input_size), generator=gen)
    else:
        image, masks = sample
        image, masks = image.double(), masks.long()

    recorder = _KinkRecorder(network)

    def evaluate():
        logits = network(image)
        probs = torch.softmax(logits, dim=1)
        recorder.records.append((probs > EPS) & (probs < 1 - EPS))
        return loss_from_logits(logits, masks)

    try:
        network.zero_grad()
        loss = evaluate()
        loss.backward()
        recorder.take()

        named = [(n, p) for n, p in network.named_parameters() if p.requires_grad]
        sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
        rng = np.random.default_rng(seed)

        def candidates():
            # Each tensor once, then sampled proportionally to size.
            for i in rng.permutation(len(named)):
                yield int(i)
            while True:
                yield int(rng.choice(len(named), p=sizes / sizes.sum()))

        worst, worst_name, checked, skipped = 0.0, "", 0, 0
        with torch.no_grad():
            for i in candidates():
                if checked >= num_params or checked + skipped >= max_attempts:
                    break
                name, p = named[i]
                flat_index = int(rng.integers(p.numel()))
                view = p.view(-1)
                original = view[flat_index].item()
                view[flat_index] = original + h
                plus = evaluate().item()
                plus_pattern = recorder.take()
                view[flat_index] = original - h
                minus = evaluate().item()
                minus_pattern = recorder.take()
                view[flat_index] = original
                if not all(torch.equal(a, b) for a, b in zip(plus_pattern, minus_pattern)):
                    skipped += 1
                    continue
                analytic = p.grad.view(-1)[flat_index].item()
                numeric = (plus - minus) / (2 * h)
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10)
                checked += 1
                if err > worst:
                    worst, worst_name = err, f"{name}[{flat_index}]"
    finally:
        recorder.remove()
    return GradCheckReport(worst, checked, skipped, worst_name, float(loss.item()), tolerance)
