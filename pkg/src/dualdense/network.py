"""Dual densely connected U-shaped segmentation network.

Two encoder-decoder branches share the same input. The *upper* branch
upsamples right after the stem so its dense blocks see a finer grid
(smaller receptive field); the *lower* branch average-pools instead and
recovers resolution with an extra upsampling stage. Each branch ends in a
32-channel map at input resolution; the maps are concatenated and fused by
a 1x1 convolution into per-class logits.

The channel schedule follows the DenseNet-121 layout (blocks 6/12/24/16,
4k bottleneck, transitions halving channels). Decoder convolution widths
are a quarter of the concatenated channel count so the whole network scales
with the growth rate; at k=32 every stated width of the reference schedule
is reproduced exactly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint

log = logging.getLogger(__name__)

BRANCHES = ("upper", "lower")
SWEEP_GROWTH_RATES = (12, 24, 32, 48)
BRANCH_OUT_CHANNELS = 32
STEM_CHANNELS = 64
# Fixed narrow decoder tail: Convolution 4 / Convolution 5 widths.
TAIL_WIDTHS = (16, 32)

PLAN_KINDS = (
    "conv",
    "bn-relu-conv",
    "max-pool",
    "average-pool",
    "bilinear-upsample",
    "concat-skip",
    "dense-block",
    "transition",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    growth_rate: int = 32
    block_sizes: tuple[int, int, int, int] = (6, 12, 24, 16)
    input_size: tuple[int, int] = (400, 400)
    num_classes: int = 4
    in_channels: int = 1
    enable_skip_connections: bool = True
    enable_dense_blocks: bool = True
    branches: tuple[str, ...] = BRANCHES
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        # Normalize list inputs (e.g. from JSON) so configs compare and hash cleanly.
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        object.__setattr__(
            self, "branches", tuple(b for b in BRANCHES if b in set(self.branches))
        )

    def validate(self) -> "NetworkConfig":
        if not isinstance(self.growth_rate, int) or self.growth_rate < 1:
            raise ConfigError(f"growth rate must be a positive integer, got {self.growth_rate!r}")
        if len(self.block_sizes) != 4 or min(self.block_sizes) < 1:
            raise ConfigError(f"block_sizes must be four positive integers, got {self.block_sizes}")
        if not self.branches:
            raise ConfigError("at least one branch (upper/lower) must be enabled")
        h, w = self.input_size
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ConfigError(f"input size must be a positive multiple of 16, got {self.input_size}")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ConfigError("need num_classes >= 2 and in_channels >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass(frozen=True)
class PlanEntry:
    branch: str
    name: str
    kind: str
    size_in: tuple[int, int]
    size_out: tuple[int, int]
    channels_in: int
    channels_out: int
    skip_source: str | None = None


@dataclass
class LayerPlan:
    config: NetworkConfig
    entries: list[PlanEntry]
    divergences: list[str] = field(default_factory=list)

    def branch(self, name: str) -> list[PlanEntry]:
        return [e for e in self.entries if e.branch == name]

    def find(self, branch: str, name: str) -> PlanEntry:
        for e in self.entries:
            if e.branch == branch and e.name == name:
                return e
        raise KeyError((branch, name))

    def chain_errors(self) -> list[str]:
        """Entries whose input does not match what feeds them."""
        errors = []
        for branch in self.config.branches:
            entries = self.branch(branch)
            by_name = {e.name: e for e in entries}
            h, w = self.config.input_size
            prev_size, prev_ch = (h, w), self.config.in_channels
            for e in entries:
                if (e.size_in, e.channels_in) != (prev_size, prev_ch):
                    errors.append(
                        f"{branch}/{e.name}: input {e.size_in}x{e.channels_in} "
                        f"!= previous output {prev_size}x{prev_ch}"
                    )
                if e.kind == "concat-skip":
                    src = by_name[e.skip_source]
                    if src.size_out != e.size_in or e.channels_out != e.channels_in + src.channels_out:
                        errors.append(f"{branch}/{e.name}: skip source {src.name} does not fit")
                prev_size, prev_ch = e.size_out, e.channels_out
        head = self.branch("head")
        fused_in = BRANCH_OUT_CHANNELS * len(self.config.branches)
        if head and head[0].channels_in != fused_in:
            errors.append(f"head: expects {head[0].channels_in} channels, branches give {fused_in}")
        return errors

    def rows(self) -> list[dict]:
        return [asdict(e) for e in self.entries]


# Stated feature sizes / channels per row of the reference schedule (k=32).
# None where the reference row gives no channel count.
_REFERENCE_ROWS = {
    "upper": [
        ("conv1", 200, 64), ("pool", 100, 64), ("up1", 200, 64), ("db1", 200, None),
        ("trans1", 100, 128), ("db2", 100, None), ("trans2", 50, 256), ("db3", 50, None),
        ("trans3", 25, 512), ("db4", 25, None), ("skip2", 50, 2048), ("conv2", 50, 512),
        ("skip3", 100, 1024), ("conv3", 100, 256), ("skip4", 200, 512), ("conv4", 200, 16),
        ("up5", 400, None), ("conv5", 400, 32),
    ],
    "lower": [
        ("conv1", 200, 64), ("pool", 100, 64), ("trans1", 50, 64), ("db1", 50, None),
        ("up1", 100, 128), ("db2", 100, None), ("trans2", 50, 256), ("db3", 50, None),
        ("trans3", 25, 512), ("db4", 25, None), ("skip2", 50, 2048), ("conv2", 50, 512),
        ("skip3", 100, 1024), ("conv3", 100, 256), ("trans4", 50, 256), ("skip4", 50, 512),
        ("conv4", 50, 16), ("up5", 200, 16), ("conv5", 200, 32), ("up6", 400, 32),
    ],
}


class _Planner:
    """Accumulates plan entries for one branch while tracking size/channels."""

    def __init__(self, branch: str, config: NetworkConfig):
        self.branch = branch
        self.size = config.input_size
        self.ch = config.in_channels
        self.entries: list[PlanEntry] = []
        self.outputs: dict[str, tuple[tuple[int, int], int]] = {}

    def add(self, name, kind, *, scale=1.0, ch_out=None, skip_source=None):
        h, w = self.size
        size_out = (int(h * scale), int(w * scale))
        if kind == "concat-skip":
            src_size, src_ch = self.outputs[skip_source]
            assert src_size == self.size, (self.branch, name, src_size, self.size)
            ch_out = self.ch + src_ch
        elif ch_out is None:
            ch_out = self.ch
        self.entries.append(
            PlanEntry(self.branch, name, kind, self.size, size_out, self.ch, ch_out, skip_source)
        )
        self.size, self.ch = size_out, ch_out
        self.outputs[name] = (size_out, ch_out)


def _dense_out(ch_in: int, n: int, config: NetworkConfig) -> int:
    return ch_in + n * config.growth_rate


def _branch_plan(config: NetworkConfig, branch: str) -> list[PlanEntry]:
    p = _Planner(branch, config)
    b1, b2, b3, b4 = config.block_sizes
    skips = config.enable_skip_connections

    def dense(name, n):
        p.add(name, "dense-block", ch_out=_dense_out(p.ch, n, config))

    def decoder_up(up_name, skip_name, conv_name, source, scale=2.0):
        # Decoder width is a quarter of the (virtual) concatenation so the
        # flat variant keeps identical convolution widths.
        p.add(up_name, "bilinear-upsample", scale=scale)
        concat = p.ch + p.outputs[source][1]
        if skips:
            p.add(skip_name, "concat-skip", skip_source=source)
        p.add(conv_name, "bn-relu-conv", ch_out=concat // 4)

    p.add("conv1", "conv", scale=0.5, ch_out=STEM_CHANNELS)
    p.add("pool", "max-pool", scale=0.5)
    if branch == "upper":
        p.add("up1", "bilinear-upsample", scale=2.0)
        dense("db1", b1)
        p.add("trans1", "transition", scale=0.5, ch_out=p.ch // 2)
    else:
        p.add("trans1", "transition", scale=0.5)
        dense("db1", b1)
        p.add("up1", "bilinear-upsample", scale=2.0, ch_out=p.ch // 2)
    dense("db2", b2)
    p.add("trans2", "transition", scale=0.5, ch_out=p.ch // 2)
    dense("db3", b3)
    p.add("trans3", "transition", scale=0.5, ch_out=p.ch // 2)
    dense("db4", b4)
    decoder_up("up2", "skip2", "conv2", "db3")
    decoder_up("up3", "skip3", "conv3", "db2")
    narrow, out = TAIL_WIDTHS
    if branch == "upper":
        p.add("up4", "bilinear-upsample", scale=2.0)
        if skips:
            p.add("skip4", "concat-skip", skip_source="db1")
        p.add("conv4", "bn-relu-conv", ch_out=narrow)
        p.add("up5", "bilinear-upsample", scale=2.0)
        p.add("conv5", "bn-relu-conv", ch_out=out)
    else:
        p.add("trans4", "transition", scale=0.5)
        if skips:
            p.add("skip4", "concat-skip", skip_source="db1")
        p.add("conv4", "bn-relu-conv", ch_out=narrow)
        p.add("up5", "bilinear-upsample", scale=4.0)
        p.add("conv5", "bn-relu-conv", ch_out=out)
        p.add("up6", "bilinear-upsample", scale=2.0)
    return p.entries


def _reference_divergences(plan: LayerPlan) -> list[str]:
    cfg = plan.config
    notes = []
    scale = cfg.input_size[0] / 400
    for branch in cfg.branches:
        for name, size, ch in _REFERENCE_ROWS[branch]:
            try:
                e = plan.find(branch, name)
            except KeyError:
                notes.append(f"{branch}/{name}: reference row absent in this configuration")
                continue
            if e.size_out[0] != int(size * scale):
                notes.append(f"{branch}/{name}: size {e.size_out[0]} vs reference {size}")
            if ch is not None and e.channels_out != ch:
                notes.append(f"{branch}/{name}: {e.channels_out} channels vs reference {ch}")
    notes.append(
        "skip targets: reference text places the copies at layers 12/13/14, the schedule "
        "table at Upsampling 2/3/4 (layers 12/14/16 counting input as 1); the table is followed"
    )
    return notes


def layer_plan(config: NetworkConfig) -> LayerPlan:
    config.validate()
    entries: list[PlanEntry] = []
    for branch in config.branches:
        entries.extend(_branch_plan(config, branch))
    fused = BRANCH_OUT_CHANNELS * len(config.branches)
    size = config.input_size
    entries.append(PlanEntry("head", "fuse", "concat-skip", size, size, fused, fused))
    entries.append(PlanEntry("head", "classifier", "bn-relu-conv", size, size, fused, config.num_classes))
    plan = LayerPlan(config, entries)
    plan.divergences = _reference_divergences(plan)
    return plan


# --------------------------------------------------------------------------
# Modules


def _bn(ch: int, cfg: NetworkConfig) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(ch, eps=cfg.bn_eps, momentum=cfg.bn_momentum)


class BNReLUConv(nn.Sequential):
    def __init__(self, ch_in, ch_out, kernel, cfg: NetworkConfig, bias=False):
        super().__init__(
            _bn(ch_in, cfg),
            nn.ReLU(inplace=False),
            nn.Conv2d(ch_in, ch_out, kernel, padding=kernel // 2, bias=bias),
        )


class Stem(nn.Sequential):
    def __init__(self, ch_in, ch_out, cfg):
        super().__init__(
            nn.Conv2d(ch_in, ch_out, 7, stride=2, padding=3, bias=False),
            _bn(ch_out, cfg),
            nn.ReLU(inplace=False),
        )


class DenseLayer(nn.Module):
    def __init__(self, ch_in, growth_rate, cfg):
        super().__init__()
        self.bottleneck = BNReLUConv(ch_in, 4 * growth_rate, 1, cfg)
        self.conv = BNReLUConv(4 * growth_rate, growth_rate, 3, cfg)
        # Recompute concat + bottleneck in backward instead of storing them.
        self.memory_efficient = False
        self._first_pass = False

    def _bottleneck(self, *features):
        x = torch.cat(features, dim=1)
        if self._first_pass:
            self._first_pass = False
            return self.bottleneck(x)
        # Recomputation: same batch statistics; scratch buffers absorb the update.
        bn, relu, conv = self.bottleneck
        x = F.batch_norm(
            x, bn.running_mean.clone(), bn.running_var.clone(), bn.weight, bn.bias, True, bn.momentum, bn.eps
        )
        return conv(relu(x))

    def forward(self, features):
        if isinstance(features, torch.Tensor):
            features = [features]
        if self.memory_efficient and self.training and torch.is_grad_enabled():
            self._first_pass = True
            h = checkpoint(self._bottleneck, *features, use_reentrant=False)
        else:
            h = self.bottleneck(torch.cat(features, dim=1))
        return self.conv(h)


class DenseBlock(nn.Module):
    """Each layer sees the concatenation of the block input and all earlier outputs."""

    def __init__(self, ch_in, num_layers, growth_rate, cfg):
        super().__init__()
        self.layers = nn.ModuleList(
            DenseLayer(ch_in + i * growth_rate, growth_rate, cfg) for i in range(num_layers)
        )

    def forward(self, x):
        features = [x]
        for layer in self.layers:
            features.append(layer(features))
        return torch.cat(features, dim=1)


class PlainBlock(nn.Sequential):
    """Non-dense stand-in with the same output width as the dense block it replaces."""

    def __init__(self, ch_in, ch_out, growth_rate, cfg):
        super().__init__(
            BNReLUConv(ch_in, 4 * growth_rate, 1, cfg),
            BNReLUConv(4 * growth_rate, ch_out, 3, cfg),
        )


class Transition(nn.Sequential):
    def __init__(self, ch_in, ch_out, cfg):
        super().__init__(BNReLUConv(ch_in, ch_out, 1, cfg), nn.AvgPool2d(2, stride=2))


class Upsample(nn.Module):
    """Bilinear upsampling followed by BN-ReLU-Conv(3x3)."""

    def __init__(self, ch_in, ch_out, scale, cfg):
        super().__init__()
        self.scale = scale
        self.conv = BNReLUConv(ch_in, ch_out, 3, cfg)

    def forward(self, x):
        h, w = x.shape[-2:]
        size = (int(h * self.scale), int(w * self.scale))
        return self.conv(F.interpolate(x, size=size, mode="bilinear", align_corners=False))


class ConvPair(nn.Sequential):
    def __init__(self, ch_in, ch_out, cfg):
        super().__init__(BNReLUConv(ch_in, ch_out, 1, cfg), BNReLUConv(ch_out, ch_out, 3, cfg))


class SkipConcat(nn.Module):
    def forward(self, x, skip):
        return torch.cat([x, skip], dim=1)


def _module_for(e: PlanEntry, cfg: NetworkConfig) -> nn.Module:
    ci, co = e.channels_in, e.channels_out
    if e.kind == "conv":
        return Stem(ci, co, cfg)
    if e.kind == "max-pool":
        return nn.MaxPool2d(3, stride=2, padding=1)
    if e.kind == "dense-block":
        n = cfg.block_sizes[int(e.name[-1]) - 1]
        if cfg.enable_dense_blocks:
            return DenseBlock(ci, n, cfg.growth_rate, cfg)
        return PlainBlock(ci, co, cfg.growth_rate, cfg)
    if e.kind == "transition":
        return Transition(ci, co, cfg)
    if e.kind == "bilinear-upsample":
        return Upsample(ci, co, e.size_out[0] / e.size_in[0], cfg)
    if e.kind == "concat-skip":
        return SkipConcat()
    if e.kind == "bn-relu-conv":
        return ConvPair(ci, co, cfg)
    raise ValueError(e.kind)


class _FrozenRunningStats:
    """Momentum 0 for every batch norm inside ``module``: batch statistics are
    still used, running averages stay exactly as they are."""

    def __init__(self, module: nn.Module):
        self.norms = [m for m in module.modules() if isinstance(m, nn.BatchNorm2d)]

    def __enter__(self):
        self.saved = [(m.momentum, m.num_batches_tracked.clone()) for m in self.norms]
        for m in self.norms:
            m.momentum = 0.0

    def __exit__(self, *exc):
        for m, (momentum, tracked) in zip(self.norms, self.saved):
            m.momentum = momentum
            m.num_batches_tracked.copy_(tracked)


def _recomputed(stage: nn.Module, *inputs):
    first = [True]

    def run(*args):
        if first[0]:
            first[0] = False
            return stage(*args)
        with _FrozenRunningStats(stage):
            return stage(*args)

    return checkpoint(run, *inputs, use_reentrant=False)


class Branch(nn.Module):
    def __init__(self, config: NetworkConfig, entries: list[PlanEntry]):
        super().__init__()
        self.entries = entries
        self.stages = nn.ModuleDict({e.name: _module_for(e, config) for e in entries})
        self._sources = {e.skip_source for e in entries if e.skip_source}
        self.memory_efficient = False

    def forward(self, x):
        saved = {}
        recompute = self.memory_efficient and self.training and torch.is_grad_enabled()
        for e in self.entries:
            stage = self.stages[e.name]
            args = (x, saved[e.skip_source]) if e.kind == "concat-skip" else (x,)
            x = _recomputed(stage, *args) if recompute and e.kind != "concat-skip" else stage(*args)
            if e.name in self._sources:
                saved[e.name] = x
        return x


class DualDenseUNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config.validate()
        self.plan = layer_plan(config)
        self.branches = nn.ModuleDict(
            {b: Branch(config, self.plan.branch(b)) for b in config.branches}
        )
        fused = BRANCH_OUT_CHANNELS * len(config.branches)
        self.head = BNReLUConv(fused, config.num_classes, 1, config, bias=True)

    def forward(self, x):
        expected = (self.config.in_channels, *self.config.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(
                f"expected a batch of shape (N, {', '.join(map(str, expected))}), "
                f"got {tuple(x.shape)}; inputs are never resized implicitly"
            )
        return self.head(torch.cat([branch(x) for branch in self.branches.values()], dim=1))


def set_memory_efficient(network: nn.Module, enabled: bool = True) -> nn.Module:
    """Trade compute for memory in dense layers during training; outputs are unchanged."""
    for m in network.modules():
        if isinstance(m, (DenseLayer, Branch)):
            m.memory_efficient = enabled
    return network


def init_he(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_network(config: NetworkConfig, seed: int | None = None) -> DualDenseUNet:
    """Build and He-initialize the network; ``seed`` fixes the initial weights."""
    config.validate()
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = DualDenseUNet(config)
            init_he(net)
    else:
        net = DualDenseUNet(config)
        init_he(net)
    return net


def forward(network: DualDenseUNet, batch: torch.Tensor) -> torch.Tensor:
    return network(batch)


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters() if p.requires_grad)


def realized_shapes(network: DualDenseUNet, batch_size: int = 1, device="meta") -> dict:
    """Run a forward pass and record (size_out, channels_out) of every stage.

    On the ``meta`` device no arithmetic happens, so the audit is cheap even
    for the full-size network.
    """
    cfg = network.config
    if device == "meta":
        with torch.device("meta"):
            net = DualDenseUNet(cfg)
    else:
        net = network
    shapes = {}
    hooks = []
    for bname, branch in net.branches.items():
        for sname, stage in branch.stages.items():
            def hook(mod, inp, out, key=(bname, sname)):
                shapes[key] = (tuple(out.shape[-2:]), out.shape[1])
            hooks.append(stage.register_forward_hook(hook))
    x = torch.zeros(batch_size, cfg.in_channels, *cfg.input_size, device=device)
    try:
        with torch.no_grad():
            out = net(x)
    finally:
        for h in hooks:
            h.remove()
    shapes[("head", "classifier")] = (tuple(out.shape[-2:]), out.shape[1])
    return shapes


def audit_shapes(config: NetworkConfig) -> list[str]:
    """Compare realized activation shapes against :func:`layer_plan`; empty means pass."""
    plan = layer_plan(config)
    with torch.device("meta"):
        net = DualDenseUNet(config)
    realized = realized_shapes(net)
    problems = plan.chain_errors()
    for e in plan.entries:
        key = (e.branch, e.name)
        if key == ("head", "fuse"):
            continue
        got = realized.get(key)
        if got != (e.size_out, e.channels_out):
            problems.append(f"{e.branch}/{e.name}: planned {(e.size_out, e.channels_out)}, realized {got}")
    return problems


def with_overrides(config: NetworkConfig, **overrides) -> NetworkConfig:
    return replace(config, **overrides)


def block_layers(block: nn.Module) -> list[nn.Module]:
    if isinstance(block, DenseBlock):
        return list(block.layers)
    if isinstance(block, PlainBlock):
        return list(block.children())
    raise TypeError(f"not a block: {type(block).__name__}")


def dense_coupling(block: nn.Module, x: torch.Tensor, j: int) -> list[float]:
    """Direct-connection probe on a (dense or plain) block.

    Feature 0 is the block input and feature ``l`` the output of layer ``l``.
    Feature ``j`` is zeroed while every other layer output is held at its
    clean value; the result holds, for each later layer, the largest absolute
    change of that layer's input. Nonzero entries mark direct edges from ``j``.
    """
    layers = block_layers(block)
    if not 0 <= j < len(layers):
        raise ValueError(f"feature index {j} outside 0..{len(layers) - 1}")
    block.eval()

    def run(hold=None, zero=None):
        inputs, outputs, hooks = [], [], []
        for i, layer in enumerate(layers, start=1):
            def pre(mod, args):
                a = args[0]
                inputs.append(torch.cat(a, dim=1) if isinstance(a, (list, tuple)) else a)

            def post(mod, args, out, i=i):
                if zero == i:
                    out = torch.zeros_like(out)
                elif hold is not None:
                    out = hold[i - 1]
                outputs.append(out)
                return out

            hooks += [layer.register_forward_pre_hook(pre), layer.register_forward_hook(post)]
        try:
            with torch.no_grad():
                block(torch.zeros_like(x) if zero == 0 else x)
        finally:
            for h in hooks:
                h.remove()
        return inputs, outputs

    clean_in, clean_out = run()
    perturbed_in, _ = run(hold=clean_out, zero=j)
    # Layer l (1-based) records its input at index l - 1; later layers are j+1..L.
    return [(a - b).abs().max().item() for a, b in zip(clean_in[j:], perturbed_in[j:])]
