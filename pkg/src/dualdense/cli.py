"""Command-line front door: generate, train, evaluate, predict, ablate.

Configuration is a flat ``section.key = value`` text file. Precedence, low to
high: built-in defaults, the chosen training preset, the config file,
``--set`` overrides and command flags. The merged result is written to
``<out>/config.resolved`` before any work starts.

Exit codes: 0 success, 2 usage error, 3 missing input, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import ast
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .ablation import UnknownVariantError, growth_rate_sweep, resolve_variants, run_ablation
from .augment import AugmentConfig
from .data import (
    CorpusError,
    DatasetSplit,
    center_crop,
    center_crop_sample,
    load_corpus,
    load_images,
    render_overlay,
    split_corpus,
    write_png,
)
from .metrics import ConfusionMatrix, accumulate, evaluate
from .network import NetworkConfig, SWEEP_GROWTH_RATES, build_network
from .phantom import PhantomConfig, write_phantom_corpus
from .seeding import derive_seed
from .training import PRESETS, Checkpoint, CheckpointError, TrainConfig, predict, train

log = logging.getLogger("dualdense")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

SECTIONS = {
    "net": NetworkConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "phantom": PhantomConfig,
}
# The single seed flag replaces every per-section seed.
_SEEDED = {"train", "augment", "phantom"}
COMMAND_KEYS = {
    "data.corpus": "",
    "data.split": "test",
    "eval.checkpoint": "",
    "eval.oracle": False,
    "eval.strict": False,
    "eval.denominators": "standard",
    "eval.center_crop": False,
    "predict.checkpoint": "",
    "predict.inputs": "",
    "predict.center_crop": False,
    "ablate.variants": (),
    "ablate.sweep": False,
    "ablate.rates": SWEEP_GROWTH_RATES,
    "ablate.throughput": 0,
}


class UsageError(Exception):
    pass


class MissingInputError(Exception):
    pass


# --------------------------------------------------------------------------
# Flat key-value configuration


def default_values() -> dict:
    values = {"seed": 0}
    for section, cls in SECTIONS.items():
        for f, v in cls().to_dict().items():
            if f == "seed" and section in _SEEDED:
                continue
            values[f"{section}.{f}"] = _freeze(v)
    values.update(COMMAND_KEYS)
    return values


def _freeze(v):
    return tuple(_freeze(x) for x in v) if isinstance(v, (list, tuple)) else v


def format_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() == "none":
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def coerce(key: str, value, default):
    """Convert a parsed value to the type of ``default``; UsageError if impossible."""
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = tuple(v.strip() for v in value.split(",") if v.strip())
        elif not isinstance(value, (list, tuple)):
            value = (value,)
        value = tuple(value)
        if default and all(isinstance(d, (int, float)) and not isinstance(d, bool) for d in default):
            try:
                value = tuple(type(default[0])(v) if not isinstance(v, (list, tuple)) else _freeze(v) for v in value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{key}: expected numbers, got {value!r}") from exc
        return value
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise UsageError(f"{key}: expected an integer or none, got {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise UsageError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise UsageError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise UsageError(f"{key}: expected a number, got {value!r}")
    return str(value)


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def resolve(file_values: dict, overrides: dict, preset: str | None) -> dict:
    defaults = default_values()
    for key in list(file_values) + list(overrides):
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}")
    preset = preset or file_values.get("train.preset") or defaults["train.preset"]
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(defaults)
    values.update({f"train.{k}": v for k, v in PRESETS[preset].items()})
    values["train.preset"] = preset
    for source in (file_values, overrides):
        for key, value in source.items():
            if key == "train.preset":
                continue
            values[key] = coerce(key, value, defaults[key])
    # Training crops always match the network input.
    explicit = {**file_values, **overrides}
    if "augment.crop_size" in explicit and values["augment.crop_size"] != values["net.input_size"]:
        raise UsageError("augment.crop_size must equal net.input_size")
    values["augment.crop_size"] = values["net.input_size"]
    return values


def section(values: dict, name: str):
    cls = SECTIONS[name]
    kwargs = {f.name: values[f"{name}.{f.name}"] for f in fields(cls) if f"{name}.{f.name}" in values}
    if name in _SEEDED:
        kwargs["seed"] = values["seed"]
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {name} configuration: {exc}") from exc


def write_resolved(values: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved"
    path.write_text("".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values)))
    return path


# --------------------------------------------------------------------------
# Argument parsing


class _PresetOnce(argparse.Action):
    def __call__(self, parser, namespace, value, option_string=None):
        if getattr(namespace, self.dest) is not None:
            parser.error("--preset given more than once; choose a single preset")
        setattr(namespace, self.dest, value)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# (flag, config key, argparse kwargs)
_TRAIN_FLAGS = [
    ("--data", "data.corpus", {}),
    ("--steps", "train.max_steps", {"type": int}),
    ("--epochs", "train.max_epochs", {"type": int}),
    ("--lr", "train.learning_rate", {"type": float}),
    ("--batch-size", "train.batch_size", {"type": int}),
    ("--eval-every", "train.eval_every", {"type": int}),
    ("--weight-mode", "train.weight_mode", {"choices": ["per-image", "dataset"]}),
    ("--device", "train.device", {}),
    ("--growth-rate", "net.growth_rate", {"type": int}),
    ("--input-size", "net.input_size", {}),
    ("--multiplicity", "augment.multiplicity", {"type": int}),
]
_COMMAND_FLAGS = {
    "generate": [
        ("--count", "phantom.count", {"type": int}),
        ("--canvas", "phantom.canvas", {}),
    ],
    "train": _TRAIN_FLAGS
    + [
        ("--no-augment", "train.augment", {"action": "store_const", "const": False}),
        ("--memory-efficient", "train.memory_efficient", {"action": "store_const", "const": True}),
    ],
    "evaluate": [
        ("--data", "data.corpus", {}),
        ("--split", "data.split", {"choices": ["train", "validation", "test", "all"]}),
        ("--checkpoint", "eval.checkpoint", {}),
        ("--oracle", "eval.oracle", {"action": "store_const", "const": True}),
        ("--strict", "eval.strict", {"action": "store_const", "const": True}),
        ("--denominators", "eval.denominators", {"choices": ["standard", "typeset"]}),
        ("--center-crop", "eval.center_crop", {"action": "store_const", "const": True}),
    ],
    "predict": [
        ("--checkpoint", "predict.checkpoint", {}),
        ("--inputs", "predict.inputs", {}),
        ("--center-crop", "predict.center_crop", {"action": "store_const", "const": True}),
    ],
    "ablate": _TRAIN_FLAGS
    + [
        ("--variants", "ablate.variants", {}),
        ("--sweep", "ablate.sweep", {"action": "store_const", "const": True}),
        ("--rates", "ablate.rates", {}),
        ("--throughput", "ablate.throughput", {"type": int, "help": "timed forward passes per growth rate (0 = skip)"}),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualdense", description="Dual-branch dense U-Net segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, flags in _COMMAND_FLAGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=sorted(PRESETS), action=_PresetOnce, default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, key, kwargs in flags:
            p.add_argument(flag, dest=key, default=None, **kwargs)
    return parser


def resolve_args(args: argparse.Namespace) -> dict:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_value(value)
    for _, key, _ in _COMMAND_FLAGS[args.command]:
        value = getattr(args, key)
        if value is not None:
            overrides[key] = parse_value(value) if isinstance(value, str) else value
    if args.seed is not None:
        overrides["seed"] = args.seed
    return resolve(file_values, overrides, args.preset)


# --------------------------------------------------------------------------
# Commands


def _corpus_split(values: dict) -> DatasetSplit:
    root = values["data.corpus"]
    if not root:
        raise UsageError("a corpus directory is required (--data or data.corpus)")
    if not Path(root).is_dir():
        raise MissingInputError(f"corpus directory not found: {root}")
    samples = load_corpus(root)
    if not samples:
        raise MissingInputError(f"no images found under {root}/images")
    return split_corpus(samples, seed=derive_seed(values["seed"], "split"))


def _load_checkpoint(path: str) -> Checkpoint:
    if not path:
        raise UsageError("a checkpoint is required (--checkpoint)")
    if not Path(path).exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def cmd_generate(values: dict, out: Path) -> int:
    config = section(values, "phantom")
    if config.count == 0:
        log.warning("count is 0: writing an empty corpus")
    write_phantom_corpus(config, out)
    print(f"wrote {config.count} phantoms to {out}")
    return EXIT_OK


def cmd_train(values: dict, out: Path) -> int:
    net_cfg, train_cfg = section(values, "net"), section(values, "train")
    split = _corpus_split(values)
    network = build_network(net_cfg, seed=derive_seed(train_cfg.seed, "init"))
    print(
        f"preset {train_cfg.preset}: lr {train_cfg.learning_rate:g}, momentum {train_cfg.momentum:g}, "
        f"weight decay {train_cfg.weight_decay:g}, batch {train_cfg.batch_size}"
    )
    checkpoint, trace = train(network, split, train_cfg, section(values, "augment"), out_dir=out)
    print(f"trained {checkpoint.step} steps over {len(trace.records)} rounds; best checkpoint {out / 'best.pt'}")
    return EXIT_OK


def cmd_evaluate(values: dict, out: Path) -> int:
    split = _corpus_split(values)
    name = values["data.split"]
    samples = split.train + split.validation + split.test if name == "all" else getattr(split, name)
    if not samples:
        raise MissingInputError(f"the {name} split is empty")
    cm = ConfusionMatrix()
    if values["eval.oracle"]:
        for s in samples:
            cm = accumulate(cm, s.mask, s.mask)
    else:
        checkpoint = _load_checkpoint(values["eval.checkpoint"])
        size = checkpoint.network_config.input_size
        masks = predict(checkpoint, [s.image for s in samples], values["eval.center_crop"])
        for pred, s in zip(masks, samples):
            cm = accumulate(cm, pred, center_crop(s.mask, size))
    report = evaluate(
        cm, strict=values["eval.strict"], denominators=values["eval.denominators"], split=name, images=len(samples)
    )
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    print(f"{name}: mIoU {report.miou:.4f}  PA {report.pa:.4f}  MPA {report.mpa:.4f}  fwIoU {report.fwiou:.4f}")
    return EXIT_OK


def cmd_predict(values: dict, out: Path) -> int:
    checkpoint = _load_checkpoint(values["predict.checkpoint"])
    source = values["predict.inputs"]
    if not source:
        raise UsageError("inputs are required (--inputs)")
    source = Path(source)
    if not source.exists():
        raise MissingInputError(f"inputs not found: {source}")
    paths = sorted(source.glob("*.png")) if source.is_dir() else [source]
    if not paths:
        raise MissingInputError(f"no PNG images in {source}")
    samples = load_images(paths)
    size = checkpoint.network_config.input_size
    masks = predict(checkpoint, [s.image for s in samples], values["predict.center_crop"])
    for s, mask in zip(samples, masks):
        write_png(out / "masks" / f"{s.source_id}.png", mask)
        write_png(out / "overlays" / f"{s.source_id}.png", render_overlay(center_crop_sample(s, size), mask))
    print(f"wrote {len(masks)} masks and overlays to {out}")
    return EXIT_OK


def cmd_ablate(values: dict, out: Path) -> int:
    net_cfg, train_cfg, aug = section(values, "net"), section(values, "train"), section(values, "augment")
    try:
        variants = resolve_variants(values["ablate.variants"])
    except UnknownVariantError as exc:
        raise UsageError(str(exc)) from exc
    split = _corpus_split(values)
    if values["ablate.sweep"]:
        table, _ = growth_rate_sweep(
            split, values["ablate.rates"], net_cfg, train_cfg, aug, out, throughput_repeats=values["ablate.throughput"]
        )
    else:
        table = run_ablation(split, [v.name for v in variants], net_cfg, train_cfg, aug, out)
    print(table.to_markdown())
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger("dualdense").setLevel(logging.INFO)
        values = resolve_args(args)
        out = Path(args.out)
        write_resolved(values, out)
        return COMMANDS[args.command](values, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CorpusError, CheckpointError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
