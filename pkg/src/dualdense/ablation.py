"""Ablation matrix and growth-rate sweep under a shared split, seed and budget."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import jsonschema
import torch

from .augment import AugmentConfig
from .data import CLASS_NAMES, DatasetSplit, ImageSample, split_corpus
from .metrics import MetricsReport, _jsonable
from .network import NetworkConfig, SWEEP_GROWTH_RATES, build_network, count_parameters
from .seeding import derive_seed
from .training import TrainConfig, evaluate_network, train


@dataclass(frozen=True)
class AblationVariant:
    name: str
    description: str
    network_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)

    def apply(self, network: NetworkConfig, training: TrainConfig) -> tuple[NetworkConfig, TrainConfig]:
        return replace(network, **self.network_overrides), replace(training, **self.train_overrides)

    def switches(self) -> dict[str, bool]:
        """Table-style on/off flags: augmentation, skips, dense blocks, both branches."""
        net, tr = self.apply(NetworkConfig(), TrainConfig())
        return {
            "DA": tr.augment,
            "SC": net.enable_skip_connections,
            "DB": net.enable_dense_blocks,
            "MB": len(net.branches) == 2,
        }


VARIANTS = {
    v.name: v
    for v in (
        AblationVariant("no-augmentation", "without data augmentation", train_overrides={"augment": False}),
        AblationVariant("flat", "no skip connections", {"enable_skip_connections": False}),
        AblationVariant("no-dense-blocks", "dense blocks replaced by plain blocks", {"enable_dense_blocks": False}),
        AblationVariant("upper-only", "upper branch alone", {"branches": ("upper",)}),
        AblationVariant("lower-only", "lower branch alone", {"branches": ("lower",)}),
        AblationVariant("full", "both branches, all modules"),
    )
}
VARIANT_ORDER = tuple(VARIANTS)

# Published ablation and growth-rate numbers on the clinical data; context only.
REFERENCE_ABLATION = {
    "no-augmentation": (0.8209, 0.9909, 0.8901, 0.9828),
    "flat": (0.7989, 0.9908, 0.8836, 0.9827),
    "no-dense-blocks": (0.7636, 0.9856, 0.8599, 0.9731),
    "upper-only": (0.8186, 0.9905, 0.8862, 0.9821),
    "lower-only": (0.8067, 0.9898, 0.8858, 0.9807),
    "full": (0.8331, 0.9913, 0.9099, 0.9835),
}
REFERENCE_SWEEP = {
    12: ("8.62M", 18.31, 0.7797),
    24: ("31.44M", 16.14, 0.8183),
    32: ("54.65M", 12.35, 0.8331),
    48: ("82.21M", 8.12, 0.8340),
}
METRIC_COLUMNS = ("miou", "pa", "mpa", "fwiou")


class UnknownVariantError(ValueError):
    pass


def resolve_variants(names: Sequence[str] | None) -> list[AblationVariant]:
    if not names:
        return [VARIANTS[n] for n in VARIANT_ORDER]
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise UnknownVariantError(f"unknown variant(s) {unknown}; choose from {list(VARIANT_ORDER)}")
    return [VARIANTS[n] for n in names]


def config_diff(a, b) -> dict:
    """Fields whose values differ between two config dataclasses."""
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


_METRICS_SCHEMA = {
    "type": "object",
    "required": list(METRIC_COLUMNS) + ["per_class_iou"],
    "properties": {
        **{k: {"type": ["number", "null"]} for k in METRIC_COLUMNS},
        "per_class_iou": {
            "type": "object",
            "properties": {n: {"type": ["number", "null"]} for n in CLASS_NAMES},
        },
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["kind", "seed", "split_sizes", "network", "training", "rows"],
    "properties": {
        "kind": {"enum": ["ablation", "growth-rate-sweep"]},
        "seed": {"type": "integer"},
        "split_sizes": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
        "network": {"type": "object"},
        "training": {"type": "object"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "parameters", "metrics"],
                "properties": {
                    "name": {"type": "string"},
                    "parameters": {"type": "integer", "minimum": 0},
                    "growth_rate": {"type": "integer"},
                    "switches": {"type": "object", "additionalProperties": {"type": "boolean"}},
                    "metrics": _METRICS_SCHEMA,
                },
            },
        },
        "reference": {"type": "object"},
    },
}


@dataclass
class ResultRow:
    name: str
    parameters: int
    report: MetricsReport
    switches: dict | None = None
    growth_rate: int | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "parameters": self.parameters, "metrics": self.report.to_dict()}
        if self.switches is not None:
            d["switches"] = self.switches
        if self.growth_rate is not None:
            d["growth_rate"] = self.growth_rate
        return d


@dataclass
class ResultTable:
    kind: str
    seed: int
    split_sizes: tuple[int, int, int]
    network: NetworkConfig
    training: TrainConfig
    rows: list[ResultRow]

    def to_dict(self) -> dict:
        reference = (
            {k: dict(zip(METRIC_COLUMNS, v)) for k, v in REFERENCE_ABLATION.items()}
            if self.kind == "ablation"
            else {str(k): {"parameters": p, "fps": f, "miou": m} for k, (p, f, m) in REFERENCE_SWEEP.items()}
        )
        return _jsonable(
            {
                "kind": self.kind,
                "seed": self.seed,
                "split_sizes": list(self.split_sizes),
                "network": self.network.to_dict(),
                "training": self.training.to_dict(),
                "rows": [r.to_dict() for r in self.rows],
                "reference": reference,
            }
        )

    def to_json(self) -> str:
        d = self.to_dict()
        jsonschema.validate(d, REPORT_SCHEMA)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lead = ["name", "growth_rate"] if self.kind == "growth-rate-sweep" else ["name", "DA", "SC", "DB", "MB"]
        cols = lead + ["parameters", *METRIC_COLUMNS] + [f"iou_{n}" for n in CLASS_NAMES]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            row = {"name": r.name, "parameters": r.parameters, "growth_rate": r.growth_rate, **(r.switches or {})}
            row.update({k: repr(float(v)) for k, v in r.report.csv_row().items()})
            writer.writerow({c: row.get(c, "") for c in cols})
        return buf.getvalue()

    def to_markdown(self) -> str:
        title = "Ablation matrix" if self.kind == "ablation" else "Growth-rate sweep"
        lines = [
            f"# {title}",
            "",
            f"Seed {self.seed}; split sizes (train, validation, test) = {tuple(self.split_sizes)}; "
            f"step budget {self.training.max_steps}; metrics on the test split.",
            "",
        ]
        if self.kind == "ablation":
            lines += ["| variant | DA | SC | DB | MB | parameters | mIoU | PA | MPA | fwIoU |", "|" + "---|" * 10]
            for r in self.rows:
                flags = " | ".join("x" if r.switches[k] else " " for k in ("DA", "SC", "DB", "MB"))
                lines.append(f"| {r.name} | {flags} | {r.parameters:,} | {_metric_cells(r.report)} |")
            lines += [
                "",
                "Reference (published, clinical data, not reproduced here): "
                + "; ".join(f"{k} mIoU {v[0]:.4f}" for k, v in REFERENCE_ABLATION.items())
                + ". Full model 0.8331 vs flat 0.7989.",
            ]
        else:
            lines += ["| k | parameters | mIoU | PA | MPA | fwIoU |", "|" + "---|" * 6]
            for r in self.rows:
                lines.append(f"| {r.growth_rate} | {r.parameters:,} | {_metric_cells(r.report)} |")
            lines += [
                "",
                "Reference (published): "
                + "; ".join(f"k={k}: {p} parameters, {f} FPS" for k, (p, f, _) in REFERENCE_SWEEP.items())
                + ". Throughput is host-dependent and written separately.",
            ]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.md").write_text(self.to_markdown())


def _metric_cells(r: MetricsReport) -> str:
    return " | ".join(f"{getattr(r, k):.4f}" for k in METRIC_COLUMNS)


def _shared_split(corpus, seed: int) -> DatasetSplit:
    if isinstance(corpus, DatasetSplit):
        split = corpus
    else:
        split = split_corpus(list(corpus), seed=derive_seed(seed, "split"))
    if not split.train or not split.test:
        raise ValueError("ablation needs non-empty training and test splits")
    return split


def train_and_score(
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    split: DatasetSplit,
    augment: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
) -> tuple[int, MetricsReport]:
    """Train one configuration from a seeded init and score its best checkpoint on the test split."""
    network = build_network(net_cfg, seed=derive_seed(train_cfg.seed, "init"))
    params = count_parameters(network)
    if train_cfg.max_steps != 0:
        checkpoint, _ = train(network, split, train_cfg, augment, out_dir=out_dir)
        network = checkpoint.build_network()
    report, _ = evaluate_network(network, split.test, train_cfg.batch_size, device=train_cfg.device)
    return params, report


def run_ablation(
    corpus: Sequence[ImageSample] | DatasetSplit,
    variants: Sequence[str] | None = None,
    network: NetworkConfig | None = None,
    training: TrainConfig | None = None,
    augment: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
) -> ResultTable:
    network = network or NetworkConfig()
    training = training or TrainConfig.from_preset("desk")
    split = _shared_split(corpus, training.seed)
    rows = []
    for variant in resolve_variants(variants):
        net_cfg, tr_cfg = variant.apply(network, training)
        run_dir = Path(out_dir) / "runs" / variant.name if out_dir is not None else None
        params, report = train_and_score(net_cfg, tr_cfg, split, augment, run_dir)
        report.meta.update(variant=variant.name)
        rows.append(ResultRow(variant.name, params, report, switches=variant.switches()))
    table = ResultTable("ablation", training.seed, split.sizes(), network, training, rows)
    if out_dir is not None:
        table.write(out_dir, "ablation")
    return table


def measure_throughput(net_cfg: NetworkConfig, batch_size: int = 1, repeats: int = 3, device="cpu") -> float:
    """Evaluation-mode images per second on this host."""
    network = build_network(net_cfg, seed=0).eval().to(device)
    x = torch.zeros(batch_size, net_cfg.in_channels, *net_cfg.input_size, device=device)
    with torch.no_grad():
        network(x)
        start = time.perf_counter()
        for _ in range(repeats):
            network(x)
        elapsed = time.perf_counter() - start
    return repeats * batch_size / elapsed


def growth_rate_sweep(
    corpus: Sequence[ImageSample] | DatasetSplit,
    rates: Sequence[int] = SWEEP_GROWTH_RATES,
    network: NetworkConfig | None = None,
    training: TrainConfig | None = None,
    augment: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
    throughput_repeats: int = 0,
) -> tuple[ResultTable, dict[int, float]]:
    """Train each growth rate; returns the table and host throughput (images/s) per k.

    Throughput is only measured when ``throughput_repeats`` > 0 and is written
    to its own file because it varies between hosts and runs.
    """
    network = network or NetworkConfig()
    training = training or TrainConfig.from_preset("desk")
    split = _shared_split(corpus, training.seed)
    rows, fps = [], {}
    for k in rates:
        net_cfg = replace(network, growth_rate=int(k))
        run_dir = Path(out_dir) / "runs" / f"k{k}" if out_dir is not None else None
        params, report = train_and_score(net_cfg, training, split, augment, run_dir)
        rows.append(ResultRow(f"k={k}", params, report, growth_rate=int(k)))
        if throughput_repeats > 0:
            fps[int(k)] = measure_throughput(net_cfg, repeats=throughput_repeats, device=training.device)
    table = ResultTable("growth-rate-sweep", training.seed, split.sizes(), network, training, rows)
    if out_dir is not None:
        table.write(out_dir, "sweep")
        if fps:
            lines = ["growth_rate,images_per_second,reference_fps,note"]
            for k, v in fps.items():
                ref = REFERENCE_SWEEP.get(k, (None, ""))[1]
                lines.append(f"{k},{v:.3f},{ref},host-dependent")
            (Path(out_dir) / "throughput.csv").write_text("\n".join(lines) + "\n")
    return table, fps
