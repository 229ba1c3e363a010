import json

import jsonschema
import pytest

from dualdense.ablation import (
    REPORT_SCHEMA,
    VARIANT_ORDER,
    VARIANTS,
    UnknownVariantError,
    config_diff,
    growth_rate_sweep,
    resolve_variants,
    run_ablation,
)
from dualdense.network import NetworkConfig
from dualdense.training import TrainConfig

BUDGET = TrainConfig.from_preset("desk", max_steps=2, eval_every=2, batch_size=2)
EXPECTED_SWITCH = {
    "no-augmentation": {"augment"},
    "flat": {"enable_skip_connections"},
    "no-dense-blocks": {"enable_dense_blocks"},
    "upper-only": {"branches"},
    "lower-only": {"branches"},
    "full": set(),
}


def test_six_variants_in_table_order():
    assert VARIANT_ORDER == ("no-augmentation", "flat", "no-dense-blocks", "upper-only", "lower-only", "full")


@pytest.mark.parametrize("name", VARIANT_ORDER)
def test_variant_isolation(name):
    base_net, base_train = NetworkConfig(), TrainConfig()
    net, tr = VARIANTS[name].apply(base_net, base_train)
    changed = set(config_diff(base_net, net)) | set(config_diff(base_train, tr))
    assert changed == EXPECTED_SWITCH[name]


def test_switch_flags():
    assert VARIANTS["full"].switches() == {"DA": True, "SC": True, "DB": True, "MB": True}
    assert VARIANTS["upper-only"].switches()["MB"] is False
    assert VARIANTS["flat"].switches()["SC"] is False


def test_unknown_variant():
    with pytest.raises(UnknownVariantError):
        resolve_variants(["full", "deeper"])
    assert [v.name for v in resolve_variants(["flat"])] == ["flat"]


def test_ablation_table(tiny_config, small_corpus, tmp_path):
    table = run_ablation(small_corpus, None, tiny_config, BUDGET, out_dir=tmp_path / "a")
    assert [r.name for r in table.rows] == list(VARIANT_ORDER)
    csv_lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert csv_lines[0].startswith("name,DA,SC,DB,MB,parameters,miou,pa,mpa,fwiou")
    assert len(csv_lines) == 7
    report = json.loads((tmp_path / "a" / "ablation.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["reference"]["full"]["miou"] == 0.8331
    md = (tmp_path / "a" / "ablation.md").read_text()
    assert "0.8331" in md and "0.7989" in md

    again = run_ablation(small_corpus, None, tiny_config, BUDGET, out_dir=tmp_path / "b")
    assert again.to_json() == table.to_json()
    assert (tmp_path / "b" / "ablation.csv").read_bytes() == (tmp_path / "a" / "ablation.csv").read_bytes()


def test_growth_rate_sweep(small_corpus, tmp_path):
    base = NetworkConfig(block_sizes=(1, 1, 1, 1), input_size=(64, 64))
    table, fps = growth_rate_sweep(
        small_corpus, (4, 8, 12), base, TrainConfig(max_steps=0), out_dir=tmp_path, throughput_repeats=1
    )
    counts = [r.parameters for r in table.rows]
    assert counts == sorted(counts) and len(set(counts)) == 3
    assert set(fps) == {4, 8, 12} and all(v > 0 for v in fps.values())
    assert "54.65M" in (tmp_path / "sweep.md").read_text()
    assert "host-dependent" in (tmp_path / "throughput.csv").read_text()
    jsonschema.validate(json.loads((tmp_path / "sweep.json").read_text()), REPORT_SCHEMA)
