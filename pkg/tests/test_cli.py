import hashlib
import shutil

import numpy as np
import pytest
from PIL import Image

from dualdense.cli import (
    EXIT_MISSING,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    UsageError,
    coerce,
    format_value,
    main,
    parse_value,
    read_config_file,
)

TINY = """\
# tiny run
net.growth_rate = 4
net.block_sizes = 1,1,1,1
net.input_size = 64,64
augment.multiplicity = 2
train.eval_every = 2
train.batch_size = 2
"""


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def resolved(out):
    return dict(line.split(" = ", 1) for line in (out / "config.resolved").read_text().splitlines())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["generate", "--out", str(root / "corpus"), "--count", "10", "--canvas", "96,96", "--seed", "1"]) == 0
    args = ["train", "--config", str(root / "tiny.cfg"), "--data", str(root / "corpus"), "--steps", "4"]
    assert main(args + ["--out", str(root / "run")]) == EXIT_OK
    return root


def test_value_parsing():
    assert parse_value("64,64") == (64, 64)
    assert parse_value("true") is True and parse_value("none") is None
    assert parse_value("desk") == "desk"
    assert coerce("k", "upper", ("upper", "lower")) == ("upper",)
    assert coerce("k", 3, 0.5) == 3.0
    with pytest.raises(UsageError):
        coerce("k", "x", 4)
    for v in ((400, 400), 1e-7, True, "cosine", None):
        assert coerce("k", parse_value(format_value(v)), v) == v


def test_config_file(tmp_path):
    (tmp_path / "c.cfg").write_text("train.learning_rate = 0.01  # comment\n\nseed = 3\n")
    assert read_config_file(tmp_path / "c.cfg") == {"train.learning_rate": 0.01, "seed": 3}
    (tmp_path / "bad.cfg").write_text("no equals sign\n")
    assert main(["generate", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "bad.cfg")]) == EXIT_USAGE
    assert main(["generate", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "nope.cfg")]) == EXIT_MISSING


def test_generate_is_deterministic(workspace, tmp_path):
    assert main(["generate", "--out", str(tmp_path / "again"), "--count", "10", "--canvas", "96,96", "--seed", "1"]) == 0
    first = workspace / "corpus"
    assert len(list((first / "images").glob("*.png"))) == 10
    (tmp_path / "again" / "config.resolved").unlink()
    snapshot = tmp_path / "first"
    shutil.copytree(first, snapshot)
    (snapshot / "config.resolved").unlink()
    assert digest(snapshot) == digest(tmp_path / "again")


def test_generate_zero_count_warns(tmp_path, caplog):
    assert main(["generate", "--out", str(tmp_path), "--count", "0"]) == EXIT_OK
    assert "empty corpus" in caplog.text
    assert list((tmp_path / "images").iterdir()) == []


def test_train_outputs_and_resolved_config(workspace):
    run = workspace / "run"
    for name in ("config.resolved", "best.pt", "trace.csv", "loss_curve.png"):
        assert (run / name).exists(), name
    cfg = resolved(run)
    assert cfg["net.growth_rate"] == "4" and cfg["train.max_steps"] == "4"
    assert cfg["augment.crop_size"] == "(64, 64)"


def test_train_is_deterministic(workspace, tmp_path):
    args = ["train", "--config", str(workspace / "tiny.cfg"), "--data", str(workspace / "corpus"), "--steps", "4"]
    assert main(args + ["--out", str(tmp_path)]) == EXIT_OK

    def without_time(p):
        return [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]

    assert without_time(tmp_path / "trace.csv") == without_time(workspace / "run" / "trace.csv")
    assert (tmp_path / "config.resolved").read_bytes() == (workspace / "run" / "config.resolved").read_bytes()


def test_paper_preset_is_echoed(tmp_path):
    assert main(["train", "--preset", "paper", "--out", str(tmp_path), "--data", str(tmp_path / "none")]) == EXIT_MISSING
    cfg = resolved(tmp_path)
    assert (cfg["train.learning_rate"], cfg["train.momentum"], cfg["train.weight_decay"], cfg["train.batch_size"]) == (
        "1e-07", "0.95", "0.0005", "4",
    )


def test_usage_errors(tmp_path):
    assert main(["train", "--preset", "paper", "--preset", "desk", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path), "--set", "train.nonsense=1"]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path), "--set", "net.growth_rate=abc"]) == EXIT_USAGE
    assert main(["frobnicate", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE


def test_evaluate(workspace, tmp_path):
    base = ["evaluate", "--config", str(workspace / "tiny.cfg"), "--data", str(workspace / "corpus")]
    ckpt = str(workspace / "run" / "best.pt")
    assert main(base + ["--checkpoint", ckpt, "--center-crop", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(base + ["--checkpoint", ckpt, "--center-crop", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("miou,pa,mpa,fwiou,iou_background")

    assert main(base + ["--oracle", "--out", str(tmp_path / "o")]) == EXIT_OK
    row = (tmp_path / "o" / "metrics.csv").read_text().splitlines()[1].split(",")
    assert all(float(v) == 1.0 for v in row)

    assert main(base + ["--checkpoint", str(tmp_path / "missing.pt"), "--out", str(tmp_path / "m")]) == EXIT_MISSING
    assert (tmp_path / "m" / "config.resolved").exists()
    assert main(base + ["--checkpoint", ckpt, "--out", str(tmp_path / "r")]) == EXIT_RUNTIME


def test_predict(workspace, tmp_path):
    ckpt = str(workspace / "run" / "best.pt")
    images = str(workspace / "corpus" / "images")
    out = tmp_path / "p"
    assert main(["predict", "--checkpoint", ckpt, "--inputs", images, "--center-crop", "--out", str(out)]) == EXIT_OK
    masks = sorted((out / "masks").glob("*.png"))
    overlays = sorted((out / "overlays").glob("*.png"))
    assert len(masks) == len(overlays) == 10
    mask = np.array(Image.open(masks[0]))
    overlay = np.array(Image.open(overlays[0]))
    assert mask.shape == (64, 64) and overlay.shape == (64, 64, 3)
    palette = {(255, 0, 0), (0, 255, 0), (255, 255, 255)}
    fg = mask > 0
    assert {tuple(c) for c in overlay[fg]} <= palette
    assert main(["predict", "--checkpoint", ckpt, "--inputs", images, "--out", str(tmp_path / "q")]) == EXIT_RUNTIME
    assert main(["predict", "--checkpoint", ckpt, "--inputs", str(tmp_path / "none"), "--out", str(tmp_path / "q")]) == EXIT_MISSING


def test_ablate(workspace, tmp_path):
    base = ["ablate", "--config", str(workspace / "tiny.cfg"), "--data", str(workspace / "corpus"), "--steps", "2"]
    assert main(base + ["--variants", "full,flat", "--out", str(tmp_path / "a")]) == EXIT_OK
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines[1:]] == ["full", "flat"]
    assert main(base + ["--variants", "full,deeper", "--out", str(tmp_path / "b")]) == EXIT_USAGE


def test_sweep_writes_throughput_separately(workspace, tmp_path):
    base = ["ablate", "--config", str(workspace / "tiny.cfg"), "--data", str(workspace / "corpus"), "--steps", "1"]
    assert main(base + ["--sweep", "--rates", "4,6", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert not (tmp_path / "a" / "throughput.csv").exists()
    assert main(base + ["--sweep", "--rates", "4,6", "--throughput", "1", "--out", str(tmp_path / "b")]) == EXIT_OK
    rows = (tmp_path / "b" / "throughput.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["4", "6"]
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
