"""End-to-end checks of the command line surface.

Every test drives ``camloc.cli.main`` in process with a tiny 16x16
dataset so the full pipeline (generate, train, eval, export, inspect)
stays fast enough for the default test run.
"""

import os
import re

import numpy as np
import pytest

from camloc.cli import main
from camloc.dataset import load_dataset
from camloc.embedding import load_embedding
from camloc.netpbm import read_pgm

TINY_GEN = ["gen-data", "--images", "8", "--size", "16x16", "--classes", "2",
            "--min-objects", "1", "--max-objects", "2", "--seed", "5"]
TINY_NET = ["--blocks", "4,8", "--head", "8", "--batch", "4", "--seed", "3"]


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Shared dataset plus one cosine and one logistic checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    assert main(TINY_GEN + ["--out", data]) == 0
    cos = str(root / "cos.txt")
    assert main(["train", "--data", data, "--checkpoint-out", cos,
                 "--loss", "cosine-ppmi", "--labels", "pyramid2",
                 "--iters", "6", "--warmup-iters", "2"] + TINY_NET) == 0
    logi = str(root / "logi.txt")
    assert main(["train", "--data", data, "--checkpoint-out", logi,
                 "--loss", "logistic", "--labels", "image",
                 "--iters", "4", "--warmup-iters", "1"] + TINY_NET) == 0
    return {"data": data, "cos": cos, "logi": logi}


def metric_value(text: str, metric: str, cls: str) -> str:
    pattern = rf"^metric={re.escape(metric)} (?:class|tile)={re.escape(cls)} value=(\S+)$"
    match = re.search(pattern, text, flags=re.MULTILINE)
    assert match, f"no {metric}/{cls} line in report:\n{text}"
    return match.group(1)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_writes_dataset(tmp_path, capsys):
    out = str(tmp_path / "d")
    assert main(TINY_GEN[:2] + ["5"] + TINY_GEN[3:] + ["--out", out]) == 0
    stdout = capsys.readouterr().out
    assert f"wrote 5 images to {out}" in stdout
    assert re.search(r"content_sha256=[0-9a-f]{64}", stdout)
    assert os.path.exists(os.path.join(out, "manifest.txt"))
    assert os.path.exists(os.path.join(out, "annotations.json"))
    samples, doc = load_dataset(out)
    assert len(samples) == 5
    assert tuple(doc["image_size"]) == (16, 16)


def test_gen_data_seed_determinism(tmp_path, capsys):
    digests = []
    for name, seed in (("a", "5"), ("b", "5"), ("c", "6")):
        argv = list(TINY_GEN) + ["--out", str(tmp_path / name)]
        argv[argv.index("--seed") + 1] = seed
        assert main(argv) == 0
        digests.append(re.search(r"content_sha256=(\S+)", capsys.readouterr().out).group(1))
    assert digests[0] == digests[1]
    assert digests[0] != digests[2]


def test_gen_data_rejects_bad_size(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--size", "64"]) == 1
    assert "error: size must look like 64x64" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data"])          # missing required --out
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_writes_checkpoint_embedding_and_log(workspace, tmp_path, capsys):
    ckpt = str(tmp_path / "net.txt")
    log = str(tmp_path / "train.log")
    assert main(["train", "--data", workspace["data"], "--checkpoint-out", ckpt,
                 "--loss", "cosine-ppmi", "--labels", "pyramid2",
                 "--iters", "6", "--warmup-iters", "2", "--log", log] + TINY_NET) == 0
    stdout = capsys.readouterr().out
    # pyramid2 labels on 2 classes span 1 + 4 tiles -> 10 label dimensions
    assert "embedding dim=10" in stdout
    assert "trained 6 iterations (batch 4)" in stdout
    assert os.path.exists(ckpt) and os.path.exists(ckpt + ".embed")
    with open(log, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 6
    assert all(re.fullmatch(r"iter=\d+ lr=\S+ loss=\S+", ln) for ln in lines)


def test_train_cli_byte_deterministic(workspace, tmp_path):
    paths = [str(tmp_path / f"run{i}.txt") for i in (0, 1)]
    for p in paths:
        assert main(["train", "--data", workspace["data"], "--checkpoint-out", p,
                     "--loss", "cosine-ppmi", "--labels", "pyramid2",
                     "--iters", "6", "--warmup-iters", "2"] + TINY_NET) == 0
    for suffix in ("", ".embed"):
        with open(paths[0] + suffix, "rb") as a, open(paths[1] + suffix, "rb") as b:
            assert a.read() == b.read()


def test_train_logistic_skips_embedding(workspace, tmp_path, capsys):
    ckpt = str(tmp_path / "net.txt")
    assert main(["train", "--data", workspace["data"], "--checkpoint-out", ckpt,
                 "--loss", "logistic", "--labels", "image",
                 "--iters", "4", "--warmup-iters", "1"] + TINY_NET) == 0
    assert "embedding dim" not in capsys.readouterr().out
    assert not os.path.exists(ckpt + ".embed")


def test_train_rejects_indivisible_input(workspace, tmp_path, capsys):
    rc = main(["train", "--data", workspace["data"], "--checkpoint-out",
               str(tmp_path / "net.txt"), "--blocks", "4,8,8,8,8",
               "--iters", "2", "--warmup-iters", "1"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_classify_report(workspace, tmp_path, capsys):
    report = str(tmp_path / "report.txt")
    assert main(["eval", "--data", workspace["data"], "--checkpoint", workspace["cos"],
                 "--task", "classify", "--report-out", report]) == 0
    stdout = capsys.readouterr().out
    mean = float(metric_value(stdout, "classification-image-ap", "mean"))
    assert 0.0 <= mean <= 1.0
    assert metric_value(stdout, "classification-tile2-map", "mean")
    with open(report, encoding="ascii") as fh:
        assert fh.read() == stdout


def test_eval_pointloc_report(workspace, capsys):
    assert main(["eval", "--data", workspace["data"], "--checkpoint", workspace["cos"],
                 "--task", "pointloc"]) == 0
    stdout = capsys.readouterr().out
    # 18 px tolerance at 512 px reference scales to round(18*16/512) = 1
    assert "tolerance_px=1" in stdout
    value = metric_value(stdout, "pointloc-ap", "mean")
    assert value == "undefined" or 0.0 <= float(value) <= 1.0


@pytest.mark.parametrize("space", ["prob", "raw"])
def test_eval_corloc_cam_space(workspace, capsys, space):
    assert main(["eval", "--data", workspace["data"], "--checkpoint", workspace["cos"],
                 "--task", "corloc", "--threshold-frac", "0.5",
                 "--cam-space", space]) == 0
    stdout = capsys.readouterr().out
    assert f"cam_space={space}" in stdout
    value = metric_value(stdout, "corloc", "pooled")
    assert value == "undefined" or 0.0 <= float(value) <= 1.0


def test_eval_class_count_mismatch(workspace, tmp_path, capsys):
    other = str(tmp_path / "d4")
    argv = list(TINY_GEN) + ["--out", other]
    argv[argv.index("--classes") + 1] = "4"
    assert main(argv) == 0
    capsys.readouterr()
    rc = main(["eval", "--data", other, "--checkpoint", workspace["cos"],
               "--task", "classify"])
    assert rc == 1
    assert "error: checkpoint has 2 classes, dataset has 4" in capsys.readouterr().err


def test_eval_missing_checkpoint(workspace, tmp_path, capsys):
    rc = main(["eval", "--data", workspace["data"],
               "--checkpoint", str(tmp_path / "absent.txt"), "--task", "classify"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# export-cam
# ---------------------------------------------------------------------------

def test_export_cam_writes_maps(workspace, tmp_path, capsys):
    samples, _ = load_dataset(workspace["data"])
    image_id = samples[0].image_id
    out = str(tmp_path / "maps")
    assert main(["export-cam", "--data", workspace["data"],
                 "--checkpoint", workspace["cos"], "--image-id", image_id,
                 "--out-dir", out]) == 0
    assert f"exported 4 maps for {image_id}" in capsys.readouterr().out
    for cls in (0, 1):
        for prefix in ("cam", "mask"):
            gray = read_pgm(os.path.join(out, f"{prefix}_{image_id}_class{cls}.pgm"))
            assert gray.shape == (16, 16) and gray.dtype == np.uint8
    with open(os.path.join(out, f"boxes_{image_id}.txt"), encoding="ascii") as fh:
        records = fh.read().splitlines()
    assert any(" kind=point " in r for r in records)
    assert all(r.startswith(f"image={image_id} class=") for r in records)


def test_export_cam_unknown_image(workspace, tmp_path, capsys):
    rc = main(["export-cam", "--data", workspace["data"],
               "--checkpoint", workspace["cos"], "--image-id", "nope",
               "--out-dir", str(tmp_path / "maps")])
    assert rc == 1
    assert "not in dataset" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# inspect-embedding
# ---------------------------------------------------------------------------

def test_inspect_embedding_smoke(workspace, tmp_path, capsys):
    saved = str(tmp_path / "model.embed")
    assert main(["inspect-embedding", "--data", workspace["data"],
                 "--labels", "pyramid2", "--save", saved]) == 0
    stdout = capsys.readouterr().out
    assert "units=8 dim=10 levels=(1, 2)" in stdout
    residual = float(re.search(r"reconstruction_residual=(\S+)", stdout).group(1))
    assert residual < 1e-8
    # Tile-class combinations absent from 8 images leave PPMI rank
    # deficient, so a one-hot can lose up to its full mass here.
    roundtrip = float(re.search(r"onehot_roundtrip_max_err=(\S+)", stdout).group(1))
    assert 0.0 <= roundtrip <= 1.0 + 1e-12
    model = load_embedding(saved)
    assert model.class_dim == 10
