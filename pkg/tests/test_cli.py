import numpy as np
import pytest
from PIL import Image

from attnchroma import cli
from attnchroma import data as D
from attnchroma import evaluate as E
from attnchroma import model as M


@pytest.fixture
def images(tmp_path):
    d = tmp_path / "images"
    d.mkdir()
    rng = np.random.default_rng(0)
    for k in range(2):
        y, x = np.mgrid[0:48, 0:64]
        rgb = np.stack([x * 4, y * 5, (x + y) * 2], axis=-1) + rng.integers(0, 20, size=(48, 64, 3))
        Image.fromarray(rgb.clip(0, 255).astype(np.uint8)).save(d / f"img{k}.png")
    return d


@pytest.fixture
def dataset(images, tmp_path):
    out = tmp_path / "set.bin"
    assert cli.main(["extract", "--images", str(images), "--out", str(out), "--block-size", "4", "--per-image", "4"]) == 0
    return out


@pytest.fixture
def checkpoint(dataset, tmp_path):
    out = tmp_path / "model.bin"
    argv = ["train", "--dataset", str(dataset), "--val", str(dataset), "--out", str(out), "--steps", "5",
            "--batch-size", "4", "--val-interval", "5"]
    assert cli.main(argv) == 0
    return out


def test_extract_counts_and_manifest(dataset):
    samples, n, seed = D.load_dataset(dataset)
    assert len(samples) == 8 and n == 4 and seed == 0
    m = D.read_manifest(D.manifest_path(dataset))
    assert m.images == ["img0.png", "img1.png"] and m.per_image_counts == [4, 4] and m.sample_count == 8


def test_extract_deterministic(images, dataset, tmp_path):
    again = tmp_path / "again.bin"
    cli.main(["extract", "--images", str(images), "--out", str(again), "--block-size", "4", "--per-image", "4", "--threads", "2"])
    assert again.read_bytes() == dataset.read_bytes()


def test_extract_bad_block_size(images, tmp_path, capsys):
    code = cli.main(["extract", "--images", str(images), "--out", str(tmp_path / "x"), "--block-size", "5"])
    assert code == 1
    assert "4, 8, 16" in capsys.readouterr().err


def test_train_missing_dataset_flag_is_usage_error(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "m.bin"), "--val", "v"]) == 1


def test_missing_file_is_data_error(tmp_path):
    argv = ["train", "--dataset", str(tmp_path / "none"), "--val", str(tmp_path / "none"), "--out", str(tmp_path / "m")]
    assert cli.main(argv) == 2


def test_corrupt_dataset_is_data_error(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + bytes(40))
    argv = ["train", "--dataset", str(bad), "--val", str(bad), "--out", str(tmp_path / "m")]
    assert cli.main(argv) == 2


def test_train_writes_checkpoint_and_curve(checkpoint):
    w = M.load_weights(checkpoint)
    assert w.config.n == 4 and w.config.head_conv
    rows = checkpoint.with_name(checkpoint.name + ".loss.csv").read_text().splitlines()
    assert rows[0] == "step,train_mse,val_mse" and len(rows) == 2


def test_train_resume(dataset, checkpoint, tmp_path):
    out = tmp_path / "resumed.bin"
    argv = ["train", "--dataset", str(dataset), "--val", str(dataset), "--out", str(out), "--steps", "8",
            "--batch-size", "4", "--resume", str(checkpoint) + ".last"]
    assert cli.main(argv) == 0


def test_eval_two_models(dataset, checkpoint, tmp_path):
    nohead = tmp_path / "nohead.bin"
    cli.main(["train", "--dataset", str(dataset), "--val", str(dataset), "--out", str(nohead), "--steps", "2",
              "--batch-size", "4", "--no-head-conv"])
    report = tmp_path / "report.csv"
    argv = ["eval", "--model", str(checkpoint), "--model2", str(nohead), "--dataset", str(dataset),
            "--lambda", "0.01", "--out", str(report)]
    assert cli.main(argv) == 0
    lines = report.read_text().splitlines()
    assert lines[0].split(",") == E.REPORT_COLUMNS
    modes = [ln.split(",")[0] for ln in lines[1:]]
    assert modes == ["nn", "nn_nohead", "cclm", "dc", "horizontal", "vertical", "planar"]
    assert sum(float(ln.split(",")[4]) for ln in lines[1:]) == pytest.approx(100.0, abs=1e-3)


def test_eval_requires_lambda(dataset, checkpoint, tmp_path):
    assert cli.main(["eval", "--model", str(checkpoint), "--dataset", str(dataset), "--out", str(tmp_path / "r")]) == 1


def test_visualize(dataset, checkpoint, tmp_path):
    out = tmp_path / "viz"
    assert cli.main(["visualize", "--model", str(checkpoint), "--dataset", str(dataset), "--index", "3", "--out", str(out)]) == 0
    pgms = sorted(p.name for p in out.glob("*.pgm"))
    assert pgms == ["attention.pgm", "predicted.pgm", "target.pgm"]
    assert E.read_pgm(out / "attention.pgm").shape == (16, 9)
    assert E.read_pgm(out / "predicted.pgm").shape == (4, 8)
    first = (out / "attention.pgm").read_bytes()
    out2 = tmp_path / "viz2"
    cli.main(["visualize", "--model", str(checkpoint), "--dataset", str(dataset), "--index", "3", "--out", str(out2)])
    assert (out2 / "attention.pgm").read_bytes() == first


def test_visualize_index_out_of_range(dataset, checkpoint, tmp_path):
    argv = ["visualize", "--model", str(checkpoint), "--dataset", str(dataset), "--index", "8", "--out", str(tmp_path / "v")]
    assert cli.main(argv) == 1


def test_block_size_mismatch(images, checkpoint, tmp_path):
    big = tmp_path / "big.bin"
    cli.main(["extract", "--images", str(images), "--out", str(big), "--block-size", "8", "--per-image", "2"])
    argv = ["eval", "--model", str(checkpoint), "--dataset", str(big), "--lambda", "0", "--out", str(tmp_path / "r")]
    assert cli.main(argv) == 2
