import csv
import json

import numpy as np
import pytest

from spectraldiff.cli import main, worker_count
from spectraldiff.denoiser import init_model, save_checkpoint, tiny_config
from spectraldiff.imageio import PairingError, load_image, load_paired_dataset, save_image
from spectraldiff.masks import load_bank


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Bank, toy dataset and an untrained tiny checkpoint at 8x8."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-masks", "--height", "8", "--width", "8", "--grid", "reduced", "--n-theta", "4",
                 "--out", str(root / "b.sdmb")]) == 0
    assert main(["synth-rain", "--n-pairs", "4", "--height", "8", "--width", "8", "--out-dir", str(root / "data"),
                 "--seed", "3"]) == 0
    bank = load_bank(root / "b.sdmb")
    model = init_model(tiny_config(num_steps=len(bank)), seed=0, zero_head=False)
    save_checkpoint(model, root / "m.sdck")
    return root


def test_make_masks_writes_bank(workspace):
    bank = load_bank(workspace / "b.sdmb")
    assert (bank.height, bank.width) == (8, 8)
    assert len(bank) == 4


def test_synth_rain_layout(workspace):
    data = load_paired_dataset(workspace / "data")
    assert len(data) == 4
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["n_pairs"] == 4


def test_synth_rain_flag_overrides_config_file(tmp_path):
    cfg = tmp_path / "rain.json"
    cfg.write_text(json.dumps({"gain_range": [0.0, 0.0], "layer_count_range": [2, 2]}))
    assert main(["synth-rain", "--n-pairs", "2", "--height", "8", "--width", "8", "--config", str(cfg),
                 "--out-dir", str(tmp_path / "a")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["gain_range"] == [0.0, 0.0] and manifest["layer_count_range"] == [2, 2]
    assert main(["synth-rain", "--n-pairs", "2", "--height", "8", "--width", "8", "--config", str(cfg),
                 "--gains", "1", "2", "--out-dir", str(tmp_path / "b")]) == 0
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["gain_range"] == [1.0, 2.0] and manifest["layer_count_range"] == [2, 2]


def test_train_is_reproducible(workspace, tmp_path):
    common = ["train", "--data", str(workspace / "data"), "--bank", str(workspace / "b.sdmb"), "--preset", "tiny",
              "--iterations", "3", "--batch-size", "2", "--seed", "5"]
    assert main(common + ["--out", str(tmp_path / "a.sdck"), "--loss-csv", str(tmp_path / "a.csv")]) == 0
    assert main(common + ["--out", str(tmp_path / "b.sdck"), "--loss-csv", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.sdck").read_bytes() == (tmp_path / "b.sdck").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 4


def test_train_config_file_and_flags(workspace, tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"iterations": 2, "lr": 5e-4, "batch_size": 1}))
    assert main(["train", "--data", str(workspace / "data"), "--bank", str(workspace / "b.sdmb"), "--preset", "tiny",
                 "--config", str(cfg), "--iterations", "4", "--out", str(tmp_path / "m.sdck"),
                 "--loss-csv", str(tmp_path / "l.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "l.csv")))
    assert len(rows) == 4  # flag beats file
    assert float(rows[0]["lr"]) == 5e-4  # file beats default


def test_derain_single_image(workspace, tmp_path):
    src = workspace / "data" / "rainy" / "0000.png"
    before = src.read_bytes()
    out = tmp_path / "clean.png"
    args = ["derain", "--in", str(src), "--ckpt", str(workspace / "m.sdck"), "--bank", str(workspace / "b.sdmb"),
            "--steps", "10", "--seed", "1"]
    assert main(args + ["--out", str(out)]) == 0
    assert load_image(out).shape == (8, 8, 3)
    assert src.read_bytes() == before
    assert main(args + ["--out", str(tmp_path / "again.png")]) == 0
    assert out.read_bytes() == (tmp_path / "again.png").read_bytes()


def test_derain_directory_and_eval(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("SPECTRALDIFF_THREADS", "2")
    out_dir = tmp_path / "pred"
    assert main(["derain", "--in", str(workspace / "data" / "rainy"), "--ckpt", str(workspace / "m.sdck"),
                 "--bank", str(workspace / "b.sdmb"), "--out", str(out_dir), "--seed", "2"]) == 0
    assert sorted(p.name for p in out_dir.iterdir()) == ["0000.png", "0001.png", "0002.png", "0003.png"]
    report = tmp_path / "report.csv"
    assert main(["eval", "--pred", str(out_dir), "--gt", str(workspace / "data" / "clean"), "--out", str(report)]) == 0
    rows = list(csv.reader(open(report)))
    assert rows[0] == ["path", "mse", "psnr_db", "ssim_global", "ssim_windowed"]
    assert [r[0] for r in rows[1:-1]] == ["0000.png", "0001.png", "0002.png", "0003.png"]
    assert rows[-1][0] == "mean"
    assert float(rows[-1][2]) == pytest.approx(np.mean([float(r[2]) for r in rows[1:-1]]), abs=1e-5)


def test_eval_is_reproducible(workspace, tmp_path):
    args = ["eval", "--pred", str(workspace / "data" / "rainy"), "--gt", str(workspace / "data" / "clean")]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_flops_report(tmp_path, capsys):
    assert main(["flops-report", "--preset", "reference", "--height", "64", "--width", "64",
                 "--csv", str(tmp_path / "f.csv")]) == 0
    assert "ratio" in capsys.readouterr().out
    assert (tmp_path / "f.csv").read_text().startswith("backbone,name,kind")


def test_missing_checkpoint_exit_1(workspace, tmp_path, capsys):
    missing = tmp_path / "nope.sdck"
    code = main(["derain", "--in", str(workspace / "data" / "rainy" / "0000.png"), "--ckpt", str(missing),
                 "--bank", str(workspace / "b.sdmb"), "--out", str(tmp_path / "o.png")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and str(missing) in err[0]


def test_corrupt_bank_exit_1(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.sdmb"
    bad.write_bytes(b"garbage")
    code = main(["derain", "--in", str(workspace / "data" / "rainy" / "0000.png"), "--ckpt", str(workspace / "m.sdck"),
                 "--bank", str(bad), "--out", str(tmp_path / "o.png")])
    assert code == 1


def test_unknown_flag_and_subcommand_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["derain", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("SPECTRALDIFF_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.delenv("SPECTRALDIFF_THREADS")
    assert worker_count() >= 1


# ---------------------------------------------------------------- datasets


def test_orphan_file_is_named(workspace, tmp_path):
    import shutil

    root = tmp_path / "d"
    shutil.copytree(workspace / "data", root)
    save_image(np.zeros((8, 8, 3)), root / "rainy" / "extra.png")
    with pytest.raises(PairingError, match="rainy/extra.png"):
        load_paired_dataset(root)
    assert main(["train", "--data", str(root), "--bank", str(workspace / "b.sdmb"), "--preset", "tiny",
                 "--iterations", "1", "--out", str(tmp_path / "m.sdck")]) == 1


def test_png_255_maps_to_one(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((2, 2, 3), 255, dtype=np.uint8)).save(tmp_path / "w.png")
    assert np.all(load_image(tmp_path / "w.png") == 1.0)


def test_save_load_round_trip_is_exact_on_the_8bit_grid(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)) / 255.0
    save_image(img, tmp_path / "x.png")
    assert np.array_equal(load_image(tmp_path / "x.png"), img)


def test_dataset_center_crop(workspace):
    data = load_paired_dataset(workspace / "data", crop=(4, 6))
    assert data.clean[0].shape == (4, 6, 3)


def test_train_head_and_eval_cadence_flags(workspace, tmp_path):
    from spectraldiff.denoiser import OutputHead, load_checkpoint

    assert main(["train", "--data", str(workspace / "data"), "--bank", str(workspace / "b.sdmb"), "--preset", "tiny",
                 "--head", "x0", "--eval-every", "2", "--iterations", "2", "--out", str(tmp_path / "m.sdck")]) == 0
    assert load_checkpoint(tmp_path / "m.sdck").config.output_head is OutputHead.X0
