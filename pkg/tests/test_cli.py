import subprocess
import sys

import numpy as np
import pytest
import torch

from xbd_baseline import cli, ingest, synthetic, training
from xbd_baseline.net import NetworkConfig


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("xbd")
    synthetic.write_dataset(root, n_tiles=2, size=96, per_class=1, events=("alpha", "beta"))
    synthetic.write_dataset(root, n_tiles=1, size=96, per_class=1, subset="test", seed=1, events=("alpha",))
    return root


def test_split_disjoint_from_manifest(tmp_path, capsys):
    manifest = tmp_path / "pairs.tsv"
    ingest.write_pair_manifest(manifest, synthetic.disjoint_manifest())
    out = tmp_path / "split.tsv"
    assert cli.main(["split", "--manifest", str(manifest), "--mode", "disjoint", "--out", str(out),
                     "--val-fraction", "0"]) == 0
    text = capsys.readouterr().out
    assert "train: 9026 pairs" in text and "test: 1115 pairs" in text
    split = ingest.read_split(out)
    assert split.count("train") == 9026 and split.count("test") == 1115
    for subset, counts in ingest.DISJOINT_SPLIT_COUNTS.items():
        for event, n in counts.items():
            assert f"{event:<22} {n}" in text


def test_split_original_from_disk(tmp_path, data_root, capsys):
    out = tmp_path / "split.tsv"
    assert cli.main(["split", "--data-root", str(data_root), "--mode", "original", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "source subsets: train=4 tier3=0 test=1 holdout=0" in text
    split = ingest.read_split(out)
    assert split.count("test") == 1 and split.count("train") + split.count("val") == 4


def test_analyze(tmp_path, data_root, capsys):
    out = tmp_path / "dist.csv"
    assert cli.main(["analyze", "--data-root", str(data_root), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("event,f_1")
    assert {r.split(",")[0] for r in rows[1:]} == {"alpha", "beta"}


def test_evaluate_identity(tmp_path, data_root, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    labels_dir = data_root / "train" / "labels"
    for rec in ingest.discover_pairs(data_root, ["train"]):
        lab = ingest.load_label_raster(rec.label_path(data_root, "post"))
        training.write_mask(pred / f"{rec.tile_id}_damage.png", lab)
    csv = tmp_path / "score.csv"
    assert cli.main(["evaluate", "--pred", str(pred), "--labels", str(labels_dir), "--per-event",
                     "--out", str(csv)]) == 0
    text = capsys.readouterr().out
    assert "competition score  1.0000" in text and "alpha," in text
    assert csv.read_text().splitlines()[1].startswith("1.000000,1.000000,1.000000")


def test_predict_then_evaluate(tmp_path, data_root, capsys):
    torch.manual_seed(0)
    model = training.SiameseUNet(NetworkConfig(decoder_channels=8))
    ckpt = tmp_path / "m.pt"
    training.save_checkpoint(ckpt, model, training.CheckpointMeta(0, 1.0, "x"))
    out = tmp_path / "pred"
    assert cli.main(["predict", "--ckpt", str(ckpt), "--data-root", str(data_root), "--subset", "test",
                     "--out", str(out), "--loc-strategy", "otsu"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["alpha_00000000_damage.png", "alpha_00000000_localization.png"]
    assert cli.main(["evaluate", "--pred", str(out), "--labels", str(data_root / "test" / "labels")]) == 0
    score = float(capsys.readouterr().out.strip().splitlines()[-1].split(",")[0])
    assert 0 <= score <= 1


def test_train_missing_root(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(training.DATA_ROOT_ENV, raising=False)
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data_root = {tmp_path / 'absent'}\n")
    assert cli.main(["train", "--config", str(cfg)]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_train_small_run(tmp_path, data_root, capsys, monkeypatch):
    monkeypatch.delenv(training.DATA_ROOT_ENV, raising=False)
    cfg = tmp_path / "c.cfg"
    cfg.write_text("decoder_channels = 8\npretrained_encoder = no\naugment = no\nbatch_size = 2\n"
                   "accum_steps = 1\nmax_steps = 1\nepochs = 1\nval_fraction = 0.25\n")
    assert cli.main(["train", "--config", str(cfg), "--data-root", str(data_root),
                     "--out-dir", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "best.pt").exists()
    assert "trained 1 steps" in capsys.readouterr().out


def test_evaluate_missing_labels(tmp_path, capsys):
    pred, labels = tmp_path / "p", tmp_path / "l"
    pred.mkdir()
    labels.mkdir()
    training.write_mask(pred / "t1_damage.png", np.zeros((4, 4), np.uint8))
    assert cli.main(["evaluate", "--pred", str(pred), "--labels", str(labels)]) == 1
    assert "t1" in capsys.readouterr().err


def test_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        cli.main(["split", "--bogus"])
    assert exc.value.code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "xbd_baseline", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("split", "analyze", "train", "evaluate", "predict"):
        assert cmd in res.stdout
