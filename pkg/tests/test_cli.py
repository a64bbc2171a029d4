import csv
import json

import numpy as np
import pytest
from PIL import Image

from scalenc import config as cfgio
from scalenc.autodiff.checkpoint import save_checkpoint
from scalenc.backbone import ConfigError
from scalenc.benchmark import BenchmarkConfig, aggregate, format_table, load_data, run_benchmark
from scalenc.cli import main
from scalenc.visualize import normalize_weights, read_tile, weight_grid

TINY = ["--set", "block_widths=8,8,16", "--set", "block_depths=1,1,1", "--set", "synth_train=60",
        "--set", "synth_test=30", "--set", "epochs=1", "--set", "batch_size=16", "--set", "probe_steps=20",
        "--set", "knn_k=5", "--set", "val_linear=false"]


def tiny_config(**kw):
    base = dict(block_widths=(8, 8, 16), block_depths=(1, 1, 1), synth_train=60, synth_test=30, epochs=1,
                batch_size=16, probe_steps=20, knn_k=5, val_linear=False)
    base.update(kw)
    return BenchmarkConfig(**base)


# -- configuration ------------------------------------------------------------------------------

def test_parse_text_comments_and_aliases():
    got = cfgio.parse_text("# header\nmethod = bt, moco  # trailing\n\nseed=3\nlr = 0.01\n")
    assert got == {"methods": "bt, moco", "seeds": "3", "lr": "0.01"}


def test_build_converts_types():
    cfg = cfgio.build(BenchmarkConfig, {"methods": "bt,random", "seeds": "1,2", "lr": "0.5", "augment": "no",
                                        "train_archive": "none"})
    assert cfg.methods == ("bt", "random") and cfg.seeds == (1, 2)
    assert cfg.lr == 0.5 and cfg.augment is False and cfg.train_archive is None


@pytest.mark.parametrize("values", [{"bogus": "1"}, {"lr": "fast"}, {"augment": "maybe"}, {"methods": "dino"}])
def test_build_rejects_bad_values(values):
    with pytest.raises(ConfigError):
        cfgio.build(BenchmarkConfig, values)


def test_parse_text_rejects_missing_equals():
    with pytest.raises(ConfigError, match="key = value"):
        cfgio.parse_text("epochs 3")


def test_unknown_key_exits_with_config_code(tmp_path, capsys):
    assert main(["benchmark", "--out-dir", str(tmp_path), "--set", "nonsense=1"]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_archive_exits_with_data_code(tmp_path):
    assert main(["extract-features", "--out-dir", str(tmp_path), "--archive", str(tmp_path / "no.zip")]) == 3


def test_bad_checkpoint_exits_with_data_code(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"nope")
    assert main(["visualize-weights", "--checkpoint", str(bad), "--out", str(tmp_path / "w.png")]) == 3


# -- aggregation ------------------------------------------------------------------------------

def test_aggregate_sample_std_and_single_seed_flag():
    rows = [{"method": "bt", "variant": "sdcl", "seed": s, "linear_acc": a, "knn_acc": a, "status": "ok"}
            for s, a in enumerate([0.5, 0.7, 0.9])]
    rows.append({"method": "random", "variant": "plain", "seed": 0, "linear_acc": 0.4, "knn_acc": 0.3,
                 "status": "ok"})
    rows.append({"method": "random", "variant": "plain", "seed": 1, "linear_acc": np.nan, "knn_acc": np.nan,
                 "status": "failed"})
    bt, rnd = aggregate(rows)
    assert bt.linear_mean == pytest.approx(0.7) and bt.linear_std == pytest.approx(0.2)
    assert rnd.single_seed and rnd.knn_std == 0.0 and rnd.failed == 1
    text = format_table([bt, rnd])
    assert "70.0 ± 20.0" in text and "30.0 ± 0.0*" in text and "(1 failed)" in text


# -- weight visualisation ---------------------------------------------------------------------------

def test_constant_weights_map_to_mid_grey():
    assert np.all(normalize_weights(np.full((4, 3, 3, 3), 0.7)) == 128)


def test_weight_png_round_trip(tmp_path, rng):
    w = rng.normal(size=(6, 3, 3, 3)).astype(np.float32)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, {"stem.weight": w})
    out = tmp_path / "w.png"
    assert main(["visualize-weights", "--checkpoint", str(ckpt), "--out", str(out), "--scale", "4"]) == 0
    grid = np.array(Image.open(out))
    np.testing.assert_array_equal(grid, weight_grid(w, scale=4))
    expected = normalize_weights(w)
    for i in range(6):
        np.testing.assert_array_equal(read_tile(grid, i, 3, scale=4, columns=3), expected[i].transpose(1, 2, 0))


def test_grey_tiles_for_non_rgb_layers(rng):
    grid = weight_grid(rng.normal(size=(2, 4, 3, 3)), scale=2)
    assert grid.ndim == 2


# -- end to end at tiny scale ------------------------------------------------------------------------

def test_tiny_benchmark_is_deterministic(tmp_path):
    cfg = tiny_config(methods=("supervised", "random"), variants=("plain", "sdcl+size"), seeds=(0,))
    data = load_data(cfg)
    cfg.out_dir = str(tmp_path / "a")
    m1, cells = run_benchmark(cfg, data)
    cfg.out_dir = str(tmp_path / "b")
    m2, _ = run_benchmark(cfg, data)
    assert len(m1.rows) == 4 and all(r["status"] == "ok" for r in m1.rows)
    assert [(r["linear_acc"], r["knn_acc"]) for r in m1.rows] == [(r["linear_acc"], r["knn_acc"]) for r in m2.rows]
    assert len(cells) == 4 and all(c.single_seed for c in cells)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["code_version"] == m1.code_version and len(manifest["code_version"]) == 40
    assert manifest["dataset_fingerprint"] == m2.dataset_fingerprint
    assert len(list(csv.DictReader(open(tmp_path / "a" / "metrics.csv")))) == 4
    assert (tmp_path / "a" / "table.txt").read_text().count("*") >= 1


def test_subcommands_end_to_end(tmp_path, capsys):
    data_dir, prep, feats, sel_dir = (tmp_path / n for n in ("data", "prep", "feats", "sel"))
    assert main(["synth-data", "--out-dir", str(data_dir), "--set", "n_objects=40", "--set", "slide_side=160",
                 "--seed", "2"]) == 0
    assert (data_dir / "index.csv").exists()
    assert main(["prepare", "--data", str(data_dir), "--out-dir", str(prep)]) == 0
    archive = prep / "crops.zip"
    assert main(["extract-features", "--archive", str(archive), "--out-dir", str(feats)]) == 0
    header = next(csv.reader(open(feats / "features.csv")))
    assert len(header) == 69
    assert len(json.loads((feats / "schema.json").read_text())) == 68
    assert main(["select-features", "--archive", str(archive), "--features", str(feats / "features.csv"),
                 "--out-dir", str(sel_dir), "--set", "val_fraction=0.3"]) == 0
    assert (sel_dir / "selection.csv").exists() and "chosen:" in capsys.readouterr().out

    run = tmp_path / "run"
    assert main(["train", "--method", "supervised", "--variant", "sdcl", "--train-archive", str(archive),
                 "--test-archive", str(archive), "--out-dir", str(run), *TINY]) == 0
    assert (run / "manifest.json").exists() and (run / "best.ckpt").exists()
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--train-archive", str(archive),
                 "--test-archive", str(archive), "--k", "3", "--out-dir", str(run)]) == 0
    result = json.loads((run / "eval.json").read_text())
    assert 0 <= result["knn_acc"] <= 1 and result["k"] == 3
    png = tmp_path / "w.png"
    assert main(["visualize-weights", "--checkpoint", str(run / "best.ckpt"), "--out", str(png)]) == 0
    assert Image.open(png).mode == "RGB"


def test_benchmark_subcommand_with_config_file(tmp_path, capsys):
    conf = tmp_path / "b.conf"
    conf.write_text("methods = manual, random\nvariants = plain\nseeds = 0\n")
    assert main(["benchmark", "--config", str(conf), "--out-dir", str(tmp_path / "out"), *TINY]) == 0
    out = capsys.readouterr().out
    assert "manual" in out and "random" in out
    rows = list(csv.DictReader(open(tmp_path / "out" / "table.csv")))
    assert [r["method"] for r in rows] == ["manual", "random"]
