import csv
import json
from pathlib import Path

import numpy as np
import pytest

from rdfabric.cli import EXIT_CONFIG, EXIT_DATASET, EXIT_EVAL, EXIT_IMAGE, main
from rdfabric.config import ConfigError, RunConfig, dump_config, load_config
from rdfabric.data import SyntheticClassSpec, SyntheticTextureSpec, save_png, write_synthetic_class

SMALL = ["--set", "teacher.input_size=64", "--set", "teacher.weights=random",
         "--set", "eval.patch_size=64", "--set", "train.batch_size=2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for name, pattern, seed in (("alpha", "plain", 0), ("beta", "stripes", 1)):
        tex = SyntheticTextureSpec(pattern=pattern, size=64, defect_magnitude=0.4)
        write_synthetic_class(root, SyntheticClassSpec(name, tex, n_train=6, n_test_good=3,
                                                       n_test_defective=3, seed=seed))
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--root", str(dataset), "--classes", "alpha,beta", "--epochs", "2",
                 "--out", str(out), "--overwrite"] + SMALL)
    assert code == 0
    return out


def write_ini(path, text):
    path.write_text(text)
    return str(path)


# --- configuration ---------------------------------------------------------------

def test_defaults_and_roundtrip(tmp_path):
    cfg = load_config()
    assert cfg.train.learning_rate == 0.005 and cfg.model.link_taps == (0, 1)
    again = load_config(write_ini(tmp_path / "c.ini", dump_config(cfg)))
    assert again == cfg


def test_unknown_key_is_an_error(tmp_path):
    path = write_ini(tmp_path / "c.ini", "[train]\nlearnig_rate = 0.1\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.key == "train.learnig_rate"
    assert main(["train", "--config", path]) == EXIT_CONFIG


def test_unknown_section_and_bad_value(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_ini(tmp_path / "a.ini", "[trian]\nepochs = 3\n"))
    with pytest.raises(ConfigError):
        load_config(write_ini(tmp_path / "b.ini", "[train]\nepochs = many\n"))
    with pytest.raises(ConfigError):
        load_config(write_ini(tmp_path / "c.ini", "[model]\nmode = sideways\n"))


def test_flags_override_file(tmp_path):
    path = write_ini(tmp_path / "c.ini", "[train]\nepochs = 7\nseed = 3\n")
    cfg = load_config(path, {"train.epochs": "9"})
    assert (cfg.train.epochs, cfg.train.seed) == (9, 3)


def test_domain_generalized_drops_links():
    cfg = load_config(None, {"model.mode": "domain_generalized"})
    assert cfg.model_config().link_taps == ()
    assert isinstance(RunConfig().model_config().link_taps, tuple)


# --- train -----------------------------------------------------------------------

def test_train_outputs(trained):
    for name in ("alpha", "beta"):
        assert (trained / name / "checkpoint.pt").is_file()
        rows = (trained / name / "train_log.jsonl").read_text().splitlines()
        assert 1 <= len(rows) <= 100
        assert set(json.loads(rows[0])) == {"epoch", "train_loss", "val_loss", "lr"}
    assert "[train]" in (trained / "resolved_config.ini").read_text()


def test_train_refuses_to_clobber(dataset, trained):
    code = main(["train", "--root", str(dataset), "--classes", "alpha", "--epochs", "1",
                 "--out", str(trained)] + SMALL)
    assert code == EXIT_CONFIG


def test_train_resolved_config_is_deterministic(dataset, tmp_path):
    snapshots = []
    for run in ("a", "b"):
        out = tmp_path / run
        args = ["train", "--root", str(dataset), "--classes", "alpha", "--epochs", "1",
                "--seed", "5", "--out", str(out)] + SMALL
        assert main(args) == 0
        snapshots.append((out / "resolved_config.ini").read_text().replace(str(out), "OUT"))
    assert snapshots[0] == snapshots[1]


def test_train_domain_generalized_single_checkpoint(dataset, tmp_path):
    out = tmp_path / "dg"
    code = main(["train", "--root", str(dataset), "--classes", "alpha,beta", "--epochs", "1",
                 "--mode", "domain_generalized", "--out", str(out)] + SMALL)
    assert code == 0
    assert sorted(p.name for p in out.glob("*/checkpoint.pt")) == ["checkpoint.pt"]
    assert (out / "pooled" / "checkpoint.pt").is_file()
    assert main(["eval", "--checkpoint", str(out), "--root", str(dataset),
                 "--classes", "alpha,beta", "--out", str(out)] + SMALL) == 0
    assert (out / "eval" / "beta.json").is_file()


def test_train_missing_dataset(tmp_path):
    code = main(["train", "--root", str(tmp_path), "--classes", "nothing", "--epochs", "1",
                 "--out", str(tmp_path / "o")] + SMALL)
    assert code == EXIT_DATASET


# --- eval ------------------------------------------------------------------------

def test_eval_reports(dataset, trained):
    code = main(["eval", "--checkpoint", str(trained), "--root", str(dataset),
                 "--classes", "alpha,beta", "--out", str(trained), "--pixel", "--coverage",
                 "--scores-csv", "--overwrite"] + SMALL)
    assert code == 0
    report = json.loads((trained / "eval" / "alpha.json").read_text())
    assert 0 <= report["image_auroc"] <= 1 and report["pixel_auroc"] is not None
    cov = report["coverage"]
    assert cov["tol_0"] >= cov["tol_0.02"] >= cov["tol_0.05"]
    rows = list(csv.reader(open(trained / "eval" / "aggregate.csv")))
    assert rows[0][0] == "class" and [r[0] for r in rows[1:]] == ["alpha", "beta"]
    scores = list(csv.reader(open(trained / "eval" / "alpha_scores.csv")))
    assert len(scores) == 1 + 6


def test_eval_pixel_without_masks_warns(dataset, trained, tmp_path, caplog):
    root = tmp_path / "nomask"
    tex = SyntheticTextureSpec(size=64, defect_magnitude=0.4)
    write_synthetic_class(root, SyntheticClassSpec("alpha", tex, n_train=2, n_test_good=2,
                                                   n_test_defective=2))
    for m in (root / "alpha" / "ground_truth").rglob("*.png"):
        m.unlink()
    code = main(["eval", "--checkpoint", str(trained / "alpha" / "checkpoint.pt"),
                 "--root", str(root), "--classes", "alpha", "--pixel",
                 "--out", str(tmp_path / "o")] + SMALL)
    assert code == 0
    report = json.loads((tmp_path / "o" / "eval" / "alpha.json").read_text())
    assert report["pixel_auroc"] is None and "pixel AUROC skipped" in caplog.text


def test_eval_single_label_exit_code(trained, tmp_path):
    root = tmp_path / "goodonly"
    tex = SyntheticTextureSpec(size=64)
    write_synthetic_class(root, SyntheticClassSpec("alpha", tex, n_train=2, n_test_good=2,
                                                   n_test_defective=0))
    code = main(["eval", "--checkpoint", str(trained), "--root", str(root),
                 "--classes", "alpha", "--out", str(tmp_path / "o")] + SMALL)
    assert code == EXIT_EVAL


# --- infer -----------------------------------------------------------------------

def test_infer_single_patch(trained, tmp_path):
    img = tmp_path / "one.png"
    save_png(np.random.default_rng(0).random((64, 64, 3)), img)
    out = tmp_path / "o"
    code = main(["infer", "--checkpoint", str(trained / "alpha" / "checkpoint.pt"),
                 "--input", str(img), "--out", str(out)] + SMALL)
    assert code == 0
    assert sorted(p.name for p in (out / "infer").iterdir()) == ["one.json", "one.npy", "one.png"]


def test_infer_tiles_large_image(trained, tmp_path):
    img = tmp_path / "wide.png"
    save_png(np.random.default_rng(1).random((200, 300, 3)), img)
    out = tmp_path / "o"
    code = main(["infer", "--checkpoint", str(trained / "alpha" / "checkpoint.pt"),
                 "--input", str(img), "--out", str(out)] + SMALL)
    assert code == 0
    meta = json.loads((out / "infer" / "wide.json").read_text())
    assert len(meta["patch_scores"]) == 3 * 4
    assert meta["score"] == pytest.approx(max(meta["patch_scores"]), rel=1e-5)
    assert np.load(out / "infer" / "wide.npy").shape == (192, 256)


def test_infer_folder_and_errors(trained, tmp_path):
    folder = tmp_path / "imgs"
    for i in range(3):
        save_png(np.random.default_rng(i).random((64, 80, 3)), folder / f"{i}.png")
    ckpt = str(trained / "alpha" / "checkpoint.pt")
    out = tmp_path / "o"
    assert main(["infer", "--checkpoint", ckpt, "--input", str(folder),
                 "--out", str(out)] + SMALL) == 0
    assert len(list((out / "infer").glob("*.json"))) == 3
    assert main(["infer", "--checkpoint", ckpt, "--input", str(folder),
                 "--out", str(out)] + SMALL) == EXIT_CONFIG
    small = tmp_path / "small.png"
    save_png(np.zeros((32, 100, 3)), small)
    assert main(["infer", "--checkpoint", ckpt, "--input", str(small),
                 "--out", str(tmp_path / "s")] + SMALL) == EXIT_IMAGE
    broken = tmp_path / "broken.png"
    broken.write_bytes(b"nope")
    assert main(["infer", "--checkpoint", ckpt, "--input", str(broken),
                 "--out", str(tmp_path / "b")] + SMALL) == EXIT_IMAGE


# --- bench -----------------------------------------------------------------------

def test_bench_defaults_and_explicit(trained, tmp_path):
    ckpt = str(trained / "alpha" / "checkpoint.pt")
    assert main(["bench", "--checkpoint", ckpt, "--out", str(tmp_path / "a")] + SMALL) == 0
    reports = json.loads((tmp_path / "a" / "bench.json").read_text())
    assert [r["batch_size"] for r in reports] == [16, 32]
    assert all(r["hardware"] for r in reports)
    assert main(["bench", "--checkpoint", ckpt, "--patches", "96", "--batch", "32",
                 "--out", str(tmp_path / "b")] + SMALL) == 0
    (report,) = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert report["n_batches"] == 3


def test_accept_unknown_scenario(tmp_path):
    assert main(["accept", "--scenario", "nope", "--out", str(tmp_path)]) == EXIT_CONFIG
