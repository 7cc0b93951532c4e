import json

import numpy as np
import pytest

from exchanger.checkpoint import load_checkpoint
from exchanger.cli import DATA_FILES, derive_seed, dispatch, load_config
from exchanger.data import content_hash
from exchanger.errors import ConfigError

TOY = {
    "seed": 4,
    "data": {"n_train": 200, "n_val": 60, "n_grid_train": 3, "n_grid_val": 2,
             "synth": {"n_pix": 2, "t_range": [10, 14], "grid_size": [5, 5], "parcels_per_grid": [1, 2]}},
    "model": {"d": 16, "n_clusters": 4, "heads": 2, "stages": 1},
    "pretrain": {"epochs": 30, "batch_size": 16, "lr0": 3e-3},
    "finetune": {"epochs": 1, "batch_size": 2, "lr0": 1e-3},
    "bench": {"T": [4, 8, 16, 32, 64], "repeats": 5, "tokens_per_call": 64},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "toy.json", TOY)
    assert dispatch(["gen-data", "--config", config, "--out", str(root / "data")]) == 0
    assert dispatch(["pretrain", "--config", config, "--data", str(root / "data"), "--out", str(root / "pre")]) == 0
    return root, config


def test_gen_data_is_deterministic(workspace, tmp_path):
    root, config = workspace
    assert dispatch(["gen-data", "--config", config, "--out", str(tmp_path / "again")]) == 0
    for name in [*DATA_FILES.values(), "manifest.json"]:
        assert (tmp_path / "again" / name).read_bytes() == (root / "data" / name).read_bytes()


def test_gen_data_manifest(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 4 and len(manifest["config_hash"]) == 16
    assert manifest["data"] == {n: content_hash(root / "data" / n) for n in DATA_FILES.values()}


def test_refuses_to_overwrite(workspace, tmp_path, capsys):
    _, config = workspace
    out = tmp_path / "d"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert dispatch(["gen-data", "--config", config, "--out", str(out)]) == 1
    assert "--force" in capsys.readouterr().err
    assert (out / "keep.txt").exists()
    assert dispatch(["gen-data", "--config", config, "--out", str(out), "--force"]) == 0
    assert not (out / "keep.txt").exists() and (out / "manifest.json").exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d"]


@pytest.mark.parametrize("argv", [["gen-data", "--out", "x", "--bogus"], ["nope"], [], ["pretrain"]])
def test_usage_errors_exit_one(argv, capsys):
    assert dispatch(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_config_exit_one(tmp_path):
    bad = write_config(tmp_path / "bad.json", {"model": {"d": 6, "heads": 4}})
    assert dispatch(["gen-data", "--config", bad, "--out", str(tmp_path / "o")]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert dispatch(["gen-data", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_missing_data_exit_two(tmp_path):
    assert dispatch(["pretrain", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_three(workspace, tmp_path):
    root, _ = workspace
    cfg = json.loads(json.dumps(TOY))
    cfg["pretrain"] = {"epochs": 2, "batch_size": 16, "lr0": 1e38, "weight_decay": 0.0}
    config = write_config(tmp_path / "div.json", cfg)
    with np.errstate(all="ignore"):
        code = dispatch(["pretrain", "--config", config, "--data", str(root / "data"), "--out", str(tmp_path / "o")])
    assert code == 3
    assert not (tmp_path / "o").exists()


def test_pretrain_outputs(workspace):
    root, _ = workspace
    pre = root / "pre"
    assert sorted(p.name for p in pre.iterdir()) == ["checkpoint.ckpt", "manifest.json", "metrics.csv", "summary.json"]
    manifest = json.loads((pre / "manifest.json").read_text())
    summary = json.loads((pre / "summary.json").read_text())
    assert (pre / "metrics.csv").read_text().splitlines()[0] == f"# config_hash={manifest['config_hash']}"
    assert summary["config_hash"] == manifest["config_hash"]
    assert set(manifest["data"]) == {DATA_FILES["pixelset_train"], DATA_FILES["pixelset_val"]}
    ckpt_manifest, _ = load_checkpoint(pre / "checkpoint.ckpt")
    assert ckpt_manifest["config_hash"] == manifest["config_hash"] and ckpt_manifest["seed"] == 4


def test_eval_train_split_not_worse_than_val(workspace, tmp_path):
    root, config = workspace
    ckpt = str(root / "pre" / "checkpoint.ckpt")
    scores = {}
    for split in ("pixelset_train", "pixelset_val"):
        out = tmp_path / split
        assert dispatch(["eval", "--config", config, "--checkpoint", ckpt,
                         "--data", str(root / "data" / DATA_FILES[split]), "--out", str(out)]) == 0
        scores[split] = json.loads((out / "metrics.json").read_text())["metrics"]["f1"]
    summary = json.loads((root / "pre" / "summary.json").read_text())
    assert scores["pixelset_val"] == pytest.approx(summary["final"]["val/f1"], abs=1e-9)
    assert scores["pixelset_train"] >= scores["pixelset_val"]


def test_eval_refuses_mismatched_config(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = json.loads(json.dumps(TOY))
    cfg["pretrain"]["lr0"] = 1e-3
    other = write_config(tmp_path / "other.json", cfg)
    code = dispatch(["eval", "--config", other, "--checkpoint", str(root / "pre" / "checkpoint.ckpt"),
                     "--data", str(root / "data" / DATA_FILES["pixelset_val"]), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "config hash" in capsys.readouterr().err


def test_finetune_from_pretrained_and_export(workspace, tmp_path):
    root, config = workspace
    out = tmp_path / "ft"
    assert dispatch(["finetune", "--config", config, "--data", str(root / "data"),
                     "--init", str(root / "pre" / "checkpoint.ckpt"), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["train"]["mode"] == "finetune-pretrained"
    assert "checkpoint.ckpt" in manifest["data"]
    grid = str(root / "data" / DATA_FILES["grid_val"])
    assert dispatch(["eval", "--config", config, "--checkpoint", str(out / "checkpoint.ckpt"),
                     "--data", grid, "--out", str(tmp_path / "ev")]) == 0
    assert "miou" in json.loads((tmp_path / "ev" / "metrics.json").read_text())["metrics"]
    assert dispatch(["export-features", "--checkpoint", str(out / "checkpoint.ckpt"), "--data", grid,
                     "--index", "1", "--out", str(tmp_path / "feat")]) == 0
    feat_manifest, blocks = load_checkpoint(tmp_path / "feat" / "features.bin")
    t = len(feat_manifest["valid_mask"])
    assert list(blocks) == ["stage0"] and blocks["stage0"].shape == (t, 16)
    assert dispatch(["export-features", "--checkpoint", str(out / "checkpoint.ckpt"), "--data", grid,
                     "--index", "99", "--out", str(tmp_path / "feat2")]) == 2


def test_init_must_be_pretrain_checkpoint(workspace, tmp_path):
    root, config = workspace
    assert dispatch(["finetune", "--config", config, "--data", str(root / "data"),
                     "--init", str(root / "data" / DATA_FILES["grid_val"]), "--out", str(tmp_path / "o")]) == 2


def test_bench_outputs(workspace, tmp_path):
    _, config = workspace
    assert dispatch(["bench", "--config", config, "--out", str(tmp_path / "b")]) == 0
    lines = (tmp_path / "b" / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and len(lines) == 12
    slopes = json.loads((tmp_path / "b" / "slopes.json").read_text())
    assert set(slopes["slopes"]) == {"exchanger", "self-attention"}


@pytest.mark.parametrize("value, code", [("abc", 1), ("0", 1), ("1", 0)])
def test_threads_environment(monkeypatch, tmp_path, value, code):
    monkeypatch.setenv("EXCHANGER_THREADS", value)
    config = write_config(tmp_path / "c.json", {"data": {"n_train": 4, "n_val": 2, "n_grid_train": 1, "n_grid_val": 1}})
    assert dispatch(["gen-data", "--config", config, "--out", str(tmp_path / "o")]) == code


def test_load_config_rejects_unknown_fields(tmp_path):
    for raw in ({"extra": 1}, {"data": {"n_trian": 3}}, {"bench": {"reps": 5}}, [1, 2]):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.json", raw))


def test_derive_seed_streams_differ():
    seeds = {derive_seed(0, k) for k in range(4)}
    assert len(seeds) == 4 and derive_seed(0, 1) == derive_seed(0, 1)
