"""``exchanger`` command line: data generation, training, evaluation,
benchmarking and feature export.

Every subcommand writes into a fresh output directory that only appears once
all of its files are complete; an existing directory is kept unless
``--force`` is given. Exit codes: 0 success, 1 configuration error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .bench import make_encoders, records_to_csv, run_scaling, slopes_to_json
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .data import SynthConfig, content_hash, generate_grid, generate_pixelset, read_dataset, write_dataset
from .errors import ConfigError, DataError, ExchangerError
from .model import ExchangerConfig
from .train import (
    DenseSegmenter,
    TrainConfig,
    evaluate_grid,
    evaluate_pixelset,
    model_from_checkpoint,
    run_finetune,
    run_pretrain,
)

log = logging.getLogger("exchanger")

DATA_FILES = {
    "pixelset_train": "pixelset_train.sits",
    "pixelset_val": "pixelset_val.sits",
    "grid_train": "grid_train.sits",
    "grid_val": "grid_val.sits",
}

DEFAULT_DATA = {"n_train": 2000, "n_val": 500, "n_grid_train": 32, "n_grid_val": 10}
DEFAULT_BENCH = {"T": [64, 128, 256, 512, 1024, 2048, 4096], "repeats": 5, "tokens_per_call": 4096}
SECTIONS = ("seed", "data", "model", "pretrain", "finetune", "bench")


class UsageError(ExchangerError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    """Read a JSON run configuration; missing sections take defaults."""
    if path is None:
        raw = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    data = {**DEFAULT_DATA, **raw.get("data", {})}
    synth = SynthConfig.from_dict(data.pop("synth", {}))
    synth.validate()
    unknown = set(data) - set(DEFAULT_DATA)
    if unknown:
        raise ConfigError(f"unknown data fields: {sorted(unknown)}")
    model = ExchangerConfig.from_dict(raw.get("model", {}))
    model.validate()
    bench = {**DEFAULT_BENCH, **raw.get("bench", {})}
    unknown = set(bench) - set(DEFAULT_BENCH)
    if unknown:
        raise ConfigError(f"unknown bench fields: {sorted(unknown)}")
    return {
        "seed": int(raw.get("seed", 0)),
        "synth": synth,
        "data": data,
        "model": model,
        "pretrain": TrainConfig.from_dict({"mode": "pretrain", **raw.get("pretrain", {})}),
        "finetune": TrainConfig.from_dict({"schedule": "poly", "mode": "finetune-scratch", **raw.get("finetune", {})}),
        "bench": bench,
    }


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a named sub-stream of ``seed``."""
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def _resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("EXCHANGER_THREADS")
    if env is None or env == "":
        return None
    try:
        value = int(env)
    except ValueError:
        raise ConfigError(f"EXCHANGER_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigError("EXCHANGER_THREADS must be >= 1")
    return value


# ---------------------------------------------------------------------------
# output directories
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def staged_output(out, force: bool):
    """Yield a scratch directory that replaces ``out`` only on success."""
    out = Path(out)
    if out.exists() and not force:
        raise ConfigError(f"output directory {out} exists; pass --force to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.tmp-", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old-", dir=out.parent))
        os.replace(out, old / out.name)
        os.replace(tmp, out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, out)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, chash: str, seed: int, data_hashes: dict, **extra) -> dict:
    return {"command": command, "config_hash": chash, "seed": seed, "data": data_hashes, **extra}


def _data_file(data_dir, key: str) -> Path:
    path = Path(data_dir) / DATA_FILES[key]
    if not path.is_file():
        raise DataError(f"missing dataset file {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> None:
    seed = cfg["seed"]
    synth, sizes = cfg["synth"], cfg["data"]
    chash = config_hash(synth.to_dict(), sizes, {"seed": seed})
    datasets = {
        "pixelset_train": generate_pixelset(synth, sizes["n_train"], derive_seed(seed, 0)),
        "pixelset_val": generate_pixelset(synth, sizes["n_val"], derive_seed(seed, 1)),
        "grid_train": generate_grid(synth, sizes["n_grid_train"], derive_seed(seed, 2)),
        "grid_val": generate_grid(synth, sizes["n_grid_val"], derive_seed(seed, 3)),
    }
    with staged_output(args.out, args.force) as tmp:
        hashes = {}
        for key, ds in datasets.items():
            ds.meta.update({"config_hash": chash, "seed": seed, "split": key})
            write_dataset(tmp / DATA_FILES[key], ds)
            hashes[DATA_FILES[key]] = content_hash(tmp / DATA_FILES[key])
        _write_json(tmp / "manifest.json", _manifest("gen-data", chash, seed, hashes,
                                                     synth=synth.to_dict(), sizes=sizes))
    print(f"wrote {len(datasets)} datasets to {args.out}")


def _train_outputs(tmp: Path, result, command: str, seed: int, data_hashes: dict) -> str:
    manifest = dict(result.manifest)
    manifest["seed"] = seed
    manifest["data"] = data_hashes
    save_checkpoint(tmp / "checkpoint.ckpt", manifest, result.arrays())
    chash = manifest["config_hash"]
    (tmp / "metrics.csv").write_text(result.metrics.to_csv(f"config_hash={chash}"))
    final = {f"{split}/{metric}": value for (_, split, metric, value) in result.metrics.records}
    _write_json(tmp / "summary.json", {"config_hash": chash, "epochs": manifest["train"]["epochs"],
                                       "final": final, "wall_clock_seconds": result.metrics.wall_clock})
    _write_json(tmp / "manifest.json", _manifest(command, chash, seed, data_hashes,
                                                 model=manifest["model"], train=manifest["train"],
                                                 wall_clock_seconds=result.metrics.wall_clock))
    return chash


def cmd_pretrain(args, cfg) -> None:
    if args.data is None:
        raise ConfigError("pretrain needs --data <gen-data directory>")
    train_path, val_path = _data_file(args.data, "pixelset_train"), _data_file(args.data, "pixelset_val")
    train_cfg = cfg["pretrain"]
    train_cfg.seed = cfg["seed"]
    result = run_pretrain(read_dataset(train_path), read_dataset(val_path), cfg["model"], train_cfg)
    hashes = {train_path.name: content_hash(train_path), val_path.name: content_hash(val_path)}
    with staged_output(args.out, args.force) as tmp:
        _train_outputs(tmp, result, "pretrain", cfg["seed"], hashes)
    print(f"val macro F1 {result.metrics.final('val', 'f1'):.2f}")


def cmd_finetune(args, cfg) -> None:
    if args.data is None:
        raise ConfigError("finetune needs --data <gen-data directory>")
    train_path, val_path = _data_file(args.data, "grid_train"), _data_file(args.data, "grid_val")
    train_cfg = cfg["finetune"]
    train_cfg.seed = cfg["seed"]
    init = None
    hashes = {train_path.name: content_hash(train_path), val_path.name: content_hash(val_path)}
    if args.init is not None:
        manifest, init = load_checkpoint(args.init)
        if manifest.get("task") != "pretrain":
            raise ConfigError(f"--init must be a pretraining checkpoint, got task {manifest.get('task')!r}")
        pre_model = ExchangerConfig.from_dict(manifest["model"])
        for key in ("d", "n_clusters", "heads", "stages", "ffn_expansion", "position_queries"):
            if getattr(pre_model, key) != getattr(cfg["model"], key):
                raise ConfigError(f"--init checkpoint has model.{key}={getattr(pre_model, key)}, "
                                  f"config has {getattr(cfg['model'], key)}")
        train_cfg.mode = "finetune-pretrained"
        hashes[Path(args.init).name] = content_hash(args.init)
    result = run_finetune(read_dataset(train_path), read_dataset(val_path), cfg["model"], train_cfg, init=init)
    with staged_output(args.out, args.force) as tmp:
        _train_outputs(tmp, result, "finetune", cfg["seed"], hashes)
    print(f"val mIoU {result.metrics.final('val', 'miou'):.2f}")


def _expected_hash(cfg, manifest: dict, channels: int) -> str:
    model = ExchangerConfig.from_dict(cfg["model"].to_dict())
    model.in_channels = channels
    task = manifest.get("task")
    if task not in ("pretrain", "finetune"):
        raise ConfigError(f"unknown checkpoint task {task!r}")
    train_cfg = TrainConfig.from_dict(cfg[task].to_dict())
    train_cfg.seed = cfg["seed"]
    train_cfg.mode = manifest.get("train", {}).get("mode", train_cfg.mode)
    return config_hash(model.to_dict(), train_cfg.to_dict())


def cmd_eval(args, cfg) -> None:
    if args.checkpoint is None or args.data is None:
        raise ConfigError("eval needs --checkpoint and --data <dataset file>")
    manifest, arrays = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    expected = _expected_hash(cfg, manifest, ds[0].values.shape[1] if len(ds) else 0)
    if manifest.get("config_hash") != expected:
        raise ConfigError(f"checkpoint config hash {manifest.get('config_hash')} does not match "
                          f"the given config ({expected})")
    model = model_from_checkpoint(manifest, arrays)
    if isinstance(model, DenseSegmenter):
        if ds.kind != "grid":
            raise DataError("a finetuned checkpoint evaluates grid datasets")
        metrics = evaluate_grid(model, ds, manifest["train"]["focal_gamma"])
    else:
        if ds.kind != "pixelset":
            raise DataError("a pretrained checkpoint evaluates pixel-set datasets")
        metrics = evaluate_pixelset(model, ds)
    with staged_output(args.out, args.force) as tmp:
        _write_json(tmp / "metrics.json", {"config_hash": expected, "metrics": metrics})
        _write_json(tmp / "manifest.json", _manifest("eval", expected, cfg["seed"],
                                                     {Path(args.data).name: content_hash(args.data),
                                                      Path(args.checkpoint).name: content_hash(args.checkpoint)}))
    print(json.dumps(metrics, sort_keys=True))


def cmd_bench(args, cfg) -> None:
    bench, model = cfg["bench"], cfg["model"]
    chash = config_hash(model.to_dict(), bench, {"seed": cfg["seed"]})
    records, slopes = run_scaling(make_encoders(model, cfg["seed"]), bench["T"], model,
                                  repeats=int(bench["repeats"]), tokens_per_call=int(bench["tokens_per_call"]),
                                  threads=args.threads or 1, seed=cfg["seed"])
    with staged_output(args.out, args.force) as tmp:
        (tmp / "bench.csv").write_text(records_to_csv(records, f"config_hash={chash}"))
        (tmp / "slopes.json").write_text(slopes_to_json(slopes, config_hash=chash) + "\n")
        _write_json(tmp / "manifest.json", _manifest("bench", chash, cfg["seed"], {}, bench=bench,
                                                     model=model.to_dict()))
    for name, s in slopes.items():
        print(f"{name}: wall-clock slope {s['wallclock_slope']:.3f}, FLOP slope {s['flops_slope']:.3f}")


def cmd_export_features(args, cfg) -> None:
    if args.checkpoint is None or args.data is None:
        raise ConfigError("export-features needs --checkpoint and --data <dataset file>")
    manifest, arrays = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(manifest, arrays)
    ds = read_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise DataError(f"--index {args.index} out of range for {len(ds)} samples")
    sample = ds[args.index]
    t, c = sample.values.shape[:2]
    # T x C x (pixels...) -> pixels x T x C
    x = np.ascontiguousarray(np.moveaxis(sample.values.reshape(t, c, -1), -1, 0))
    mask = sample.time.valid_mask[None]
    with ad.no_grad():
        _, stages = model.backbone.encode(x, sample.time.timestamps[None], mask, return_stages=True)
    blocks = {f"stage{i}": s.data.mean(axis=0) for i, s in enumerate(stages)}
    chash = manifest.get("config_hash")
    with staged_output(args.out, args.force) as tmp:
        save_checkpoint(tmp / "features.bin", {"task": "features", "config_hash": chash, "index": args.index,
                                               "valid_mask": sample.time.valid_mask.tolist()}, blocks)
        _write_json(tmp / "manifest.json", _manifest("export-features", chash, cfg["seed"],
                                                     {Path(args.data).name: content_hash(args.data),
                                                      Path(args.checkpoint).name: content_hash(args.checkpoint)},
                                                     index=args.index,
                                                     shapes={k: list(v.shape) for k, v in blocks.items()}))
    print(" ".join(f"{k}:{v.shape[0]}x{v.shape[1]}" for k, v in blocks.items()))


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate synthetic pixel-set and grid datasets"),
    "pretrain": (cmd_pretrain, "train the encoder on pixel sets"),
    "finetune": (cmd_finetune, "train per-pixel segmentation on grids"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset file"),
    "bench": (cmd_bench, "time exchanger against self-attention over sequence lengths"),
    "export-features": (cmd_export_features, "dump per-stage T x d features of one sample"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="exchanger", description="Temporal encoder workflow for satellite image time series.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory (created atomically)")
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
        p.add_argument("--threads", type=int, help="BLAS threads (default: $EXCHANGER_THREADS)")
        if name in ("pretrain", "finetune", "eval", "export-features"):
            p.add_argument("--data", help="gen-data directory, or a dataset file for eval/export-features")
        if name == "finetune":
            p.add_argument("--init", help="pretraining checkpoint to initialise the backbone from")
        if name in ("eval", "export-features"):
            p.add_argument("--checkpoint", help="checkpoint file")
        if name == "export-features":
            p.add_argument("--index", type=int, default=0, help="sample index in the dataset")
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "exchanger: error: a command is required")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        threads = _resolve_threads(args.threads)
        limit = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
        with limit:
            COMMANDS[args.command][0](args, cfg)
    except ExchangerError as exc:
        print(f"error: {exc}" if not isinstance(exc, UsageError) else str(exc), file=sys.stderr)
        return exc.exit_code
    except (TypeError, KeyError) as exc:
        # malformed config values surface as constructor errors
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    logging.basicConfig(level=os.environ.get("EXCHANGER_LOG", "WARNING"), format="%(levelname)s %(message)s")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
