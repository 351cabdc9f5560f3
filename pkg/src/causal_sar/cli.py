"""Command-line entry point: ``causal-sar <command> ...`` (or ``python -m causal_sar``).

Every command reads an optional JSON config (``--config``), applies
command-line overrides on top, and writes the resolved config to
``<out>/config_echo.json``.  Feeding that echo back through ``--config``
reproduces the run.

Config schema (all sections optional)::

    {
      "seed": 0,
      "train": {TrainConfig fields},
      "fem": {BackboneConfig fields}, "sam": {...} | null | "same",
      "use_sam": true,
      "data": {SyntheticSpec fields} | {"manifest": "<dir>"},
      "crops": [8, 16, 24, 32], "lambdas": [...], "mode": "...", "split": "test"
    }

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    ManifestError,
    SyntheticSpec,
    center_crop_mask,
    export_dataset,
    generate_synthetic,
    load_manifest,
)
from .metrics import discriminability, evaluate, export_embeddings, format_accuracy, pooled_features
from .model import PREDICT_MODES, GeometryError, load_checkpoint, save_checkpoint
from .nn import BackboneConfig
from .train import TrainConfig, TrainingAborted, train

log = logging.getLogger("causal_sar")

DEFAULT_CROPS = (8, 16, 24, 32)
DEFAULT_LAMBDAS = (0.001, 0.01, 0.1, 0.5, 1.0)


class UsageError(Exception):
    """Bad flags, unreadable inputs or an invalid config (exit code 2)."""


# ---------------------------------------------------------------- config resolution


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{p}: expected a JSON object")
    return data


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


_TRAIN_FLAGS = {
    "lam": "lam", "lr": "lr", "epochs": "epochs", "batch_size": "batch_size",
    "val_fraction": "val_fraction", "train_mode": "predict_mode", "optimizer": "optimizer",
}


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge the config file (if any) with command-line flags; flags win."""
    cfg = _read_json(args.config) if args.config else {}
    cfg = json.loads(json.dumps(cfg))  # detached copy
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)

    train_cfg = dict(cfg.get("train", {}))
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            train_cfg[key] = value
    train_cfg["seed"] = cfg["seed"]
    cfg["train"] = train_cfg

    data_cfg = dict(cfg.get("data", {}))
    if getattr(args, "data", None):
        data_cfg = {"manifest": str(args.data)}
    for flag in ("rho", "rho_test", "n_train", "n_test", "image_size"):
        value = getattr(args, flag, None)
        if value is not None:
            if "manifest" in data_cfg:
                raise UsageError(f"--{flag.replace('_', '-')} only applies to synthetic data")
            data_cfg[flag] = value
    cfg["data"] = data_cfg

    if getattr(args, "no_sam", False):
        cfg["use_sam"] = False
    for flag in ("crops", "lambdas", "mode", "split"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[flag] = value
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def _backbones(cfg: dict, image_size: int):
    try:
        fem = BackboneConfig.from_dict(cfg["fem"]) if "fem" in cfg else BackboneConfig(input_size=image_size)
        sam = cfg.get("sam", "same")
        sam = BackboneConfig.from_dict(sam) if isinstance(sam, dict) else sam
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid backbone config: {exc}") from exc
    if sam is not None and sam != "same" and not isinstance(sam, BackboneConfig):
        raise UsageError("'sam' must be a backbone config, null or \"same\"")
    return fem, sam


def _synthetic_spec(cfg: dict) -> SyntheticSpec:
    try:
        return SyntheticSpec.from_dict(cfg["data"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic data spec: {exc}") from exc


def load_data(cfg: dict) -> Dataset:
    if "manifest" in cfg["data"]:
        try:
            return load_manifest(cfg["data"]["manifest"])
        except ManifestError as exc:
            raise UsageError(str(exc)) from exc
    return generate_synthetic(_synthetic_spec(cfg), cfg["seed"])


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _echo(out: Path, command: str, cfg: dict) -> None:
    payload = {"command": command, **cfg}
    (out / "config_echo.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_ckpt(path):
    if not path or not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _check_geometry(model, ds: Dataset) -> None:
    got = (1, ds.image_size, ds.image_size)
    want = (model.fem_cfg.input_channels, model.fem_cfg.input_size, model.fem_cfg.input_size)
    if got != want:
        raise UsageError(f"model expects input {want}, data has {got}")
    if ds.num_classes != model.num_classes:
        raise UsageError(f"model has {model.num_classes} classes, data has {ds.num_classes}")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _mode(cfg: dict, model) -> str:
    mode = cfg.get("mode") or cfg["train"].get("predict_mode", "interventional")
    if mode not in PREDICT_MODES:
        raise UsageError(f"mode must be one of {PREDICT_MODES}")
    return mode if model.has_sam else "baseline"


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    if args.spec:
        cfg["data"] = {**_read_json(args.spec), **{k: v for k, v in cfg["data"].items() if k != "manifest"}}
    if "manifest" in cfg["data"]:
        raise UsageError("generate builds synthetic data; drop --data/manifest")
    spec = _synthetic_spec(cfg)
    out = _out_dir(args)
    ds = generate_synthetic(spec, cfg["seed"])
    export_dataset(ds, out, spec)
    cfg["data"] = spec.to_dict()
    _echo(out, "generate", cfg)
    print(f"wrote {len(ds.split('train'))} train / {len(ds.split('test'))} test images to {out}")
    return 0


def _fit(cfg: dict, ds: Dataset, log_path=None):
    tc = _train_config(cfg)
    fem, sam = _backbones(cfg, ds.image_size)
    use_sam = bool(cfg.get("use_sam", True))
    try:
        return train(tc, ds.split("train"), fem, sam, use_sam=use_sam, log_path=log_path)
    except GeometryError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _train_config(cfg)  # fail fast, before any data work
    ds = load_data(cfg)
    out = _out_dir(args)
    _echo(out, "train", cfg)
    result = _fit(cfg, ds, out / "train_log.csv")
    save_checkpoint(result.model, out / "best.ckpt", extra={"best_epoch": result.best_epoch})
    mode = _mode(cfg, result.model)
    report = evaluate(result.model, ds.split(cfg.get("split", "test")), mode)
    report.write_json(out / "eval.json")
    print(f"best epoch {result.best_epoch}, val {100 * result.best_val_acc:.3f}%")
    print(report.summary())
    return 0


def _export_features(model, ds: Dataset, space: str, out: Path) -> None:
    feats = pooled_features(model, ds, space)
    export_embeddings(feats, [ds.class_names[k] for k in ds.labels], out / "embeddings.csv")
    rep = discriminability(feats, ds.labels, space)
    (out / "discriminability.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n", encoding="utf-8")


def _space(model) -> str:
    return "interventional" if model.has_sam else "baseline"


def cmd_eval(args) -> int:
    model = _load_ckpt(args.checkpoint)
    cfg = resolve_config(args)
    cfg["checkpoint"] = str(args.checkpoint)
    ds = load_data(cfg)
    _check_geometry(model, ds)
    out = _out_dir(args)
    _echo(out, "eval", cfg)
    split = ds.split(cfg.get("split", "test"))
    report = evaluate(model, split, _mode(cfg, model))
    report.write_json(out / "eval.json")
    report.write_confusion_csv(out / "confusion.csv")
    if args.export_features:
        _export_features(model, split, args.space or _space(model), out)
    print(report.summary())
    return 0


def cmd_export_features(args) -> int:
    model = _load_ckpt(args.checkpoint)
    cfg = resolve_config(args)
    cfg["checkpoint"] = str(args.checkpoint)
    ds = load_data(cfg)
    _check_geometry(model, ds)
    out = _out_dir(args)
    _echo(out, "export-features", cfg)
    _export_features(model, ds.split(cfg.get("split", "test")), args.space or _space(model), out)
    return 0


def _crop_accuracy(cfg: dict, ds: Dataset, crop: int) -> float:
    masked = ds.with_images(center_crop_mask(ds.images, crop))
    result = _fit(cfg, masked)
    return evaluate(result.model, masked.split("test"), _mode(cfg, result.model)).accuracy


def cmd_crop_experiment(args) -> int:
    cfg = resolve_config(args)
    crops = list(cfg.get("crops") or DEFAULT_CROPS)
    model = _load_ckpt(args.checkpoint) if args.checkpoint else None
    _train_config(cfg)
    ds = load_data(cfg)
    if model is not None:
        _check_geometry(model, ds)
        cfg["checkpoint"] = str(args.checkpoint)
    bad = [c for c in crops if not 0 < c <= ds.image_size]
    if bad:
        raise UsageError(f"crops {bad} must lie in (0, {ds.image_size}]")
    out = _out_dir(args)
    cfg["crops"] = crops
    _echo(out, "crop-experiment", cfg)
    rows = []
    for crop in crops:
        if model is not None:
            test = ds.split(cfg.get("split", "test"))
            acc = evaluate(model, test.with_images(center_crop_mask(test.images, crop)), _mode(cfg, model)).accuracy
        else:
            acc = _crop_accuracy(cfg, ds, crop)
        log.info("crop %d: %.3f", crop, acc)
        rows.append((crop, format_accuracy(acc)))
    _write_rows(out / "crop_accuracy.csv", ["crop", "accuracy"], rows)
    return 0


def _sweep_one(cfg: dict, lam: float, out: str | None) -> float:
    cfg = json.loads(json.dumps(cfg))
    cfg["train"]["lam"] = lam
    ds = load_data(cfg)
    log_path = None
    if out is not None:
        run_dir = Path(out) / f"lambda_{lam:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.csv"
    result = _fit(cfg, ds, log_path)
    report = evaluate(result.model, ds.split(cfg.get("split", "test")), _mode(cfg, result.model))
    if out is not None:
        report.write_json(run_dir / "eval.json")
    return report.accuracy


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    lambdas = sorted(cfg.get("lambdas") or DEFAULT_LAMBDAS)
    if any(lam < 0 for lam in lambdas):
        raise UsageError("all lambdas must be >= 0")
    _train_config(cfg)
    if "manifest" not in cfg["data"]:
        _synthetic_spec(cfg)
    out = _out_dir(args)
    cfg["lambdas"] = lambdas
    _echo(out, "sweep", cfg)
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            accs = list(pool.map(_sweep_one, [cfg] * len(lambdas), lambdas, [str(out)] * len(lambdas)))
    else:
        accs = [_sweep_one(cfg, lam, str(out)) for lam in lambdas]
    _write_rows(out / "sweep.csv", ["lambda", "accuracy"], [(f"{lam:g}", format_accuracy(a)) for lam, a in zip(lambdas, accs)])
    return 0


# ---------------------------------------------------------------- argument parsing


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (data and training)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lambda", dest="lam", type=float, help="regulariser weight (default 0.1)")
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--val-fraction", type=float)
    g.add_argument("--train-mode", choices=PREDICT_MODES, help="prediction path used for validation")
    g.add_argument("--optimizer", choices=("adam", "sgd"))
    g.add_argument("--no-sam", action="store_true", help="train the plain baseline network (needs lambda 0)")


def _data_flags(p: argparse.ArgumentParser, manifest: bool = True) -> None:
    g = p.add_argument_group("data")
    if manifest:
        g.add_argument("--data", help="directory holding manifest.csv (default: synthetic from config)")
    g.add_argument("--rho", type=float, help="train background/label correlation")
    g.add_argument("--rho-test", type=float)
    g.add_argument("--n-train", type=int, help="train samples per class")
    g.add_argument("--n-test", type=int, help="test samples per class")
    g.add_argument("--image-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="causal-sar", description="Background-debiased classification with a causal-interventional regulariser.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic confounded dataset")
    p.add_argument("--spec", help="JSON file with synthetic spec fields")
    _data_flags(p, manifest=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a model and evaluate it on the test split")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--mode", choices=PREDICT_MODES, help="prediction path for the final evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    p.add_argument("--mode", choices=PREDICT_MODES)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--export-features", action="store_true", help="also write embeddings and discriminability")
    p.add_argument("--space", choices=("baseline", "interventional"), help="feature space for --export-features")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crop-experiment", parents=[common], help="accuracy versus centre-crop size")
    p.add_argument("--checkpoint", help="evaluate this model under test-time crops instead of training per crop")
    p.add_argument("--crops", type=_int_list, help="comma-separated crop sizes (default 8,16,24,32)")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--mode", choices=PREDICT_MODES)
    p.set_defaults(func=cmd_crop_experiment)

    p = sub.add_parser("sweep", parents=[common], help="test accuracy versus regulariser weight")
    p.add_argument("--lambdas", type=_float_list, help="comma-separated weights (default 0.001,0.01,0.1,0.5,1)")
    p.add_argument("--parallel", type=int, default=1, help="independent trainings to run at once")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--mode", choices=PREDICT_MODES)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-features", parents=[common], help="2-D embedding CSV and discriminability JSON")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--space", choices=("baseline", "interventional"))
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    for name in ("seed", "out", "config", "threads", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    limiter = nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter, np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
