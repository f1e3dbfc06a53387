"""Command-line entry point: dataset preparation, training, evaluation,
prediction, and verification.

Configuration is resolved in three layers: profile defaults (``--profile
desk`` or ``paper``), then a flat key/value config file (``--config``), then
command-line flags. The effective configuration is echoed into the output
directory so any run can be reproduced exactly.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
divergence, 4 failed verification checks.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .data import (AugmentConfig, DataError, DatasetIndex, SampleRecord,
                   degrade, load_dataset, resize, save_dataset, synth_dataset,
                   _read_grayscale)
from .metrics import curves, evaluate_dataset
from .network import NetworkSpec, count_params_flops, load_checkpoint, save_checkpoint
from .training import (TrainConfig, TrainingDiverged, predict_all_stages,
                       predict_probability, run_ablation, train)
from .verification import run_verification

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # Flag misuse is a configuration error (exit 1), not argparse's default 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


PROFILES: Dict[str, Dict[str, str]] = {
    "desk": {
        "network.input_size": "64x64",
        "network.base_channels": "8",
        "network.block_kind": "esk",
        "network.deep_supervision": "true",
        "train.epochs": "24",
        "train.batch_size": "4",
        "train.early_stop_patience": "6",
        "augment.enabled": "false",
        "augment.multiplier": "20",
        "data.synth_n": "40",
        "data.folds": "4",
    },
    "paper": {
        "network.input_size": "384x384",
        "network.base_channels": "64",
        "network.block_kind": "esk",
        "network.deep_supervision": "true",
        "train.epochs": "50",
        "train.batch_size": "12",
        "train.early_stop_patience": "5",
        "augment.enabled": "true",
        "augment.multiplier": "20",
        "data.synth_n": "40",
        "data.folds": "4",
    },
}

DEFAULTS: Dict[str, str] = {
    "network.reduction_dim": "32",
    "network.dilation": "3",
    "train.lr_initial": "0.001",
    "train.lr_halving_period": "10",
    "train.lr_floor": "0.0001",
    "train.validation_fraction": "0.2",
    "train.seed": "0",
    "eval.n_thresholds": "101",
    "eval.threshold": "0.5",
}


def parse_config_file(path: str) -> Dict[str, str]:
    """Flat ``section.key = value`` lines; # starts a comment."""
    values: Dict[str, str] = {}
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return values


def resolve_config(profile: str, config_path: Optional[str],
                   overrides: Dict[str, str]) -> Dict[str, str]:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; pick from {sorted(PROFILES)}")
    resolved = dict(DEFAULTS)
    resolved.update(PROFILES[profile])
    resolved["profile"] = profile
    if config_path:
        resolved.update(parse_config_file(config_path))
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    return resolved


def _as_bool(value: str) -> bool:
    if value.lower() in ("1", "true", "yes", "on"):
        return True
    if value.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _as_size(value: str) -> tuple:
    for sep in ("x", ","):
        if sep in value:
            h, w = value.split(sep)
            return int(h), int(w)
    side = int(value)
    return side, side


def network_spec_from(cfg: Dict[str, str]) -> NetworkSpec:
    try:
        return NetworkSpec(
            input_size=_as_size(cfg["network.input_size"]),
            base_channels=int(cfg["network.base_channels"]),
            block_kind=cfg["network.block_kind"],
            deep_supervision=_as_bool(cfg["network.deep_supervision"]),
            reduction_dim=int(cfg["network.reduction_dim"]),
            dilation=int(cfg["network.dilation"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid network configuration: {exc}") from exc


def train_config_from(cfg: Dict[str, str]) -> TrainConfig:
    try:
        return TrainConfig(
            lr_initial=float(cfg["train.lr_initial"]),
            lr_halving_period=int(cfg["train.lr_halving_period"]),
            lr_floor=float(cfg["train.lr_floor"]),
            epochs=int(cfg["train.epochs"]),
            batch_size=int(cfg["train.batch_size"]),
            validation_fraction=float(cfg["train.validation_fraction"]),
            early_stop_patience=int(cfg["train.early_stop_patience"]),
            seed=int(cfg["train.seed"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from exc


def augment_config_from(cfg: Dict[str, str]) -> Optional[AugmentConfig]:
    if not _as_bool(cfg.get("augment.enabled", "false")):
        return None
    return AugmentConfig(multiplier=int(cfg.get("augment.multiplier", "20")))


def echo_config(cfg: Dict[str, str], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective_config.txt")
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


def _load_index(args, cfg: Dict[str, str]) -> DatasetIndex:
    folds = int(cfg.get("data.folds", "4"))
    seed = int(cfg["train.seed"])
    if getattr(args, "synthetic", False):
        n = int(cfg.get("data.synth_n", "40"))
        size = _as_size(cfg["network.input_size"])[0]
        return synth_dataset(n, size=size, seed=seed, k=folds)
    if not getattr(args, "dataset", None):
        raise ConfigError("either --dataset or --synthetic is required")
    return load_dataset(args.dataset, k=folds, seed=seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args.profile, args.config, {"train.seed": args.seed})
    n = args.n if args.n is not None else int(cfg.get("data.synth_n", "40"))
    size = args.size if args.size is not None else _as_size(cfg["network.input_size"])[0]
    index = synth_dataset(n, size=size, seed=int(cfg["train.seed"]),
                          k=int(cfg.get("data.folds", "4")))
    save_dataset(index, args.out)
    echo_config(cfg, args.out)
    print(f"wrote {n} synthetic samples ({size}x{size}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.profile, args.config, {"train.seed": args.seed})
    spec = network_spec_from(cfg)
    config = train_config_from(cfg)
    augment_cfg = augment_config_from(cfg)
    index = _load_index(args, cfg)
    echo_config(cfg, args.out)

    checkpoint, log = train(spec, index, args.fold, config, augment_cfg,
                            progress=print)
    ckpt_path = os.path.join(args.out, "checkpoint.eskn")
    save_checkpoint(ckpt_path, checkpoint)
    with open(os.path.join(args.out, "trainlog.tsv"), "w") as fh:
        fh.write(log.to_text())
    with open(os.path.join(args.out, "folds.txt"), "w") as fh:
        fh.write(index.manifest_text())
    params, flops = count_params_flops(spec)
    print(f"trained fold {args.fold}: best epoch {log.best_epoch} "
          f"({log.stop_reason}); {params} parameters, {flops} forward FLOPs")
    print(f"checkpoint -> {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args.profile, args.config, {"train.seed": args.seed})
    try:
        checkpoint = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    spec = checkpoint.spec
    index = _load_index(args, cfg)
    echo_config(cfg, args.out)

    ids = index.test_ids(args.fold) if args.fold is not None else sorted(index.records)
    preds, gts = {}, {}
    for i in ids:
        rec = index.records[i]
        if rec.image.shape[1:] != tuple(spec.input_size):
            rec = resize(rec, spec.input_size)
        if args.degrade:
            rec = degrade(rec, seed=int(cfg["train.seed"]))
        preds[i] = predict_probability(spec, checkpoint.params, rec.image)
        gts[i] = rec.mask

    threshold = float(cfg["eval.threshold"])
    report = evaluate_dataset(preds, gts, threshold=threshold, threads=args.threads)
    curve = curves(preds, gts, n_thresholds=int(cfg["eval.n_thresholds"]))

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics_report.csv"), "w") as fh:
        fh.write(report.to_text())
    with open(os.path.join(args.out, "curves.csv"), "w") as fh:
        fh.write(curve.to_text())

    agg = report.aggregate("All")
    line = "  ".join(f"{m} {agg.mean[m]:.2f}±{agg.std[m]:.2f}"
                     for m in ("jaccard", "precision", "recall", "specificity", "dice"))
    print(f"{len(ids)} images @ threshold {threshold}: {line}")
    print(f"ROC AUC {curve.auc:.4f}")
    return EXIT_OK


def _save_gray(path: str, values: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8),
                    mode="L").save(path)


def _resize_plane(plane: np.ndarray, target) -> np.ndarray:
    from .data import _resize_bilinear
    return _resize_bilinear(plane, target)


def cmd_predict(args) -> int:
    cfg = resolve_config(args.profile, args.config, {"train.seed": args.seed})
    try:
        checkpoint = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    spec = checkpoint.spec
    if args.all_stages and not spec.deep_supervision:
        raise ConfigError("checkpoint was trained without deep supervision; "
                          "--all-stages has only one stage to write")
    os.makedirs(args.out, exist_ok=True)
    threshold = float(cfg["eval.threshold"])

    for path in args.images:
        raw = _read_grayscale(path) / 255.0
        original = raw.shape
        plane = raw if original == tuple(spec.input_size) else \
            _resize_plane(raw, spec.input_size)
        image = np.clip(plane, 0.0, 1.0).astype(np.float32)[None]
        stem = os.path.splitext(os.path.basename(path))[0]

        stages = predict_all_stages(spec, checkpoint.params, image)
        final = stages[-1][0]
        if final.shape != original:
            final = _resize_plane(final, original)
        _save_gray(os.path.join(args.out, f"{stem}_prob.png"), final)
        _save_gray(os.path.join(args.out, f"{stem}_mask.png"),
                   (final >= threshold).astype(np.float32))
        if args.all_stages:
            for stage_index, stage in enumerate(stages, start=1):
                plane_out = stage[0]
                if plane_out.shape != original:
                    plane_out = _resize_plane(plane_out, original)
                _save_gray(os.path.join(args.out, f"{stem}_stage{stage_index}.png"),
                           plane_out)
        print(f"{path} -> {stem}_prob.png, {stem}_mask.png"
              + (f", 5 stage maps" if args.all_stages else ""))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_verification(seeds=args.seeds, corrupt=args.corrupt_op)
    width = max(len(r.name) for r in results)
    failures = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.detail}")
        if not r.passed:
            failures.append(r.name)
    if failures:
        print(f"{len(failures)} check(s) failed: {', '.join(failures)}")
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.profile, args.config, {"train.seed": args.seed})
    spec = network_spec_from(cfg)
    config = train_config_from(cfg)
    augment_cfg = augment_config_from(cfg)
    index = _load_index(args, cfg)
    echo_config(cfg, args.out)

    report = run_ablation(index, spec, config, augment_cfg, progress=print)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation_report.tsv"), "w") as fh:
        fh.write(report.to_text())
    print(report.to_text())
    print(f"fold manifest sha256: {report.variants[0].manifest_sha256}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key/value configuration file")
    sub.add_argument("--seed", help="training / data seed (overrides config)")
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument("--profile", default="desk", choices=sorted(PROFILES),
                     help="configuration preset")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads for per-image evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="esknet",
                     description="Selective-kernel attention U-net toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="emit a synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--size", type=int, help="square image extent")
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("train", help="train one fold")
    _add_common(p)
    p.add_argument("--dataset", help="dataset root (images/ + masks/)")
    p.add_argument("--synthetic", action="store_true",
                   help="train on generated synthetic data")
    p.add_argument("--fold", type=int, default=0, help="held-out fold index")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset root (images/ + masks/)")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--fold", type=int, help="restrict to one fold's test split")
    p.add_argument("--degrade", action="store_true",
                   help="apply multiplicative noise + blur before evaluating")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("predict", help="segment image files")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--all-stages", action="store_true",
                   help="also write every supervision stage's map")
    p.add_argument("images", nargs="+", help="grayscale PNG files")
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("verify", help="run the self-check suite")
    _add_common(p)
    p.add_argument("--seeds", type=int, default=5,
                   help="random seeds per gradient check")
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)   # negative-control hook
    p.set_defaults(func=cmd_verify)

    p = commands.add_parser("ablate", help="train and score the component ladder")
    _add_common(p)
    p.add_argument("--dataset", help="dataset root (images/ + masks/)")
    p.add_argument("--synthetic", action="store_true")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
