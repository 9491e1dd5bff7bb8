"""Command-line front end: synth, train, eval, gradcheck, stream.

Every option can come from the command line or from a JSON config file
(--config); explicit flags override file values, and the fully resolved
configuration is written next to each run's outputs as resolved_config.json,
so any run can be reproduced byte-identically from that file alone.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 I/O error, 4 training divergence, 5 shape or consistency error.

The STARSEG_WORKERS environment variable caps the torch intra-op worker
count (default: all available cores). Outputs are byte-reproducible at a
fixed worker count.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    DivergenceError,
    EmptyDatasetError,
    GeometryMismatchError,
    MaskValueError,
    StarsegError,
)
from .grid import BinaryMask, ProbabilityMap, load_image_png, save_mask_png
from .losses import (
    LossWeights,
    bce_loss,
    build_star_geometry,
    finite_difference_check,
    hybrid_loss,
    topological_loss,
)
from .net import NetworkConfig, TrainingConfig, load_checkpoint, train
from .phantom import (
    MANIFEST_NAME,
    DegradationConfig,
    PhantomConfig,
    generate_dataset,
    manifest_samples,
)
from .stream import run_stream

RESOLVED_CONFIG_NAME = "resolved_config.json"
CHECKPOINT_NAME = "checkpoint.bin"
HISTORY_NAME = "history.json"
STREAM_STATS_NAME = "stream_stats.json"
GRADCHECK_RESULT_NAME = "gradcheck.json"
WORKERS_ENV = "STARSEG_WORKERS"

GRADCHECK_TOLERANCE = 1e-3

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_SHAPE = 5

# Seed-domain tag for gradcheck instances (phantom uses 1-2, losses 3, net 4).
_DOMAIN_GRADCHECK = 5

_SYNTH_DEFAULTS = {
    "out": None,
    "count": 250,
    "seed": 0,
    "test_fraction": 0.2,
    "val_fraction": 0.2,
    "phantom": {},
    "degradation": {},
    "quiet": False,
}

_TRAIN_DEFAULTS = {
    "out": None,
    "data": None,
    "alpha": 1.0,
    "beta": 2.0,
    "learning_rate": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "epochs": 50,
    "batch_patches": 8,
    "seed": 0,
    "validation_fraction": 0.2,
    "early_stop_patience": 10,
    "ray_stride": 1,
    "strip_width": 64,
    "levels": 4,
    "base_channels": 16,
    "quiet": False,
}

_EVAL_DEFAULTS = {
    "out": None,
    "checkpoint": None,
    "data": None,
    "split": "test",
    "quiet": False,
}

_GRADCHECK_DEFAULTS = {
    "out": None,
    "seed": 0,
    "instances": 20,
    "size": 16,
    "trials": 64,
    "step": 1e-5,
    "inject_gradient_error": False,
    "quiet": False,
}

_STREAM_DEFAULTS = {
    "out": None,
    "checkpoint": None,
    "frames": None,
    "warmup": 0,
    "save_masks": False,
    "quiet": False,
}


def _load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: config file is not valid JSON ({exc})")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return data


def _resolve(args, defaults: dict) -> dict:
    """Merge flag values over config-file values over built-in defaults."""
    file_cfg = {}
    if getattr(args, "config", None) is not None:
        file_cfg = _load_config_file(args.config)
    unknown = set(file_cfg) - set(defaults) - {"command"}
    if unknown:
        raise ConfigError(
            f"config file has unknown keys: {', '.join(sorted(unknown))}"
        )
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    return resolved


def _require(resolved: dict, command: str, *keys) -> None:
    for key in keys:
        if resolved[key] is None:
            flag = "--" + key.replace("_", "-")
            raise ConfigError(f"{command}: {flag} is required")


def _write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    payload = dict(resolved)
    payload["command"] = command
    payload["out"] = str(payload["out"])
    Path(out_dir, RESOLVED_CONFIG_NAME).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _make_config(cls, values: dict):
    """Build a config dataclass from a JSON-shaped dict (lists allowed)."""
    coerced = {
        key: tuple(value) if isinstance(value, list) else value
        for key, value in values.items()
    }
    try:
        config = cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}")
    return config


def _find_manifest(data) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found at {path}")
    return path


def _say(resolved: dict, message: str) -> None:
    if not resolved["quiet"]:
        print(message, flush=True)


# --- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    resolved = _resolve(args, _SYNTH_DEFAULTS)
    _require(resolved, "synth", "out")
    phantom = _make_config(PhantomConfig, resolved["phantom"])
    degradation = _make_config(DegradationConfig, resolved["degradation"])
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(
        count=resolved["count"],
        phantom=phantom,
        degradation=degradation,
        seed=resolved["seed"],
        out_dir=out,
        test_fraction=resolved["test_fraction"],
        val_fraction=resolved["val_fraction"],
    )
    resolved["phantom"] = asdict(phantom)
    resolved["degradation"] = asdict(degradation)
    _write_resolved(out, "synth", resolved)
    counts = {
        split: len(manifest_samples(manifest, split))
        for split in ("train", "val", "test")
    }
    _say(
        resolved,
        f"wrote {resolved['count']} samples to {out} "
        f"(train {counts['train']}, val {counts['val']}, test {counts['test']})",
    )
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    _require(resolved, "train", "out", "data")
    manifest_path = _find_manifest(resolved["data"])
    try:
        weights = LossWeights(alpha=resolved["alpha"], beta=resolved["beta"])
    except ValueError as exc:
        raise ConfigError(str(exc))
    net_config = NetworkConfig(
        levels=resolved["levels"], base_channels=resolved["base_channels"]
    )
    train_config = TrainingConfig(
        loss_weights=weights,
        learning_rate=resolved["learning_rate"],
        beta1=resolved["beta1"],
        beta2=resolved["beta2"],
        eps=resolved["eps"],
        epochs=resolved["epochs"],
        batch_patches=resolved["batch_patches"],
        seed=resolved["seed"],
        validation_fraction=resolved["validation_fraction"],
        early_stop_patience=resolved["early_stop_patience"],
        ray_stride=resolved["ray_stride"],
        strip_width=resolved["strip_width"],
    )
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = train(
        manifest_path, net_config, train_config, quiet=resolved["quiet"]
    )
    checkpoint.save(out / CHECKPOINT_NAME)
    Path(out, HISTORY_NAME).write_text(
        json.dumps(checkpoint.history, indent=2, sort_keys=True) + "\n"
    )
    _write_resolved(out, "train", resolved)
    summary = (
        f"trained {checkpoint.history['epochs_run']} epochs, "
        f"best epoch {checkpoint.history['best_epoch']}"
    )
    if checkpoint.history["val_dice"]:
        best = checkpoint.history["val_dice"][checkpoint.history["best_epoch"]]
        summary += f", best val dice {best:.4f}"
    _say(resolved, summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = _resolve(args, _EVAL_DEFAULTS)
    _require(resolved, "eval", "out", "checkpoint", "data")
    manifest_path = _find_manifest(resolved["data"])
    checkpoint_path = Path(resolved["checkpoint"])
    if not checkpoint_path.is_file():
        raise FileNotFoundError(f"checkpoint not found at {checkpoint_path}")
    report = metrics.evaluate_dataset(
        checkpoint_path, manifest_path, resolved["split"]
    )
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report(report, out / metrics.REPORT_NAME)
    _write_resolved(out, "eval", resolved)
    if not resolved["quiet"]:
        print(f"split '{resolved['split']}', {len(report['per_image'])} images:")
        for key in sorted(report["aggregates"]):
            value = report["aggregates"][key]
            text = "n/a" if value is None else f"{value:.6g}"
            print(f"  {key:>24}: {text}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    resolved = _resolve(args, _GRADCHECK_DEFAULTS)
    if resolved["instances"] < 1 or resolved["size"] < 2 or resolved["trials"] < 1:
        raise ConfigError("gradcheck needs instances >= 1, size >= 2, trials >= 1")
    corrupt = bool(resolved["inject_gradient_error"])

    def wrap(fn):
        if not corrupt:
            return fn

        def corrupted(pred, truth):
            result = fn(pred, truth)
            return type(result)(value=result.value, gradient=result.gradient * 1.1)

        return corrupted

    size = resolved["size"]
    worst = {"bce": 0.0, "topological": 0.0, "hybrid": 0.0}
    for k in range(resolved["instances"]):
        rng = np.random.Generator(
            np.random.Philox(
                np.random.SeedSequence((resolved["seed"], _DOMAIN_GRADCHECK, k))
            )
        )
        truth = BinaryMask(
            (rng.random((size, size)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        )
        pred = ProbabilityMap(rng.uniform(0.0, 1.0, (size, size)))
        geom = build_star_geometry(truth)
        cases = {
            "bce": (wrap(bce_loss), None),
            "topological": (wrap(lambda p, t: topological_loss(p, t, geom)), geom),
            "hybrid": (wrap(lambda p, t: hybrid_loss(p, t, geom=geom)), geom),
        }
        for name, (fn, case_geom) in cases.items():
            err = finite_difference_check(
                fn,
                pred,
                truth,
                step=resolved["step"],
                trials=resolved["trials"],
                seed=resolved["seed"] + k,
                geom=case_geom,
            )
            worst[name] = max(worst[name], err)

    passed = all(err <= GRADCHECK_TOLERANCE for err in worst.values())
    if not resolved["quiet"] or not passed:
        stream_out = sys.stdout if passed else sys.stderr
        for name in ("bce", "topological", "hybrid"):
            print(
                f"{name:>12}: max relative error {worst[name]:.3e} "
                f"(tolerance {GRADCHECK_TOLERANCE:.0e})",
                file=stream_out,
            )
        print("PASS" if passed else "FAIL", file=stream_out)
    if resolved["out"] is not None:
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        result = {
            "tolerance": GRADCHECK_TOLERANCE,
            "max_errors": worst,
            "passed": passed,
        }
        Path(out, GRADCHECK_RESULT_NAME).write_text(
            json.dumps(result, indent=2, sort_keys=True) + "\n"
        )
        _write_resolved(out, "gradcheck", resolved)
    return EXIT_OK if passed else EXIT_GRADCHECK_FAILED


def cmd_stream(args) -> int:
    resolved = _resolve(args, _STREAM_DEFAULTS)
    _require(resolved, "stream", "out", "checkpoint", "frames")
    checkpoint_path = Path(resolved["checkpoint"])
    if not checkpoint_path.is_file():
        raise FileNotFoundError(f"checkpoint not found at {checkpoint_path}")
    frames_dir = Path(resolved["frames"])
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frame directory not found at {frames_dir}")
    paths = sorted(frames_dir.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {frames_dir}")
    checkpoint = load_checkpoint(checkpoint_path)
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)

    def on_result(name, prob_map, mask):
        if resolved["save_masks"]:
            save_mask_png(mask, out / f"{name}_mask.png")
            trace = metrics.extract_boundaries(mask)
            Path(out, f"{name}_trace.json").write_text(
                json.dumps(
                    {
                        "epithelium_rows": trace.epithelium_rows.tolist(),
                        "dm_rows": trace.dm_rows.tolist(),
                    },
                    indent=2,
                    sort_keys=True,
                )
                + "\n"
            )

    stats = run_stream(
        checkpoint,
        ((path.stem, load_image_png(path)) for path in paths),
        warmup=resolved["warmup"],
        on_result=on_result,
    )
    Path(out, STREAM_STATS_NAME).write_text(
        json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    _write_resolved(out, "stream", resolved)
    _say(
        resolved,
        f"{stats.frame_count} frames: mean {stats.mean_latency * 1e3:.2f} ms, "
        f"p95 {stats.p95_latency * 1e3:.2f} ms, {stats.frequency:.2f} Hz",
    )
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=None, help="master random seed")
    sub.add_argument("--config", default=None, help="JSON config file; flags override it")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument(
        "--quiet", action="store_true", default=None, help="suppress progress output"
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="starseg",
        description=(
            "Topology-regularized corneal layer segmentation: synthetic data, "
            "training, evaluation, gradient checking, and streaming inference."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common_flags(p)
    p.add_argument("--count", type=int, default=None, help="number of image/label pairs")
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--val-fraction", type=float, default=None)

    p = sub.add_parser("train", help="train a segmentation model")
    _common_flags(p)
    p.add_argument("--data", default=None, help="dataset directory or manifest path")
    p.add_argument("--alpha", type=float, default=None, help="pixel-loss weight")
    p.add_argument("--beta", type=float, default=None, help="topological-loss weight (0 = baseline)")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-patches", type=int, default=None)
    p.add_argument("--validation-fraction", type=float, default=None)
    p.add_argument("--patience", dest="early_stop_patience", type=int, default=None)
    p.add_argument("--ray-stride", type=int, default=None)
    p.add_argument("--strip-width", type=int, default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _common_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None, help="dataset directory or manifest path")
    p.add_argument("--split", default=None, choices=("train", "val", "test"))

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    _common_flags(p)
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument(
        "--inject-gradient-error",
        action="store_true",
        default=None,
        help="corrupt the analytic gradient to prove the check detects it",
    )

    p = sub.add_parser("stream", help="sequential inference with latency stats")
    _common_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--frames", default=None, help="directory of numbered PNG frames")
    p.add_argument("--warmup", type=int, default=None, help="frames to discard")
    p.add_argument(
        "--save-masks",
        action="store_true",
        default=None,
        help="write per-frame masks and boundary traces",
    )

    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "stream": cmd_stream,
}


def _exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, EmptyDatasetError)):
        return EXIT_CONFIG
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(
        exc, (DimensionError, GeometryMismatchError, MaskValueError, CheckpointError)
    ):
        return EXIT_SHAPE
    if isinstance(exc, (json.JSONDecodeError, OSError)):
        return EXIT_IO
    raise exc


def _apply_worker_env() -> None:
    value = os.environ.get(WORKERS_ENV)
    if value is None:
        return
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {value!r}")
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    torch.set_num_threads(workers)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_worker_env()
        return _HANDLERS[args.command](args)
    except (StarsegError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
