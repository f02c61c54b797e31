# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Command-line interface for fuseguard.

Subcommands: generate, train, attack, cka, calibrate, evaluate, adv-train.
Every subcommand writes only to its ``--out`` (and optional ``--meta``)
paths and echoes its resolved configuration into what it writes.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .attacks import COMPETITORS, MODES, PARTS, PLACEMENTS, STEP_RULES, AttackBudget, AttackPlan
from .cka import KERNELS, heatmap, redundancy_score
from .config import RunConfig, load_settings, resolve_jobs, resolve_log_level, resolve_seed
from .dataset import COLOR_POLICIES, NORMALIZATIONS, DatasetSpec, DatasetStore, LoadedDataset, Preprocessor, generate
from .detector import CALIBRATION_SPLITS, DetectorState, calibrate
from .errors import EXIT_RUNTIME_ERROR, EXIT_SUCCESS, ConfigError, FuseGuardError
from .harness import (
    DEFAULT_EPSILON_LEVELS,
    DEFAULT_PATCH_LEVELS,
    AdvTrainConfig,
    adversarial_train,
    attack_split,
    emit,
    evaluate_curve,
    validate_levels,
    write_text,
)
from .model import VARIANTS, Architecture, FusionNet, TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

PIXEL_SCALE = 255.0
DEFAULT_PGD_EPSILON = 0.1
DEFAULT_PATCH_EPSILON_PIXELS = 20.0

INPUT_KEYS = ("data", "ckpt", "detector", "init")
OUTPUT_KEYS = ("out", "meta")
RESOLVED_KEYS = ("command", "seed", "jobs", "config", "verbose")


def setup_logging(level: int = logging.INFO) -> None:
    """Set up logging configuration.

    Args:
        level: Root log level
    """
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def float_list(text: str) -> Tuple[float, ...]:
    """Parse ``"0,0.05,0.1"`` into a strictly ascending tuple."""
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from e
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise argparse.ArgumentTypeError(f"values must be strictly ascending: {text!r}")
    return values


# -- argument parsing ----------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Global seed (default 0)")
    common.add_argument("--jobs", type=int, default=None, help="Worker threads (default: CPU count)")
    common.add_argument("--config", type=Path, default=None, help="settings.ini with a [fuseguard] section")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable debug logging")
    return common


def _add_attack_flags(p: argparse.ArgumentParser, *, sweep: bool = False) -> None:
    p.add_argument("--mode", choices=MODES, default="pgd")
    p.add_argument("--parts", choices=PARTS, default=None, help="Default: both (pgd modes); patch modes accept rgb only")
    if sweep:
        p.add_argument(
            "--levels", "--eps", dest="levels", type=float_list, default=None,
            help="Comma list starting at 0: ε values, or patch sides for patch modes",
        )
        p.add_argument("--patch-eps", dest="eps", type=float, default=None, help="Patch ℓ∞ radius")
    else:
        p.add_argument("--eps", type=float, default=None, help="ℓ∞ radius (patch modes: patch radius)")
    p.add_argument("--eps-scale", choices=("unit", "pixel"), default="unit", help="pixel divides --eps by 255")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--step-rule", choices=STEP_RULES, default="sign")
    p.add_argument("--patch-side", type=int, default=8)
    p.add_argument("--patch-placement", choices=PLACEMENTS, default="center")
    p.add_argument("--competitor", choices=COMPETITORS, default="rescaled")
    p.add_argument("--limit", type=int, default=None, help="Attack only the first N test samples")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("rmsprop", "sgd"), default="rmsprop")


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser with all subcommands.

    Returns:
        Configured ArgumentParser
    """
    common = _common()
    parser = argparse.ArgumentParser(
        prog="fuseguard",
        description="Attack, analyze and defend an RGB-D fusion classifier",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="Write a synthetic RGB-D dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--color-policy", choices=COLOR_POLICIES, default="shared")
    p.add_argument("--normalization", choices=NORMALIZATIONS, default="minmax")
    p.add_argument("--depth-noise", type=float, default=0.0)
    p.add_argument("--rgb-clutter", type=float, default=0.25, help="Amplitude of the RGB background gratings")

    p = sub.add_parser("train", parents=[common], help="Train a fusion classifier")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--variant", choices=VARIANTS, default="rgbd")
    _add_train_flags(p)

    p = sub.add_parser("attack", parents=[common], help="Attack the test split at one strength")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--detector", type=Path, default=None)
    p.add_argument("--out", required=True, type=Path)
    _add_attack_flags(p)

    p = sub.add_parser("cka", parents=[common], help="Layer-similarity heatmap of one stream")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--stream", choices=("rgb", "depth"), required=True)
    p.add_argument("--kernel", choices=KERNELS, default="linear")
    p.add_argument("--sigma-fraction", type=float, default=0.5)
    p.add_argument("--include-projections", action="store_true")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--meta", type=Path, default=None)

    p = sub.add_parser("calibrate", parents=[common], help="Fit centroids and the rejection threshold")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--fpr", type=float, default=0.1)
    p.add_argument("--rho", type=float, default=1e-5)
    p.add_argument("--grid-steps", type=int, default=10**10)
    p.add_argument("--lambda", dest="lam", type=float, default=30.0)
    p.add_argument("--split", choices=CALIBRATION_SPLITS, default="train")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="Security evaluation curve")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--detector", type=Path, default=None)
    p.add_argument("--format", choices=("csv", "json"), default=None, help="Default: from --out suffix")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--meta", type=Path, default=None)
    _add_attack_flags(p, sweep=True)

    p = sub.add_parser("adv-train", parents=[common], help="Adversarial training baseline")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--init", type=Path, default=None, help="Start from this checkpoint")
    p.add_argument("--eps-list", type=float_list, default=(0.1,))
    p.add_argument("--at-steps", type=int, default=10)
    p.add_argument("--at-step-size", type=float, default=None)
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--at-mode", choices=("regenerate", "fixed"), default="regenerate")
    p.add_argument("--parts", choices=PARTS, default="both")
    _add_train_flags(p)

    return parser


def parse_args(argv: Optional[List[str]] = None) -> RunConfig:
    """Parse and resolve a command line; usage errors exit with code 2."""
    parser = create_parser()
    args = parser.parse_args(argv)
    try:
        settings = load_settings(args.config)
        seed = resolve_seed(args.seed, settings)
        jobs = resolve_jobs(args.jobs, settings)
        level = resolve_log_level(args.verbose, settings)
    except ConfigError as e:
        parser.error(str(e))
    values = vars(args)
    as_text = lambda v: str(v) if isinstance(v, Path) else v  # noqa: E731
    return RunConfig(
        command=args.command,
        seed=seed,
        jobs=jobs,
        log_level=level,
        options={
            k: list(v) if isinstance(v, tuple) else as_text(v)
            for k, v in values.items()
            if k not in INPUT_KEYS + OUTPUT_KEYS + RESOLVED_KEYS
        },
        inputs={k: str(values[k]) for k in INPUT_KEYS if values.get(k) is not None},
        outputs={k: str(values[k]) for k in OUTPUT_KEYS if values.get(k) is not None},
    )


# -- shared helpers ------------------------------------------------------------


def _load_data(config: RunConfig) -> LoadedDataset:
    return DatasetStore(Path(config.inputs["data"])).load()


def _streams(net: FusionNet, rgb: np.ndarray, depth: np.ndarray) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    streams = net.arch.streams
    return (rgb if "rgb" in streams else None, depth if "depth" in streams else None)


def _split_inputs(net: FusionNet, data: LoadedDataset, split: str, limit: Optional[int] = None):
    dataset = data.train if split == "train" else data.test
    if limit is not None:
        dataset = dataset.subset(range(min(limit, len(dataset))))
    rgb, depth = data.preprocessor.preprocess_batch(dataset)
    x_rgb, x_depth = _streams(net, rgb, depth)
    return x_rgb, x_depth, dataset.labels, dataset.ids


def _train_config(config: RunConfig) -> TrainConfig:
    return TrainConfig(
        optimizer=config.option("optimizer"),
        learning_rate=config.option("lr"),
        batch_size=config.option("batch_size"),
        epochs=config.option("epochs"),
        seed=config.seed,
    )


def _load_detector(config: RunConfig) -> Optional[DetectorState]:
    path = config.inputs.get("detector")
    return DetectorState.load(Path(path)) if path else None


def _attack_plan(config: RunConfig, net: FusionNet) -> AttackPlan:
    mode = config.option("mode")
    patch = mode.endswith("patch")
    parts = config.option("parts") or ("rgb" if patch else "both")
    if patch and parts != "rgb":
        raise ConfigError(f"--parts {parts} is not allowed for {mode}; patches cover the RGB image only")
    if parts == "both" and net.arch.variant != "rgbd":
        parts = net.arch.variant
    if parts not in ("both", *net.arch.streams):
        raise ConfigError(f"--parts {parts} is not an input of the {net.arch.variant} variant")
    eps = config.option("eps")
    if eps is None:
        eps = DEFAULT_PATCH_EPSILON_PIXELS / PIXEL_SCALE if patch else DEFAULT_PGD_EPSILON
    elif config.option("eps_scale") == "pixel":
        eps = eps / PIXEL_SCALE
    return AttackPlan(
        mode=mode,
        budget=AttackBudget(
            epsilon=eps,
            step_size=config.option("step_size"),
            iterations=config.option("steps"),
            target_parts=parts,
            step_rule=config.option("step_rule"),
        ),
        patch_side=config.option("patch_side"),
        patch_epsilon=eps if patch else None,
        placement=config.option("patch_placement"),
        competitor=config.option("competitor"),
        image_size=net.arch.image_size,
    )


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    write_text(Path(path), json.dumps(payload, indent=2) + "\n")


# -- subcommands ---------------------------------------------------------------


def cmd_generate(config: RunConfig) -> int:
    """Handle the 'generate' command.

    Args:
        config: Resolved run configuration with the dataset flags

    Returns:
        Exit code (0 for success)
    """
    spec = DatasetSpec(
        num_classes=config.option("classes"),
        samples_per_class=config.option("per_class"),
        instances_per_class=config.option("instances"),
        image_size=config.option("image_size"),
        color_policy=config.option("color_policy"),
        normalization=config.option("normalization"),
        depth_noise=config.option("depth_noise"),
        rgb_clutter=config.option("rgb_clutter"),
        seed=config.seed,
    )
    train_split, test_split = generate(spec)
    preprocessor = Preprocessor.fit(train_split)
    DatasetStore(Path(config.outputs["out"])).save(
        spec, train_split, test_split, preprocessor, metadata={"run_config": config.to_dict()}
    )
    return EXIT_SUCCESS


def cmd_train(config: RunConfig) -> int:
    """Handle the 'train' command.

    Args:
        config: Resolved run configuration with the dataset path and optimizer flags

    Returns:
        Exit code (0 for success)
    """
    data = _load_data(config)
    arch = Architecture(
        num_classes=data.spec.num_classes,
        image_size=data.spec.image_size,
        variant=config.option("variant"),
    )
    net = FusionNet.initialize(arch, seed=config.seed)
    x_rgb, x_depth = data.preprocessor.preprocess_batch(data.train)
    cfg = _train_config(config)
    result = train(net, x_rgb, x_depth, data.train.labels, cfg)
    save_checkpoint(
        result.net,
        Path(config.outputs["out"]),
        metadata={
            "run_config": config.to_dict(),
            "train_config": cfg.to_dict(),
            "history": result.history.to_dict(),
        },
    )
    return EXIT_SUCCESS


def cmd_attack(config: RunConfig) -> int:
    """Handle the 'attack' command: one attack per test sample at a single level.

    Args:
        config: Resolved run configuration with checkpoint, data and attack flags

    Returns:
        Exit code (0 for success)
    """
    net, _ = load_checkpoint(Path(config.inputs["ckpt"]))
    data = _load_data(config)
    detector = _load_detector(config)
    plan = _attack_plan(config, net)
    level = plan.patch_side if plan.is_patch else plan.budget.epsilon
    x_rgb, x_depth, labels, ids = _split_inputs(net, data, "test", config.option("limit"))
    results = attack_split(
        plan, level, net, x_rgb, x_depth, labels, ids,
        bounds=data.preprocessor.bounds(net.arch.image_size),
        detector=detector,
        seed=config.seed,
        jobs=config.jobs,
    )
    n = len(results)
    summary = {
        "n": n,
        "success_rate": sum(r.success for r in results) / n if n else 0.0,
        "rejection_rate": sum(r.rejected for r in results) / n if n else 0.0,
    }
    logger.info(
        f"{plan.mode} at level {level}: success rate {summary['success_rate']:.3f}",
        extra={"mode": plan.mode, "level": level, **summary},
    )
    _write_json(
        Path(config.outputs["out"]),
        {
            "config": config.to_dict(),
            "attack": plan.to_dict(),
            "level": level,
            "summary": summary,
            "samples": [r.to_record(i, int(y)) for r, i, y in zip(results, ids, labels)],
        },
    )
    return EXIT_SUCCESS


def cmd_cka(config: RunConfig) -> int:
    """Handle the 'cka' command: a layer-similarity heatmap for one stream.

    Args:
        config: Resolved run configuration with checkpoint, data, stream and kernel

    Returns:
        Exit code (0 for success)
    """
    net, _ = load_checkpoint(Path(config.inputs["ckpt"]))
    data = _load_data(config)
    x_rgb, x_depth, _, _ = _split_inputs(net, data, "test")
    stream = config.option("stream")
    hm = heatmap(
        net,
        stream,
        x_rgb,
        x_depth,
        kernel=config.option("kernel"),
        sigma_fraction=config.option("sigma_fraction"),
        include_projections=config.option("include_projections"),
    )
    score = redundancy_score(hm) if hm.size > 1 else None
    logger.info(f"{stream} redundancy score: {score}", extra={"stream": stream, "redundancy": score})
    hm.save_csv(Path(config.outputs["out"]))
    if "meta" in config.outputs:
        _write_json(
            Path(config.outputs["meta"]),
            {"config": config.to_dict(), "samples": hm.samples, "redundancy": score},
        )
    return EXIT_SUCCESS


def cmd_calibrate(config: RunConfig) -> int:
    """Handle the 'calibrate' command: centroids plus the rejection threshold.

    Args:
        config: Resolved run configuration with checkpoint, data and target FPR

    Returns:
        Exit code (0 for success)
    """
    net, _ = load_checkpoint(Path(config.inputs["ckpt"]))
    data = _load_data(config)
    x_rgb, x_depth, labels, _ = _split_inputs(net, data, "train")
    state = calibrate(
        net,
        x_rgb,
        x_depth,
        labels,
        fpr=config.option("fpr"),
        rho=config.option("rho"),
        grid_steps=config.option("grid_steps"),
        lam=config.option("lam"),
        split=config.option("split"),
    )
    replace(state, extra={"run_config": config.to_dict()}).save(Path(config.outputs["out"]))
    return EXIT_SUCCESS


def cmd_evaluate(config: RunConfig) -> int:
    """Handle the 'evaluate' command: a security curve over several levels.

    Args:
        config: Resolved run configuration with checkpoint, data, levels and attack flags

    Returns:
        Exit code (0 for success)
    """
    net, _ = load_checkpoint(Path(config.inputs["ckpt"]))
    data = _load_data(config)
    detector = _load_detector(config)
    plan = _attack_plan(config, net)
    levels = config.option("levels")
    if levels is None:
        levels = DEFAULT_PATCH_LEVELS if plan.is_patch else DEFAULT_EPSILON_LEVELS
    levels = validate_levels(levels)
    if plan.is_patch and any(float(v) != int(v) for v in levels):
        raise ConfigError("Patch levels are side lengths and must be integers", context={"levels": list(levels)})
    x_rgb, x_depth, labels, ids = _split_inputs(net, data, "test", config.option("limit"))
    curve = evaluate_curve(
        net,
        detector,
        plan,
        levels,
        x_rgb,
        x_depth,
        labels,
        ids,
        bounds=data.preprocessor.bounds(net.arch.image_size),
        seed=config.seed,
        jobs=config.jobs,
    )
    curve.config = {"run": config.to_dict(), "attack": plan.to_dict(), "tag": net.arch.tag}
    out = Path(config.outputs["out"])
    fmt = config.option("format") or ("json" if out.suffix == ".json" else "csv")
    emit(curve, fmt, out)
    if "meta" in config.outputs:
        _write_json(Path(config.outputs["meta"]), {"config": curve.config, "seed": config.seed})
    return EXIT_SUCCESS


def cmd_adv_train(config: RunConfig) -> int:
    """Handle the 'adv-train' command.

    Args:
        config: Resolved run configuration with data, initial checkpoint and augmentation flags

    Returns:
        Exit code (0 for success)
    """
    data = _load_data(config)
    if "init" in config.inputs:
        net, _ = load_checkpoint(Path(config.inputs["init"]))
    else:
        arch = Architecture(num_classes=data.spec.num_classes, image_size=data.spec.image_size)
        net = FusionNet.initialize(arch, seed=config.seed)
    advcfg = AdvTrainConfig(
        epsilons=tuple(config.option("eps_list")),
        steps=config.option("at_steps"),
        step_size=config.option("at_step_size"),
        ratio=config.option("ratio"),
        parts=config.option("parts"),
        mode=config.option("at_mode"),
    )
    cfg = _train_config(config)
    x_rgb, x_depth = data.preprocessor.preprocess_batch(data.train)
    result = adversarial_train(
        net, x_rgb, x_depth, data.train.labels, advcfg, cfg,
        bounds=data.preprocessor.bounds(net.arch.image_size),
    )
    save_checkpoint(
        result.net,
        Path(config.outputs["out"]),
        metadata={
            "run_config": config.to_dict(),
            "train_config": cfg.to_dict(),
            "adv_config": advcfg.to_dict(),
            "history": result.history.to_dict(),
        },
    )
    return EXIT_SUCCESS


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "generate": cmd_generate,
    "train": cmd_train,
    "attack": cmd_attack,
    "cka": cmd_cka,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "adv-train": cmd_adv_train,
}


def run(config: RunConfig) -> int:
    """Execute one resolved subcommand and return its exit code."""
    handler = COMMANDS[config.command]
    try:
        return handler(config)
    except FuseGuardError as e:
        e.context.setdefault("command", config.command)
        e.log_error()
        return e.exit_code
    except Exception as e:  # noqa: BLE001
        logger.error(
            f"{config.command} failed: {e}",
            extra={"command": config.command, "error_type": type(e).__name__},
            exc_info=logger.isEnabledFor(logging.DEBUG),
        )
        return EXIT_RUNTIME_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point.

    Args:
        argv: Command line arguments (defaults to sys.argv)

    Returns:
        Exit code
    """
    config = parse_args(argv)
    setup_logging(config.log_level)
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
