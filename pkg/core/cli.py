"""Command-line interface: train, eval, synth-preview and score."""

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml
from PIL import Image
from torchvision.transforms import functional as TF

from .config import Config, DatasetSpec
from .data import load_split, read_image, resize
from .exceptions import ConfigurationError, DatasetLayoutError, EtsError
from .logger import logger
from .scoring import evaluate, score_images, write_heatmap
from .synthesis import AnomalySynthesizer
from .trainer import TrainState, fit, load_checkpoint

RESOLVED_CONFIG = "config.json"
EVAL_CONFIG = "eval_config.json"

# flag dest -> dotted config keys it overrides
OVERRIDES: Dict[str, Sequence[str]] = {
    "data_root": ("data.root_path",),
    "category": ("data.category",),
    "manifest": ("data.manifest",),
    "image_size": ("data.image_size", "train.image_size"),
    "texture_source": ("synthesis.texture_source",),
    "architecture": ("model.architecture",),
    "pretrained_weights": ("model.pretrained_weights",),
    "gii_mode": ("model.gii_mode",),
    "max_iterations": ("train.max_iterations",),
    "batch_size": ("train.batch_size",),
    "seed": ("train.seed", "synthesis.seed"),
    "device": ("train.device",),
    "sigma": ("eval.sigma",),
    "fpr_limit": ("eval.fpr_limit",),
    "log_level": ("logging.level",),
}


def _parse_assignment(text: str) -> tuple:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"--set expects key=value, got '{text}'", text)
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot ("2e-4") as strings
        try:
            value = float(value)
        except ValueError:
            pass
    return key.strip(), value


def resolve_config(args: argparse.Namespace) -> Config:
    """Config file, then ``--set key=value`` pairs, then dedicated flags."""
    config = Config(getattr(args, "config", None))
    for assignment in getattr(args, "set", None) or []:
        key, value = _parse_assignment(assignment)
        config.set(key, value)
    for dest, keys in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        for key in keys:
            config.set(key, value)
    return config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML or JSON run configuration")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any config key, e.g. --set train.teacher_lr=2e-4",
    )
    parser.add_argument("--device", help="torch device, or 'auto'")
    parser.add_argument("--log-level", dest="log_level", help="console log level")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data-root", dest="data_root", help="dataset root folder")
    parser.add_argument("--category", help="category name")
    parser.add_argument("--manifest", help="JSON-lines manifest instead of a folder tree")
    parser.add_argument("--image-size", dest="image_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one sub-parser per command."""
    parser = argparse.ArgumentParser(
        prog="ets", description="Expert-teacher-student anomaly detection"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a model for one category")
    _add_common(train)
    _add_data(train)
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--max-iterations", dest="max_iterations", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--texture-source", dest="texture_source")
    train.add_argument("--architecture")
    train.add_argument("--pretrained-weights", dest="pretrained_weights")
    train.add_argument("--gii-mode", dest="gii_mode")

    evaluate_cmd = commands.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(evaluate_cmd)
    _add_data(evaluate_cmd)
    evaluate_cmd.add_argument("--ckpt", required=True, help="checkpoint file")
    evaluate_cmd.add_argument("--out", required=True, help="report JSON path")
    evaluate_cmd.add_argument("--heatmaps", help="directory for per-image heat maps")
    evaluate_cmd.add_argument("--architecture", help="expected checkpoint architecture")
    evaluate_cmd.add_argument("--sigma", type=float)
    evaluate_cmd.add_argument("--fpr-limit", dest="fpr_limit", type=float)

    preview = commands.add_parser("synth-preview", help="write synthetic anomaly samples")
    _add_common(preview)
    _add_data(preview)
    preview.add_argument("--out", required=True, help="output directory")
    preview.add_argument(
        "-n", "--n", "--count", dest="count", type=int, default=4, help="number of samples"
    )
    preview.add_argument("--seed", type=int)
    preview.add_argument("--texture-source", dest="texture_source")
    preview.add_argument(
        "--foreground", action="store_true", help="confine masks to the object foreground"
    )

    score = commands.add_parser("score", help="score one image")
    _add_common(score)
    score.add_argument("--ckpt", required=True, help="checkpoint file")
    score.add_argument("--image", required=True, help="image file")
    score.add_argument("--out", help="heat map PNG (default: <image stem>_heatmap.png)")
    score.add_argument("--sigma", type=float)
    return parser


def _train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    run = config.validate()
    logger.set_level(run.logging.level)
    out_dir = Path(args.out)
    config.save_config(out_dir / RESOLVED_CONFIG)

    dataset = load_split(run.data.with_split("train"))
    validation = None
    if run.train.validation_manifest:
        validation = load_split(
            DatasetSpec(
                root_path=run.data.root_path,
                category=run.data.category,
                image_size=run.data.image_size,
                split="test",
                manifest=run.train.validation_manifest,
            )
        )
    checkpoint = fit(run, dataset, out_dir, validation=validation)
    print(f"checkpoint: {checkpoint}")
    return 0


def _load_model(args: argparse.Namespace, config: Config) -> TrainState:
    expected = getattr(args, "architecture", None)
    if expected is None and args.config:
        expected = config.get("model.architecture")
    device = config.get("train.device", "auto") if args.device is None else args.device
    return load_checkpoint(args.ckpt, expected, device=None if device == "auto" else device)


def _eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    state = _load_model(args, config)
    if args.image_size is None:
        size = state.config.data.image_size
        config.set("data.image_size", size)
        config.set("train.image_size", size)
    run = config.validate()
    logger.set_level(run.logging.level)

    dataset = load_split(run.data.with_split("test"))
    report = evaluate(state.teacher, state.student, dataset, run.eval, args.heatmaps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(
            {
                "category": run.data.category,
                "metrics": report.metrics(),
                "config_digest": config.digest,
                "n_images": report.n_images,
                "n_pixels": report.n_pixels,
                "n_gt_regions": report.n_gt_regions,
            },
            f,
            indent=2,
        )
    config.save_config(out.parent / EVAL_CONFIG)
    print(report.table())
    return 0


def _save_rgb(tensor, path: Path) -> None:
    TF.to_pil_image(tensor.clamp(0.0, 1.0)).save(path)


def _synth_preview(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if args.foreground:
        config.set("synthesis.use_foreground_mask", True)
    run = config.validate()
    logger.set_level(run.logging.level)
    if args.count < 1:
        raise ConfigurationError("--count must be at least 1", "count")

    dataset = load_split(run.data.with_split("train"))
    if len(dataset) == 0:
        raise DatasetLayoutError("Training split has no images to preview", run.data.root_path)
    synthesizer = AnomalySynthesizer(run.synthesis)
    rng = np.random.default_rng(run.synthesis.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        normal = dataset[i % len(dataset)].image
        sample = synthesizer.synthesize(normal, rng)
        _save_rgb(normal, out_dir / f"{i:03d}_normal.png")
        _save_rgb(sample.anomalous_image, out_dir / f"{i:03d}_anomalous.png")
        mask = (sample.mask[0].numpy() > 0).astype(np.uint8) * 255
        Image.fromarray(mask).save(out_dir / f"{i:03d}_mask.png")
    print(f"wrote {3 * args.count} files to {out_dir}")
    return 0


def _score(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    state = _load_model(args, config)
    sigma = args.sigma if args.sigma is not None else state.config.eval.sigma
    image = resize(read_image(Path(args.image)), state.config.data.image_size)
    result = score_images(state.teacher, state.student, [image], sigma)[0]
    out = Path(args.out) if args.out else Path(f"{Path(args.image).stem}_heatmap.png")
    write_heatmap(result.map, out)
    print(f"{result.image_score:.6f}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": _train,
    "eval": _eval,
    "synth-preview": _synth_preview,
    "score": _score,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run the chosen command.

    Returns:
        0 on success, 2 on usage or runtime errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except EtsError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(f"error[{e.error_code}]: {e.message}", file=sys.stderr)
        return 2


def run_command(command: str, argv: Sequence[str]) -> int:
    """Run one subcommand with its own arguments, e.g. ``run_command("train", [...])``."""
    return main([command, *argv])


def cmd_train(argv: Sequence[str]) -> int:
    """``ets train ...``: fit a model and write its checkpoint and training log."""
    return run_command("train", argv)


def cmd_eval(argv: Sequence[str]) -> int:
    """``ets eval ...``: score the test split and write ``report.json``."""
    return run_command("eval", argv)


def cmd_synth_preview(argv: Sequence[str]) -> int:
    """``ets synth-preview ...``: write (normal, anomalous, mask) triples."""
    return run_command("synth-preview", argv)


def cmd_score(argv: Sequence[str]) -> int:
    """``ets score ...``: print one image's score and write its heat map."""
    return run_command("score", argv)
