"""Command-line interface: dataset preparation, training, evaluation, prediction.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

import argparse
import json
import sys
from pathlib import Path

from .data import (
    DEFAULT_RATIO,
    AugmentationSpec,
    DatasetManifest,
    LabeledImage,
    Split,
    oversample,
    preprocess,
    scan_dataset,
    stratified_split,
)
from .model import PRESETS, Label, ViTConfig, VisionTransformer, config_from_preset
from .tensor import RandomSource
from .train import (
    CheckpointError,
    OptimizerConfig,
    TrainRunConfig,
    evaluate,
    load_checkpoint,
    train,
)

DEFAULT_PRESET = "vit-base-patch16-224"
CHECKPOINT_FILENAME = "model.ckpt"
METRICS_FILENAME = "metrics.jsonl"

# Config-file keys mirror the train flags; architecture keys mirror model fields.
RUN_KEYS = ("preset", "epochs", "lr", "batch-size", "seed", "out-dir", "augment")
ARCH_KEYS = (
    "image-size", "patch-size", "channels", "embed-dim",
    "num-heads", "num-layers", "mlp-dim", "num-classes", "dropout-rate",
)


class UsageError(Exception):
    """A bad invocation detected after flag parsing; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the usage class here is 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_ratio(text: str) -> tuple[int, int, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"ratio must look like 14:4:1, got {text!r}")
    try:
        ratio = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratio parts must be integers, got {text!r}")
    if any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise argparse.ArgumentTypeError(f"ratio parts must be nonnegative and not all zero, got {text!r}")
    return ratio


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vitkit", description="Binary real/fake image classification with a Vision Transformer.")
    commands = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser,
                                     metavar="{prepare,train,eval,predict}")

    prepare = commands.add_parser("prepare", help="scan a dataset and write a split manifest")
    prepare.add_argument("--data-dir", required=True, help="directory holding real/ and fake/ image folders")
    prepare.add_argument("--out", required=True, help="path for the manifest JSON")
    prepare.add_argument("--seed", type=int, default=0)
    prepare.add_argument("--ratio", type=_parse_ratio, default=DEFAULT_RATIO,
                         help="train:val:test proportions (default 14:4:1)")
    prepare.add_argument("--oversample", action="store_true",
                         help="duplicate minority-class training images until classes match")
    prepare.set_defaults(handler=_cmd_prepare)

    # Defaults stay None here so config-file values can fill unset flags.
    fit = commands.add_parser("train", help="train a model from a manifest")
    fit.add_argument("--manifest", required=True)
    fit.add_argument("--preset", choices=sorted(PRESETS), default=None)
    fit.add_argument("--config", default=None, help="JSON file of flat flag/architecture keys")
    fit.add_argument("--epochs", type=int, default=None)
    fit.add_argument("--lr", type=float, default=None)
    fit.add_argument("--batch-size", type=int, default=None)
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--out-dir", default=None, help="directory for checkpoint and metrics log")
    fit.add_argument("--augment", action="store_true", default=None,
                     help="apply the augmentation chain to training batches")
    fit.set_defaults(handler=_cmd_train)

    report = commands.add_parser("eval", help="evaluate a checkpoint on one split")
    report.add_argument("--checkpoint", required=True)
    report.add_argument("--manifest", required=True)
    report.add_argument("--split", choices=[s.value for s in Split], default="test")
    report.add_argument("--batch-size", type=int, default=16)
    report.add_argument("--metrics-log", default=None,
                        help="metrics JSONL to append to (default: metrics.jsonl beside the checkpoint)")
    report.set_defaults(handler=_cmd_eval)

    predict = commands.add_parser("predict", help="classify one or more images")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("images", nargs="+", metavar="image-path")
    predict.set_defaults(handler=_cmd_predict)
    return parser


def _cmd_prepare(args) -> int:
    manifest = scan_dataset(args.data_dir)
    manifest = stratified_split(manifest, ratio=args.ratio, seed=args.seed)
    if args.oversample:
        manifest = oversample(manifest)
    manifest.save(args.out)
    for label in Label:
        cells = " ".join(
            f"{split.value}={manifest.class_counts(split)[label]}" for split in Split
        )
        print(f"{label.display_name.lower()}: {cells}")
    print(f"manifest written to {args.out}")
    return 0


def _read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"cannot read config file: {err}")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise UsageError(f"config file is not valid JSON: {err}")
    if not isinstance(payload, dict):
        raise UsageError("config file must hold a single JSON object")
    unknown = sorted(set(payload) - set(RUN_KEYS) - set(ARCH_KEYS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return payload


def _resolve_model_config(preset_flag, payload) -> tuple[ViTConfig, str | None]:
    preset = preset_flag if preset_flag is not None else payload.get("preset")
    arch = {key: payload[key] for key in ARCH_KEYS if key in payload}
    if preset is not None and arch:
        raise UsageError("config mixes a preset with explicit architecture fields; pick one")
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
        return config_from_preset(preset), preset
    if arch:
        fields = {key.replace("-", "_"): value for key, value in arch.items()}
        try:
            return ViTConfig(**fields), None
        except (TypeError, ValueError) as err:
            raise UsageError(f"invalid model configuration: {err}")
    return config_from_preset(DEFAULT_PRESET), DEFAULT_PRESET


def _cmd_train(args) -> int:
    payload = _read_config_file(args.config) if args.config else {}

    def pick(flag_value, key, fallback):
        if flag_value is not None:
            return flag_value
        return payload.get(key, fallback)

    config, preset = _resolve_model_config(args.preset, payload)
    out_dir = Path(pick(args.out_dir, "out-dir", "."))
    try:
        run = TrainRunConfig(
            epochs=pick(args.epochs, "epochs", 2),
            batch_size=pick(args.batch_size, "batch-size", 16),
            seed=pick(args.seed, "seed", 0),
            optimizer=OptimizerConfig(learning_rate=pick(args.lr, "lr", 1e-4)),
            augmentation=AugmentationSpec() if pick(args.augment, "augment", False) else None,
            checkpoint_path=str(out_dir / CHECKPOINT_FILENAME),
            metrics_path=str(out_dir / METRICS_FILENAME),
            preset=preset,
        )
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid run configuration: {err}")

    manifest = DatasetManifest.load(args.manifest)
    out_dir.mkdir(parents=True, exist_ok=True)
    Path(run.metrics_path).write_text("")  # fresh log; train() appends one line per epoch
    model = VisionTransformer.initialize(config, RandomSource(run.seed))
    history, _ = train(model, manifest, run)
    print("Epoch | Training Loss | Validation Loss")
    for record in history:
        print(f"{record.epoch} | {record.train_loss:.4f} | {record.val_loss:.4f}")
    return 0


def _cmd_eval(args) -> int:
    params, config, _ = load_checkpoint(args.checkpoint)
    model = VisionTransformer(config, params)
    manifest = DatasetManifest.load(args.manifest)
    record = evaluate(model, manifest, Split(args.split), batch_size=args.batch_size)
    print(f"Accuracy: {record.accuracy:.4f}")
    print(f"Loss: {record.val_loss:.4f}")
    print(f"Samples/sec: {record.samples_per_sec:.3f}")
    print(f"Steps/sec: {record.steps_per_sec:.3f}")
    print(f"Runtime (sec): {record.eval_runtime_sec:.3f}")
    log_path = Path(args.metrics_log) if args.metrics_log else Path(args.checkpoint).parent / METRICS_FILENAME
    with open(log_path, "a") as handle:
        handle.write(record.to_json_line() + "\n")
    return 0


def _original_label(path: Path) -> Label | None:
    parent = path.parent.name.lower()
    return Label.from_name(parent) if parent in ("real", "fake") else None


def _cmd_predict(args) -> int:
    params, config, preset = load_checkpoint(args.checkpoint)
    model = VisionTransformer(config, params)
    blocks = []
    for raw in args.images:
        path = Path(raw)
        label = _original_label(path)
        pixels = LabeledImage(str(path), label or Label.REAL).loaded_pixels()
        probs = model.predict(preprocess(pixels, target=config.image_size))
        lines = []
        if label is not None:
            lines.append(f"Original Label: {label.display_name}")
        lines.append(f"Real Prob: {probs.real_prob:.4f}")
        lines.append(f"Fake Prob: {probs.fake_prob:.4f}")
        lines.append(f"Predicted Label: {probs.predicted_label.display_name}")
        lines.append(f"Model: {preset if preset is not None else 'custom'}")
        blocks.append("\n".join(lines))
    print("\n\n".join(blocks))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as err:
        print(f"vitkit: error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, CheckpointError) as err:
        print(f"vitkit: error: {err}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
