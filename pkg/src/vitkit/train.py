"""Training loop, Adam optimizer, metrics, and checkpoint persistence.

Training iterates seeded batches, averages per-sample cross-entropy, applies
bias-corrected Adam, and evaluates on the validation split after each epoch.
The checkpoint with the lowest validation loss is kept. Checkpoints are a
little-endian binary format with an embedded config, so a file is loadable
without outside knowledge of the architecture.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from vitkit import tensor as T
from vitkit.data import AugmentationSpec, DatasetManifest, Split, make_batches
from vitkit.model import (
    Label,
    ModelParameters,
    ViTConfig,
    VisionTransformer,
    forward,
    parameter_shapes,
)
from vitkit.tensor import RandomSource, Tensor

__all__ = [
    "OptimizerConfig",
    "AdamState",
    "OneHotTarget",
    "MetricsRecord",
    "TrainRunConfig",
    "cross_entropy",
    "adam_step",
    "train",
    "evaluate",
    "evaluate_batches",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointMismatchError",
]

PROB_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"VITC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam hyperparameters. A zero learning rate is legal and means no-op steps."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0,1), got {value}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], t: int = 0):
        self.m = m
        self.v = v
        self.t = t

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            t=0,
        )


@dataclass(frozen=True)
class OneHotTarget:
    """Target vector with exactly one unit entry."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        object.__setattr__(self, "y", y)
        if y.ndim != 1 or not np.all(np.isin(y, (0.0, 1.0))) or y.sum() != 1.0:
            raise ValueError(f"target must be one-hot, got {y!r}")

    @classmethod
    def from_label(cls, label: Label, num_classes: int = 2) -> "OneHotTarget":
        y = np.zeros(num_classes)
        y[int(label)] = 1.0
        return cls(y)

    @property
    def index(self) -> int:
        return int(np.argmax(self.y))


@dataclass(frozen=True)
class MetricsRecord:
    """One epoch's (or one evaluation's) scalar metrics.

    ``train_loss`` is None for evaluation-only records; rate fields come
    from wall-clock time and are exempt from determinism guarantees.
    """

    epoch: int
    train_loss: float | None
    val_loss: float
    accuracy: float
    samples_per_sec: float
    steps_per_sec: float
    eval_runtime_sec: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0,1], got {self.accuracy}")

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "accuracy": self.accuracy,
                "samples_per_sec": self.samples_per_sec,
                "steps_per_sec": self.steps_per_sec,
                "eval_runtime_sec": self.eval_runtime_sec,
            },
            sort_keys=True,
        )


@dataclass
class TrainRunConfig:
    """Knobs for one training run; artifact paths are optional."""

    epochs: int = 2
    batch_size: int = 16
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentationSpec | None = None
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    preset: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Categorical cross-entropy of a probability vector against a one-hot target.

    Probabilities are clamped below at 1e-12 before the log, so saturated
    predictions yield a large finite loss instead of infinity.
    """
    if not isinstance(target, OneHotTarget):
        target = OneHotTarget(np.asarray(target.data if isinstance(target, Tensor) else target))
    if probs.shape != target.y.shape:
        raise ValueError(f"probability shape {probs.shape} does not match target {target.y.shape}")
    return -(Tensor(target.y) * T.log(T.clip_min(probs, PROB_FLOOR))).sum()


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamState,
    cfg: OptimizerConfig,
) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place, atomically.

    Every gradient is checked finite before anything mutates, so a bad step
    leaves parameters and state untouched.
    """
    if set(grads.keys()) != set(params.keys()):
        raise ValueError("gradient names do not match parameter names")
    for name, p in params.items():
        g = grads[name].data
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient for {name!r} has shape {g.shape}, expected {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}; step aborted")

    t = state.t + 1
    bias1 = 1.0 - cfg.beta1 ** t
    bias2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name].data
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        p.data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    state.t = t
    return params, state


def _mean_scalar(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    return total / len(losses)


def train(
    model: VisionTransformer,
    manifest: DatasetManifest,
    run: TrainRunConfig,
) -> tuple[list[MetricsRecord], ModelParameters]:
    """Optimize the model on the Train split; returns per-epoch metrics.

    Per epoch: forward/backward over shuffled Train batches with mean-batch
    cross-entropy and Adam, then a Val evaluation. When a checkpoint path is
    set, the epoch with the lowest validation loss is persisted. Metrics are
    appended to the metrics path as JSON lines.
    """
    config = model.config
    data_rng = RandomSource(run.seed)
    dropout_rng = RandomSource(run.seed).substream("dropout-run")
    state = AdamState.zeros(model.params)
    history: list[MetricsRecord] = []
    best_val = math.inf

    for epoch in range(1, run.epochs + 1):
        batch_losses: list[float] = []
        batches = make_batches(
            manifest, Split.TRAIN, run.batch_size, data_rng,
            epoch=epoch, image_size=config.image_size, augmentation=run.augmentation,
        )
        for step, (images, targets) in enumerate(batches):
            try:
                model.params.zero_grad()
                sample_losses = []
                for row in range(images.shape[0]):
                    rng = dropout_rng.substream(epoch, step, row) if config.dropout_rate > 0 else None
                    probs = forward(
                        Tensor(images.data[row]), config, model.params,
                        rng=rng, train=True,
                    )
                    sample_losses.append(cross_entropy(probs, OneHotTarget(targets.data[row])))
                batch_loss = _mean_scalar(sample_losses)
                grads = T.backward(batch_loss, model.params)
                adam_step(model.params, grads, state, run.optimizer)
                batch_losses.append(batch_loss.item())
            except ValueError as err:
                raise ValueError(f"epoch {epoch} batch {step}: {err}") from err

        val = evaluate(model, manifest, Split.VAL, batch_size=run.batch_size)
        record = MetricsRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            val_loss=val.val_loss,
            accuracy=val.accuracy,
            samples_per_sec=val.samples_per_sec,
            steps_per_sec=val.steps_per_sec,
            eval_runtime_sec=val.eval_runtime_sec,
        )
        history.append(record)
        if run.metrics_path:
            with open(run.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(record.to_json_line() + "\n")
        if record.val_loss < best_val:
            best_val = record.val_loss
            if run.checkpoint_path:
                save_checkpoint(model.params, config, run.checkpoint_path, preset=run.preset)

    return history, model.params


def evaluate_batches(
    model: VisionTransformer,
    batches: Iterable[tuple[Tensor, Tensor]],
    epoch: int = 0,
) -> MetricsRecord:
    """Loss/accuracy/throughput over pre-built (images, targets) batches."""
    total = 0
    correct = 0
    loss_sum = 0.0
    steps = 0
    started = time.perf_counter()
    with T.no_grad():
        for images, targets in batches:
            steps += 1
            for row in range(images.shape[0]):
                probs = forward(Tensor(images.data[row]), model.config, model.params)
                target = OneHotTarget(targets.data[row])
                loss_sum += cross_entropy(probs, target).item()
                predicted = Label.FAKE if probs.data[Label.FAKE] > probs.data[Label.REAL] else Label.REAL
                correct += int(int(predicted) == target.index)
                total += 1
    elapsed = time.perf_counter() - started
    if total == 0:
        raise ValueError("no samples to evaluate")
    elapsed = max(elapsed, 1e-9)
    return MetricsRecord(
        epoch=epoch,
        train_loss=None,
        val_loss=loss_sum / total,
        accuracy=correct / total,
        samples_per_sec=total / elapsed,
        steps_per_sec=steps / elapsed,
        eval_runtime_sec=elapsed,
    )


def evaluate(
    model: VisionTransformer,
    manifest: DatasetManifest,
    split: Split,
    batch_size: int = 16,
) -> MetricsRecord:
    """Run the model over one split and report the standard metric set."""
    batches = make_batches(
        manifest, split, batch_size, RandomSource(0),
        image_size=model.config.image_size,
    )
    return evaluate_batches(model, batches)


# -- checkpoint format --------------------------------------------------------


class CheckpointError(Exception):
    """Base class for unreadable or inconsistent checkpoint files."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def save_checkpoint(
    params: Mapping[str, Tensor],
    config: ViTConfig,
    path,
    preset: str | None = None,
) -> None:
    """Write parameters and config as the versioned little-endian binary format.

    Layout: magic, format version, config JSON (length-prefixed), tensor
    count, then per tensor: name, rank, dims, f32 data. Tensor order follows
    the parameter collection, so identical parameters give identical bytes.
    """
    header = json.dumps(
        {"config": config.to_dict(), "preset": preset},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(header))
    out += header
    out += struct.pack("<I", len(params))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<I", tensor.data.ndim)
        for dim in tensor.data.shape:
            out += struct.pack("<Q", dim)
        out += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: wanted {count} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path) -> tuple[ModelParameters, ViTConfig, str | None]:
    """Read a checkpoint back into parameters, config, and preset name.

    Raises a distinct error for bad magic, unknown version, truncation, and
    tensor names/shapes that disagree with the embedded config.
    """
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"invalid checkpoint: bad magic in {str(path)!r}")
    version = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    header_len = reader.unpack("<I")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        config = ViTConfig.from_dict(header["config"])
        preset = header.get("preset")
    except (ValueError, KeyError, UnicodeDecodeError) as err:
        raise CheckpointMismatchError(f"unreadable checkpoint config: {err}") from err

    count = reader.unpack("<I")
    expected = parameter_shapes(config)
    if count != len(expected):
        raise CheckpointMismatchError(
            f"checkpoint stores {count} tensors, config implies {len(expected)}"
        )
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name_len = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        rank = reader.unpack("<I")
        shape = tuple(reader.unpack("<Q") for _ in range(rank))
        if name not in expected:
            raise CheckpointMismatchError(f"unexpected tensor {name!r} in checkpoint")
        if shape != expected[name]:
            raise CheckpointMismatchError(
                f"tensor {name!r} has shape {shape}, config implies {expected[name]}"
            )
        size = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(reader.take(4 * size), dtype="<f4")
        tensors[name] = Tensor(
            raw.astype(np.float64).reshape(shape), requires_grad=True, name=name
        )
    if set(tensors) != set(expected):
        raise CheckpointMismatchError("checkpoint repeats or omits tensors")
    ordered = {name: tensors[name] for name in expected}
    return ModelParameters(ordered), config, preset
