"""vitkit: a from-scratch Vision Transformer toolkit for real-vs-fake image classification."""

from vitkit.data import (
    AugmentationSpec,
    DatasetManifest,
    LabeledImage,
    Split,
    augment,
    make_batches,
    oversample,
    preprocess,
    scan_dataset,
    stratified_split,
)
from vitkit.model import (
    ClassProbabilities,
    Label,
    ModelParameters,
    PRESETS,
    ViTConfig,
    VisionTransformer,
    config_from_preset,
    init_parameters,
)
from vitkit.tensor import RandomSource, Tensor, no_grad
from vitkit.train import (
    AdamState,
    CheckpointError,
    MetricsRecord,
    OneHotTarget,
    OptimizerConfig,
    TrainRunConfig,
    adam_step,
    cross_entropy,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AugmentationSpec",
    "CheckpointError",
    "ClassProbabilities",
    "DatasetManifest",
    "Label",
    "LabeledImage",
    "MetricsRecord",
    "ModelParameters",
    "OneHotTarget",
    "OptimizerConfig",
    "PRESETS",
    "RandomSource",
    "Split",
    "Tensor",
    "TrainRunConfig",
    "ViTConfig",
    "VisionTransformer",
    "adam_step",
    "augment",
    "config_from_preset",
    "cross_entropy",
    "evaluate",
    "init_parameters",
    "load_checkpoint",
    "make_batches",
    "no_grad",
    "oversample",
    "preprocess",
    "save_checkpoint",
    "scan_dataset",
    "stratified_split",
    "train",
    "__version__",
]
