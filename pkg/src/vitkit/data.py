"""Dataset ingestion, stratified splitting, oversampling, and preprocessing.

A dataset is a directory with ``real/`` and ``fake/`` image subdirectories.
Scanning produces a manifest; splitting assigns every record to Train, Val,
or Test by seeded largest-remainder allocation within each class; optional
oversampling balances the Train classes by duplication. Preprocessing turns
decoded pixels into model-ready tensors in [-1, 1], with a deterministic
augmentation stage for training batches.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from vitkit.model import Label
from vitkit.tensor import RandomSource, Tensor

__all__ = [
    "Split",
    "LabeledImage",
    "DatasetManifest",
    "AugmentationSpec",
    "scan_dataset",
    "stratified_split",
    "oversample",
    "resize_bilinear",
    "preprocess",
    "augment",
    "make_batches",
]

DEFAULT_RATIO = (14, 4, 1)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"

    @property
    def display_name(self) -> str:
        return self.value.capitalize()


@dataclass
class LabeledImage:
    """A labeled image reference; pixels are attached once decoded."""

    path: str
    label: Label
    pixels: np.ndarray | None = None

    def loaded_pixels(self) -> np.ndarray:
        """Pixels as a (3, H, W) float array in [0, 255], decoding on demand."""
        if self.pixels is not None:
            return np.asarray(self.pixels, dtype=np.float64)
        try:
            with Image.open(self.path) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
        except (OSError, UnidentifiedImageError) as err:
            raise ValueError(f"cannot decode image {self.path!r}: {err}") from err
        return rgb.transpose(2, 0, 1)


@dataclass
class DatasetManifest:
    """Record list plus the per-record split assignment and the split seed."""

    records: list[LabeledImage]
    seed: int = 0
    ratio: tuple[int, int, int] = DEFAULT_RATIO
    split: dict[int, Split] = field(default_factory=dict)

    def indices_for(self, split: Split) -> list[int]:
        return [i for i in range(len(self.records)) if self.split.get(i) is split]

    def records_for(self, split: Split) -> list[LabeledImage]:
        return [self.records[i] for i in self.indices_for(split)]

    def class_counts(self, split: Split | None = None) -> dict[Label, int]:
        counts = {label: 0 for label in Label}
        for i, record in enumerate(self.records):
            if split is None or self.split.get(i) is split:
                counts[record.label] += 1
        return counts

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "ratio": list(self.ratio),
            "records": [
                {
                    "path": record.path,
                    "label": record.label.display_name.lower(),
                    "split": self.split[i].value if i in self.split else None,
                }
                for i, record in enumerate(self.records)
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        payload = json.loads(text)
        records = []
        split: dict[int, Split] = {}
        for i, entry in enumerate(payload["records"]):
            records.append(LabeledImage(path=entry["path"], label=Label.from_name(entry["label"])))
            if entry.get("split") is not None:
                split[i] = Split(entry["split"])
        ratio = tuple(payload.get("ratio", DEFAULT_RATIO))
        return cls(records=records, seed=payload.get("seed", 0), ratio=ratio, split=split)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class AugmentationSpec:
    """Augmentation magnitudes; the all-identity spec leaves pixels untouched.

    Defaults follow common face-forensics practice: coin-flip mirroring,
    rotations up to 15 degrees, brightness/contrast jitter up to 20%, and
    random resized crops keeping at least 80% of the area.
    """

    horizontal_flip_prob: float = 0.5
    rotation_max_degrees: float = 15.0
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    crop_scale_min: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValueError(f"horizontal_flip_prob must be in [0,1], got {self.horizontal_flip_prob}")
        if not 0.0 <= self.rotation_max_degrees <= 45.0:
            raise ValueError(f"rotation_max_degrees must be in [0,45], got {self.rotation_max_degrees}")
        if not 0.0 <= self.brightness_jitter <= 1.0:
            raise ValueError(f"brightness_jitter must be in [0,1], got {self.brightness_jitter}")
        if not 0.0 <= self.contrast_jitter <= 1.0:
            raise ValueError(f"contrast_jitter must be in [0,1], got {self.contrast_jitter}")
        if not 0.0 < self.crop_scale_min <= 1.0:
            raise ValueError(f"crop_scale_min must be in (0,1], got {self.crop_scale_min}")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(horizontal_flip_prob=0.0, rotation_max_degrees=0.0,
                   brightness_jitter=0.0, contrast_jitter=0.0, crop_scale_min=1.0)


def scan_dataset(root) -> DatasetManifest:
    """Build an unsplit manifest from ``<root>/real`` and ``<root>/fake``.

    Records are ordered real before fake, lexicographically within each
    class. Files that fail to decode are skipped with a warning; a class
    with no decodable images is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {str(root)!r} is not a directory")
    records: list[LabeledImage] = []
    rejected: list[str] = []
    for class_name, label in (("real", Label.REAL), ("fake", Label.FAKE)):
        class_dir = root / class_name
        if not class_dir.is_dir():
            raise ValueError(f"missing class directory {class_name!r} under {str(root)!r}")
        kept = 0
        for path in sorted(class_dir.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as img:
                    img.verify()
            except (OSError, UnidentifiedImageError, SyntaxError):
                rejected.append(str(path))
                continue
            records.append(LabeledImage(path=str(path), label=label))
            kept += 1
        if kept == 0:
            raise ValueError(f"class {class_name!r} has no images")
    if rejected:
        warnings.warn(f"skipped {len(rejected)} undecodable file(s): {', '.join(rejected)}")
    return DatasetManifest(records=records)


def allocate_counts(n: int, ratio: Sequence[int]) -> tuple[int, ...]:
    """Largest-remainder split of ``n`` items across ratio parts.

    Exact integer arithmetic; leftover units go to the largest fractional
    remainders, earlier parts winning ties.
    """
    total = sum(ratio)
    if total <= 0 or any(r < 0 for r in ratio):
        raise ValueError(f"ratio parts must be nonnegative with positive sum, got {tuple(ratio)}")
    base = [(n * r) // total for r in ratio]
    remainders = [(n * r) % total for r in ratio]
    leftover = n - sum(base)
    order = sorted(range(len(ratio)), key=lambda i: (-remainders[i], i))
    for i in range(leftover):
        base[order[i]] += 1
    return tuple(base)


def stratified_split(
    manifest: DatasetManifest,
    ratio: Sequence[int] = DEFAULT_RATIO,
    seed: int = 0,
) -> DatasetManifest:
    """Assign every record to Train/Val/Test, class by class.

    Within each class, records are shuffled by a seed-derived substream and
    allocated by largest remainder over the ratio, so each class follows the
    ratio to within one sample.
    """
    ratio = tuple(int(r) for r in ratio)
    if len(ratio) != 3:
        raise ValueError(f"ratio must have three parts, got {ratio}")
    rng = RandomSource(seed)
    split: dict[int, Split] = {}
    for label in Label:
        indices = [i for i, r in enumerate(manifest.records) if r.label is label]
        if not indices:
            raise ValueError(f"class {label.display_name.lower()!r} has no records")
        order = rng.substream("split", label.display_name.lower()).permutation(len(indices))
        shuffled = [indices[j] for j in order]
        n_train, n_val, _ = allocate_counts(len(indices), ratio)
        for pos, record_index in enumerate(shuffled):
            if pos < n_train:
                split[record_index] = Split.TRAIN
            elif pos < n_train + n_val:
                split[record_index] = Split.VAL
            else:
                split[record_index] = Split.TEST
    return DatasetManifest(records=list(manifest.records), seed=seed, ratio=ratio, split=split)


def oversample(manifest: DatasetManifest, split: Split = Split.TRAIN) -> DatasetManifest:
    """Balance class counts inside one split by seeded duplication.

    Minority-class records are drawn with replacement until counts are
    equal; duplicates are appended after all originals, and other splits
    are untouched.
    """
    per_class: dict[Label, list[int]] = {label: [] for label in Label}
    for i in manifest.indices_for(split):
        per_class[manifest.records[i].label].append(i)
    for label, members in per_class.items():
        if not members:
            raise ValueError(
                f"class {label.display_name.lower()!r} absent from {split.display_name} split"
            )
    target = max(len(members) for members in per_class.values())
    records = list(manifest.records)
    new_split = dict(manifest.split)
    rng = RandomSource(manifest.seed)
    for label in Label:
        members = per_class[label]
        shortfall = target - len(members)
        if shortfall == 0:
            continue
        picks = rng.substream("oversample", label.display_name.lower()).choice(
            len(members), size=shortfall, replace=True
        )
        for pick in picks:
            source = manifest.records[members[int(pick)]]
            new_split[len(records)] = split
            records.append(LabeledImage(path=source.path, label=source.label, pixels=source.pixels))
    return DatasetManifest(records=records, seed=manifest.seed, ratio=manifest.ratio, split=new_split)


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a (C, H, W) array; exact identity at equal size.

    Sample points follow the half-pixel convention: source coordinate
    (i + 0.5) * in/out - 0.5, clamped to the valid range.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"expected a (C, H, W) array, got shape {pixels.shape}")
    _, in_h, in_w = pixels.shape
    if in_h == 0 or in_w == 0 or out_h <= 0 or out_w <= 0:
        raise ValueError(f"cannot resize {in_h}x{in_w} to {out_h}x{out_w}")

    sy = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0.0, in_h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (sy - y0)[None, :, None]
    wx = (sx - x0)[None, None, :]

    p00 = pixels[:, y0[:, None], x0[None, :]]
    p01 = pixels[:, y0[:, None], x1[None, :]]
    p10 = pixels[:, y1[:, None], x0[None, :]]
    p11 = pixels[:, y1[:, None], x1[None, :]]
    top = p00 * (1.0 - wx) + p01 * wx
    bottom = p10 * (1.0 - wx) + p11 * wx
    return top * (1.0 - wy) + bottom * wy


def _to_model_range(pixels: np.ndarray) -> np.ndarray:
    # [0,255] -> [0,1] -> [-1,1] with per-channel mean 0.5, std 0.5.
    return (pixels / 255.0 - 0.5) / 0.5


def preprocess(image: LabeledImage | np.ndarray, target: int = 224) -> Tensor:
    """Resize to target resolution and map pixel values into [-1, 1]."""
    pixels = image.loaded_pixels() if isinstance(image, LabeledImage) else np.asarray(image, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) pixels, got shape {pixels.shape}")
    resized = resize_bilinear(pixels, target, target)
    return Tensor(_to_model_range(resized))


def augment(pixels: np.ndarray, spec: AugmentationSpec, rng: RandomSource) -> np.ndarray:
    """Apply the augmentation chain: flip, rotate, jitter, random resized crop.

    All random draws happen up front in a fixed order, so the result is a
    pure function of (pixels, spec, substream); degenerate parameters leave
    the corresponding stage out entirely, keeping identity specs bit-exact.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"expected a (C, H, W) array, got shape {pixels.shape}")
    _, height, width = pixels.shape

    flip_draw = rng.random()
    angle = rng.uniform(-spec.rotation_max_degrees, spec.rotation_max_degrees)
    brightness = rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    contrast = rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)
    crop_scale = rng.uniform(spec.crop_scale_min, 1.0)
    crop_y = rng.random()
    crop_x = rng.random()

    if flip_draw < spec.horizontal_flip_prob:
        pixels = pixels[:, :, ::-1]
    if angle != 0.0:
        pixels = ndimage.rotate(pixels, angle, axes=(1, 2), reshape=False,
                                order=1, mode="reflect")
        pixels = np.clip(pixels, 0.0, 255.0)
    if brightness != 0.0:
        pixels = np.clip(pixels * (1.0 + brightness), 0.0, 255.0)
    if contrast != 0.0:
        mean = pixels.mean()
        pixels = np.clip((pixels - mean) * (1.0 + contrast) + mean, 0.0, 255.0)
    if crop_scale != 1.0:
        side = min(height, max(1, int(round(height * math.sqrt(crop_scale)))))
        top = min(int(crop_y * (height - side + 1)), height - side)
        left = min(int(crop_x * (width - side + 1)), width - side)
        pixels = resize_bilinear(pixels[:, top:top + side, left:left + side], height, width)
    return np.ascontiguousarray(pixels)


def _one_hot(label: Label, num_classes: int = 2) -> np.ndarray:
    row = np.zeros(num_classes)
    row[int(label)] = 1.0
    return row


def make_batches(
    manifest: DatasetManifest,
    split: Split,
    batch_size: int,
    rng: RandomSource,
    epoch: int = 0,
    image_size: int = 224,
    augmentation: AugmentationSpec | None = None,
) -> Iterator[tuple[Tensor, Tensor]]:
    """Stream (images, one-hot targets) batches for one pass over a split.

    Train order reshuffles per epoch from the ``("shuffle", epoch)``
    substream; Val/Test keep manifest order. Augmentation applies to Train
    only, each sample keyed by epoch and its manifest index so worker
    scheduling cannot change the stream. The last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    indices = manifest.indices_for(split)
    if not indices:
        raise ValueError(f"split {split.display_name!r} is empty")
    if split is Split.TRAIN:
        order = rng.substream("shuffle", epoch).permutation(len(indices))
        indices = [indices[j] for j in order]

    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        images = np.empty((len(chunk), 3, image_size, image_size))
        targets = np.empty((len(chunk), len(Label)))
        for row, index in enumerate(chunk):
            record = manifest.records[index]
            resized = resize_bilinear(record.loaded_pixels(), image_size, image_size)
            if split is Split.TRAIN and augmentation is not None:
                resized = augment(resized, augmentation, rng.substream("augment", epoch, index))
            images[row] = _to_model_range(resized)
            targets[row] = _one_hot(record.label)
        yield Tensor(images), Tensor(targets)
