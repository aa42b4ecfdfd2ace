"""Vision Transformer classifier: patch embedding, encoder stack, probability head.

The model is a function of an explicit parameter collection, so the same code
path serves freshly initialized and checkpoint-loaded weights. All ops consume
and produce :class:`~vitkit.tensor.Tensor` values; gradients flow through every
stage. Label order is fixed: index 0 is Real, index 1 is Fake, probability
ties resolve to Real.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from typing import Iterator, Mapping

import numpy as np

from vitkit import tensor as T
from vitkit.tensor import RandomSource, Tensor

__all__ = [
    "Label",
    "ViTConfig",
    "ModelParameters",
    "ClassProbabilities",
    "VisionTransformer",
    "PRESETS",
    "config_from_preset",
    "parameter_shapes",
    "init_parameters",
    "patchify",
    "unpatchify",
    "embed",
    "multi_head_attention",
    "encoder_block",
    "forward",
    "predict",
]

LAYER_NORM_EPS = 1e-6
INIT_STD = 0.02


class Label(enum.IntEnum):
    """Class indices; the integer order is part of the output contract."""

    REAL = 0
    FAKE = 1

    @property
    def display_name(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_name(cls, name: str) -> "Label":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label {name!r}; expected 'Real' or 'Fake'") from None


@dataclass(frozen=True)
class ViTConfig:
    """Architecture hyperparameters; every derived size is a pure function of these."""

    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 768
    num_heads: int = 12
    num_layers: int = 12
    mlp_dim: int = 3072
    num_classes: int = 2
    dropout_rate: float = 0.0

    def __post_init__(self):
        for field in ("image_size", "patch_size", "channels", "embed_dim",
                      "num_heads", "num_layers", "mlp_dim", "num_classes"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ViTConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)


PRESETS: dict[str, ViTConfig] = {
    # Dimensions of the widely used base ViT at 224px with 16px patches.
    "vit-base-patch16-224": ViTConfig(
        image_size=224, patch_size=16, embed_dim=768,
        num_heads=12, num_layers=12, mlp_dim=3072,
    ),
    # Desk-scale model used by the fast tests.
    "vit-tiny-patch4-8": ViTConfig(
        image_size=8, patch_size=4, embed_dim=16,
        num_heads=2, num_layers=2, mlp_dim=32,
    ),
}


def config_from_preset(name: str) -> ViTConfig:
    if name not in PRESETS:
        raise ValueError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        )
    return PRESETS[name]


def parameter_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; also fixes the serialization order."""
    d, mlp, classes = config.embed_dim, config.mlp_dim, config.num_classes
    shapes: dict[str, tuple[int, ...]] = {
        "cls_token": (d,),
        "pos_embed": (config.num_patches + 1, d),
        "patch_proj.weight": (config.patch_dim, d),
        "patch_proj.bias": (d,),
    }
    for i in range(config.num_layers):
        block = f"blocks.{i}."
        shapes[block + "ln1.gamma"] = (d,)
        shapes[block + "ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[block + f"attn.w{proj}"] = (d, d)
            shapes[block + f"attn.b{proj}"] = (d,)
        shapes[block + "ln2.gamma"] = (d,)
        shapes[block + "ln2.beta"] = (d,)
        shapes[block + "mlp.w1"] = (d, mlp)
        shapes[block + "mlp.b1"] = (mlp,)
        shapes[block + "mlp.w2"] = (mlp, d)
        shapes[block + "mlp.b2"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    shapes["head.weight"] = (d, classes)
    shapes["head.bias"] = (classes,)
    return shapes


_BLOCK_KEYS = {
    "ln1_gamma": "ln1.gamma", "ln1_beta": "ln1.beta",
    "wq": "attn.wq", "bq": "attn.bq", "wk": "attn.wk", "bk": "attn.bk",
    "wv": "attn.wv", "bv": "attn.bv", "wo": "attn.wo", "bo": "attn.bo",
    "ln2_gamma": "ln2.gamma", "ln2_beta": "ln2.beta",
    "w1": "mlp.w1", "b1": "mlp.b1", "w2": "mlp.w2", "b2": "mlp.b2",
}


class ModelParameters:
    """Ordered name -> Tensor collection with per-block views.

    Order follows :func:`parameter_shapes`, which keeps checkpoints stable.
    """

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors: dict[str, Tensor] = dict(tensors)
        for name, t in self._tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"parameter {name!r} contains non-finite values")

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def keys(self):
        return self._tensors.keys()

    def values(self):
        return self._tensors.values()

    def items(self):
        return self._tensors.items()

    def layer(self, index: int) -> dict[str, Tensor]:
        """Short-key weight dict for encoder block ``index``."""
        prefix = f"blocks.{index}."
        return {short: self._tensors[prefix + long] for short, long in _BLOCK_KEYS.items()}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def validate_shapes(self, config: ViTConfig) -> None:
        expected = parameter_shapes(config)
        if list(expected) != list(self._tensors):
            missing = set(expected) - set(self._tensors)
            extra = set(self._tensors) - set(expected)
            raise ValueError(
                f"parameter names do not match config: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, shape in expected.items():
            got = self._tensors[name].shape
            if got != shape:
                raise ValueError(f"parameter {name!r} has shape {got}, expected {shape}")


def init_parameters(config: ViTConfig, rng: RandomSource) -> ModelParameters:
    """Fresh trainable parameters, deterministic in the random source.

    Projection weights and the positional table draw from a truncated normal
    (std 0.02, two sigma); gains start at one; biases and the class token
    start at zero. Each tensor uses its own name-keyed substream, so the
    result does not depend on initialization order.
    """
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif name == "pos_embed" or leaf.startswith("w"):
            data = rng.substream("init", name).truncated_normal(shape, std=INIT_STD, bound=2.0)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParameters(tensors)


@dataclass(frozen=True)
class ClassProbabilities:
    """Two-class output with the argmax label; ties resolve to Real."""

    real_prob: float
    fake_prob: float
    predicted_label: Label

    @classmethod
    def from_vector(cls, probs: np.ndarray) -> "ClassProbabilities":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (2,):
            raise ValueError(f"expected two class probabilities, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)):
            raise ValueError("class probabilities must be finite")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError(f"class probabilities must sum to 1, got {probs.sum()!r}")
        real, fake = float(probs[Label.REAL]), float(probs[Label.FAKE])
        label = Label.FAKE if fake > real else Label.REAL
        return cls(real_prob=real, fake_prob=fake, predicted_label=label)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Cut a channels-by-height-by-width image into flattened square patches.

    Patches are ordered row-major over the patch grid; each row flattens one
    patch in row, column, channel order. The operation is a pure index
    permutation, so :func:`unpatchify` inverts it exactly.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim != 3:
        raise ValueError(f"patchify expects a rank-3 image, got shape {image.shape}")
    channels, height, width = image.shape
    if height % patch_size or width % patch_size:
        raise ValueError(
            f"image size {height}x{width} is not divisible by patch size {patch_size}"
        )
    rows, cols = height // patch_size, width // patch_size
    grid = T.reshape(image, (channels, rows, patch_size, cols, patch_size))
    blocks = T.permute(grid, (1, 3, 2, 4, 0))
    return T.reshape(blocks, (rows * cols, patch_size * patch_size * channels))


def unpatchify(patches: Tensor, image_size: int, patch_size: int, channels: int) -> Tensor:
    """Reassemble :func:`patchify` output into the original image."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    rows = image_size // patch_size
    expected = (rows * rows, patch_size * patch_size * channels)
    if patches.shape != expected:
        raise ValueError(f"patch array has shape {patches.shape}, expected {expected}")
    blocks = T.reshape(patches, (rows, rows, patch_size, patch_size, channels))
    grid = T.permute(blocks, (4, 0, 2, 1, 3))
    return T.reshape(grid, (channels, image_size, image_size))


def embed(patches: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Project patches into the embedding space and prepend the class token.

    Output row 0 is the class token; rows 1..N are patch projections; the
    positional table is added to every row.
    """
    weight, bias = params["patch_proj.weight"], params["patch_proj.bias"]
    cls_token, positions = params["cls_token"], params["pos_embed"]
    if patches.ndim != 2 or patches.shape[1] != weight.shape[0]:
        raise ValueError(
            f"patch array of shape {patches.shape} does not match projection "
            f"input size {weight.shape[0]}"
        )
    if positions.shape[0] != patches.shape[0] + 1:
        raise ValueError(
            f"positional table has {positions.shape[0]} rows, expected {patches.shape[0] + 1}"
        )
    tokens = patches @ weight + bias
    seq = T.concat([cls_token.reshape(1, -1), tokens], axis=0)
    return seq + positions


def multi_head_attention(
    x: Tensor,
    weights: Mapping[str, Tensor],
    num_heads: int,
    return_attention: bool = False,
):
    """Scaled dot-product self-attention over ``num_heads`` subspaces.

    Each head attends with softmax(Q Kᵀ / sqrt(head_dim)); head outputs are
    concatenated and re-projected. With ``return_attention`` the per-head
    attention maps come back as a (heads, seq, seq) array.
    """
    seq_len, dim = x.shape
    if dim % num_heads != 0:
        raise ValueError(f"embedding size {dim} is not divisible by {num_heads} heads")
    head_dim = dim // num_heads
    scale = 1.0 / math.sqrt(head_dim)

    q = x @ weights["wq"] + weights["bq"]
    k = x @ weights["wk"] + weights["bk"]
    v = x @ weights["wv"] + weights["bv"]

    contexts = []
    maps = []
    for h in range(num_heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        scores = (q[:, cols] @ T.transpose(k[:, cols])) * scale
        attn = T.softmax(scores, axis=-1)
        contexts.append(attn @ v[:, cols])
        if return_attention:
            maps.append(attn.data)
    merged = T.concat(contexts, axis=1)
    out = merged @ weights["wo"] + weights["bo"]
    if return_attention:
        return out, np.stack(maps)
    return out


def _dropout(x: Tensor, rate: float, rng: RandomSource) -> Tensor:
    # Inverted dropout: scaling at train time keeps the expectation unchanged.
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


def encoder_block(
    x: Tensor,
    weights: Mapping[str, Tensor],
    num_heads: int,
    dropout_rate: float = 0.0,
    rng: RandomSource | None = None,
    return_attention: bool = False,
):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    normed = T.layer_norm(x, weights["ln1_gamma"], weights["ln1_beta"], eps=LAYER_NORM_EPS)
    if return_attention:
        attended, maps = multi_head_attention(normed, weights, num_heads, return_attention=True)
    else:
        attended = multi_head_attention(normed, weights, num_heads)
    if dropout_rate > 0.0:
        if rng is None:
            raise ValueError("dropout requires a random source")
        attended = _dropout(attended, dropout_rate, rng)
    x = x + attended

    normed = T.layer_norm(x, weights["ln2_gamma"], weights["ln2_beta"], eps=LAYER_NORM_EPS)
    hidden = T.gelu(normed @ weights["w1"] + weights["b1"])
    expanded = hidden @ weights["w2"] + weights["b2"]
    if dropout_rate > 0.0:
        expanded = _dropout(expanded, dropout_rate, rng)
    x = x + expanded
    if return_attention:
        return x, maps
    return x


def forward(
    image: Tensor,
    config: ViTConfig,
    params: ModelParameters,
    rng: RandomSource | None = None,
    train: bool = False,
    return_attention: bool = False,
):
    """Full classifier pass: image -> probability vector of length num_classes.

    Dropout applies only when ``train`` is set and the config enables it; a
    random source must then be supplied. With ``return_attention`` a list of
    per-layer (heads, seq, seq) attention maps accompanies the probabilities.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    expected = (config.channels, config.image_size, config.image_size)
    if image.shape != expected:
        raise ValueError(f"forward: image shape {image.shape} does not match config {expected}")
    dropout_rate = config.dropout_rate if train else 0.0
    if dropout_rate > 0.0 and rng is None:
        raise ValueError("forward: dropout is enabled but no random source was given")

    try:
        patches = patchify(image, config.patch_size)
    except ValueError as err:
        raise ValueError(f"forward/patchify: {err}") from err
    try:
        x = embed(patches, params)
    except ValueError as err:
        raise ValueError(f"forward/embed: {err}") from err

    attention_maps = []
    for i in range(config.num_layers):
        block_rng = rng.substream("dropout", i) if dropout_rate > 0.0 else None
        try:
            result = encoder_block(
                x, params.layer(i), config.num_heads,
                dropout_rate=dropout_rate, rng=block_rng,
                return_attention=return_attention,
            )
        except ValueError as err:
            raise ValueError(f"forward/block{i}: {err}") from err
        if return_attention:
            x, maps = result
            attention_maps.append(maps)
        else:
            x = result

    x = T.layer_norm(x, params["final_ln.gamma"], params["final_ln.beta"], eps=LAYER_NORM_EPS)
    logits = x[0:1] @ params["head.weight"] + params["head.bias"]
    probs = T.softmax(logits, axis=-1).reshape(config.num_classes)
    if return_attention:
        return probs, attention_maps
    return probs


def predict(image: Tensor, config: ViTConfig, params: ModelParameters) -> ClassProbabilities:
    """Inference-only forward pass reduced to a labeled probability pair."""
    with T.no_grad():
        probs = forward(image, config, params)
    return ClassProbabilities.from_vector(probs.data)


class VisionTransformer:
    """Config + parameters bundle with the forward/predict entry points."""

    def __init__(self, config: ViTConfig, params: ModelParameters):
        params.validate_shapes(config)
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ViTConfig, rng: RandomSource) -> "VisionTransformer":
        return cls(config, init_parameters(config, rng))

    def forward(self, image: Tensor, **kwargs):
        return forward(image, self.config, self.params, **kwargs)

    def predict(self, image: Tensor) -> ClassProbabilities:
        return predict(image, self.config, self.params)

    def num_parameters(self) -> int:
        return self.params.num_parameters()
