"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy float64 array wrapped in a :class:`Tensor`. Operations
record a tape of vector-Jacobian callbacks while gradients are enabled;
calling ``backward()`` on a scalar walks that tape once, deposits gradients on
the leaves, and discards the tape. :class:`RandomSource` provides seeded,
counter-based randomness whose substreams are independent of consumption
order, so data pipelines stay reproducible regardless of scheduling.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import math
import warnings
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "RandomSource",
    "no_grad",
    "backward",
    "matmul",
    "transpose",
    "permute",
    "reshape",
    "concat",
    "log",
    "clip_min",
    "softmax",
    "layer_norm",
    "gelu",
]

_grad_enabled = contextvars.ContextVar("vitkit_grad_enabled", default=True)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context; values only, no gradients."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A dense float64 array with shape metadata and an optional gradient.

    Tensors are value carriers: ``data`` is treated as immutable once the
    tensor participates in a computation. ``requires_grad`` marks trainable
    leaves; results of operations on such leaves carry the tape needed for
    :meth:`backward`. Gradients accumulate into ``grad`` until cleared.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A tape-free view of the same values."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flags}{label})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _add(self, _as_tensor(other))

    def __radd__(self, other):
        return _add(_as_tensor(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_as_tensor(other)))

    def __rsub__(self, other):
        return _add(_as_tensor(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return _mul(_as_tensor(other), self)

    def __neg__(self):
        return _neg(self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division only supports scalar divisors")
        return _scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _mean(self, axis=axis, keepdims=keepdims)

    # -- differentiation ----------------------------------------------------

    def backward(self) -> None:
        """Propagate gradients from this scalar to every reachable leaf.

        The recorded tape is discarded as it is consumed; leaves accumulate
        into ``grad`` (cleared with :meth:`zero_grad`).
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = pending.get(id(parent))
                pending[id(parent)] = pg if held is None else held + pg
            node._parents = ()
            node._vjp = None


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Differentiate a scalar loss and collect a named gradient map.

    Every entry of ``params`` receives a gradient tensor; parameters the loss
    does not depend on receive zeros. A loss disconnected from all parameters
    yields an all-zero map and a warning.
    """
    loss.backward()
    grads: dict[str, Tensor] = {}
    touched = False
    for pname, param in params.items():
        if param.grad is None:
            grads[pname] = Tensor(np.zeros_like(param.data))
        else:
            grads[pname] = Tensor(param.grad)
            touched = True
    if params and not touched:
        warnings.warn("loss is disconnected from all parameters; gradients are zero")
    return grads


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squashed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squashed:
        grad = grad.sum(axis=squashed, keepdims=True)
    return grad


def _add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record(out, (a, b), vjp)


def _neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def _scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(a.data * factor)
    return _record(out, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects rank-2 operands, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree for shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the two axes of a rank-2 tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a rank-2 tensor, got shape {a.data.shape}")
    return permute(a, (1, 0))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Reorder tensor axes."""
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    parts = tuple(_as_tensor(t) for t in tensors)
    if not parts:
        raise ValueError("concat requires at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, parts, vjp)


def _getitem(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _record(out, (a,), vjp)


def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.full(a.data.shape, g),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def _mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return _scale(_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def log(a: Tensor) -> Tensor:
    """Natural logarithm; callers clamp inputs away from zero first."""
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def clip_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise lower clamp; gradient passes only where unclamped."""
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, lo))
    return _record(out, (a,), lambda g: (g * (a.data > lo),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponentials along one axis, stabilized by max-subtraction.

    Slices along ``axis`` are nonnegative and sum to one.
    """
    x = _as_tensor(x)
    rank = x.data.ndim
    if not -rank <= axis < rank:
        raise ValueError(f"softmax axis {axis} out of range for rank {rank}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine.

    ``gamma`` and ``beta`` must be vectors matching the last-axis size.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    dim = x.data.shape[-1]
    if gamma.data.shape != (dim,) or beta.data.shape != (dim,):
        raise ValueError(
            f"layer_norm: gain/bias shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match last dimension {dim}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), vjp)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, exact erf form: ``x * Phi(x)``."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _record(out, (x,), vjp)


# -- randomness --------------------------------------------------------------


def _encode_label(label) -> bytes:
    if isinstance(label, bool):
        raise TypeError("substream labels must be strings or integers")
    if isinstance(label, str):
        return b"s:" + label.encode("utf-8") + b"\x00"
    if isinstance(label, (int, np.integer)):
        return b"i:" + str(int(label)).encode("ascii") + b"\x00"
    raise TypeError(f"substream labels must be strings or integers, got {type(label).__name__}")


class RandomSource:
    """Seeded counter-based random stream, splittable by label.

    Equal seeds yield bit-identical sequences across runs and platforms.
    Substreams are keyed by ``(seed, labels...)`` through a hash, so drawing
    from one substream never perturbs another.
    """

    def __init__(self, seed: int, _key: bytes | None = None):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        if _key is None:
            _key = hashlib.sha256(b"vitkit.rng.v1:" + seed.to_bytes(8, "little")).digest()
        self._key = _key
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(_key[:16], "little"))
        )

    def substream(self, *labels) -> "RandomSource":
        """Derive an independent stream for ``labels``; order of use is irrelevant.

        Labels fold into the key one at a time, so ``substream(a, b)`` and
        ``substream(a).substream(b)`` name the same stream.
        """
        key = self._key
        for label in labels:
            key = hashlib.sha256(key + _encode_label(label)).digest()
        return RandomSource(self.seed, _key=key)

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None):
        return self._gen.normal(mean, std, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def truncated_normal(self, shape, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal samples restricted to ``bound`` standard deviations, via inverse CDF."""
        lo, hi = special.ndtr(-bound), special.ndtr(bound)
        u = lo + (hi - lo) * self._gen.random(shape)
        return special.ndtri(u) * std
