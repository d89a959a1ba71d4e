"""Parameters, layers, and losses built on the autodiff core."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import core
from .core import DiffTensor, constant

__all__ = [
    "Parameter", "ParamSet", "MLP",
    "linear", "residual_add", "attention",
    "mse_loss", "smooth_l1", "cross_entropy",
]

smooth_l1 = core.smooth_l1


class Parameter:
    """A named trainable tensor; names encode the module hierarchy."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, tensor: DiffTensor, trainable: bool = True):
        self.name = name
        self.tensor = tensor
        self.trainable = trainable

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class ParamSet:
    """Flat registry of a model's parameters, keyed by unique dotted name."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def new(self, name: str, shape: tuple, rng: np.random.Generator) -> DiffTensor:
        """Register a weight initialized uniform in +/- sqrt(6/(fan_in+fan_out))."""
        fan_in, fan_out = shape[0], shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._register(name, rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape: tuple) -> DiffTensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> DiffTensor:
        return self._register(name, np.ones(shape))

    def _register(self, name: str, values: np.ndarray) -> DiffTensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = DiffTensor(values, requires_grad=True)
        self._params[name] = Parameter(name, t)
        return t

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def count_values(self) -> int:
        return int(np.sum([p.tensor.size for p in self]))

    def state_arrays(self) -> dict[str, np.ndarray]:
        """name -> value buffer, in registration order."""
        return {p.name: p.tensor.values for p in self}

    def set_trainable(self, prefixes: tuple[str, ...], trainable: bool) -> None:
        for p in self:
            if p.name.startswith(prefixes):
                p.trainable = trainable

    def load_arrays(self, arrays: dict[str, np.ndarray], prefixes: tuple[str, ...] | None = None):
        """Copy values in from `arrays`. Fails loudly on any name or shape mismatch.

        When `prefixes` is given only parameters under those prefixes are loaded
        (extra entries in `arrays` are ignored either way).
        """
        from ..errors import DataError

        problems = []
        for p in self:
            if prefixes is not None and not p.name.startswith(prefixes):
                continue
            if p.name not in arrays:
                problems.append(f"missing: {p.name}")
                continue
            src = arrays[p.name]
            if tuple(src.shape) != p.tensor.shape:
                problems.append(f"shape mismatch: {p.name} expects {p.tensor.shape}, file has {tuple(src.shape)}")
                continue
            p.tensor.values = np.array(src, dtype=np.float64)
            p.tensor.grad = None
        if problems:
            raise DataError("checkpoint does not match model parameters:\n  " + "\n  ".join(problems))


class MLP:
    """Stack of linear layers with ReLU between them (output layer stays linear).

    `dims` lists the layer widths including input and output, so a 4-layer
    head is dims of length 5. Dropout, when requested, applies to the hidden
    activations in training mode only.
    """

    def __init__(self, params: ParamSet, prefix: str, dims: list[int], rng: np.random.Generator):
        self.weights = []
        self.biases = []
        for i in range(len(dims) - 1):
            self.weights.append(params.new(f"{prefix}.l{i}.w", (dims[i], dims[i + 1]), rng))
            self.biases.append(params.zeros(f"{prefix}.l{i}.b", (dims[i + 1],)))

    def __call__(self, x: DiffTensor, train: bool = False, rng=None, drop: float = 0.0) -> DiffTensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = linear(x, w, b)
            if i < last:
                x = core.relu(x)
                if drop > 0.0:
                    x = core.dropout(x, drop, train, rng)
        return x


def linear(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None) -> DiffTensor:
    """x @ w + b for 2-d x."""
    y = core.matmul(x, w)
    if b is not None:
        y = core.add(y, b)
    return y


def residual_add(x: DiffTensor, y: DiffTensor) -> DiffTensor:
    return core.add(x, y)


def attention(q: DiffTensor, k: DiffTensor, v: DiffTensor, mask=None) -> DiffTensor:
    """Scaled dot-product attention over rows; `mask` marks invalid keys.

    Rows whose keys are all invalid produce an all-zero output row.
    """
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("attention feature dimension must be positive")
    scores = core.scale(core.matmul(q, core.transpose(k)), 1.0 / np.sqrt(d))
    weights = core.softmax(scores, axis=-1, mask=mask)
    return core.matmul(weights, v)


def mse_loss(pred: DiffTensor, target, mask=None) -> DiffTensor:
    """Mean squared error; `mask` (where given) selects contributing elements."""
    target = target if isinstance(target, DiffTensor) else constant(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    d = core.sub(pred, target)
    sq = core.mul(d, d)
    if mask is None:
        return core.mean(sq)
    m = np.asarray(mask, dtype=np.float64)
    count = float(m.sum())
    if count == 0:
        raise ShapeError("mse_loss mask selects no elements")
    return core.scale(core.sum(core.mul(sq, constant(m))), 1.0 / count)


def cross_entropy(pred: DiffTensor, target_index: int, from_logits: bool = False,
                  floor: float = 1e-12) -> DiffTensor:
    """-log p[target_index], with p given directly or via softmax of logits."""
    flat = core.reshape(pred, (pred.size,))
    probs = core.softmax(flat, axis=-1) if from_logits else flat
    picked = core.slice_axis(probs, 0, int(target_index), 1)
    return core.neg(core.reshape(core.log(picked, floor=floor), ()))
