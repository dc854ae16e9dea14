"""Layer containers and the shared parameter collection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor, backward_map

ACTIVATIONS = ("relu", "sigmoid", "identity")


def apply_activation(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return ops.relu(x)
    if name == "sigmoid":
        return ops.sigmoid(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    """Fully connected layer y = f(W x + b)."""

    weights: Tensor  # (out, in)
    biases: Tensor  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        w, b = self.weights.data, self.biases.data
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"inconsistent dense shapes W {w.shape}, b {b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def create(cls, n_in, n_out, activation, rng, dtype=np.float64, prefix="dense"):
        # relu halves the variance, linear/sigmoid layers don't
        gain = 2.0 if activation == "relu" else 1.0
        w = he_normal(
            rng, (n_out, n_in), fan_in=n_in, dtype=dtype, name=f"{prefix}.weights",
            gain=gain,
        )
        b = Tensor(np.zeros(n_out, dtype=dtype), name=f"{prefix}.biases")
        return cls(weights=w, biases=b, activation=activation)


@dataclass
class ConvLayer:
    """Convolutional layer: cross-correlation filters plus one bias per map."""

    filters: Tensor  # (out_maps, in_maps, K, L)
    biases: Tensor  # (out_maps,)

    def __post_init__(self):
        f, b = self.filters.data, self.biases.data
        if f.ndim != 4 or b.shape != (f.shape[0],):
            raise ValueError(f"inconsistent conv shapes filters {f.shape}, b {b.shape}")
        if f.shape[2] % 2 == 0 or f.shape[3] % 2 == 0:
            raise ValueError(f"filter size {f.shape[2:]} must be odd (centered filters)")

    @property
    def filter_size(self):
        return self.filters.data.shape[2:]

    @classmethod
    def create(cls, in_maps, out_maps, size, rng, dtype=np.float64, prefix="conv"):
        kh, kw = size
        fan_in = in_maps * kh * kw
        f = he_normal(
            rng, (out_maps, in_maps, kh, kw), fan_in=fan_in, dtype=dtype,
            name=f"{prefix}.filters",
        )
        b = Tensor(np.zeros(out_maps, dtype=dtype), name=f"{prefix}.biases")
        return cls(filters=f, biases=b)


def he_normal(rng, shape, fan_in, dtype=np.float64, name=None, gain=2.0) -> Tensor:
    """Zero-mean normal weights with std sqrt(gain / fan_in) (gain 2 suits relu)."""
    std = np.sqrt(gain / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), name=name)


def dense_forward(x, layer: DenseLayer) -> Tensor:
    """y = f(W x + b); accepts a single vector or a (N, in) batch."""
    x = as_tensor(x, dtype=layer.weights.data.dtype)
    single = x.data.ndim == 1
    if single:
        x = ops.reshape(x, (1, x.data.shape[0]))
    y = apply_activation(ops.affine(x, layer.weights, layer.biases), layer.activation)
    if single:
        y = ops.reshape(y, (y.data.shape[1],))
    return y


def conv_forward(x, layer: ConvLayer) -> Tensor:
    """Valid cross-correlation over input maps, bias added, relu applied."""
    x = as_tensor(x, dtype=layer.filters.data.dtype)
    return ops.relu(ops.conv2d(x, layer.filters, layer.biases))


class ParameterSet:
    """Ordered, named collection of all trainable tensors.

    Iteration order is the registration order and is stable, so optimizer
    state, gradient sets and checkpoints align element for element. The
    flat-index helpers treat the whole set as one concatenated vector,
    which is what finite-difference checks perturb.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.name = name
        tensor.requires_grad = True
        self._tensors[name] = tensor
        return tensor

    def __iter__(self):
        return iter(self._tensors.items())

    def __len__(self):
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self):
        return list(self._tensors)

    def tensors(self):
        return list(self._tensors.values())

    @property
    def total_count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def pack(self) -> np.ndarray:
        """All parameters concatenated into one float64 vector (a copy)."""
        return np.concatenate(
            [t.data.ravel().astype(np.float64) for t in self._tensors.values()]
        )

    def unpack(self, vector: np.ndarray) -> None:
        """Overwrite all parameters from a concatenated vector."""
        if vector.size != self.total_count:
            raise ValueError(
                f"vector has {vector.size} entries, parameters need {self.total_count}"
            )
        offset = 0
        for t in self._tensors.values():
            n = t.data.size
            t.data = vector[offset : offset + n].reshape(t.data.shape).astype(t.data.dtype)
            offset += n

    def _locate(self, flat_index: int):
        offset = 0
        for t in self._tensors.values():
            if flat_index < offset + t.data.size:
                return t, flat_index - offset
            offset += t.data.size
        raise IndexError(f"flat index {flat_index} out of range")

    def get_flat(self, flat_index: int) -> float:
        t, i = self._locate(flat_index)
        return float(t.data.ravel()[i])

    def add_flat(self, flat_index: int, delta: float) -> None:
        t, i = self._locate(flat_index)
        flat = t.data.ravel()
        flat[i] += delta
        t.data = flat.reshape(t.data.shape)


class GradientSet:
    """One gradient array per parameter, aligned with a `ParameterSet`."""

    def __init__(self, params: ParameterSet, grads: dict[str, np.ndarray]):
        self._grads: dict[str, np.ndarray] = {}
        for name, tensor in params:
            g = grads.get(name)
            if g is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            if g.shape != tensor.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape {tensor.data.shape} "
                    f"for {name!r}"
                )
            self._grads[name] = g

    def __iter__(self):
        return iter(self._grads.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._grads[name]

    def scale(self, factor: float) -> "GradientSet":
        for g in self._grads.values():
            g *= factor
        return self

    def add(self, other: "GradientSet") -> "GradientSet":
        for name, g in other:
            self._grads[name] = self._grads[name] + g
        return self

    def pack(self) -> np.ndarray:
        return np.concatenate([g.ravel().astype(np.float64) for g in self._grads.values()])


def backward(loss: Tensor, params: ParameterSet) -> GradientSet:
    """Reverse-mode gradients of a scalar loss for every parameter.

    Raises
    ------
    ValueError
        If the loss is not a scalar or a parameter is detached from the
        recorded graph.
    """
    grads_by_id = backward_map(loss)
    named: dict[str, np.ndarray] = {}
    for name, tensor in params:
        g = grads_by_id.get(id(tensor))
        if g is None:
            raise ValueError(f"parameter {name!r} is detached from the loss graph")
        named[name] = g
    return GradientSet(params, named)
