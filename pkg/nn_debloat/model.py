"""
Layer records and the `Model` container.

A model is an ordered list of layers applied to inputs of shape
``input_shape`` (batch dimension excluded).  Construction validates the
whole shape chain, so any `Model` instance is ready for inference.
"""

import math
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from nn_debloat.tensor_core import ActivationKind, Padding, pair


class ModelError(ValueError):
    """
    A model violates one of its structural invariants.
    """


def _param(values):
    return np.ascontiguousarray(values, dtype=np.float32)


@dataclass(eq=False)
class Dense:
    weights: np.ndarray
    bias: np.ndarray
    activation: ActivationKind = ActivationKind.NONE

    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        self.weights = _param(self.weights)
        self.bias = _param(self.bias)
        self.activation = ActivationKind(self.activation)

    @property
    def units(self):
        return self.weights.shape[1]

    def output_shape(self, input_shape):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ModelError(
                f"weights {list(self.weights.shape)} and bias {list(self.bias.shape)} disagree"
            )
        if tuple(input_shape) != (self.weights.shape[0],):
            raise ModelError(
                f"expects input ({self.weights.shape[0]},), got {tuple(input_shape)}"
            )
        return (self.units,)

    def tensors(self):
        return {"weights": self.weights, "bias": self.bias}

    def config(self):
        return {}


@dataclass(eq=False)
class Conv2D:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: Padding = Padding.VALID
    activation: ActivationKind = ActivationKind.NONE

    kind: ClassVar[str] = "conv2d"

    def __post_init__(self):
        self.kernel = _param(self.kernel)
        self.bias = _param(self.bias)
        self.stride = int(self.stride)
        self.padding = Padding(self.padding)
        self.activation = ActivationKind(self.activation)

    @property
    def units(self):
        return self.kernel.shape[3]

    def output_shape(self, input_shape):
        if self.kernel.ndim != 4 or self.bias.shape != (self.kernel.shape[3],):
            raise ModelError(
                f"kernel {list(self.kernel.shape)} and bias {list(self.bias.shape)} disagree"
            )
        if self.stride < 1:
            raise ModelError(f"stride must be >= 1, got {self.stride}")
        kernel_h, kernel_w, in_channels, _ = self.kernel.shape
        if len(input_shape) != 3 or input_shape[2] != in_channels:
            raise ModelError(
                f"expects input (h, w, {in_channels}), got {tuple(input_shape)}"
            )
        height, width = input_shape[0], input_shape[1]
        if self.padding is Padding.SAME:
            return (
                math.ceil(height / self.stride),
                math.ceil(width / self.stride),
                self.units,
            )
        if kernel_h > height or kernel_w > width:
            raise ModelError(
                f"kernel {kernel_h}x{kernel_w} larger than input {height}x{width}"
            )
        return (
            (height - kernel_h) // self.stride + 1,
            (width - kernel_w) // self.stride + 1,
            self.units,
        )

    def tensors(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def config(self):
        return {"stride": self.stride, "padding": self.padding.value}


@dataclass(eq=False)
class Flatten:
    activation: ActivationKind = ActivationKind.NONE

    kind: ClassVar[str] = "flatten"

    def __post_init__(self):
        self.activation = ActivationKind(self.activation)

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def tensors(self):
        return {}

    def config(self):
        return {}


@dataclass(eq=False)
class MaxPool2D:
    pool: tuple = (2, 2)
    stride: tuple = None
    activation: ActivationKind = ActivationKind.NONE

    kind: ClassVar[str] = "maxpool2d"

    def __post_init__(self):
        self.pool = pair(self.pool)
        self.stride = pair(self.stride if self.stride is not None else self.pool)
        self.activation = ActivationKind(self.activation)

    def output_shape(self, input_shape):
        if min(self.pool + self.stride) < 1:
            raise ModelError("pool and stride must be >= 1")
        if len(input_shape) != 3:
            raise ModelError(f"expects input (h, w, c), got {tuple(input_shape)}")
        height, width, channels = input_shape
        if self.pool[0] > height or self.pool[1] > width:
            raise ModelError(
                f"pool {self.pool[0]}x{self.pool[1]} larger than input {height}x{width}"
            )
        return (
            (height - self.pool[0]) // self.stride[0] + 1,
            (width - self.pool[1]) // self.stride[1] + 1,
            channels,
        )

    def tensors(self):
        return {}

    def config(self):
        return {"pool": list(self.pool), "stride": list(self.stride)}


LAYER_TYPES = {layer.kind: layer for layer in (Dense, Conv2D, Flatten, MaxPool2D)}

PARAMETRIC_KINDS = ("dense", "conv2d")


@dataclass(eq=False)
class Model:
    input_shape: tuple
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(dim) for dim in self.input_shape)
        self.layers = list(self.layers)
        self.validate()

    def validate(self):
        """
        Check the shape chain and the activation/width invariants.

        Returns the list of per-layer output shapes.
        Raises `ModelError` naming the offending layer index.
        """
        if not self.layers:
            raise ModelError("a model needs at least one layer")
        if not self.input_shape or min(self.input_shape) < 1:
            raise ModelError(f"invalid input shape {self.input_shape}")
        shapes = []
        shape = self.input_shape
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            if (
                layer.kind in PARAMETRIC_KINDS
                and min(layer.tensors()["bias"].shape) < 1
            ):
                raise ModelError(f"layer {index} ({layer.kind}) has no units")
            if layer.activation is ActivationKind.SOFTMAX and index != last:
                raise ModelError(
                    f"layer {index} ({layer.kind}): softmax is only allowed on the final layer"
                )
            if (
                layer.kind not in PARAMETRIC_KINDS
                and layer.activation is not ActivationKind.NONE
            ):
                raise ModelError(
                    f"layer {index} ({layer.kind}) cannot carry an activation"
                )
            try:
                shape = layer.output_shape(shape)
            except ModelError as exc:
                raise ModelError(f"layer {index} ({layer.kind}): {exc}")
            shapes.append(shape)
        if len(shape) != 1:
            raise ModelError(
                f"the final layer must produce a class vector, got shape {shape}"
            )
        return shapes

    def shapes(self):
        return self.validate()

    @property
    def class_count(self):
        return self.shapes()[-1][0]

    def input_shape_of(self, index):
        """Shape of the tensor fed into layer `index` (batch excluded)."""
        return self.input_shape if index == 0 else self.shapes()[index - 1]

    def parametric_indices(self):
        return [
            index
            for index, layer in enumerate(self.layers)
            if layer.kind in PARAMETRIC_KINDS
        ]

    def next_parametric(self, index):
        """Index of the first parametric layer after `index`, or None."""
        for later in range(index + 1, len(self.layers)):
            if self.layers[later].kind in PARAMETRIC_KINDS:
                return later
        return None

    def param_count(self):
        return sum(
            tensor.size for layer in self.layers for tensor in layer.tensors().values()
        )

    def copy(self):
        layers = []
        for layer in self.layers:
            tensors = {name: tensor.copy() for name, tensor in layer.tensors().items()}
            layers.append(
                type(layer)(**tensors, **layer.config(), activation=layer.activation)
            )
        return Model(self.input_shape, layers)

    def identical_to(self, other):
        """
        True when both models have the same structure and bit-identical tensors.
        """
        if self.input_shape != other.input_shape or len(self.layers) != len(
            other.layers
        ):
            return False
        for mine, theirs in zip(self.layers, other.layers):
            if (
                mine.kind != theirs.kind
                or mine.activation is not theirs.activation
                or mine.config() != theirs.config()
            ):
                return False
            mine_tensors, their_tensors = mine.tensors(), theirs.tensors()
            if mine_tensors.keys() != their_tensors.keys():
                return False
            for name, tensor in mine_tensors.items():
                other_tensor = their_tensors[name]
                if (
                    tensor.shape != other_tensor.shape
                    or tensor.tobytes() != other_tensor.tobytes()
                ):
                    return False
        return True
