"""
Small fixture trainer: plain mini-batch gradient descent on cross entropy.

Architectures are given as strings:

* ``mlp:32,32`` ReLU dense layers of the listed widths and a softmax head;
* ``cnn:8,16/32`` 3x3 same-padded ReLU convolutions, each followed by 2x2
  max-pooling, then flatten, an optional ReLU dense layer and a softmax head.
"""

import logging
import math
import re
from dataclasses import dataclass

import numpy as np

from nn_debloat.model import Conv2D, Dense, Flatten, MaxPool2D, Model, ModelError
from nn_debloat.tensor_core import ActivationKind, Padding, loss_and_gradients

ARCH_PATTERN = re.compile(r"^(mlp|cnn):(\d+(?:,\d+)*)(?:/(\d+))?$")

LOGGER = logging.getLogger(__name__)


class ArchSpecError(ValueError):
    """
    An architecture string could not be parsed or built.
    """


class TrainingError(RuntimeError):
    """
    Training diverged.
    """


@dataclass(frozen=True)
class ArchSpec:
    family: str
    widths: tuple
    dense: int = None

    @classmethod
    def parse(cls, text):
        match = ARCH_PATTERN.match(text.strip())
        if not match:
            raise ArchSpecError(
                f"invalid architecture '{text}': expected 'mlp:w1,w2,...' "
                "or 'cnn:c1,c2,...[/dense]'"
            )
        family, widths, dense = match.groups()
        if family == "mlp" and dense is not None:
            raise ArchSpecError(
                f"invalid architecture '{text}': '/dense' is for cnn only"
            )
        widths = tuple(int(width) for width in widths.split(","))
        if min(widths) < 1 or (dense is not None and int(dense) < 1):
            raise ArchSpecError(f"invalid architecture '{text}': widths must be >= 1")
        return cls(family, widths, int(dense) if dense is not None else None)

    def __str__(self):
        text = f"{self.family}:{','.join(map(str, self.widths))}"
        return text if self.dense is None else f"{text}/{self.dense}"


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def _dense(rng, fan_in, units, activation):
    return Dense(
        _he_normal(rng, (fan_in, units), fan_in),
        np.zeros(units, dtype=np.float32),
        activation,
    )


def build_model(arch, input_shape, class_count, seed=0):
    """
    A freshly initialized model (He-normal weights, zero biases).
    """
    if isinstance(arch, str):
        arch = ArchSpec.parse(arch)
    rng = np.random.default_rng(seed)
    input_shape = tuple(input_shape)
    layers = []

    if arch.family == "cnn":
        if len(input_shape) != 3:
            raise ArchSpecError(f"cnn needs image inputs [h, w, c], got {input_shape}")
        channels = input_shape[2]
        for width in arch.widths:
            fan_in = 9 * channels
            layers.append(
                Conv2D(
                    _he_normal(rng, (3, 3, channels, width), fan_in),
                    np.zeros(width, dtype=np.float32),
                    padding=Padding.SAME,
                    activation=ActivationKind.RELU,
                )
            )
            layers.append(MaxPool2D(2))
            channels = width
        layers.append(Flatten())
        hidden = (arch.dense,) if arch.dense is not None else ()
    else:
        if len(input_shape) != 1:
            layers.append(Flatten())
        hidden = arch.widths

    try:
        fan_in = Model(input_shape, layers + [Flatten()]).shapes()[-1][0]
    except ModelError as exc:
        raise ArchSpecError(f"{arch} does not fit inputs {input_shape}: {exc}")
    for width in hidden:
        layers.append(_dense(rng, fan_in, width, ActivationKind.RELU))
        fan_in = width
    layers.append(_dense(rng, fan_in, class_count, ActivationKind.SOFTMAX))
    return Model(input_shape, layers)


class FixtureTrainer:
    """
    Deterministic mini-batch gradient descent; `losses` keeps the mean loss
    of every finished epoch.
    """

    def __init__(self, learning_rate=0.1, batch_size=32, seed=0):
        if learning_rate <= 0 or batch_size < 1:
            raise ValueError("learning rate and batch size must be positive")
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.losses = []

    def _step(self, model, inputs, labels):
        loss, gradients = loss_and_gradients(model, inputs, labels)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged to {loss}")
        for layer, grads in zip(model.layers, gradients):
            if grads is None:
                continue
            for name, tensor in layer.tensors().items():
                step = np.float32(self.learning_rate) * grads[name]
                tensor -= step.astype(np.float32)
        return loss

    def fit(self, model, dataset, epochs):
        """Train `model` in place and return it."""
        if len(dataset) == 0:
            raise TrainingError("cannot train on an empty dataset")
        rng = np.random.default_rng(self.seed)
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(dataset))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                batch = order[start : start + self.batch_size]
                loss = self._step(model, dataset.inputs[batch], dataset.labels[batch])
                total += loss * batch.shape[0]
            self.losses.append(total / len(order))
            LOGGER.info("training epoch %d: mean loss %.6f", epoch, self.losses[-1])
        return model


def train_fixture(
    arch, dataset, epochs=20, learning_rate=0.1, seed=0, batch_size=32
):
    """
    Build and train a fixture model; the result depends only on the arguments.
    """
    model = build_model(arch, dataset.inputs.shape[1:], dataset.class_count, seed)
    trainer = FixtureTrainer(learning_rate, batch_size, seed)
    return trainer.fit(model, dataset, epochs)
