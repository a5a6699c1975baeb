"""
Test helper functions.
"""

import numpy as np

from nn_debloat.model import Conv2D, Dense, Flatten, MaxPool2D, Model
from nn_debloat.tensor_core import ActivationKind, Padding


def dense_layer(rng, fan_in, units, activation=ActivationKind.RELU, scale=None):
    """
    Random `Dense` layer with He-scaled weights and small random biases.
    """
    scale = np.sqrt(2.0 / fan_in) if scale is None else scale
    return Dense(
        rng.normal(0.0, scale, size=(fan_in, units)),
        rng.normal(0.0, 0.1, size=units),
        activation,
    )


def mlp(widths, seed=0, head=ActivationKind.SOFTMAX):
    """
    Random MLP: `widths[0]` inputs, ReLU hidden layers, `widths[-1]` outputs.
    """
    rng = np.random.default_rng(seed)
    layers = [
        dense_layer(rng, fan_in, units)
        for fan_in, units in zip(widths[:-2], widths[1:-1])
    ]
    layers.append(dense_layer(rng, widths[-2], widths[-1], head))
    return Model((widths[0],), layers)


def conv_layer(rng, in_channels, out_channels, size=3, padding=Padding.SAME, stride=1):
    fan_in = size * size * in_channels
    shape = (size, size, in_channels, out_channels)
    return Conv2D(
        rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape),
        rng.normal(0.0, 0.1, size=out_channels),
        stride=stride,
        padding=padding,
        activation=ActivationKind.RELU,
    )


def small_cnn(seed=0, input_shape=(6, 6, 1), channels=(4, 3), hidden=5, classes=3):
    """
    conv -> maxpool -> conv -> flatten -> dense -> dense(softmax).
    """
    rng = np.random.default_rng(seed)
    first, second = channels
    layers = [
        conv_layer(rng, input_shape[2], first),
        MaxPool2D(2),
        conv_layer(rng, first, second, padding=Padding.VALID),
        Flatten(),
    ]
    model = Model(input_shape, layers + [Flatten()])
    flat = model.shapes()[-1][0]
    layers.append(dense_layer(rng, flat, hidden))
    layers.append(dense_layer(rng, hidden, classes, ActivationKind.SOFTMAX))
    return Model(input_shape, layers)


def conv_flatten_dense(seed=0, channels=3, classes=2):
    """
    1x1 conv producing `channels` maps over a 2x2 input, then flatten and a
    dense softmax head.
    """
    rng = np.random.default_rng(seed)
    return Model(
        (2, 2, 1),
        [
            conv_layer(rng, 1, channels, size=1),
            Flatten(),
            dense_layer(rng, 4 * channels, classes, ActivationKind.SOFTMAX),
        ],
    )


def in_box(rng, model, count, low=0.0, high=1.0):
    """`count` float64 inputs drawn uniformly from the input box."""
    return rng.uniform(low, high, size=(count,) + model.input_shape)
