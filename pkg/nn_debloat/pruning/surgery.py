"""
Structural surgery: delete dense hidden units and conv channels, fix up
the downstream layers and rebuild the model.

Every function returns a new `Model`; the input model is never modified.
"""

import numpy as np

from nn_debloat.model import Conv2D, Dense, Model


class SurgeryError(Exception):
    """
    A structural edit was refused.
    """


class WrongLayerKindError(SurgeryError):
    """
    The operation does not apply to this kind of layer.
    """


def _successor(model, layer_index):
    successor = model.next_parametric(layer_index)
    if successor is None:
        raise SurgeryError(
            f"layer {layer_index} has no downstream parametric layer to absorb the change"
        )
    return successor


def _check_unit(layer, layer_index, unit):
    if not 0 <= unit < layer.units:
        raise IndexError(
            f"unit {unit} out of range for layer {layer_index} with {layer.units} units"
        )


def flatten_rows(height, width, channels, channel):
    """
    Rows of a dense weight matrix fed by ``flatten([height, width, channels])``
    that read `channel`: ``(h * width + w) * channels + channel``.
    """
    return np.arange(height * width) * channels + channel


def prune_dense_pair(model, layer_index, victim, survivor):
    """
    Merge hidden unit `victim` into `survivor` in dense layer `layer_index`.

    The survivor's outgoing row becomes ``w_survivor + w_victim``; the
    victim's incoming column, bias and outgoing row are deleted.
    """
    layer = model.layers[layer_index]
    if layer.kind != "dense":
        raise WrongLayerKindError(
            f"layer {layer_index} is {layer.kind}; pair merging needs a dense layer"
        )
    successor = _successor(model, layer_index)
    following = model.layers[successor]
    if following.kind != "dense":
        raise WrongLayerKindError(
            f"layer {successor} is {following.kind}; a dense unit can only feed a dense layer"
        )
    _check_unit(layer, layer_index, victim)
    _check_unit(layer, layer_index, survivor)
    if victim == survivor:
        raise SurgeryError(f"cannot merge unit {victim} with itself")
    if layer.units < 2:
        raise SurgeryError(f"refusing to empty layer {layer_index}")

    outgoing = following.weights.copy()
    outgoing[survivor] += outgoing[victim]

    layers = list(model.layers)
    layers[layer_index] = Dense(
        np.delete(layer.weights, victim, axis=1),
        np.delete(layer.bias, victim),
        layer.activation,
    )
    layers[successor] = Dense(
        np.delete(outgoing, victim, axis=0), following.bias.copy(), following.activation
    )
    return Model(model.input_shape, layers)


def prune_conv_channel(model, layer_index, channel):
    """
    Delete output `channel` of conv layer `layer_index` and the matching
    input slice of the next parametric layer.

    Pooling and flatten layers in between pass the removal through; a dense
    layer behind a flatten loses the rows given by `flatten_rows`.
    """
    layer = model.layers[layer_index]
    if layer.kind != "conv2d":
        raise WrongLayerKindError(
            f"layer {layer_index} is {layer.kind}; channel pruning needs a conv2d layer"
        )
    _check_unit(layer, layer_index, channel)
    if layer.units < 2:
        raise SurgeryError(
            f"refusing to remove the last channel of layer {layer_index}"
        )
    successor = _successor(model, layer_index)
    following = model.layers[successor]

    layers = list(model.layers)
    layers[layer_index] = Conv2D(
        np.delete(layer.kernel, channel, axis=3),
        np.delete(layer.bias, channel),
        layer.stride,
        layer.padding,
        layer.activation,
    )
    if following.kind == "conv2d":
        layers[successor] = Conv2D(
            np.delete(following.kernel, channel, axis=2),
            following.bias.copy(),
            following.stride,
            following.padding,
            following.activation,
        )
    else:
        flatten_index = next(
            index
            for index in range(layer_index + 1, successor)
            if model.layers[index].kind == "flatten"
        )
        height, width, channels = model.input_shape_of(flatten_index)
        layers[successor] = Dense(
            np.delete(
                following.weights,
                flatten_rows(height, width, channels, channel),
                axis=0,
            ),
            following.bias.copy(),
            following.activation,
        )
    return Model(model.input_shape, layers)
