import numpy as np
import pytest

from nn_debloat.model import Conv2D, Dense, Flatten, MaxPool2D, Model, ModelError
from nn_debloat.tensor_core import ActivationKind, Padding
from tests.helpers import mlp, small_cnn


def test_param_count_closed_form():
    assert mlp([100, 100, 100, 10]).param_count() == 21210


def test_shapes_of_cnn():
    model = small_cnn()
    assert model.shapes() == [(6, 6, 4), (3, 3, 4), (1, 1, 3), (3,), (5,), (3,)]
    assert model.class_count == 3
    assert model.input_shape_of(0) == (6, 6, 1)
    assert model.input_shape_of(3) == (1, 1, 3)


def test_parametric_navigation():
    model = small_cnn()
    assert model.parametric_indices() == [0, 2, 4, 5]
    assert model.next_parametric(0) == 2
    assert model.next_parametric(2) == 4
    assert model.next_parametric(5) is None


@pytest.mark.parametrize(
    "input_shape,layers,message",
    [
        ((2,), [], "at least one layer"),
        ((2,), [Dense(np.ones((3, 2)), np.zeros(2))], "layer 0"),
        (
            (2,),
            [
                Dense(np.ones((2, 2)), np.zeros(2), ActivationKind.SOFTMAX),
                Dense(np.ones((2, 2)), np.zeros(2)),
            ],
            "softmax",
        ),
        ((2,), [Dense(np.ones((2, 0)), np.zeros(0))], "no units"),
        ((2, 2, 1), [Conv2D(np.ones((1, 1, 1, 2)), np.zeros(2))], "class vector"),
        ((2,), [Flatten(ActivationKind.RELU)], "cannot carry an activation"),
        ((4, 4, 1), [MaxPool2D(5), Flatten()], "layer 0 (maxpool2d)"),
        ((2,), [Dense(np.ones((2, 2)), np.zeros(3))], "disagree"),
    ],
)
def test_invalid_models(input_shape, layers, message):
    with pytest.raises(ModelError) as error:
        Model(input_shape, layers)
    assert message in str(error.value)


def test_conv_padding_shapes():
    same = Conv2D(np.ones((3, 3, 1, 2)), np.zeros(2), stride=2, padding=Padding.SAME)
    valid = Conv2D(np.ones((3, 3, 1, 2)), np.zeros(2), stride=2)
    assert same.output_shape((5, 5, 1)) == (3, 3, 2)
    assert valid.output_shape((5, 5, 1)) == (2, 2, 2)


def test_maxpool_accepts_pairs():
    pool = MaxPool2D((1, 2))
    assert pool.stride == (1, 2)
    assert pool.output_shape((3, 4, 2)) == (3, 2, 2)
    assert pool.config() == {"pool": [1, 2], "stride": [1, 2]}


def test_parameters_are_float32():
    layer = Dense([[1, 2]], [0, 0])
    assert layer.weights.dtype == np.float32
    assert layer.bias.dtype == np.float32


def test_copy_is_independent():
    model = mlp([3, 4, 2])
    duplicate = model.copy()
    assert duplicate.identical_to(model)
    duplicate.layers[0].weights[0, 0] += 1
    assert not duplicate.identical_to(model)


def test_identical_to_compares_structure():
    model = mlp([3, 4, 2])
    other = Model(
        (3,),
        [
            model.layers[0],
            Dense(model.layers[1].weights, model.layers[1].bias, ActivationKind.NONE),
        ],
    )
    assert not model.identical_to(other)
    assert not model.identical_to(mlp([3, 4, 4, 2]))
