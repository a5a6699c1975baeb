import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nn_debloat.model import Conv2D, Dense, Flatten, MaxPool2D, Model
from nn_debloat.pruning.surgery import (
    SurgeryError,
    WrongLayerKindError,
    flatten_rows,
    prune_conv_channel,
    prune_dense_pair,
)
from nn_debloat.tensor_core import ActivationKind, Padding, model_forward
from tests.helpers import conv_flatten_dense, in_box, mlp, small_cnn


class TestDensePair:
    def test_param_delta(self):
        model = mlp([5, 7, 4, 3])
        merged = prune_dense_pair(model, 1, 2, 0)
        assert model.param_count() - merged.param_count() == 7 + 1 + 3
        assert merged.layers[1].units == 3
        assert merged.shapes()[-1] == (3,)

    def test_survivor_absorbs_outgoing_row(self):
        model = mlp([3, 4, 2])
        merged = prune_dense_pair(model, 0, 1, 3)
        outgoing = model.layers[1].weights
        assert_allclose(merged.layers[1].weights[2], outgoing[3] + outgoing[1])
        assert_array_equal(merged.layers[1].weights[0], outgoing[0])
        assert_array_equal(
            merged.layers[0].weights, np.delete(model.layers[0].weights, 1, axis=1)
        )
        assert_array_equal(merged.layers[0].bias, np.delete(model.layers[0].bias, 1))

    def test_input_model_untouched(self):
        model = mlp([3, 4, 2])
        duplicate = model.copy()
        prune_dense_pair(model, 0, 0, 1)
        assert model.identical_to(duplicate)

    def test_index_past_new_width(self):
        merged = prune_dense_pair(mlp([3, 4, 2]), 0, 3, 0)
        with pytest.raises(IndexError):
            prune_dense_pair(merged, 0, 3, 0)

    def test_last_unit_refused(self):
        model = Model(
            (2,),
            [Dense(np.ones((2, 1)), np.zeros(1)), Dense(np.ones((1, 2)), np.zeros(2))],
        )
        with pytest.raises((SurgeryError, IndexError)):
            prune_dense_pair(model, 0, 0, 1)

    def test_output_layer_refused(self):
        with pytest.raises(SurgeryError):
            prune_dense_pair(mlp([3, 4, 2]), 1, 0, 1)

    def test_conv_layer_refused(self):
        with pytest.raises(WrongLayerKindError):
            prune_dense_pair(small_cnn(), 0, 0, 1)

    def test_same_unit_refused(self):
        with pytest.raises(SurgeryError):
            prune_dense_pair(mlp([3, 4, 2]), 0, 2, 2)


def _brute_force_rows(height, width, channels, channel):
    """Flatten an index map and collect the positions that hold `channel`."""
    owner = np.zeros((height, width, channels), dtype=np.int64)
    owner[..., :] = np.arange(channels)
    return [row for row, value in enumerate(owner.reshape(-1)) if value == channel]


class TestConvChannel:
    def test_flatten_rows_formula(self):
        assert list(flatten_rows(2, 2, 3, 1)) == [1, 4, 7, 10]

    @pytest.mark.parametrize("channel", [0, 1, 2])
    def test_flatten_rows_match_brute_force(self, channel):
        for height, width, channels in ((2, 2, 3), (3, 4, 5)):
            assert list(flatten_rows(height, width, channels, channel)) == (
                _brute_force_rows(height, width, channels, channel)
            )

    def test_dense_rows_deleted(self):
        model = conv_flatten_dense(channels=3)
        pruned = prune_conv_channel(model, 0, 1)
        expected = np.delete(model.layers[2].weights, [1, 4, 7, 10], axis=0)
        assert_array_equal(pruned.layers[2].weights, expected)
        assert pruned.layers[0].units == 2

    def test_dead_channel_removal_keeps_outputs(self):
        rng = np.random.default_rng(0)
        model = small_cnn(seed=1, channels=(4, 3))
        model.layers[0].kernel[..., 2] = 0
        model.layers[0].bias[2] = 0
        pruned = prune_conv_channel(model, 0, 2)
        inputs = in_box(rng, model, 50)
        assert_allclose(
            model_forward(pruned, inputs), model_forward(model, inputs), atol=1e-6
        )

    def test_dead_channel_before_flatten(self):
        rng = np.random.default_rng(1)
        model = conv_flatten_dense(seed=3, channels=3)
        model.layers[0].kernel[..., 0] = 0
        model.layers[0].bias[0] = 0
        pruned = prune_conv_channel(model, 0, 0)
        inputs = in_box(rng, model, 50)
        assert_allclose(
            model_forward(pruned, inputs), model_forward(model, inputs), atol=1e-6
        )

    def test_param_delta_conv_to_conv(self):
        model = small_cnn(channels=(4, 3))
        pruned = prune_conv_channel(model, 0, 1)
        # own slice 3*3*1 + bias, next conv loses a 3x3x1x3 input slice
        assert model.param_count() - pruned.param_count() == 3 * 3 * 1 + 1 + 3 * 3 * 3
        assert pruned.layers[2].kernel.shape == (3, 3, 3, 3)

    def test_param_delta_conv_to_dense(self):
        model = small_cnn(channels=(4, 3), hidden=5)
        pruned = prune_conv_channel(model, 2, 0)
        # 1x1 spatial after the valid conv: one dense row of 5 weights
        assert model.param_count() - pruned.param_count() == 3 * 3 * 4 + 1 + 5
        pruned.validate()

    def test_through_maxpool_and_flatten(self):
        rng = np.random.default_rng(2)
        model = Model(
            (4, 4, 1),
            [
                Conv2D(
                    rng.normal(size=(3, 3, 1, 3)),
                    rng.normal(size=3),
                    padding=Padding.SAME,
                    activation=ActivationKind.RELU,
                ),
                MaxPool2D(2),
                Flatten(),
                Dense(rng.normal(size=(12, 2)), np.zeros(2), ActivationKind.SOFTMAX),
            ],
        )
        pruned = prune_conv_channel(model, 0, 2)
        assert pruned.layers[3].weights.shape == (8, 2)
        assert_array_equal(
            pruned.layers[3].weights,
            np.delete(model.layers[3].weights, flatten_rows(2, 2, 3, 2), axis=0),
        )

    def test_last_channel_refused(self):
        model = conv_flatten_dense(channels=1)
        with pytest.raises(SurgeryError):
            prune_conv_channel(model, 0, 0)

    def test_output_conv_refused(self):
        model = Model(
            (1, 1, 2),
            [Conv2D(np.ones((1, 1, 2, 2)), np.zeros(2)), Flatten()],
        )
        with pytest.raises(SurgeryError):
            prune_conv_channel(model, 0, 0)

    def test_dense_layer_refused(self):
        with pytest.raises(WrongLayerKindError):
            prune_conv_channel(mlp([3, 4, 2]), 0, 0)

    def test_channel_out_of_range(self):
        with pytest.raises(IndexError):
            prune_conv_channel(small_cnn(channels=(4, 3)), 0, 4)


def test_chained_surgery_keeps_model_valid():
    rng = np.random.default_rng(3)
    model = small_cnn(seed=3, channels=(5, 4), hidden=6)
    model = prune_conv_channel(model, 0, 4)
    model = prune_conv_channel(model, 2, 1)
    model = prune_dense_pair(model, 4, 0, 5)
    model = prune_conv_channel(model, 0, 0)
    assert [model.layers[index].units for index in (0, 2, 4)] == [3, 3, 5]
    outputs = model_forward(model, in_box(rng, model, 10))
    assert outputs.shape == (10, 3)
    assert_allclose(outputs.sum(axis=1), 1.0, atol=1e-5)
