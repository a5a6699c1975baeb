import numpy as np
import pytest
from numpy.testing import assert_array_equal

from nn_debloat.datasets import Dataset, synthetic_dataset
from nn_debloat.evaluation import (
    EvaluationError,
    FgsmConfig,
    PruneReport,
    accuracy,
    fgsm_attack,
    param_count,
    predict,
    robustness,
    size_report,
)
from nn_debloat.model import Dense, Model
from nn_debloat.model_io import serialized_size
from nn_debloat.tensor_core import ActivationKind
from nn_debloat.trainer import train_fixture
from tests.helpers import mlp, small_cnn


def _constant_model(classes=2, winner=0):
    bias = np.zeros(classes)
    bias[winner] = 5.0
    return Model((2,), [Dense(np.zeros((2, classes)), bias, ActivationKind.SOFTMAX)])


@pytest.fixture(scope="module")
def trained():
    data = synthetic_dataset(0, 400)
    train, test = data.split(0.8)
    return train_fixture("mlp:16", train, epochs=30, seed=0), test


class TestAccuracy:
    def test_constant_prediction(self):
        labels = np.array([0] * 3 + [1] * 7)
        dataset = Dataset(np.zeros((10, 2)), labels, 2)
        assert accuracy(_constant_model(), dataset) == pytest.approx(0.30)

    def test_limit(self):
        labels = np.array([0] * 3 + [1] * 7)
        dataset = Dataset(np.zeros((10, 2)), labels, 2)
        assert accuracy(_constant_model(), dataset, limit=5) == pytest.approx(0.6)

    def test_empty_set(self):
        dataset = Dataset(np.zeros((0, 2)), np.zeros(0), 2)
        with pytest.raises(EvaluationError) as error:
            accuracy(_constant_model(), dataset)
        assert "empty evaluation set" in str(error.value)

    def test_class_mismatch(self):
        with pytest.raises(EvaluationError):
            accuracy(_constant_model(classes=3), synthetic_dataset(0, 10))

    def test_ties_pick_lowest_index(self):
        model = Model((2,), [Dense(np.zeros((2, 3)), np.zeros(3))])
        assert_array_equal(predict(model, np.zeros((2, 2))), [0, 0])

    def test_random_models_are_near_chance(self):
        dataset = synthetic_dataset(0, 400, classes=4)
        scores = [accuracy(mlp([2, 8, 4], seed=seed), dataset) for seed in range(20)]
        assert np.mean(scores) == pytest.approx(0.25, abs=0.1)

    def test_trained_model(self, trained):
        model, test = trained
        assert accuracy(model, test) >= 0.9


class TestFgsm:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            FgsmConfig(epsilon=-0.1)
        with pytest.raises(ValueError):
            FgsmConfig(epsilon=float("nan"))
        with pytest.raises(ValueError):
            FgsmConfig(low=1.0, high=0.0)

    def test_zero_epsilon_is_identity(self, trained):
        model, test = trained
        adversarial = fgsm_attack(model, test.inputs, test.labels, FgsmConfig(0.0))
        assert_array_equal(adversarial, test.inputs)
        assert robustness(model, test, FgsmConfig(0.0)) == accuracy(model, test)

    def test_perturbation_bounded_and_clipped(self, trained):
        model, test = trained
        config = FgsmConfig(0.2)
        adversarial = fgsm_attack(model, test.inputs, test.labels, config)
        assert adversarial.dtype == np.float32
        assert np.abs(adversarial - test.inputs).max() <= 0.2 + 1e-6
        assert adversarial.min() >= 0.0 and adversarial.max() <= 1.0

    def test_unclipped(self):
        model = mlp([2, 4, 2], seed=1)
        inputs = np.ones((3, 2), dtype=np.float32)
        adversarial = fgsm_attack(model, inputs, [0, 1, 0], FgsmConfig(0.5, clip=False))
        assert set(np.abs(adversarial - inputs).ravel()) <= {0.0, 0.5}

    def test_single_sample(self, trained):
        model, test = trained
        adversarial = fgsm_attack(model, test.inputs[0], int(test.labels[0]))
        assert adversarial.shape == test.inputs[0].shape

    def test_robustness_falls_with_epsilon(self, trained):
        model, test = trained
        epsilons = (0.0, 0.05, 0.1, 0.2, 0.4)
        sweep = [robustness(model, test, FgsmConfig(eps)) for eps in epsilons]
        tolerance = 2.0 / len(test)
        for earlier, later in zip(sweep, sweep[1:]):
            assert later <= earlier + tolerance
        assert sweep[-1] < sweep[0]

    def test_image_model(self):
        rng = np.random.default_rng(0)
        model = small_cnn(seed=0)
        dataset = Dataset(rng.uniform(size=(20, 6, 6, 1)), rng.integers(0, 3, 20), 3)
        assert 0.0 <= robustness(model, dataset, FgsmConfig(0.1)) <= 1.0


class TestSize:
    def test_size_report_matches_file(self, tmp_path):
        model = mlp([3, 5, 2])
        path = tmp_path / "model.pdm"
        params, size = size_report(model, str(path))
        assert params == param_count(model) == 32
        assert size == path.stat().st_size == serialized_size(model)

    def test_size_report_without_path(self):
        model = mlp([3, 5, 2])
        assert size_report(model) == (32, serialized_size(model))


def test_report_as_dict():
    report = PruneReport(1, 0.05, 100, 480, 0.9)
    assert report.to_dict() == {
        "epoch": 1,
        "fraction_pruned": 0.05,
        "param_count": 100,
        "file_size_bytes": 480,
        "test_accuracy": 0.9,
        "fgsm_accuracy": None,
    }
