"""
Fidelity metrics of a (pruned) model: test accuracy, FGSM robustness,
parameter count and serialized size.
"""

import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from nn_debloat.model_io import save_model
from nn_debloat.tensor_core import input_gradient, model_logits

# Samples per forward/backward pass during evaluation.
BATCH_SIZE = 256

LOGGER = logging.getLogger(__name__)


class EvaluationError(ValueError):
    """
    The model and the evaluation set cannot be compared.
    """


@dataclass(frozen=True)
class PruneReport:
    epoch: int
    fraction_pruned: float
    param_count: int
    file_size_bytes: int
    test_accuracy: float = None
    fgsm_accuracy: float = None

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class FgsmConfig:
    epsilon: float = 0.1
    clip: bool = True
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.clip and not self.low <= self.high:
            raise ValueError(f"invalid clipping box [{self.low}, {self.high}]")


def _batches(count, limit):
    count = count if limit is None else min(count, limit)
    if count <= 0:
        raise EvaluationError("empty evaluation set")
    for start in range(0, count, BATCH_SIZE):
        yield slice(start, min(start + BATCH_SIZE, count))


def _check_classes(model, dataset):
    if model.class_count != dataset.class_count:
        raise EvaluationError(
            f"model has {model.class_count} outputs but the dataset has "
            f"{dataset.class_count} classes"
        )


def predict(model, inputs):
    """Argmax of the logits; the lowest index wins a tie."""
    return np.argmax(model_logits(model, inputs), axis=-1)


def accuracy(model, dataset, limit=None):
    """
    Fraction of the first `limit` samples classified correctly.
    """
    _check_classes(model, dataset)
    correct = 0
    total = 0
    for batch in _batches(len(dataset), limit):
        predictions = predict(model, dataset.inputs[batch])
        correct += int((predictions == dataset.labels[batch]).sum())
        total += predictions.shape[0]
    return correct / total


def fgsm_attack(model, inputs, labels, config=FgsmConfig()):
    """
    One fast-gradient-sign step: ``x + epsilon * sign(grad_x loss)``,
    clipped to ``[config.low, config.high]`` when `config.clip` is set.

    Works on a single sample with an int label or on a labelled batch.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    if config.epsilon == 0:
        return inputs.copy()
    gradient = input_gradient(model, inputs, labels)
    adversarial = inputs + np.float32(config.epsilon) * np.sign(gradient).astype(
        np.float32
    )
    if config.clip:
        adversarial = np.clip(adversarial, config.low, config.high)
    return adversarial.astype(np.float32)


def robustness(model, dataset, config=FgsmConfig(), limit=None):
    """
    Top-1 accuracy on per-sample FGSM examples.
    """
    _check_classes(model, dataset)
    correct = 0
    total = 0
    for batch in _batches(len(dataset), limit):
        labels = dataset.labels[batch]
        adversarial = fgsm_attack(model, dataset.inputs[batch], labels, config)
        correct += int((predict(model, adversarial) == labels).sum())
        total += labels.shape[0]
    return correct / total


def param_count(model):
    return model.param_count()


def size_report(model, path=None):
    """
    Return ``(parameter count, serialized bytes)``; the model is written to
    `path`, or to a temporary file when no path is given.
    """
    if path is not None:
        return model.param_count(), save_model(model, path)
    with tempfile.TemporaryDirectory() as directory:
        size = save_model(model, os.path.join(directory, "model.pdm"))
    return model.param_count(), size
