"""
Progressive pruning: each epoch removes a fixed share of the original width
of every eligible hidden layer until the target share is reached.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from nn_debloat.intervals import Interval
from nn_debloat.pruning.sampling import (
    Strategy,
    activation_bounds,
    channel_scales,
    rank_conv_channels,
    rank_dense_pairs,
    sample_dense_pairs,
)
from nn_debloat.pruning.surgery import (
    SurgeryError,
    prune_conv_channel,
    prune_dense_pair,
)

# Guards floor/ceil against products such as 0.35 * 20 = 6.999999999999999.
_EPSILON = 1e-9

LOGGER = logging.getLogger(__name__)


class NothingToPruneError(SurgeryError):
    """
    The model has no eligible hidden layer, or the target is already reached.
    """


def _floor(value):
    return math.floor(value + _EPSILON)


@dataclass(frozen=True)
class PruneConfig:
    target_fraction: float = 0.5
    step_fraction: float = 0.05
    input_box: object = Interval(0.0, 1.0)
    seed: int = 0
    strategy: Strategy = Strategy.JOINT

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0.0 < self.target_fraction <= 1.0:
            raise ValueError(
                f"target fraction must be in (0, 1], got {self.target_fraction}"
            )
        if not 0.0 < self.step_fraction <= self.target_fraction:
            raise ValueError(
                f"step fraction must be in (0, {self.target_fraction}], "
                f"got {self.step_fraction}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    @property
    def epoch_count(self):
        return math.ceil(self.target_fraction / self.step_fraction - _EPSILON)

    def fraction_after(self, epoch):
        return round(min(epoch * self.step_fraction, self.target_fraction), 10)

    def quota(self, original, removed, width):
        """Units one epoch may remove from a layer of `original` width."""
        per_epoch = _floor(self.step_fraction * original)
        remaining = _floor(self.target_fraction * original) - removed
        return max(0, min(per_epoch, remaining, width - 1))


@dataclass(frozen=True)
class SurgeryRecord:
    epoch: int
    layer: int
    kind: str
    indices: tuple
    metrics: dict = field(default_factory=dict)

    def log_line(self):
        metrics = " ".join(
            f"{name}={value:.6g}" for name, value in self.metrics.items()
        )
        indices = ",".join(str(index) for index in self.indices)
        return (
            f"epoch={self.epoch} layer={self.layer} kind={self.kind} "
            f"index={indices} {metrics}"
        ).rstrip()


@dataclass(frozen=True)
class PruneState:
    original_widths: dict
    removed: dict
    epoch: int = 0

    @classmethod
    def start(cls, model):
        widths = {index: model.layers[index].units for index in eligible_layers(model)}
        return cls(widths, {index: 0 for index in widths})


@dataclass
class EpochSummary:
    epoch: int
    fraction_pruned: float
    param_count: int
    records: list
    state: PruneState


def eligible_layers(model):
    """Conv2D and dense layers that feed another parametric layer."""
    return [
        index
        for index in model.parametric_indices()
        if model.next_parametric(index) is not None
    ]


def _prune_conv_layer(model, index, quota, config, rng, epoch):
    scores = channel_scales(model, index)
    if config.strategy is Strategy.RANDOM_BASELINE:
        order = [int(channel) for channel in rng.permutation(len(scores))]
    else:
        order = rank_conv_channels(scores)
    chosen = order[:quota]
    records = [
        SurgeryRecord(
            epoch, index, "conv2d", (channel,), {"channel_scale": scores[channel].scale}
        )
        for channel in chosen
    ]
    # highest index first so the remaining channel indices stay valid
    for channel in sorted(chosen, reverse=True):
        model = prune_conv_channel(model, index, channel)
    return model, records


def _prune_dense_layer(model, index, quota, config, rng, epoch):
    records = []
    while quota > 0:
        bounds = activation_bounds(model, config.input_box)
        ranked = rank_dense_pairs(
            sample_dense_pairs(model, bounds, index), config.strategy, rng
        )
        # positions[k] = index, in this round's numbering, of current unit k
        positions = list(range(model.layers[index].units))
        touched = set()
        for candidate in ranked:
            if quota == 0:
                break
            if candidate.i in touched or candidate.j in touched:
                continue
            touched.update((candidate.i, candidate.j))
            victim = positions.index(candidate.i)
            survivor = positions.index(candidate.j)
            model = prune_dense_pair(model, index, victim, survivor)
            positions.pop(victim)
            quota -= 1
            records.append(
                SurgeryRecord(
                    epoch,
                    index,
                    "dense",
                    (candidate.i, candidate.j),
                    {
                        "impact_l1": candidate.impact_l1,
                        "entropy_deficit": candidate.entropy_deficit,
                        "joint_rank": candidate.joint_rank,
                    },
                )
            )
    return model, records


def prune_epoch(model, config, state=None):
    """
    Run one pruning epoch and return ``(pruned model, EpochSummary)``.

    Rankings are recomputed against the current, already partially pruned,
    model.  The input model is never modified, so an exception leaves the
    caller with the model it passed in.
    """
    if state is None:
        state = PruneState.start(model)
    if not state.original_widths:
        raise NothingToPruneError(
            "nothing to prune: the model has no eligible hidden layer"
        )
    if state.epoch >= config.epoch_count:
        raise NothingToPruneError(
            f"nothing to prune: target {config.target_fraction} already reached"
        )

    epoch = state.epoch + 1
    rng = np.random.default_rng([config.seed, epoch])
    removed = dict(state.removed)
    records = []
    for index in sorted(state.original_widths):
        layer = model.layers[index]
        quota = config.quota(state.original_widths[index], removed[index], layer.units)
        if quota == 0:
            continue
        if layer.kind == "conv2d":
            prune_layer = _prune_conv_layer
        else:
            prune_layer = _prune_dense_layer
        model, layer_records = prune_layer(model, index, quota, config, rng, epoch)
        removed[index] += quota
        records.extend(layer_records)

    for record in records:
        LOGGER.info(record.log_line())
    if not records:
        LOGGER.warning(
            "epoch %d removed nothing: layers are too narrow for the step", epoch
        )

    summary = EpochSummary(
        epoch,
        config.fraction_after(epoch),
        model.param_count(),
        records,
        PruneState(state.original_widths, removed, epoch),
    )
    LOGGER.info(
        "epoch %d: %.0f%% pruned, %d parameters",
        epoch,
        summary.fraction_pruned * 100,
        summary.param_count,
    )
    return model, summary


def iter_schedule(model, config, eval_hook):
    """
    Yield ``(model, report)`` after every epoch; `eval_hook(model, summary)`
    builds the report.
    """
    state = PruneState.start(model)
    for _ in range(config.epoch_count):
        model, summary = prune_epoch(model, config, state)
        state = summary.state
        yield model, eval_hook(model, summary)


def run_schedule(model, config, eval_hook):
    """
    Prune for ``config.epoch_count`` epochs; returns (final model, reports).
    """
    reports = []
    for model, report in iter_schedule(model, config, eval_hook):
        reports.append(report)
    return model, reports
