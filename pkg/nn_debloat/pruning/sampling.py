"""
Candidate sampling for both layer kinds.

Conv2D channels are ranked by their channel scale (sum of the L1 norms of
the filters writing that channel).  Dense hidden units are paired: merging
unit ``i`` into a similar unit ``j`` changes the next layer's pre-activation
by exactly ``w_ik * (a_j - a_i)``, and the resulting change of every output
logit is bounded with interval arithmetic over the declared input box.
Pairs whose impact is small in L1 norm and spread uniformly across the
logits (small entropy deficit) are merged first.
"""

import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from nn_debloat.intervals import (
    Interval,
    IntervalVector,
    interval_affine,
    interval_conv2d,
    interval_maxpool2d,
    interval_relu,
    interval_softmax,
)
from nn_debloat.pruning.surgery import SurgeryError, WrongLayerKindError
from nn_debloat.tensor_core import ActivationKind

# Layers wider than this only pair each unit with its nearest neighbours.
ALL_PAIRS_MAX_WIDTH = 256
NEAREST_NEIGHBOURS = 16

_CHUNK = 1024


class Strategy(enum.Enum):
    JOINT = "joint"
    L1_ONLY = "l1_only"
    ENTROPY_ONLY = "entropy_only"
    RANDOM_BASELINE = "random_baseline"


@dataclass(frozen=True)
class ChannelScore:
    layer_index: int
    channel: int
    scale: float


class ImpactVector(IntervalVector):
    """
    Per-logit bounds on the output change caused by one pair merge.
    """


@dataclass
class PairCandidate:
    layer_index: int
    i: int
    j: int
    impact_l1: float
    entropy_deficit: float
    joint_rank: int = -1
    impact: ImpactVector = field(default=None, repr=False, compare=False)

    @property
    def key(self):
        return (self.layer_index, self.i, self.j)


def channel_scales(model, layer_index):
    """
    One `ChannelScore` per output channel of conv layer `layer_index`.
    """
    layer = model.layers[layer_index]
    if layer.kind != "conv2d":
        raise WrongLayerKindError(
            f"layer {layer_index} is {layer.kind}; channel scales need a conv2d layer"
        )
    scales = np.abs(layer.kernel.astype(np.float64)).sum(axis=(0, 1, 2))
    return [
        ChannelScore(layer_index, channel, float(scale))
        for channel, scale in enumerate(scales)
    ]


def rank_conv_channels(scores):
    """Channels by ascending scale; ties go to the lower channel index."""
    if not scores:
        raise ValueError("no channel scores to rank")
    return [
        score.channel
        for score in sorted(scores, key=lambda score: (score.scale, score.channel))
    ]


def input_bounds(model, input_box):
    """
    Expand `input_box` to an `IntervalVector` shaped like the model input.

    Accepts one `Interval` for every feature, a sequence of per-feature
    intervals (flattened row-major), or an `IntervalVector`.
    """
    shape = model.input_shape
    if isinstance(input_box, IntervalVector):
        if input_box.lo.size != int(np.prod(shape)):
            raise ValueError(
                f"input box has {input_box.lo.size} features, model expects {shape}"
            )
        return input_box.reshape(shape)
    if isinstance(input_box, Interval):
        return IntervalVector.box(shape, input_box.lo, input_box.hi)
    intervals = list(input_box)
    if len(intervals) == 1:
        return IntervalVector.box(shape, intervals[0].lo, intervals[0].hi)
    return input_bounds(model, IntervalVector.from_intervals(intervals))


def _activate_bounds(bounds, activation):
    if activation is ActivationKind.RELU:
        return interval_relu(bounds)
    if activation is ActivationKind.SOFTMAX:
        return interval_softmax(bounds)
    return bounds


def activation_bounds(model, input_box=Interval(0.0, 1.0)):
    """
    Sound bounds for every layer output over `input_box`.

    Returns a list of ``len(model.layers) + 1`` `IntervalVector` objects:
    entry 0 is the input box, entry ``k + 1`` bounds the output of layer k.
    """
    current = input_bounds(model, input_box)
    bounds = [current]
    for layer in model.layers:
        if layer.kind == "dense":
            current = interval_affine(current, layer.weights, layer.bias)
        elif layer.kind == "conv2d":
            current = interval_conv2d(
                current, layer.kernel, layer.bias, layer.stride, layer.padding
            )
        elif layer.kind == "flatten":
            current = current.reshape(-1)
        else:
            current = interval_maxpool2d(current, layer.pool, layer.stride)
        current = _activate_bounds(current, layer.activation)
        bounds.append(current)
    return bounds


def _check_mergeable(model, layer_index):
    layer = model.layers[layer_index]
    if layer.kind != "dense":
        raise WrongLayerKindError(
            f"layer {layer_index} is {layer.kind}; pair impacts apply to dense layers only"
        )
    successor = model.next_parametric(layer_index)
    if successor is None:
        raise SurgeryError(f"layer {layer_index} is the output layer")
    if model.layers[successor].kind != "dense":
        raise WrongLayerKindError(
            f"layer {successor} following a dense layer is not dense"
        )
    return layer, successor


def pair_impacts(model, bounds, layer_index, victims, survivors):
    """
    Batched `pair_impact`: one row of logit-change bounds per (victim, survivor).
    """
    layer, successor = _check_mergeable(model, layer_index)
    victims = np.asarray(victims, dtype=np.int64)
    survivors = np.asarray(survivors, dtype=np.int64)
    if (victims == survivors).any():
        raise SurgeryError("a unit cannot be paired with itself")
    for unit in itertools.chain(victims, survivors):
        if not 0 <= unit < layer.units:
            raise IndexError(
                f"unit {unit} out of range for layer {layer_index} with {layer.units} units"
            )

    weights = layer.weights.astype(np.float64)
    bias = layer.bias.astype(np.float64)
    previous = bounds[layer_index]

    # (w_j - w_i) . x + (b_j - b_i) bounds z_j - z_i; ReLU is 1-Lipschitz and
    # monotone, so a_j - a_i lies between 0 and z_j - z_i.
    difference = interval_affine(
        previous,
        weights[:, survivors] - weights[:, victims],
        bias[survivors] - bias[victims],
    ).hull_with_zero()

    outgoing = model.layers[successor].weights.astype(np.float64)[victims]
    first = outgoing * difference.lo[:, np.newaxis]
    second = outgoing * difference.hi[:, np.newaxis]
    delta = IntervalVector(np.minimum(first, second), np.maximum(first, second))

    index = successor
    last = len(model.layers) - 1
    while index < last:
        if model.layers[index].activation is ActivationKind.RELU:
            delta = delta.hull_with_zero()
        index += 1
        following = model.layers[index]
        if following.kind == "dense":
            delta = interval_affine(delta, following.weights)
        elif following.kind != "flatten":
            raise WrongLayerKindError(
                f"cannot propagate a dense impact through {following.kind} layer {index}"
            )
    return ImpactVector(delta.lo, delta.hi)


def pair_impact(model, bounds, layer_index, i, j):
    """
    Bounds on the change of every output logit when hidden unit `i` of dense
    layer `layer_index` is merged into unit `j`.

    `bounds` comes from `activation_bounds` on the same model.
    """
    impacts = pair_impacts(model, bounds, layer_index, [i], [j])
    return ImpactVector(impacts.lo[0], impacts.hi[0])


def score_impacts(magnitudes):
    """
    Vectorised scoring: rows of impact magnitudes -> (L1 norms, entropy deficits).
    """
    magnitudes = np.atleast_2d(np.asarray(magnitudes, dtype=np.float64))
    classes = magnitudes.shape[1]
    if classes < 2:
        raise ValueError("entropy scoring needs at least 2 output nodes")
    totals = magnitudes.sum(axis=1)
    safe = np.where(totals > 0, totals, 1.0)[:, np.newaxis]
    shares = magnitudes / safe
    logs = np.log2(np.where(shares > 0, shares, 1.0))
    entropy = -(shares * logs).sum(axis=1)
    deficits = np.where(totals > 0, math.log2(classes) - entropy, 0.0)
    return totals, np.clip(deficits, 0.0, math.log2(classes))


def score_pairs(impacts):
    """
    ``(impact_l1, entropy_deficit)`` for each impact vector.

    A zero impact scores (0, 0); otherwise the deficit is
    ``log2(K) - H(p)`` with ``p_k = m_k / sum(m)``.
    """
    impacts = list(impacts)
    if not impacts:
        return []
    totals, deficits = score_impacts([impact.magnitudes() for impact in impacts])
    return [(float(total), float(deficit)) for total, deficit in zip(totals, deficits)]


def incoming_l1(layer):
    return np.abs(layer.weights.astype(np.float64)).sum(axis=0)


def _order_pair(norms, first, second):
    low, high = min(first, second), max(first, second)
    if norms[low] < norms[high]:
        return low, high
    return high, low


def pair_members(layer, first, second):
    """
    Order an unordered pair as (victim, survivor): the unit with the smaller
    incoming-weight L1 norm is removed, the higher index on ties.
    """
    return _order_pair(incoming_l1(layer), first, second)


def candidate_pairs(layer):
    """
    Unordered unit pairs worth scoring, as sorted ``(a, b)`` tuples.

    Every pair for layers up to `ALL_PAIRS_MAX_WIDTH` units; beyond that
    each unit's `NEAREST_NEIGHBOURS` closest units by incoming weights.
    """
    width = layer.units
    if width <= ALL_PAIRS_MAX_WIDTH:
        return list(itertools.combinations(range(width), 2))
    columns = layer.weights.astype(np.float64).T
    squared = (columns**2).sum(axis=1)
    distances = (
        squared[:, np.newaxis] + squared[np.newaxis, :] - 2 * columns @ columns.T
    )
    np.fill_diagonal(distances, np.inf)
    nearest = np.argsort(distances, axis=1, kind="stable")[:, :NEAREST_NEIGHBOURS]
    pairs = {
        (min(unit, other), max(unit, other))
        for unit, row in enumerate(nearest)
        for other in row
    }
    return sorted(pairs)


def sample_dense_pairs(model, bounds, layer_index):
    """
    Score every candidate pair of dense layer `layer_index` (unranked).
    """
    layer, _ = _check_mergeable(model, layer_index)
    norms = incoming_l1(layer)
    pairs = [
        _order_pair(norms, first, second) for first, second in candidate_pairs(layer)
    ]
    candidates = []
    for start in range(0, len(pairs), _CHUNK):
        chunk = pairs[start : start + _CHUNK]
        victims = [victim for victim, _ in chunk]
        survivors = [survivor for _, survivor in chunk]
        impacts = pair_impacts(model, bounds, layer_index, victims, survivors)
        totals, deficits = score_impacts(impacts.magnitudes())
        for row, (victim, survivor) in enumerate(chunk):
            candidates.append(
                PairCandidate(
                    layer_index,
                    victim,
                    survivor,
                    float(totals[row]),
                    float(deficits[row]),
                    impact=ImpactVector(impacts.lo[row], impacts.hi[row]),
                )
            )
    return candidates


def _competition_ranks(values):
    """Rank = number of strictly smaller values, so ties share a rank."""
    values = np.asarray(values, dtype=np.float64)
    return np.searchsorted(np.sort(values), values, side="left")


def rank_dense_pairs(candidates, strategy=Strategy.JOINT, seed=0):
    """
    Order candidates, best first, and record each one's `joint_rank`.

    joint: smallest sum of the ascending L1 rank and the ascending
    entropy-deficit rank, ties by smaller L1, then by (layer, i, j).
    random_baseline: a permutation drawn from `seed` (an int or a
    numpy Generator).
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no pair candidates to rank")
    strategy = Strategy(strategy)

    if strategy is Strategy.JOINT:
        l1_ranks = _competition_ranks([item.impact_l1 for item in candidates])
        deficit_ranks = _competition_ranks(
            [item.entropy_deficit for item in candidates]
        )
        keyed = []
        for index, item in enumerate(candidates):
            rank_sum = int(l1_ranks[index] + deficit_ranks[index])
            keyed.append(((rank_sum, item.impact_l1) + item.key, item))
        ordered = [item for _, item in sorted(keyed, key=lambda pair: pair[0])]
    elif strategy is Strategy.L1_ONLY:
        ordered = sorted(candidates, key=lambda item: (item.impact_l1,) + item.key)
    elif strategy is Strategy.ENTROPY_ONLY:
        ordered = sorted(
            candidates,
            key=lambda item: (item.entropy_deficit, item.impact_l1) + item.key,
        )
    else:
        baseline = sorted(candidates, key=lambda item: item.key)
        permutation = np.random.default_rng(seed).permutation(len(baseline))
        ordered = [baseline[index] for index in permutation]

    for rank, item in enumerate(ordered):
        item.joint_rank = rank
    return ordered
