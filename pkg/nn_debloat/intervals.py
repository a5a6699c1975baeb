"""
Interval arithmetic used for data-free activation and impact estimation.

Bounds are kept in ``float64``.  Every operation here is sound: for any
concrete value inside the input intervals, the concrete image lies inside
the returned intervals.
"""

from dataclasses import dataclass

import numpy as np

from nn_debloat.tensor_core import Padding, conv2d_linear, maxpool2d_forward


class NumericError(ArithmeticError):
    """
    Bound propagation produced NaN.
    """


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"invalid interval [{self.lo}, {self.hi}]")

    @property
    def magnitude(self):
        return max(abs(self.lo), abs(self.hi))

    def contains(self, value, tolerance=0.0):
        return self.lo - tolerance <= value <= self.hi + tolerance


class IntervalVector:
    """
    Elementwise bounds ``lo <= x <= hi`` over an array of any shape.
    """

    def __init__(self, lo, hi):
        lo = np.array(lo, dtype=np.float64)
        hi = np.array(hi, dtype=np.float64)
        if lo.shape != hi.shape:
            raise ValueError(f"bound shapes differ: {lo.shape} vs {hi.shape}")
        if np.isnan(lo).any() or np.isnan(hi).any():
            raise NumericError("NaN in interval bounds")
        if (lo > hi).any():
            raise ValueError("lower bound above upper bound")
        self.lo = lo
        self.hi = hi

    @classmethod
    def point(cls, values):
        return cls(values, values)

    @classmethod
    def box(cls, shape, low=0.0, high=1.0):
        return cls(np.full(shape, low), np.full(shape, high))

    @classmethod
    def from_intervals(cls, intervals):
        return cls([item.lo for item in intervals], [item.hi for item in intervals])

    @property
    def shape(self):
        return self.lo.shape

    def __len__(self):
        return len(self.lo)

    def __getitem__(self, index):
        return Interval(float(self.lo[index]), float(self.hi[index]))

    def __iter__(self):
        return (self[index] for index in range(len(self)))

    def __repr__(self):
        return f"IntervalVector(lo={self.lo!r}, hi={self.hi!r})"

    def reshape(self, *shape):
        return IntervalVector(self.lo.reshape(*shape), self.hi.reshape(*shape))

    def magnitudes(self):
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def hull_with_zero(self):
        return IntervalVector(np.minimum(self.lo, 0.0), np.maximum(self.hi, 0.0))

    def contains(self, values, tolerance=0.0):
        values = np.asarray(values, dtype=np.float64)
        return bool(
            ((self.lo - tolerance <= values) & (values <= self.hi + tolerance)).all()
        )


def _split(weights):
    weights = np.asarray(weights, dtype=np.float64)
    return np.maximum(weights, 0.0), np.minimum(weights, 0.0)


def interval_affine(bounds, weights, bias=None):
    """
    Image of ``x . weights + bias`` for x within `bounds` (last axis = features).
    """
    positive, negative = _split(weights)
    lo = bounds.lo @ positive + bounds.hi @ negative
    hi = bounds.hi @ positive + bounds.lo @ negative
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        lo = lo + bias
        hi = hi + bias
    return IntervalVector(lo, hi)


def interval_relu(bounds):
    return IntervalVector(np.maximum(bounds.lo, 0.0), np.maximum(bounds.hi, 0.0))


def interval_scale(interval, factors):
    """
    Bounds of ``factor * x`` for each entry of `factors` and scalar x in `interval`.
    """
    factors = np.asarray(factors, dtype=np.float64)
    first = factors * interval.lo
    second = factors * interval.hi
    return IntervalVector(np.minimum(first, second), np.maximum(first, second))


def interval_conv2d(bounds, kernel, bias, stride=1, padding=Padding.VALID):
    """
    Bounds of a convolution over a ``[h, w, c]`` (or batched) feature box.

    Zero padding is exact, so padded cells contribute the point interval 0.
    """
    positive, negative = _split(kernel)
    lo, hi = bounds.lo, bounds.hi
    batched = lo.ndim == 4
    if not batched:
        lo, hi = lo[np.newaxis], hi[np.newaxis]
    bias = np.asarray(bias, dtype=np.float64)
    zero = np.zeros_like(bias)
    out_lo = (
        conv2d_linear(lo, positive, bias, stride, padding)[0]
        + conv2d_linear(hi, negative, zero, stride, padding)[0]
    )
    out_hi = (
        conv2d_linear(hi, positive, bias, stride, padding)[0]
        + conv2d_linear(lo, negative, zero, stride, padding)[0]
    )
    if not batched:
        out_lo, out_hi = out_lo[0], out_hi[0]
    return IntervalVector(out_lo, out_hi)


def interval_maxpool2d(bounds, pool, stride):
    lo, hi = bounds.lo, bounds.hi
    batched = lo.ndim == 4
    if not batched:
        lo, hi = lo[np.newaxis], hi[np.newaxis]
    out_lo = maxpool2d_forward(lo, pool, stride)
    out_hi = maxpool2d_forward(hi, pool, stride)
    if not batched:
        out_lo, out_hi = out_lo[0], out_hi[0]
    return IntervalVector(out_lo, out_hi)


def _log_sum_others(own, others):
    """
    ``log(sum over m != k of exp(others_m - own_k))`` for every k.

    -inf when there is a single class.
    """
    gaps = others[..., np.newaxis, :] - own[..., :, np.newaxis]
    count = own.shape[-1]
    gaps = np.where(np.eye(count, dtype=bool), -np.inf, gaps)
    peak = gaps.max(axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        total = np.log(np.exp(gaps - peak).sum(axis=-1))
    return total + peak[..., 0]


def interval_softmax(bounds):
    """
    Sound softmax bounds along the last axis.

    p_k is smallest when its own logit is at `lo` and every other logit
    is at `hi`, and largest in the opposite corner.  Both corners are
    evaluated as ``1 / (1 + sum exp(gap))`` in log space, so arbitrarily
    wide logit bounds stay finite.
    """
    lo = np.exp(-np.logaddexp(0.0, _log_sum_others(bounds.lo, bounds.hi)))
    hi = np.exp(-np.logaddexp(0.0, _log_sum_others(bounds.hi, bounds.lo)))
    return IntervalVector(np.minimum(lo, hi), np.minimum(hi, 1.0))
