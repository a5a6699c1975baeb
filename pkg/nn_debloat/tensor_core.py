"""
Forward inference and reverse-mode gradients for the supported layer kinds.

Tensors are channels-last numpy arrays (``[batch, h, w, c]`` for feature maps,
``[batch, features]`` for vectors).  Model parameters are always ``float32``;
inputs keep their floating dtype so callers can evaluate a model in
``float64`` when they need extra precision (finite-difference checks).
"""

import enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ActivationKind(enum.Enum):
    NONE = "none"
    RELU = "relu"
    SOFTMAX = "softmax"


class Padding(enum.Enum):
    VALID = "valid"
    SAME = "same"


class DimensionError(ValueError):
    """
    Tensor shapes do not agree for the requested operation.
    """


class UnsupportedLossError(ValueError):
    """
    A loss gradient was requested from a model without a softmax head.
    """


def as_tensor(values):
    """
    Return `values` as a floating numpy array.

    Non-float input becomes ``float32``; ``float32``/``float64`` arrays
    are returned unchanged.
    """
    array = np.asarray(values)
    if array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float32)
    return array


def pair(value):
    """Normalize an int or an (h, w) pair to a tuple of two ints."""
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    first, second = value
    return int(first), int(second)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def activate(values, activation):
    activation = ActivationKind(activation)
    if activation is ActivationKind.RELU:
        return np.maximum(values, 0)
    if activation is ActivationKind.SOFTMAX:
        return softmax(values)
    return values


def dense_linear(inputs, weights, bias):
    if inputs.ndim != 2 or inputs.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"dense layer expects [batch, {weights.shape[0]}] input, got {list(inputs.shape)}"
        )
    if bias.shape != (weights.shape[1],):
        raise DimensionError(
            f"bias of length {weights.shape[1]} expected, got {list(bias.shape)}"
        )
    return inputs @ weights + bias


def dense_forward(inputs, weights, bias, activation=ActivationKind.NONE):
    """
    Affine layer ``act(inputs . weights + bias)``.

    `weights` is ``[in, out]``; softmax normalizes each row.
    """
    return activate(dense_linear(as_tensor(inputs), weights, bias), activation)


def _same_pads(size, kernel, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _pad_input(inputs, kernel_h, kernel_w, stride, padding):
    """Zero-pad `inputs` according to `padding`; returns (padded, pads)."""
    padding = Padding(padding)
    if padding is Padding.VALID:
        pads = ((0, 0), (0, 0))
    else:
        pads = (
            _same_pads(inputs.shape[1], kernel_h, stride),
            _same_pads(inputs.shape[2], kernel_w, stride),
        )
    if any(pads[0]) or any(pads[1]):
        inputs = np.pad(inputs, ((0, 0), pads[0], pads[1], (0, 0)))
    return inputs, pads


def _windows(inputs, window_h, window_w, stride_h, stride_w):
    """Strided sliding windows, shaped ``[batch, oh, ow, c, window_h, window_w]``."""
    if inputs.shape[1] < window_h or inputs.shape[2] < window_w:
        raise DimensionError(
            f"window {window_h}x{window_w} larger than input "
            f"{inputs.shape[1]}x{inputs.shape[2]}"
        )
    view = sliding_window_view(inputs, (window_h, window_w), axis=(1, 2))
    return view[:, ::stride_h, ::stride_w]


def _im2col(inputs, kernel_h, kernel_w, stride, padding):
    padded, pads = _pad_input(inputs, kernel_h, kernel_w, stride, padding)
    windows = _windows(padded, kernel_h, kernel_w, stride, stride)
    batch, out_h, out_w, channels = windows.shape[:4]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(
        batch, out_h, out_w, kernel_h * kernel_w * channels
    )
    return cols, padded.shape, pads


def conv2d_linear(inputs, kernel, bias, stride=1, padding=Padding.VALID):
    """Cross-correlation without activation; returns (output, im2col cache)."""
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    kernel_h, kernel_w, in_channels, out_channels = kernel.shape
    if inputs.ndim != 4 or inputs.shape[3] != in_channels:
        raise DimensionError(
            f"conv2d expects [batch, h, w, {in_channels}] input, got {list(inputs.shape)}"
        )
    if bias.shape != (out_channels,):
        raise DimensionError(
            f"bias of length {out_channels} expected, got {list(bias.shape)}"
        )
    cols, padded_shape, pads = _im2col(inputs, kernel_h, kernel_w, stride, padding)
    output = cols @ kernel.reshape(-1, out_channels) + bias
    return output, (cols, padded_shape, pads)


def conv2d_forward(
    inputs,
    kernel,
    bias,
    stride=1,
    padding=Padding.VALID,
    activation=ActivationKind.NONE,
):
    """
    Channels-last 2D convolution.

    `kernel` is ``[kh, kw, in_c, out_c]``. ``valid`` padding yields
    ``(h - kh) // stride + 1`` rows, ``same`` yields ``ceil(h / stride)``.
    """
    output, _ = conv2d_linear(as_tensor(inputs), kernel, bias, stride, padding)
    return activate(output, activation)


def maxpool2d_forward(inputs, pool=2, stride=None):
    """Per-channel spatial max pooling (no padding)."""
    pool_h, pool_w = pair(pool)
    stride_h, stride_w = pair(stride if stride is not None else pool)
    if min(pool_h, pool_w, stride_h, stride_w) < 1:
        raise DimensionError("pool and stride must be >= 1")
    inputs = as_tensor(inputs)
    if inputs.ndim != 4:
        raise DimensionError(
            f"maxpool2d expects [batch, h, w, c] input, got {list(inputs.shape)}"
        )
    return _windows(inputs, pool_h, pool_w, stride_h, stride_w).max(axis=(-2, -1))


def _layer_linear(layer, inputs):
    """Pre-activation output of one layer plus whatever backward needs."""
    if layer.kind == "dense":
        return dense_linear(inputs, layer.weights, layer.bias), None
    if layer.kind == "conv2d":
        return conv2d_linear(
            inputs, layer.kernel, layer.bias, layer.stride, layer.padding
        )
    if layer.kind == "flatten":
        return inputs.reshape(inputs.shape[0], -1), inputs.shape
    if layer.kind == "maxpool2d":
        return maxpool2d_forward(inputs, layer.pool, layer.stride), None
    raise DimensionError(f"unsupported layer kind '{layer.kind}'")


def _check_input(model, inputs):
    inputs = as_tensor(inputs)
    if tuple(inputs.shape[1:]) != tuple(model.input_shape):
        raise DimensionError(
            f"model expects input [batch, {', '.join(map(str, model.input_shape))}], "
            f"got {list(inputs.shape)}"
        )
    return inputs


def _run(model, inputs, apply_head=True, trace=None):
    values = _check_input(model, inputs)
    last = len(model.layers) - 1
    for index, layer in enumerate(model.layers):
        try:
            linear, cache = _layer_linear(layer, values)
        except DimensionError as exc:
            raise DimensionError(f"layer {index} ({layer.kind}): {exc}")
        if trace is not None:
            trace.append((values, linear, cache))
        if index == last and not apply_head:
            values = linear
        else:
            values = activate(linear, layer.activation)
    return values


def model_forward(model, inputs):
    """
    Run `inputs` (``[batch, *model.input_shape]``) through every layer.
    """
    return _run(model, inputs)


def model_logits(model, inputs):
    """Like `model_forward` but stops before the final layer's activation."""
    return _run(model, inputs, apply_head=False)


def _onehot(labels, classes, dtype):
    encoded = np.zeros((labels.shape[0], classes), dtype=dtype)
    encoded[np.arange(labels.shape[0]), labels] = 1
    return encoded


def _labels_for(model, labels, batch):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (batch,):
        raise DimensionError(f"{batch} labels expected, got {labels.shape[0]}")
    classes = model.class_count
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    return labels


def _require_softmax_head(model):
    if model.layers[-1].activation is not ActivationKind.SOFTMAX:
        raise UnsupportedLossError(
            "cross-entropy gradients need a model ending in softmax"
        )


def _backward(model, trace, grad_logits, collect_params):
    """
    Reverse-mode pass from the gradient w.r.t. the final pre-activation.

    Returns (input gradient, per-layer parameter gradients or None).
    """
    grad = grad_logits
    param_grads = [None] * len(model.layers)
    last = len(model.layers) - 1
    for index in range(last, -1, -1):
        layer = model.layers[index]
        inputs, linear, cache = trace[index]
        if index != last and layer.activation is ActivationKind.RELU:
            grad = grad * (linear > 0)

        if layer.kind == "dense":
            if collect_params:
                param_grads[index] = {
                    "weights": inputs.T @ grad,
                    "bias": grad.sum(axis=0),
                }
            grad = grad @ layer.weights.T
        elif layer.kind == "conv2d":
            grad = _conv2d_backward(layer, grad, cache, param_grads, index)
        elif layer.kind == "flatten":
            grad = grad.reshape(cache)
        else:
            grad = _maxpool2d_backward(layer, inputs, grad)
    if not collect_params:
        param_grads = None
    return grad, param_grads


def _conv2d_backward(layer, grad, cache, param_grads, index):
    cols, padded_shape, pads = cache
    kernel_h, kernel_w, in_channels, out_channels = layer.kernel.shape
    batch, out_h, out_w, _ = grad.shape
    stride = layer.stride

    flat_grad = grad.reshape(-1, out_channels)
    param_grads[index] = {
        "kernel": (cols.reshape(-1, cols.shape[-1]).T @ flat_grad).reshape(
            layer.kernel.shape
        ),
        "bias": flat_grad.sum(axis=0),
    }

    grad_cols = (grad @ layer.kernel.reshape(-1, out_channels).T).reshape(
        batch, out_h, out_w, kernel_h, kernel_w, in_channels
    )
    padded = np.zeros(padded_shape, dtype=grad_cols.dtype)
    for row in range(kernel_h):
        for col in range(kernel_w):
            padded[
                :,
                row : row + stride * (out_h - 1) + 1 : stride,
                col : col + stride * (out_w - 1) + 1 : stride,
                :,
            ] += grad_cols[:, :, :, row, col, :]
    (top, bottom), (left, right) = pads
    return padded[:, top : padded_shape[1] - bottom, left : padded_shape[2] - right, :]


def _maxpool2d_backward(layer, inputs, grad):
    pool_h, pool_w = pair(layer.pool)
    stride_h, stride_w = pair(layer.stride)
    windows = _windows(inputs, pool_h, pool_w, stride_h, stride_w)
    out_h, out_w = windows.shape[1:3]
    # ties route the gradient to the first maximum in row-major window order
    winners = windows.reshape(*windows.shape[:4], -1).argmax(axis=-1)
    result = np.zeros(inputs.shape, dtype=grad.dtype)
    for row in range(pool_h):
        for col in range(pool_w):
            result[
                :,
                row : row + stride_h * (out_h - 1) + 1 : stride_h,
                col : col + stride_w * (out_w - 1) + 1 : stride_w,
                :,
            ] += grad * (winners == row * pool_w + col)
    return result


def input_gradient(model, inputs, labels):
    """
    Gradient of each sample's cross-entropy loss w.r.t. that sample.

    `inputs` may be a single sample (shape ``model.input_shape``) with an
    int label, or a batch with one label per row.
    """
    _require_softmax_head(model)
    inputs = as_tensor(inputs)
    single = inputs.shape == tuple(model.input_shape)
    if single:
        inputs = inputs[np.newaxis]
    trace = []
    logits = _run(model, inputs, apply_head=False, trace=trace)
    labels = _labels_for(model, labels, inputs.shape[0])
    grad_logits = softmax(logits) - _onehot(labels, model.class_count, logits.dtype)
    grad, _ = _backward(model, trace, grad_logits, collect_params=False)
    return grad[0] if single else grad


def loss_and_gradients(model, inputs, labels):
    """
    Batch-mean cross-entropy loss and its parameter gradients.

    Gradients are a list aligned with ``model.layers``: a dict of arrays
    (``weights``/``kernel`` and ``bias``) for parametric layers, None otherwise.
    """
    _require_softmax_head(model)
    trace = []
    logits = _run(model, inputs, apply_head=False, trace=trace)
    labels = _labels_for(model, labels, logits.shape[0])
    batch = logits.shape[0]
    log_probs = log_softmax(logits)
    loss = float(-log_probs[np.arange(batch), labels].mean())
    grad_logits = (
        np.exp(log_probs) - _onehot(labels, model.class_count, logits.dtype)
    ) / batch
    _, param_grads = _backward(model, trace, grad_logits, collect_params=True)
    return loss, param_grads


def parameter_gradients(model, inputs, labels):
    return loss_and_gradients(model, inputs, labels)[1]
