"""Dense layer primitives on NCHW numpy arrays.

Every forward runs in the dtype of its input (float32 for training,
float64 for gradient checks). Matrix products are issued per sample as
stacked GEMMs so a sample's result never depends on what else shares
its batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ShapeError(ValueError):
    """Operand shapes disagree. ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: Optional[str] = None):
        super().__init__(message)
        self.axis = axis


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: list = field(default_factory=list)


def _check_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {x.shape}", axis="rank")


# ---------------------------------------------------------------- convolution


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Patches of ``x`` as (N, C*k*k, Ho*Wo), rows ordered (channel, ki, kj)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = x[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _check_conv(x, weights, bias, stride, padding):
    _check_rank(x, 4, "input")
    _check_rank(weights, 4, "weights")
    c_out, c_in, k, k2 = weights.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}x{k2}", axis="kernel")
    if x.shape[1] != c_in:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weights expect {c_in}", axis="channels"
        )
    if bias is not None and np.shape(bias) != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {np.shape(bias)}", axis="bias")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if k > x.shape[2] + 2 * padding:
        raise ShapeError(f"kernel {k} larger than padded height", axis="height")
    if k > x.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {k} larger than padded width", axis="width")


def conv2d_forward(x, weights, bias, stride=1, padding=0, cols=None):
    _check_conv(x, weights, bias, stride, padding)
    n, _, h, w = x.shape
    c_out, _, k, _ = weights.shape
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    if cols is None:
        cols = im2col(x, k, stride, padding)
    out = weights.reshape(c_out, -1) @ cols  # (N, C_out, Ho*Wo)
    if bias is not None:
        out += bias[:, None]
    return out.reshape(n, c_out, ho, wo)


def conv2d_backward(x, weights, output_grad, stride=1, padding=0, cols=None) -> LayerGrad:
    """Gradients of ``sum(conv2d_forward(x) * output_grad)``.

    ``param_grads`` is ``[weights_grad, bias_grad]``.
    """
    _check_conv(x, weights, None, stride, padding)
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weights.shape
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    if output_grad.shape != (n, c_out, ho, wo):
        raise ShapeError(
            f"output_grad shape {output_grad.shape} != forward output {(n, c_out, ho, wo)}",
            axis="output_grad",
        )
    if cols is None:
        cols = im2col(x, k, stride, padding)
    g = output_grad.reshape(n, c_out, ho * wo)
    w_grad = (g @ cols.transpose(0, 2, 1)).sum(axis=0)  # fixed-order batch reduction
    b_grad = g.sum(axis=(0, 2))

    dcols = weights.reshape(c_out, -1).T @ g  # (N, C*k*k, Ho*Wo)
    dcols = dcols.reshape(n, c_in, k, k, ho, wo)
    dxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, :, ki, kj]
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return LayerGrad(np.ascontiguousarray(dx), [w_grad.reshape(weights.shape), b_grad])


# ----------------------------------------------------------- pointwise & pool


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, output_grad):
    return output_grad * (x > 0)


def _pool_windows(x):
    _check_rank(x, 4, "input")
    n, c, h, w = x.shape
    if h % 2:
        raise ShapeError(f"maxpool2 needs even height, got {h}", axis="height")
    if w % 2:
        raise ShapeError(f"maxpool2 needs even width, got {w}", axis="width")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h // 2, w // 2, 4)


def maxpool2_forward(x):
    return _pool_windows(x).max(axis=-1)


def maxpool2_backward(x, output_grad):
    win = _pool_windows(x)
    arg = win.argmax(axis=-1)  # first max in row-major window order
    onehot = np.arange(4) == arg[..., None]
    n, c, h, w = x.shape
    dwin = onehot * output_grad[..., None]
    dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(n, c, h, w)).astype(x.dtype, copy=False)


def gap_forward(x):
    """Spatial mean per channel, (N, C, H, W) -> (N, C)."""
    _check_rank(x, 4, "input")
    return x.mean(axis=(2, 3))


def gap_backward(x, output_grad):
    n, c, h, w = x.shape
    if output_grad.shape != (n, c):
        raise ShapeError(f"output_grad must be {(n, c)}, got {output_grad.shape}", axis="channels")
    g = output_grad / (h * w)
    return np.broadcast_to(g[:, :, None, None], x.shape).astype(x.dtype, copy=True)


def fc_forward(x, weights, bias):
    """Dense layer; ``weights`` is (out_features, in_features)."""
    _check_rank(x, 2, "input")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} features, weights expect {weights.shape[1]}", axis="features"
        )
    out = (x[:, None, :] @ weights.T)[:, 0, :]
    if bias is not None:
        out = out + bias
    return out


def fc_backward(x, weights, output_grad) -> LayerGrad:
    if output_grad.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError("output_grad does not match fc output", axis="output_grad")
    w_grad = np.zeros(weights.shape, dtype=x.dtype)
    for i in range(x.shape[0]):
        w_grad += np.outer(output_grad[i], x[i])
    input_grad = (output_grad[:, None, :] @ weights)[:, 0, :]
    return LayerGrad(input_grad, [w_grad, output_grad.sum(axis=0)])


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}", axis="batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_z
    loss = -log_p.mean()
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# ------------------------------------------------------------ gradient check


@dataclass
class FunctionLayer:
    """Pairs a forward map with the vector-Jacobian product that inverts it.

    ``backward(x, output_grad)`` must return the gradient w.r.t. ``x``.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    backward: Callable[[np.ndarray, np.ndarray], np.ndarray]


def grad_check(layer, x, epsilon=1e-4, n_coords=32, seed=0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(layer.forward(x) * g)`` for a fixed random
    ``g``. Everything runs in float64.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x)
    g = rng.standard_normal(np.shape(out))
    analytic = np.asarray(layer.backward(x, g), dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"backward returned {analytic.shape}, input is {x.shape}", axis="input")

    size = x.size
    coords = rng.choice(size, size=min(n_coords, size), replace=False)
    worst = 0.0
    flat = x.reshape(-1)
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + epsilon
        plus = float(np.sum(layer.forward(x) * g))
        flat[idx] = orig - epsilon
        minus = float(np.sum(layer.forward(x) * g))
        flat[idx] = orig
        numeric = (plus - minus) / (2 * epsilon)
        a = float(analytic.reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
