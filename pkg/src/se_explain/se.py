"""Squeeze-and-Excitation block and the SE-vector tools built on it."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .tensor import LayerGrad, ShapeError, gap_forward

DEFAULT_REDUCTION = 16
DEFAULT_TOP_FRACTION = 0.10
_FLAT_SIGMA = 1e-8


@dataclass
class SEBlockParams:
    """Bias-free excitation weights: ``w1`` is (B, C), ``w2`` is (C, B)."""

    w1: np.ndarray
    w2: np.ndarray
    reduction: int = DEFAULT_REDUCTION

    def __post_init__(self):
        b, c = self.w1.shape
        if b < 1 or self.w2.shape != (c, b):
            raise ShapeError(
                f"w2 must have shape {(c, b)} to pair with w1 {self.w1.shape}", axis="bottleneck"
            )

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def bottleneck(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, channels, reduction=DEFAULT_REDUCTION, rng=None, dtype=np.float32):
        """Glorot-uniform weights with bottleneck ``max(1, channels // reduction)``."""
        rng = np.random.default_rng() if rng is None else rng
        b = bottleneck_width(channels, reduction)
        limit = math.sqrt(6.0 / (channels + b))
        w1 = rng.uniform(-limit, limit, size=(b, channels)).astype(dtype)
        w2 = rng.uniform(-limit, limit, size=(channels, b)).astype(dtype)
        return cls(w1, w2, reduction)

    @classmethod
    def zeros(cls, channels, reduction=DEFAULT_REDUCTION, dtype=np.float32):
        b = bottleneck_width(channels, reduction)
        return cls(np.zeros((b, channels), dtype), np.zeros((channels, b), dtype), reduction)


def bottleneck_width(channels: int, reduction: int) -> int:
    if reduction < 1:
        raise ValueError("reduction ratio must be positive")
    return max(1, channels // reduction)


@dataclass
class SEVector:
    z: np.ndarray  # squeezed descriptors
    s: np.ndarray  # excitation output, each entry in (0, 1)


@dataclass
class ChannelSelection:
    indices: np.ndarray
    threshold: float
    mu: float
    sigma: float
    fallback_used: bool


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the open interval even where the float type saturates
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def squeeze(u, sample=None):
    """Per-channel spatial mean. With ``sample`` given, returns that row only."""
    if sample is None:
        return gap_forward(u)
    if not 0 <= sample < u.shape[0]:
        raise IndexError(f"sample {sample} out of range for batch of {u.shape[0]}")
    return gap_forward(u[sample:sample + 1])[0]


def _excite_hidden(z, params):
    z2 = np.atleast_2d(z)
    if z2.shape[-1] != params.channels:
        raise ShapeError(
            f"z has {z2.shape[-1]} channels, params expect {params.channels}", axis="channels"
        )
    pre = (z2[:, None, :] @ params.w1.T)[:, 0, :]
    hidden = np.maximum(pre, 0)
    s = sigmoid((hidden[:, None, :] @ params.w2.T)[:, 0, :])
    return pre, hidden, s


def excite(z, params: SEBlockParams):
    """``sigmoid(w2 @ relu(w1 @ z))`` for a vector or a (N, C) batch."""
    s = _excite_hidden(z, params)[2]
    return s[0] if np.ndim(z) == 1 else s


def scale(u, s):
    s = np.asarray(s)
    if u.ndim == 3:
        if s.shape != (u.shape[0],):
            raise ShapeError(f"s must have length {u.shape[0]}", axis="channels")
        return u * s[:, None, None]
    if s.ndim == 1:
        s = np.broadcast_to(s, (u.shape[0], s.shape[0]))
    if s.shape != u.shape[:2]:
        raise ShapeError(f"s shape {s.shape} does not match feature map {u.shape}", axis="channels")
    return u * s[:, :, None, None]


def se_forward(u, params: SEBlockParams):
    """Squeeze, excite and scale a batch; returns ``(x, SEVector)`` with (N, C) vectors."""
    if u.ndim != 4:
        raise ShapeError(f"feature map must be NCHW, got {u.shape}", axis="rank")
    z = squeeze(u)
    s = excite(z, params)
    return scale(u, s), SEVector(z=z, s=s)


def se_backward(u, params: SEBlockParams, output_grad) -> LayerGrad:
    """Exact gradients of the block; ``param_grads`` is ``[w1_grad, w2_grad]``.

    The input gradient is the direct ``s_c * dX_c`` term plus the path that
    runs back through the squeezed descriptor.
    """
    if output_grad.shape != u.shape:
        raise ShapeError(f"output_grad {output_grad.shape} != input {u.shape}", axis="output_grad")
    n, c, h, w = u.shape
    z = squeeze(u)
    pre, hidden, s = _excite_hidden(z, params)

    ds = (output_grad * u).sum(axis=(2, 3))
    da2 = ds * s * (1 - s)
    dhidden = (da2[:, None, :] @ params.w2)[:, 0, :]
    da1 = dhidden * (pre > 0)
    dz = (da1[:, None, :] @ params.w1)[:, 0, :]

    w1_grad = np.zeros_like(params.w1)
    w2_grad = np.zeros_like(params.w2)
    for i in range(n):
        w2_grad += np.outer(da2[i], hidden[i])
        w1_grad += np.outer(da1[i], z[i])

    input_grad = output_grad * s[:, :, None, None] + (dz / (h * w))[:, :, None, None]
    return LayerGrad(input_grad.astype(u.dtype, copy=False), [w1_grad, w2_grad])


# ----------------------------------------------------------- channel selection


def top_fraction_zscore(fraction: float) -> float:
    """Standard-normal quantile at ``1 - fraction``."""
    return float(ndtri(1.0 - fraction))


def select_top_channels(s, fraction=DEFAULT_TOP_FRACTION) -> ChannelSelection:
    """Channels whose SE value exceeds ``mu + z * sigma`` under a normal fit.

    Falls back to the top ``ceil(fraction * C)`` channels (ties to the lower
    index) when the fit selects nothing, the vector is flat, or
    ``fraction == 1``.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.size < 2:
        raise ValueError("need at least two channels")
    mu = float(s.mean())
    sigma = float(s.std())
    if fraction == 1.0:
        return ChannelSelection(np.arange(s.size), -math.inf, mu, sigma, True)

    threshold = mu + top_fraction_zscore(fraction) * sigma
    indices = np.flatnonzero(s > threshold)
    if sigma >= _FLAT_SIGMA and indices.size:
        return ChannelSelection(indices, threshold, mu, sigma, False)

    k = math.ceil(fraction * s.size)
    order = np.lexsort((np.arange(s.size), -s))
    return ChannelSelection(np.sort(order[:k]), threshold, mu, sigma, True)


# ------------------------------------------------------------ distribution fit


@dataclass
class SEDistribution:
    values: np.ndarray  # pooled SE values, mean-centred
    mu: float
    sigma: float
    skewness: float
    excess_kurtosis: float
    raw_mean: float
    n_samples: int


def moments(values):
    """Mean, population std, skewness and excess kurtosis in float64.

    A flat sample reports zero skewness and kurtosis.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    mu = float(v.mean())
    d = v - mu
    var = float(np.mean(d * d))
    if var <= 0.0:
        return mu, 0.0, 0.0, 0.0
    sigma = math.sqrt(var)
    skew = float(np.mean(d ** 3)) / sigma ** 3
    kurt = float(np.mean(d ** 4)) / var ** 2 - 3.0
    return mu, sigma, skew, kurt


def aggregate_se_values(model, batches, max_samples=2000) -> SEDistribution:
    """Pool per-image SE vectors over up to ``max_samples`` images.

    ``batches`` yields image arrays or ``(images, labels)`` pairs.
    """
    if not getattr(model, "se_enabled", False):
        raise ValueError("model has no SE block")
    from .model import forward

    pooled = []
    seen = 0
    for batch in batches:
        images = batch[0] if isinstance(batch, tuple) else batch
        images = images[: max_samples - seen]
        if len(images) == 0:
            break
        pooled.append(forward(model, images).se.s.astype(np.float64))
        seen += len(images)
        if seen >= max_samples:
            break
    if not pooled:
        raise ValueError("no samples to aggregate")
    raw = np.concatenate(pooled).reshape(-1)
    raw_mean = float(raw.mean())
    centred = raw - raw_mean
    mu, sigma, skew, kurt = moments(centred)
    return SEDistribution(centred, mu, sigma, skew, kurt, raw_mean, seen)
