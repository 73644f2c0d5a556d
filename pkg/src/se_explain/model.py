"""SmallCNN with an optional SE block ahead of global average pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .se import DEFAULT_REDUCTION, SEBlockParams, SEVector, se_backward, se_forward, select_top_channels


class ModelShapeError(T.ShapeError):
    pass


# --------------------------------------------------------------------- layers


@dataclass
class Conv2d:
    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray
    stride: int = 1
    padding: int = 1
    kind = "conv"

    @property
    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        c, h, w = shape
        c_out, c_in, k, k2 = self.weight.shape
        if k != k2 or self.bias.shape != (c_out,):
            raise ModelShapeError("conv needs a square kernel and one bias per filter", axis="kernel")
        if self.stride < 1 or self.padding < 0:
            raise ModelShapeError("conv stride must be positive, padding non-negative", axis="stride")
        if c != c_in:
            raise ModelShapeError(f"conv expects {c_in} channels, got {c}", axis="channels")
        ho = (h + 2 * self.padding - k) // self.stride + 1
        wo = (w + 2 * self.padding - k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ModelShapeError("conv output would be empty", axis="height")
        return (c_out, ho, wo)

    def forward(self, x):
        cols = T.im2col(x, self.weight.shape[2], self.stride, self.padding)
        y = T.conv2d_forward(x, self.weight, self.bias, self.stride, self.padding, cols=cols)
        return y, (x, cols)

    def backward(self, cache, dy):
        x, cols = cache
        g = T.conv2d_backward(x, self.weight, dy, self.stride, self.padding, cols=cols)
        return g.input_grad, g.param_grads


@dataclass
class ReLU:
    kind = "relu"
    params = []

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        return T.relu_forward(x), x

    def backward(self, cache, dy):
        return T.relu_backward(cache, dy), []


@dataclass
class MaxPool2:
    kind = "maxpool"
    params = []

    def out_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ModelShapeError(f"maxpool2 needs even extents, got {h}x{w}", axis="height")
        return (c, h // 2, w // 2)

    def forward(self, x):
        return T.maxpool2_forward(x), x

    def backward(self, cache, dy):
        return T.maxpool2_backward(cache, dy), []


@dataclass
class SE:
    se: SEBlockParams
    kind = "se"

    @property
    def params(self):
        return [self.se.w1, self.se.w2]

    def out_shape(self, shape):
        if shape[0] != self.se.channels:
            raise ModelShapeError(
                f"SE block expects {self.se.channels} channels, got {shape[0]}", axis="channels"
            )
        return shape

    def forward(self, x):
        y, vec = se_forward(x, self.se)
        return y, (x, vec)

    def backward(self, cache, dy):
        g = se_backward(cache[0], self.se, dy)
        return g.input_grad, g.param_grads


@dataclass
class GAP:
    kind = "gap"
    params = []

    def out_shape(self, shape):
        return (shape[0],)

    def forward(self, x):
        return T.gap_forward(x), x

    def backward(self, cache, dy):
        return T.gap_backward(cache, dy), []


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    kind = "fc"

    @property
    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        if self.bias.shape != (self.weight.shape[0],):
            raise ModelShapeError("dense layer needs one bias per output", axis="bias")
        if len(shape) != 1 or shape[0] != self.weight.shape[1]:
            raise ModelShapeError(
                f"dense layer expects ({self.weight.shape[1]},), got {shape}", axis="features"
            )
        return (self.weight.shape[0],)

    def forward(self, x):
        return T.fc_forward(x, self.weight, self.bias), x

    def backward(self, cache, dy):
        g = T.fc_backward(cache, self.weight, dy)
        return g.input_grad, g.param_grads


# ---------------------------------------------------------------------- graph


@dataclass
class ModelGraph:
    """Ordered layer list plus the input normalisation it was trained with.

    Inputs to :func:`forward` are raw pixels in [0, 1]; ``mean``/``std``
    are applied per channel before the first layer.
    """

    layers: list
    num_classes: int
    input_shape: tuple
    mean: np.ndarray = None
    std: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.input_shape[0]
        self.mean = np.zeros(c, np.float32) if self.mean is None else np.asarray(self.mean, np.float32)
        self.std = np.ones(c, np.float32) if self.std is None else np.asarray(self.std, np.float32)
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ModelShapeError as exc:
                raise ModelShapeError(f"layer {i} ({layer.kind}): {exc}", axis=exc.axis) from None
        if shape != (self.num_classes,):
            raise ModelShapeError(f"model outputs {shape}, expected ({self.num_classes},)")
        kinds = [layer.kind for layer in self.layers]
        if "se" in kinds:
            i = kinds.index("se")
            if i + 1 >= len(kinds) or kinds[i + 1] != "gap":
                raise ModelShapeError("SE block must sit immediately before global average pooling")

    @property
    def se_enabled(self) -> bool:
        return any(layer.kind == "se" for layer in self.layers)

    @property
    def se_params(self) -> Optional[SEBlockParams]:
        for layer in self.layers:
            if layer.kind == "se":
                return layer.se
        return None

    @property
    def tap_index(self) -> int:
        """Layer index whose *input* is the captured feature map."""
        kinds = [layer.kind for layer in self.layers]
        return kinds.index("se") if "se" in kinds else kinds.index("gap")

    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def normalize(self, images):
        images = np.asarray(images, dtype=np.float32)
        return (images - self.mean[:, None, None]) / self.std[:, None, None]


def _he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def build_smallcnn(num_classes=10, input_shape=(3, 32, 32), se_enabled=True,
                   reduction=DEFAULT_REDUCTION, seed=0, zero=False) -> ModelGraph:
    """conv32-conv32-pool-conv64-conv64-pool-conv128-[SE]-GAP-FC.

    All convs are 3x3, stride 1, padding 1, each followed by ReLU.
    Weights are He-normal from ``seed`` (all zeros with ``zero=True``).
    """
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ModelShapeError(f"input height/width must be divisible by 4, got {h}x{w}", axis="height")
    rng = np.random.default_rng(seed)

    def conv(cin, cout):
        if zero:
            return Conv2d(np.zeros((cout, cin, 3, 3), np.float32), np.zeros(cout, np.float32))
        return Conv2d(_he_normal(rng, (cout, cin, 3, 3), cin * 9), np.zeros(cout, np.float32))

    layers = [
        conv(c, 32), ReLU(), conv(32, 32), ReLU(), MaxPool2(),
        conv(32, 64), ReLU(), conv(64, 64), ReLU(), MaxPool2(),
        conv(64, 128), ReLU(),
    ]
    if se_enabled:
        params = SEBlockParams.zeros(128, reduction) if zero else SEBlockParams.init(128, reduction, rng)
        layers.append(SE(params))
    layers.append(GAP())
    if zero:
        layers.append(Dense(np.zeros((num_classes, 128), np.float32), np.zeros(num_classes, np.float32)))
    else:
        layers.append(Dense(_he_normal(rng, (num_classes, 128), 128), np.zeros(num_classes, np.float32)))
    return ModelGraph(layers, num_classes, tuple(input_shape), metadata={"reduction": reduction})


# -------------------------------------------------------------------- forward


@dataclass
class ForwardResult:
    logits: np.ndarray
    captured: np.ndarray  # feature map entering the SE block (or GAP)
    se: Optional[SEVector] = None
    caches: Optional[list] = None


def _check_batch(model, batch):
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ModelShapeError(
            f"batch shape {batch.shape} does not match input {model.input_shape}", axis="input"
        )
    return batch


def forward(model: ModelGraph, batch, keep_caches=False) -> ForwardResult:
    x = model.normalize(_check_batch(model, batch))
    caches = [] if keep_caches else None
    captured, vec = None, None
    tap = model.tap_index
    for i, layer in enumerate(model.layers):
        if i == tap:
            captured = x
        x, cache = layer.forward(x)
        if layer.kind == "se":
            vec = cache[1]
        if keep_caches:
            caches.append(cache)
    return ForwardResult(x, captured, vec, caches)


def backward(model: ModelGraph, result: ForwardResult, logit_grad, want_tap=False):
    """Parameter grads (aligned with ``model.parameters()``) and optionally the
    gradient at the captured feature map."""
    if result.caches is None:
        raise ValueError("forward must be run with keep_caches=True")
    grads = []
    tap_grad = None
    dy = logit_grad
    tap = model.tap_index
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dy, g = layer.backward(result.caches[i], dy)
        grads.append(g)
        if i == tap:
            tap_grad = dy
    flat = [p for g in reversed(grads) for p in g]
    return (flat, tap_grad) if want_tap else flat


def predict_proba(model, batch):
    return T.softmax(forward(model, batch).logits.astype(np.float64))


def channel_mask(s, fraction, rng=None):
    """0/1 mask over channels for each row of ``s``.

    With ``rng`` the same number of channels is drawn uniformly at random
    instead of by SE value.
    """
    s = np.atleast_2d(s)
    mask = np.zeros(s.shape, dtype=np.float32)
    for i, row in enumerate(s):
        idx = select_top_channels(row, fraction).indices
        if rng is not None:
            idx = rng.choice(row.size, size=idx.size, replace=False)
        mask[i, idx] = 1.0
    return mask


def forward_ablated(model: ModelGraph, batch, fraction, control_rng=None):
    """Logits with every channel outside the per-sample SE top fraction zeroed
    after scaling."""
    if not model.se_enabled:
        raise ValueError("forward_ablated needs a model with an SE block")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    x = model.normalize(_check_batch(model, batch))
    for layer in model.layers:
        x, cache = layer.forward(x)
        if layer.kind == "se":
            mask = channel_mask(cache[1].s, fraction, control_rng).astype(x.dtype)
            x = x * mask[:, :, None, None]
    return x
