"""Saliency maps from SE vectors and GradCAM, plus heatmap rendering."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelGraph, backward, forward
from .se import ChannelSelection, select_top_channels

CUBIC_A = -0.5

# blue -> cyan -> green -> yellow -> red at 0, .25, .5, .75, 1
COLORMAP_ANCHORS = np.array(
    [[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64
)


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) float64 in [0, 1]
    method: str


@dataclass
class HeatmapImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    alpha: float
    colormap: str = "bcgyr"


# ------------------------------------------------------------------ bicubic


def cubic_kernel(x, a=CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _resample_matrix(n_in, n_out):
    """(n_out, n_in) matrix of half-pixel aligned, edge-clamped cubic weights."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = base + tap
        wgt = cubic_kernel(src - idx)
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), wgt)
    return m


def bicubic_upsample(grid, out_h, out_w):
    """Cubic-convolution resize of the last two axes (a = -0.5)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extent must be positive, got {out_h}x{out_w}")
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"source grid must be at least 2x2, got {h}x{w}")
    my = _resample_matrix(h, out_h)
    mx = _resample_matrix(w, out_w)
    return my @ grid @ mx.T


# ------------------------------------------------------------- normalisation


def minmax_normalize(raw):
    """Scale to [0, 1]; a flat map becomes 0.5 everywhere."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if not hi - lo > 1e-12 * max(abs(lo), abs(hi)):
        return np.full(raw.shape, 0.5)
    out = (raw - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def se_heatmap(captured, s, selection: ChannelSelection, img_h, img_w) -> SaliencyMap:
    """s-weighted mean of the selected channels, upsampled and normalised.

    ``captured`` is one sample's (C, h, w) feature map at the SE input.
    """
    idx = np.asarray(selection.indices)
    assert idx.size > 0, "channel selection is empty"
    captured = np.asarray(captured, dtype=np.float64)
    if idx.min() < 0 or idx.max() >= captured.shape[0]:
        raise IndexError("selection refers to channels outside the feature map")
    weights = np.asarray(s, dtype=np.float64)[idx]
    raw = np.tensordot(weights, captured[idx], axes=1) / weights.sum()
    return SaliencyMap(minmax_normalize(bicubic_upsample(raw, img_h, img_w)), "se")


def explain_se(model: ModelGraph, image, fraction=0.10) -> SaliencyMap:
    if not model.se_enabled:
        raise ValueError("SE heatmaps need a model with an SE block")
    res = forward(model, image[None])
    s = res.se.s[0]
    _, h, w = model.input_shape
    return se_heatmap(res.captured[0], s, select_top_channels(s, fraction), h, w)


def gradcam(model: ModelGraph, image, class_index=None) -> SaliencyMap:
    """GradCAM at the captured feature map (the last conv activation)."""
    res = forward(model, image[None], keep_caches=True)
    if class_index is None:
        class_index = int(np.argmax(res.logits[0]))
    if not 0 <= class_index < model.num_classes:
        raise ValueError(f"class index {class_index} outside [0, {model.num_classes})")
    dlogits = np.zeros_like(res.logits)
    dlogits[0, class_index] = 1.0
    _, grad = backward(model, res, dlogits, want_tap=True)
    alpha = gradcam_weights(grad[0])
    raw = np.maximum(np.tensordot(alpha, res.captured[0].astype(np.float64), axes=1), 0.0)
    _, h, w = model.input_shape
    return SaliencyMap(minmax_normalize(bicubic_upsample(raw, h, w)), "gradcam")


def gradcam_weights(feature_grad):
    """Channel weights: spatial mean of the class-score gradient."""
    return np.asarray(feature_grad, dtype=np.float64).mean(axis=(1, 2))


def random_saliency(h, w, seed) -> SaliencyMap:
    rng = np.random.default_rng(seed)
    return SaliencyMap(minmax_normalize(rng.random((h, w))), "random")


def saliency_for(method, model, image, seed=0, fraction=0.10) -> SaliencyMap:
    if method == "se":
        return explain_se(model, image, fraction)
    if method == "gradcam":
        return gradcam(model, image)
    if method == "random":
        _, h, w = model.input_shape
        return random_saliency(h, w, seed)
    raise ValueError(f"unknown saliency method {method!r}")


# ----------------------------------------------------------------- rendering


def colormap(values):
    """Piecewise-linear blue-cyan-green-yellow-red ramp, (...,) -> (..., 3)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 4.0
    lo = np.minimum(np.floor(v).astype(np.int64), 3)
    t = (v - lo)[..., None]
    return COLORMAP_ANCHORS[lo] * (1 - t) + COLORMAP_ANCHORS[lo + 1] * t


def overlay(image, saliency: SaliencyMap, alpha=0.5) -> HeatmapImage:
    """Alpha-blend the colour-mapped saliency over an (H, W, 3) uint8 image."""
    image = np.asarray(image)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[:2] != saliency.values.shape:
        raise ValueError(
            f"image {image.shape} and saliency {saliency.values.shape} dimensions disagree"
        )
    blend = (1.0 - alpha) * image.astype(np.float64) + alpha * colormap(saliency.values)
    pixels = np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)
    return HeatmapImage(pixels, alpha)


def to_rgb8(image_chw):
    """(C, H, W) floats in [0, 1] -> (H, W, 3) uint8; grayscale is replicated."""
    img = np.asarray(image_chw, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return np.clip(np.floor(img.transpose(1, 2, 0) * 255 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path):
    """Binary P6 reader, maxval 255 only."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError("malformed PPM header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise ValueError("only 8-bit PPM images are supported")
    pos += 1
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError("truncated PPM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_png(path, rgb) -> bool:
    """Write a PNG through Pillow; returns False when Pillow is missing."""
    try:
        from PIL import Image
    except ImportError:
        return False
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path, format="PNG")
    return True


def read_image(path):
    if Path(path).suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
