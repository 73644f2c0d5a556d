"""Deletion and insertion curves for saliency maps."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .explain import SaliencyMap, saliency_for
from .model import predict_proba

BLUR_SIGMA = 5.0
BLUR_RADIUS = 10
DEFAULT_STEPS = 100


@dataclass
class MetricCurve:
    fractions: np.ndarray
    probs: np.ndarray
    auc: float
    kind: str  # "deletion" | "insertion"
    target: int


def auc(fractions, probs) -> float:
    """Trapezoidal area under ``probs`` over strictly increasing ``fractions``."""
    f = np.asarray(fractions, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if f.shape != p.shape or f.ndim != 1 or f.size < 2:
        raise ValueError("fractions and probs must be equal-length 1-d sequences")
    if np.any(np.diff(f) <= 0):
        raise ValueError("fractions must be strictly increasing")
    return float(np.sum(np.diff(f) * (p[1:] + p[:-1]) * 0.5))


def gaussian_kernel(sigma=BLUR_SIGMA, radius=BLUR_RADIUS):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma=BLUR_SIGMA, radius=BLUR_RADIUS):
    """Separable blur of a (C, H, W) image with edge clamping."""
    k = gaussian_kernel(sigma, radius)
    out = convolve1d(np.asarray(image, dtype=np.float64), k, axis=1, mode="nearest")
    out = convolve1d(out, k, axis=2, mode="nearest")
    return out.astype(np.asarray(image).dtype)


def step_counts(n_pixels, steps):
    """Pixels perturbed at each curve point: multiples of ``ceil(n/steps)``,
    with the last step taking whatever remains."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    per = math.ceil(n_pixels / steps)
    n_steps = math.ceil(n_pixels / per)
    counts = [min(k * per, n_pixels) for k in range(n_steps + 1)]
    return np.array(counts)


def pixel_order(saliency):
    """Flat pixel indices by descending saliency, ties in row-major order."""
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    return np.argsort(-values.reshape(-1), kind="stable")


def _curve(model, image, saliency, steps, kind, batch_size, target=None,
           blur_sigma=BLUR_SIGMA, blur_radius=BLUR_RADIUS):
    image = np.asarray(image, dtype=np.float32)
    c, h, w = image.shape
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if values.shape != (h, w):
        raise ValueError(f"saliency {values.shape} does not match image {(h, w)}")
    if target is None:
        target = int(np.argmax(predict_proba(model, image[None])[0]))
    order = pixel_order(values)
    counts = step_counts(h * w, steps)

    if kind == "deletion":
        start, finish = image.reshape(c, -1), np.zeros((c, h * w), np.float32)
    else:
        start = gaussian_blur(image, blur_sigma, blur_radius).reshape(c, -1)
        finish = image.reshape(c, -1)

    probs = np.empty(len(counts))
    for lo in range(0, len(counts), batch_size):
        chunk = counts[lo:lo + batch_size]
        batch = np.repeat(start[None], len(chunk), axis=0)
        for j, n in enumerate(chunk):
            pix = order[:n]
            batch[j][:, pix] = finish[:, pix]
        probs[lo:lo + len(chunk)] = predict_proba(model, batch.reshape(-1, c, h, w))[:, target]
    fractions = counts / (h * w)
    return MetricCurve(fractions, probs, auc(fractions, probs), kind, target)


def deletion_curve(model, image, saliency, steps=DEFAULT_STEPS, batch_size=32, target=None):
    """Target-class probability as the most salient pixels are zeroed."""
    return _curve(model, image, saliency, steps, "deletion", batch_size, target)


def insertion_curve(model, image, saliency, steps=DEFAULT_STEPS, batch_size=32, target=None,
                    blur_sigma=BLUR_SIGMA, blur_radius=BLUR_RADIUS):
    """Target-class probability as salient pixels are restored onto a blurred copy."""
    return _curve(model, image, saliency, steps, "insertion", batch_size, target,
                  blur_sigma, blur_radius)


# ----------------------------------------------------------------- evaluation


@dataclass
class ImageRecord:
    image_id: int
    target: int
    deletion_auc: float
    insertion_auc: float


@dataclass
class MetricSummary:
    method: str
    n_images: int
    steps: int
    deletion_auc_mean: float
    deletion_auc_std: float
    insertion_auc_mean: float
    insertion_auc_std: float
    records: list

    def to_json_dict(self):
        return {
            "method": self.method,
            "n_images": self.n_images,
            "steps": self.steps,
            "deletion_auc_mean": self.deletion_auc_mean,
            "deletion_auc_std": self.deletion_auc_std,
            "insertion_auc_mean": self.insertion_auc_mean,
            "insertion_auc_std": self.insertion_auc_std,
        }


def sample_image_ids(n_total, n_images, seed):
    if n_total < 1:
        raise ValueError("dataset is empty")
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_total, size=min(n_images, n_total), replace=False))


def evaluate_image(model, image, image_id, method, steps, seed, fraction=0.10):
    sal = saliency_for(method, model, image, seed=seed * 1_000_003 + int(image_id), fraction=fraction)
    d = deletion_curve(model, image, sal, steps)
    i = insertion_curve(model, image, sal, steps, target=d.target)
    return ImageRecord(int(image_id), d.target, d.auc, i.auc)


def evaluate_method(model, split, method, n_images=200, steps=DEFAULT_STEPS, seed=0,
                    fraction=0.10, jobs=1) -> MetricSummary:
    """Mean and std of deletion/insertion AUC over a seeded image sample.

    ``split`` needs ``len()`` and ``image(i)`` returning a (C, H, W) array in
    [0, 1].
    """
    ids = sample_image_ids(len(split), n_images, seed)

    def run(i):
        return evaluate_image(model, split.image(i), i, method, steps, seed, fraction)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run, ids))
    else:
        records = [run(i) for i in ids]
    records.sort(key=lambda r: r.image_id)
    dels = np.array([r.deletion_auc for r in records])
    ins = np.array([r.insertion_auc for r in records])
    return MetricSummary(
        method, len(records), steps,
        float(dels.mean()), float(dels.std()), float(ins.mean()), float(ins.std()), records,
    )
