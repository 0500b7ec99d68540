"""Local surrogate explanations over superpixel segments.

The image is segmented with quickshift, perturbed by randomly keeping or
hiding whole segments, scored by the black-box classifier, and a weighted
linear model from mask vectors to the target-class probability is fitted.
The segments with the largest positive coefficients are the explanation.
The classifier is only ever called through a batch predict function, never
inspected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from specxplain.audio import pixels_to_input_array
from specxplain.segment import SegmentLabels, quickshift
from specxplain.tensor import Rng, no_grad

DEFAULT_N_SAMPLES = 150


def combination_count(n_segments: int) -> int:
    """Segment combinations with one or two segments hidden:
    C(S, S-1) + C(S, S-2)."""
    if n_segments < 2:
        raise ValueError("need at least two segments")
    return math.comb(n_segments, n_segments - 1) + math.comb(n_segments, n_segments - 2)


def cnn_predict_fn(model, chunk_size: int = 16):
    """Batch predictor over grayscale pixel images for a trained CNN.

    Takes (N, H, W) arrays of 0..255 pixel values, returns (N, 2) class
    probabilities; the adapter replicates channels the same way training did.
    """
    def predict(pixel_batch: np.ndarray) -> np.ndarray:
        batch = pixels_to_input_array(np.asarray(pixel_batch, dtype=np.float64))
        out = np.empty((batch.shape[0], 2))
        with no_grad():
            for lo in range(0, batch.shape[0], chunk_size):
                out[lo : lo + chunk_size] = model.forward(batch[lo : lo + chunk_size]).probs.data
        return out
    return predict


@dataclass
class LimeExplanation:
    """Fitted surrogate: per-segment coefficients and the selected top set."""

    segments: SegmentLabels
    coefficients: np.ndarray
    intercept: float
    selected: list[int]
    class_index: int
    r_squared: float
    masked_pixels: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not set(self.selected) <= set(range(self.segments.n_segments)):
            raise ValueError("selected ids must be existing segment labels")


def weighted_ridge(masks: np.ndarray, targets: np.ndarray, weights: np.ndarray,
                   damping: float = 1e-6) -> tuple[np.ndarray, float, float]:
    """Weighted least squares with ridge damping on the coefficients only.

    Returns (coefficients, intercept, weighted R^2).
    """
    n, s = masks.shape
    x = np.hstack([np.ones((n, 1)), masks.astype(np.float64)])
    xtw = x.T * weights
    reg = damping * np.eye(s + 1)
    reg[0, 0] = 0.0
    beta = np.linalg.solve(xtw @ x + reg, xtw @ targets)
    pred = x @ beta
    wsum = weights.sum()
    if wsum == 0:
        return beta[1:], float(beta[0]), 0.0
    ybar = (weights * targets).sum() / wsum
    ss_res = (weights * (targets - pred) ** 2).sum()
    ss_tot = (weights * (targets - ybar) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 and ss_res <= 1e-18 else 1.0 - ss_res / max(ss_tot, 1e-300)
    return beta[1:], float(beta[0]), float(r2)


def cosine_similarity_weights(perturbed_flat: np.ndarray, original_flat: np.ndarray) -> np.ndarray:
    """Cosine similarity to the original, min-max normalized to [0, 1]."""
    ref_norm = np.linalg.norm(original_flat)
    norms = np.linalg.norm(perturbed_flat, axis=1)
    sims = perturbed_flat @ original_flat / np.maximum(norms * ref_norm, 1e-300)
    lo, hi = sims.min(), sims.max()
    if hi == lo:
        return np.ones_like(sims)
    return (sims - lo) / (hi - lo)


def lime_explain(predict_fn, image, class_idx: int, n_features: int,
                 n_samples: int = DEFAULT_N_SAMPLES, rng: Rng | None = None,
                 segments: SegmentLabels | None = None,
                 fill: str = "global_mean", ridge: float = 1e-6,
                 kernel_size: float = 4.0, max_dist: float = 200.0,
                 ratio: float = 0.2) -> LimeExplanation:
    """Explain one prediction of ``predict_fn`` on a grayscale image.

    ``predict_fn`` maps an (N, H, W) pixel batch to (N, K) probabilities.
    Masks keep each segment independently with probability 0.5; hidden
    segments are filled with the image's global mean pixel value (or, with
    ``fill='remaining_mean'``, the mean of the segments kept in that sample).
    Sample weights are min-max normalized cosine similarities to the original.
    """
    if rng is None:
        rng = Rng(0)
    pixels = np.asarray(image.pixels if hasattr(image, "pixels") else image, dtype=np.float64)
    if segments is None:
        segments = quickshift(pixels, kernel_size=kernel_size, max_dist=max_dist, ratio=ratio)
    s = segments.n_segments
    if s < 2:
        raise ValueError(f"need at least 2 segments to explain, got {s}")
    if not 1 <= n_features <= s:
        raise ValueError(f"n_features must lie in [1, {s}], got {n_features}")
    if fill not in ("global_mean", "remaining_mean"):
        raise ValueError(f"unknown fill mode {fill!r}")

    masks = rng.uniform(size=(n_samples, s)) < 0.5
    labels = segments.labels
    global_mean = pixels.mean()

    perturbed = np.empty((n_samples, *pixels.shape))
    for i in range(n_samples):
        keep = masks[i][labels]
        if fill == "global_mean":
            fill_value = global_mean
        else:
            kept = pixels[keep]
            fill_value = kept.mean() if kept.size else global_mean
        perturbed[i] = np.where(keep, pixels, fill_value)

    probs = np.asarray(predict_fn(perturbed))
    if probs.ndim != 2 or probs.shape[0] != n_samples:
        raise ValueError("predict_fn must return an (n_samples, K) array")
    if not 0 <= class_idx < probs.shape[1]:
        raise ValueError(f"class index {class_idx} out of range")
    targets = probs[:, class_idx]

    weights = cosine_similarity_weights(perturbed.reshape(n_samples, -1), pixels.reshape(-1))
    coef, intercept, r2 = weighted_ridge(masks, targets, weights, damping=ridge)

    order = np.argsort(-coef, kind="stable")
    selected = [int(i) for i in order[:n_features]]
    keep = np.isin(labels, selected)
    masked = np.where(keep, pixels, 0.0)

    return LimeExplanation(
        segments=segments,
        coefficients=coef,
        intercept=intercept,
        selected=selected,
        class_index=class_idx,
        r_squared=r2,
        masked_pixels=np.rint(masked).astype(np.uint8),
        params={"n_samples": n_samples, "n_features": n_features, "fill": fill,
                "ridge": ridge, "kernel_size": kernel_size, "max_dist": max_dist,
                "ratio": ratio},
    )
