"""Quickshift superpixel segmentation over grayscale spectrogram images.

Mode seeking in joint (row, col, ratio * intensity) feature space: a
Gaussian kernel of bandwidth ``kernel_size`` estimates density inside a
3-sigma window, every pixel links to its nearest candidate with higher
density (equal density breaks toward the earlier pixel in row-major order,
which keeps flat regions in a single tree), links longer than ``max_dist``
are cut, and the resulting trees are the segments.  Segments are then split
into 4-connected components so every label is contiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class SegmentLabels:
    """Per-pixel integer labels 0..n_segments-1; every label is non-empty."""

    labels: np.ndarray
    n_segments: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2-D array")
        present = np.unique(self.labels)
        if present.size != self.n_segments or present[0] != 0 or present[-1] != self.n_segments - 1:
            raise ValueError("labels must cover 0..n_segments-1 with no gaps")


def _intensity(image) -> np.ndarray:
    pixels = image.pixels if hasattr(image, "pixels") else image
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("quickshift expects a 2-D grayscale image")
    return arr


def quickshift(image, kernel_size: float = 4.0, max_dist: float = 200.0,
               ratio: float = 0.2) -> SegmentLabels:
    """Segment a grayscale image; deterministic for fixed parameters."""
    if kernel_size <= 0 or max_dist <= 0 or ratio <= 0:
        raise ValueError("kernel_size, max_dist and ratio must all be positive")
    intensity = _intensity(image) * ratio
    h, w = intensity.shape
    window = max(1, math.ceil(3.0 * kernel_size))
    inv_two_k2 = 1.0 / (2.0 * kernel_size * kernel_size)

    offsets = [(du, dv)
               for du in range(-window, window + 1)
               for dv in range(-window, window + 1)
               if (du, dv) != (0, 0)]

    def shifted_views(arr, du, dv):
        """Aligned (center, neighbor) views for one offset."""
        cu0, cu1 = max(0, -du), h - max(0, du)
        cv0, cv1 = max(0, -dv), w - max(0, dv)
        center = arr[cu0:cu1, cv0:cv1]
        neighbor = arr[cu0 + du : cu1 + du, cv0 + dv : cv1 + dv]
        return (slice(cu0, cu1), slice(cv0, cv1)), center, neighbor

    density = np.zeros((h, w))
    for du, dv in offsets:
        region, center, neighbor = shifted_views(intensity, du, dv)
        d2 = du * du + dv * dv + (center - neighbor) ** 2
        density[region] += np.exp(-d2 * inv_two_k2)

    flat_index = np.arange(h * w).reshape(h, w)
    best_dist = np.full((h, w), np.inf)
    parent = flat_index.copy()
    for du, dv in offsets:
        earlier = du < 0 or (du == 0 and dv < 0)
        region, center_i, neighbor_i = shifted_views(intensity, du, dv)
        _, center_d, neighbor_d = shifted_views(density, du, dv)
        uphill = neighbor_d > center_d
        if earlier:
            uphill = uphill | (neighbor_d == center_d)
        dist = np.sqrt(du * du + dv * dv + (center_i - neighbor_i) ** 2)
        take = uphill & (dist < best_dist[region]) & (dist <= max_dist)
        _, _, neighbor_idx = shifted_views(flat_index, du, dv)
        best_dist[region][take] = dist[take]
        parent[region][take] = neighbor_idx[take]

    # collapse trees by pointer jumping
    roots = parent.reshape(-1)
    while True:
        hop = roots[roots]
        if np.array_equal(hop, roots):
            break
        roots = hop
    root_image = roots.reshape(h, w)

    # split each tree into 4-connected components and relabel by scan order
    labels = np.full((h, w), -1, dtype=np.int64)
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    next_label = 0
    order = np.argsort(roots, kind="stable")
    boundaries = np.flatnonzero(np.diff(roots[order])) + 1
    for grp in np.split(order, boundaries):
        rr, cc = np.unravel_index(grp, (h, w))
        r0, r1 = rr.min(), rr.max() + 1
        c0, c1 = cc.min(), cc.max() + 1
        mask = root_image[r0:r1, c0:c1] == roots[grp[0]]
        comp, n_comp = ndimage.label(mask, structure=structure)
        labels[r0:r1, c0:c1][mask] = comp[mask] + next_label - 1
        next_label += n_comp

    # renumber so labels appear in row-major first-pixel order
    _, first_pos = np.unique(labels.reshape(-1), return_index=True)
    rank = np.empty(next_label, dtype=np.int64)
    rank[np.argsort(first_pos, kind="stable")] = np.arange(next_label)
    relabeled = rank[labels.reshape(-1)].reshape(h, w)
    return SegmentLabels(labels=relabeled, n_segments=next_label)
