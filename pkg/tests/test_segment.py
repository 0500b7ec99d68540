"""Quickshift tests: degenerate cases with known answers, agreement with a
scalar brute-force implementation of the same linkage definition, and the
partition/contiguity invariants."""

import math

import numpy as np
import pytest
from scipy import ndimage

from specxplain.audio import MelImage
from specxplain.segment import SegmentLabels, quickshift
from specxplain.tensor import Rng


def quickshift_bruteforce(image, kernel_size, max_dist, ratio):
    """Scalar-loop oracle: Gaussian density in a 3-sigma window, link each
    pixel to the nearest higher-density candidate (equal density toward the
    earlier pixel, offsets scanned row-major), cut links over max_dist,
    split trees into 4-connected components, relabel in scan order."""
    intensity = np.asarray(image, dtype=np.float64) * ratio
    h, w = intensity.shape
    window = max(1, math.ceil(3.0 * kernel_size))
    inv_two_k2 = 1.0 / (2.0 * kernel_size * kernel_size)

    density = np.zeros((h, w))
    for du in range(-window, window + 1):
        for dv in range(-window, window + 1):
            if (du, dv) == (0, 0):
                continue
            for i in range(h):
                ii = i + du
                if not 0 <= ii < h:
                    continue
                for j in range(w):
                    jj = j + dv
                    if 0 <= jj < w:
                        d2 = du * du + dv * dv + (intensity[i, j] - intensity[ii, jj]) ** 2
                        density[i, j] += np.exp(d2 * -inv_two_k2)

    parent = np.arange(h * w)
    for i in range(h):
        for j in range(w):
            best = math.inf
            for du in range(-window, window + 1):
                for dv in range(-window, window + 1):
                    if (du, dv) == (0, 0):
                        continue
                    ii, jj = i + du, j + dv
                    if not (0 <= ii < h and 0 <= jj < w):
                        continue
                    earlier = du < 0 or (du == 0 and dv < 0)
                    if not (density[ii, jj] > density[i, j]
                            or (earlier and density[ii, jj] == density[i, j])):
                        continue
                    dist = math.sqrt(du * du + dv * dv
                                     + (intensity[i, j] - intensity[ii, jj]) ** 2)
                    if dist < best and dist <= max_dist:
                        best = dist
                        parent[i * w + j] = ii * w + jj

    while True:
        hop = parent[parent]
        if np.array_equal(hop, parent):
            break
        parent = hop

    labels = np.full(h * w, -1, dtype=np.int64)
    next_label = 0
    for root in dict.fromkeys(parent.tolist()):
        mask = (parent == root).reshape(h, w)
        comp, n_comp = ndimage.label(mask, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        labels[mask.reshape(-1)] = comp[mask] + next_label - 1
        next_label += n_comp

    flat = labels
    _, first_pos = np.unique(flat, return_index=True)
    rank = np.empty(next_label, dtype=np.int64)
    rank[np.argsort(first_pos, kind="stable")] = np.arange(next_label)
    return rank[flat].reshape(h, w), next_label


class TestQuickshift:
    def test_constant_image_single_segment(self):
        out = quickshift(np.full((24, 30), 97.0))
        assert out.n_segments == 1
        np.testing.assert_array_equal(out.labels, 0)

    def test_two_half_planes(self):
        img = np.zeros((32, 64))
        img[:, 32:] = 255.0
        out = quickshift(img, kernel_size=2.0, max_dist=500.0, ratio=0.2)
        assert out.n_segments == 2
        left, right = out.labels[0, 0], out.labels[0, 63]
        assert left != right
        np.testing.assert_array_equal(out.labels[:, :32], left)
        np.testing.assert_array_equal(out.labels[:, 32:], right)

    def test_matches_bruteforce_on_16x16(self):
        img = np.rint(Rng(3).uniform(0, 255, (16, 16)))
        for kernel, dist in ((2.0, 100.0), (1.0, 3.0)):
            fast = quickshift(img, kernel_size=kernel, max_dist=dist, ratio=0.5)
            slow_labels, slow_count = quickshift_bruteforce(img, kernel, dist, 0.5)
            assert fast.n_segments == slow_count
            np.testing.assert_array_equal(fast.labels, slow_labels)

    def test_every_pixel_labeled(self):
        img = Rng(4).uniform(0, 255, (20, 25))
        out = quickshift(img, kernel_size=2.0, max_dist=10.0)
        assert out.labels.min() == 0
        assert out.n_segments <= img.size
        assert np.unique(out.labels).size == out.n_segments

    def test_segments_are_4_connected(self):
        img = Rng(5).uniform(0, 255, (24, 32))
        out = quickshift(img, kernel_size=1.5, max_dist=6.0)
        structure = [[0, 1, 0], [1, 1, 1], [0, 1, 0]]
        for label in range(out.n_segments):
            _, n_comp = ndimage.label(out.labels == label, structure=structure)
            assert n_comp == 1

    def test_deterministic(self):
        img = Rng(6).uniform(0, 255, (20, 20))
        a = quickshift(img, kernel_size=2.0, max_dist=8.0)
        b = quickshift(img, kernel_size=2.0, max_dist=8.0)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_accepts_mel_image(self):
        img = MelImage(Rng(7).uniform(0, 255, (128, 40)).astype(np.uint8))
        out = quickshift(img, kernel_size=3.0)
        assert out.labels.shape == (128, 40)

    def test_nonpositive_parameters_rejected(self):
        img = np.zeros((8, 8))
        for kwargs in ({"kernel_size": 0}, {"max_dist": -1.0}, {"ratio": 0.0}):
            with pytest.raises(ValueError):
                quickshift(img, **kwargs)

    def test_max_dist_cuts_links(self):
        """Two bright dots far apart: a tiny max_dist forbids the long link."""
        img = np.zeros((10, 40))
        img[5, 5] = img[5, 35] = 200.0
        loose = quickshift(img, kernel_size=1.0, max_dist=100.0, ratio=0.2)
        tight = quickshift(img, kernel_size=1.0, max_dist=2.0, ratio=0.2)
        assert tight.n_segments >= loose.n_segments


class TestSegmentLabels:
    def test_gap_free_labels_required(self):
        with pytest.raises(ValueError, match="gaps"):
            SegmentLabels(labels=np.array([[0, 2], [0, 2]]), n_segments=2)

    def test_valid_construction(self):
        out = SegmentLabels(labels=np.array([[0, 1], [0, 1]]), n_segments=2)
        assert out.n_segments == 2
