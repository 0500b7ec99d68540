"""Rendering tests: colormap endpoints, overlay dimensions, PNG round trips."""

import numpy as np
import pytest

from specxplain.audio import MelImage
from specxplain.render import (
    colormap_blue_red,
    load_png,
    normalize_map,
    overlay_saliency,
    plot_class_histogram,
    plot_history,
    render_saliency,
    write_png,
)
from specxplain.tensor import Rng
from specxplain.xai import SaliencyMap


class TestColormap:
    def test_zero_is_pure_blue(self):
        rgb = colormap_blue_red(np.zeros((4, 4)))
        np.testing.assert_array_equal(rgb[..., 0], 0)
        np.testing.assert_array_equal(rgb[..., 2], 255)

    def test_one_is_pure_red(self):
        rgb = colormap_blue_red(np.ones((2, 2)))
        np.testing.assert_array_equal(rgb[..., 0], 255)
        np.testing.assert_array_equal(rgb[..., 2], 0)

    def test_normalize_constant_collapses_to_zero(self):
        np.testing.assert_array_equal(normalize_map(np.full((3, 3), 0.7)), 0.0)


class TestOverlay:
    def test_zero_map_gives_pure_blue_heat(self):
        underlay = np.zeros((8, 10), dtype=np.uint8)
        out = overlay_saliency(np.zeros((8, 10)), underlay, alpha=1.0)
        np.testing.assert_array_equal(out[..., 2], 255)
        np.testing.assert_array_equal(out[..., 0], 0)

    def test_peak_pixel_is_pure_red_prior_to_blend(self):
        values = np.zeros((4, 4))
        values[1, 2] = 1.0
        out = overlay_saliency(values, np.zeros((4, 4), dtype=np.uint8), alpha=1.0)
        np.testing.assert_array_equal(out[1, 2], [255, 0, 0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            overlay_saliency(np.zeros((4, 4)), np.zeros((5, 5), dtype=np.uint8))


class TestPng:
    def test_saliency_file_decodes_to_full_geometry_rgb(self, tmp_path):
        saliency = SaliencyMap(values=Rng(0).uniform(0, 1, (128, 820)),
                               method="gradcam", class_index=0)
        underlay = MelImage(Rng(1).uniform(0, 255, (128, 820)).astype(np.uint8))
        path = tmp_path / "overlay.png"
        render_saliency(saliency, underlay, path)
        decoded = load_png(path)
        assert decoded.shape == (128, 820, 3)

    def test_gray_round_trip(self, tmp_path):
        pixels = Rng(2).uniform(0, 255, (16, 20)).astype(np.uint8)
        path = tmp_path / "gray.png"
        write_png(pixels, path)
        np.testing.assert_array_equal(load_png(path), pixels)

    def test_non_uint8_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_png(np.zeros((4, 4)), tmp_path / "bad.png")


class TestPlots:
    def test_history_plots_written(self, tmp_path):
        history = [{"epoch": e, "train_loss": 1.0 / e, "train_acc": 0.5 + 0.1 * e,
                    "val_loss": 1.2 / e, "val_acc": 0.4 + 0.1 * e} for e in (1, 2, 3)]
        loss, acc = tmp_path / "loss.png", tmp_path / "acc.png"
        plot_history(history, loss, acc)
        assert loss.stat().st_size > 0 and acc.stat().st_size > 0

    def test_histogram_plot_written(self, tmp_path):
        path = tmp_path / "hist.png"
        plot_class_histogram({"covid": 10, "non_covid": 12}, path)
        assert path.stat().st_size > 0
