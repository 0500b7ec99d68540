"""Rendering: saliency overlays, PNG I/O, and training/metric plots."""

from __future__ import annotations

import numpy as np
from PIL import Image

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def colormap_blue_red(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] relevance to RGB: 0 is pure blue, 1 is pure red."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.zeros((*v.shape, 3), dtype=np.uint8)
    rgb[..., 0] = np.rint(255.0 * v)
    rgb[..., 2] = np.rint(255.0 * (1.0 - v))
    return rgb


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map collapses to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def overlay_saliency(values: np.ndarray, underlay_pixels: np.ndarray,
                     alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the colorized map over the grayscale spectrogram."""
    heat = colormap_blue_red(normalize_map(values)).astype(np.float64)
    gray = np.asarray(underlay_pixels, dtype=np.float64)
    if gray.shape != values.shape:
        raise ValueError(f"map shape {values.shape} != underlay shape {gray.shape}")
    base = np.repeat(gray[:, :, None], 3, axis=2)
    return np.rint((1.0 - alpha) * base + alpha * heat).astype(np.uint8)


def render_saliency(saliency, underlay, path, alpha: float = 0.5) -> None:
    """Write the overlay PNG for a saliency map over its source image."""
    values = saliency.values if hasattr(saliency, "values") else saliency
    pixels = underlay.pixels if hasattr(underlay, "pixels") else underlay
    write_png(overlay_saliency(values, pixels, alpha), path)


def write_png(array: np.ndarray, path) -> None:
    """8-bit grayscale (HxW) or RGB (HxWx3) PNG."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("write_png expects uint8 data")
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """PNG back to a uint8 array (grayscale stays 2-D)."""
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.uint8)
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------------------
# metric plots
# ---------------------------------------------------------------------------

def plot_history(history: list[dict], loss_path, accuracy_path) -> None:
    """Loss and accuracy curves over epochs, one PNG each."""
    epochs = [row["epoch"] for row in history]
    for path, keys, ylabel in (
        (loss_path, ("train_loss", "val_loss"), "loss"),
        (accuracy_path, ("train_acc", "val_acc"), "accuracy"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in keys:
            ax.plot(epochs, [row[key] for row in history], marker="o", label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_class_histogram(counts: dict[str, int], path, title: str = "class distribution") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    names = list(counts)
    ax.bar(names, [counts[n] for n in names])
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
