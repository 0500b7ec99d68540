"""Dataset handling: manifests, stratified splits, class histograms, and a
synthetic planted-feature generator.

The synthetic images look like spectrograms (low-frequency background
texture plus pixel noise) but carry a bright rectangular patch whose
position encodes the class.  Ground-truth patch masks make explanation
quality objectively checkable: a faithful explainer must point at the patch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from specxplain.audio import MelImage, pixels_to_input_array
from specxplain.model import LABELS
from specxplain.tensor import Rng


@dataclass
class Manifest:
    """Ordered (path, label) records with labels from the closed set."""

    records: list[tuple[str, str]]

    def __len__(self) -> int:
        return len(self.records)

    def paths(self) -> list[str]:
        return [p for p, _ in self.records]

    def labels(self) -> list[str]:
        return [l for _, l in self.records]


def load_manifest(path) -> Manifest:
    """Parse a ``path,label`` CSV; referenced paths must exist.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    records: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if rows and rows[0] == ["path", "label"]:
        rows = rows[1:]
    if not rows:
        raise ValueError(f"manifest {path} is empty")
    for i, row in enumerate(rows, start=1):
        if len(row) != 2:
            raise ValueError(f"manifest row {i}: expected 'path,label', got {row!r}")
        rec_path, label = row[0].strip(), row[1].strip()
        if label not in LABELS:
            raise ValueError(f"manifest row {i}: unknown label {label!r} "
                             f"(expected one of {LABELS})")
        resolved = Path(rec_path)
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        if not resolved.exists():
            raise FileNotFoundError(f"manifest row {i}: {resolved} does not exist")
        key = str(resolved)
        if key in seen:
            raise ValueError(f"manifest row {i}: duplicate path {rec_path!r}")
        seen.add(key)
        records.append((str(resolved), label))
    return Manifest(records)


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        writer.writerows(manifest.records)


def stratified_split(manifest: Manifest, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[Manifest, Manifest]:
    """Shuffled per-class split; proportions within one sample of the target."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test fraction must lie in (0, 1)")
    by_label: dict[str, list[int]] = {}
    for i, (_, label) in enumerate(manifest.records):
        by_label.setdefault(label, []).append(i)
    rng = Rng(seed)
    test_idx: set[int] = set()
    for rank, label in enumerate(sorted(by_label)):
        idxs = by_label[label]
        if len(idxs) < 2:
            raise ValueError(f"class {label!r} has only {len(idxs)} sample(s); need >= 2")
        n_test = int(len(idxs) * test_fraction + 0.5)
        perm = rng.derive(rank).permutation(len(idxs))
        test_idx.update(idxs[j] for j in perm[:n_test])
    train = Manifest([r for i, r in enumerate(manifest.records) if i not in test_idx])
    test = Manifest([r for i, r in enumerate(manifest.records) if i in test_idx])
    return train, test


def class_histogram(manifest: Manifest) -> dict[str, int]:
    """Per-label counts; every known label appears even when zero."""
    counts = {label: 0 for label in LABELS}
    for _, label in manifest.records:
        counts[label] += 1
    return counts


def write_histogram_csv(counts: dict[str, int], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "count"])
        for label, count in counts.items():
            writer.writerow([label, count])


# ---------------------------------------------------------------------------
# synthetic planted-feature data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchRect:
    top: int
    left: int
    height: int
    width: int

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def overlaps(self, other: "PatchRect") -> bool:
        return not (self.top + self.height <= other.top or other.top + other.height <= self.top
                    or self.left + self.width <= other.left or other.left + other.width <= self.left)


@dataclass
class SyntheticSpec:
    """Geometry and contrast of the planted-feature images.

    The quarter-width 128 x 205 default keeps training runtimes small; use
    width 820 for the full-geometry pipeline.  Default patches cover ~12%
    of the image so they stay resolvable by explanation maps that live at
    the last conv block's 8x8-pixel cell resolution.
    """

    height: int = 128
    width: int = 205
    class_patches: tuple[PatchRect, PatchRect] = (
        PatchRect(top=14, left=20, height=48, width=56),
        PatchRect(top=66, left=115, height=48, width=56),
    )
    contrast: float = 80.0
    noise_level: float = 8.0
    feather: int = 12
    texture_seed: int = 0
    samples_per_class: int = 200

    def __post_init__(self):
        if self.height != 128:
            raise ValueError("spectrogram images are always 128 rows tall")
        for rect in self.class_patches:
            if (rect.top < 0 or rect.left < 0 or rect.height <= 0 or rect.width <= 0
                    or rect.top + rect.height > self.height
                    or rect.left + rect.width > self.width):
                raise ValueError(f"patch {rect} outside {self.height}x{self.width} bounds")
        if self.class_patches[0].overlaps(self.class_patches[1]):
            raise ValueError("class patches must be disjoint")
        if self.samples_per_class <= 0:
            raise ValueError("samples_per_class must be positive")
        if self.feather < 0:
            raise ValueError("feather must be >= 0")


@dataclass
class SyntheticSet:
    images: list[MelImage]
    labels: np.ndarray
    masks: list[np.ndarray]
    spec: SyntheticSpec

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Training-ready ((N,H,W,3) in [0,1], labels) arrays."""
        x = np.stack([pixels_to_input_array(img.pixels) for img in self.images])
        return x, self.labels.copy()


def _texture(height: int, width: int, rng: Rng) -> np.ndarray:
    """Low-frequency random background: coarse grid, bilinearly upsampled."""
    gh, gw = max(2, height // 16), max(2, width // 16)
    grid = rng.uniform(0.0, 1.0, (gh, gw))
    rows = np.linspace(0, gh - 1, height)
    cols = np.linspace(0, gw - 1, width)
    tmp = np.empty((gh, width))
    for r in range(gh):
        tmp[r] = np.interp(cols, np.arange(gw), grid[r])
    out = np.empty((height, width))
    for c in range(width):
        out[:, c] = np.interp(rows, np.arange(gh), tmp[:, c])
    return out


def _patch_profile(rect: PatchRect, feather: int) -> np.ndarray:
    """Plateau at 1 with a sine ramp over ``feather`` pixels to the border.

    Border pixels stay strictly positive so the rectangle mask is exactly
    the patch support.  feather=0 gives a hard-edged rectangle.
    """
    if feather == 0:
        return np.ones((rect.height, rect.width))
    rr = np.arange(rect.height)
    cc = np.arange(rect.width)
    d_r = np.minimum(rr, rect.height - 1 - rr)
    d_c = np.minimum(cc, rect.width - 1 - cc)
    d = np.minimum(d_r[:, None], d_c[None, :])
    ramp = np.minimum(d + 1, feather) / feather
    return np.sin(0.5 * np.pi * ramp)


def synth_generate(spec: SyntheticSpec, rng: Rng) -> SyntheticSet:
    """Planted-feature images with pixel-exact ground-truth masks.

    Per image: base 70 + 60 * texture, plus N(0, noise_level) pixel noise,
    plus ``contrast`` inside the class's patch rectangle (edges feathered
    inward over ``feather`` pixels); clipped to [0, 255].
    """
    images: list[MelImage] = []
    labels: list[int] = []
    masks: list[np.ndarray] = []
    index = 0
    for class_idx, rect in enumerate(spec.class_patches):
        rows, cols = rect.slices()
        mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
        mask[rows, cols] = 255
        bump = spec.contrast * _patch_profile(rect, spec.feather)
        for _ in range(spec.samples_per_class):
            texture_rng = Rng(spec.texture_seed).derive(index)
            base = 70.0 + 60.0 * _texture(spec.height, spec.width, texture_rng)
            if spec.noise_level > 0:
                base = base + spec.noise_level * rng.derive(index).normal(base.shape)
            base[rows, cols] += bump
            pixels = np.clip(np.rint(base), 0, 255).astype(np.uint8)
            images.append(MelImage(pixels, provenance={
                "synthetic": True, "class": LABELS[class_idx], "index": index}))
            labels.append(class_idx)
            masks.append(mask)
            index += 1
    return SyntheticSet(images=images, labels=np.array(labels, dtype=np.int64),
                        masks=masks, spec=spec)
