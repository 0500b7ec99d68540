"""Gradient-based explanation engines for the trained CNN.

Three methods live here: activation maximization against a linearized view
of a chosen layer (for filter and class visualizations), SmoothGrad input
saliency, and Grad-CAM heatmaps over the last convolutional feature maps.
All of them only read the model; parameters are never touched.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from specxplain.model import CnnModel
from specxplain.tensor import Rng, Tensor, conv2d, dense, flatten, maxpool2d, no_grad, relu

CONV_LAYERS = ("conv1", "conv2", "conv3")
DENSE_LAYERS = ("dense1", "dense2")
VALID_LAYERS = CONV_LAYERS + DENSE_LAYERS


class LayerView:
    """A derived model truncated at one layer, its nonlinearity replaced by
    identity.

    The view shares the source model's parameter tensors (nothing is copied
    or mutated); its forward runs in inference mode and returns the chosen
    layer's pre-activation.
    """

    def __init__(self, model: CnnModel, layer: str):
        if layer not in VALID_LAYERS:
            raise ValueError(f"unknown layer {layer!r}; expected one of {VALID_LAYERS}")
        self.model = model
        self.layer = layer

    @property
    def output_channels(self) -> int:
        if self.layer in CONV_LAYERS:
            return self.model.conv_params[CONV_LAYERS.index(self.layer)][0].shape[0]
        return self.model.dense_params[DENSE_LAYERS.index(self.layer)][0].shape[0]

    def forward(self, x: Tensor) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        if self.layer in CONV_LAYERS:
            target = CONV_LAYERS.index(self.layer)
            for i in range(target):
                kern, bias = self.model.conv_params[i]
                h = maxpool2d(relu(conv2d(h, kern, bias)))
            kern, bias = self.model.conv_params[target]
            return conv2d(h, kern, bias)
        for kern, bias in self.model.conv_params:
            h = maxpool2d(relu(conv2d(h, kern, bias)))
        h = flatten(h)
        w1, b1 = self.model.dense_params[0]
        if self.layer == "dense1":
            return dense(h, w1, b1)
        w2, b2 = self.model.dense_params[1]
        return dense(relu(dense(h, w1, b1)), w2, b2)


def linear_view(model: CnnModel, layer: str) -> LayerView:
    """View of ``model`` ending at ``layer`` with identity activation."""
    return LayerView(model, layer)


# ---------------------------------------------------------------------------
# activation maximization
# ---------------------------------------------------------------------------

@dataclass
class AMImage:
    """A synthesized input that maximizes one unit, with its ascent record."""

    image: np.ndarray
    objective: float
    steps: int
    trajectory: list[float] = field(default_factory=list)


def _ascend(objective, shape, steps: int, step_size: float, rng: Rng) -> AMImage:
    """Gradient ascent with unit-RMS steps, [0, 1] clamping, and backtracking.

    A step that would lower the objective is retried at half the size (up to
    four times) and finally skipped, so the recorded trajectory never
    decreases.
    """
    x = rng.uniform(0.45, 0.55, shape)
    with no_grad():
        current = objective(Tensor(x)).item()
    trajectory = [current]
    for _ in range(steps):
        xt = Tensor(x, requires_grad=True)
        objective(xt).backward()
        g = xt.grad
        rms = float(np.sqrt(np.mean(g * g)))
        if rms < 1e-12:
            trajectory.append(current)
            continue
        direction = g / rms
        s = step_size
        for _attempt in range(4):
            candidate = np.clip(x + s * direction, 0.0, 1.0)
            with no_grad():
                value = objective(Tensor(candidate)).item()
            if value >= current:
                x, current = candidate, value
                break
            s *= 0.5
        trajectory.append(current)
    return AMImage(image=x, objective=current, steps=steps, trajectory=trajectory)


def maximize_filter(model: CnnModel, layer: str, filter_idx: int,
                    steps: int = 256, step_size: float = 0.05,
                    rng: Rng | None = None) -> AMImage:
    """Synthesize the input that maximizes one convolutional filter.

    The objective is the spatial mean of the filter's pre-activation map in
    the linearized view; the start image is uniform random in [0.45, 0.55].
    """
    if layer not in CONV_LAYERS:
        raise ValueError(f"maximize_filter needs a conv layer, got {layer!r}")
    view = linear_view(model, layer)
    if not 0 <= filter_idx < view.output_channels:
        raise ValueError(f"filter index {filter_idx} out of range "
                         f"[0, {view.output_channels}) for {layer}")
    shape = (*model.input_shape, 3)
    rng = rng if rng is not None else Rng(0)
    return _ascend(lambda xt: view.forward(xt)[..., filter_idx].mean(),
                   shape, steps, step_size, rng)


def maximize_class(model: CnnModel, class_idx: int,
                   steps: int = 256, step_size: float = 0.05,
                   rng: Rng | None = None) -> AMImage:
    """Synthesize the input that maximizes one class's raw output logit."""
    view = linear_view(model, "dense2")
    if not 0 <= class_idx < view.output_channels:
        raise ValueError(f"class index {class_idx} out of range")
    shape = (*model.input_shape, 3)
    rng = rng if rng is not None else Rng(0)
    return _ascend(lambda xt: view.forward(xt)[class_idx],
                   shape, steps, step_size, rng)


# ---------------------------------------------------------------------------
# saliency maps
# ---------------------------------------------------------------------------

@dataclass
class SaliencyMap:
    """Per-pixel relevance for one class: HxW values plus method metadata.

    For SmoothGrad, ``mean_gradient`` keeps the signed HxWx3 averaged input
    gradient before the channel reduction (the reduction does not commute
    with averaging, so tests and downstream analysis use this field).
    """

    values: np.ndarray
    method: str
    class_index: int
    params: dict = field(default_factory=dict)
    mean_gradient: np.ndarray | None = None


def _class_score(result, class_idx: int, score: str) -> Tensor:
    if score == "logit":
        return result.logits[class_idx]
    if score == "prob":
        return result.probs[class_idx]
    raise ValueError(f"score must be 'logit' or 'prob', got {score!r}")


def smoothgrad(model, image, class_idx: int, n: int = 50, noise_level: float = 0.5,
               rng: Rng | None = None, score: str = "logit",
               channel_reduce: str = "abs_max") -> SaliencyMap:
    """Average input gradients of the class score over noisy copies.

    The noise is i.i.d. N(0, sigma^2) per input element with
    sigma = noise_level * (max(x) - min(x)); defaults follow the 50-sample,
    50%-spread setting.  With n=1 and noise_level=0 this is exactly the
    vanilla gradient saliency (same code path, no noise added).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if noise_level < 0:
        raise ValueError("noise level must be >= 0")
    x0 = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    sigma = noise_level * float(x0.max() - x0.min())
    if sigma > 0 and rng is None:
        raise ValueError("noisy sampling needs an rng")

    total = np.zeros_like(x0)
    first = None
    all_same = True
    for i in range(n):
        noisy = x0 if sigma == 0.0 else x0 + rng.derive(i).normal(x0.shape) * sigma
        xt = Tensor(noisy, requires_grad=True)
        result = model.forward(xt)
        store = _class_score(result, class_idx, score).backward(write_grad=False)
        g = store.get(xt)
        total += g
        if first is None:
            first = g
        elif all_same:
            all_same = np.array_equal(first, g)
    # averaging identical gradients (e.g. a linear model) must be exact,
    # which float accumulation alone does not guarantee
    mean_grad = first.copy() if all_same else total / n

    if channel_reduce == "abs_max":
        values = np.abs(mean_grad).max(axis=2)
    elif channel_reduce == "mean":
        values = mean_grad.mean(axis=2)
    else:
        raise ValueError(f"unknown channel reduction {channel_reduce!r}")
    return SaliencyMap(values=values, method="smoothgrad", class_index=class_idx,
                       params={"n": n, "noise_level": noise_level, "score": score,
                               "channel_reduce": channel_reduce},
                       mean_gradient=mean_grad)


def vanilla_gradient(model, image, class_idx: int, score: str = "logit",
                     channel_reduce: str = "abs_max") -> SaliencyMap:
    """Single-sample, zero-noise input-gradient saliency."""
    out = smoothgrad(model, image, class_idx, n=1, noise_level=0.0,
                     score=score, channel_reduce=channel_reduce)
    out.method = "gradient"
    return out


def gradcam(model, image, class_idx: int, tap: str = "post_pool",
            score: str = "logit") -> SaliencyMap:
    """Class-discriminative heatmap from the last conv block's feature maps.

    Backpropagates only the chosen class score to the retained maps A^k,
    weights each map by the spatial mean of its gradient, ReLUs the weighted
    sum, bilinearly upsamples to the input size, and min-max normalizes to
    [0, 1] (an identically zero map stays zero).
    """
    if tap not in ("post_pool", "pre_pool"):
        raise ValueError(f"tap must be 'post_pool' or 'pre_pool', got {tap!r}")
    xt = image if isinstance(image, Tensor) else Tensor(image)
    if xt.ndim != 3:
        raise ValueError("gradcam explains a single HxWx3 image")
    result = model.forward(xt)
    if not 0 <= class_idx < result.logits.size:
        raise ValueError(f"class index {class_idx} out of range")
    maps = result.last_conv_pooled if tap == "post_pool" else result.last_conv_prepool
    store = _class_score(result, class_idx, score).backward(write_grad=False)
    grad = store.get(maps)
    if grad is None:
        grad = np.zeros_like(maps.data)

    alpha = grad.mean(axis=(0, 1))
    cam = np.maximum((maps.data * alpha).sum(axis=2), 0.0)
    cam = bilinear_resize(cam, xt.shape[0], xt.shape[1])
    hi, lo = cam.max(), cam.min()
    if hi > lo:
        cam = (cam - lo) / (hi - lo)
    return SaliencyMap(values=cam, method="gradcam", class_index=class_idx,
                       params={"tap": tap, "score": score})


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of a 2-D array (endpoints align)."""
    h, w = arr.shape
    cols = np.linspace(0.0, w - 1.0, out_w) if w > 1 else np.zeros(out_w)
    rows = np.linspace(0.0, h - 1.0, out_h) if h > 1 else np.zeros(out_h)
    tmp = np.empty((h, out_w))
    xs = np.arange(w, dtype=np.float64)
    for r in range(h):
        tmp[r] = np.interp(cols, xs, arr[r])
    out = np.empty((out_h, out_w))
    ys = np.arange(h, dtype=np.float64)
    for c in range(out_w):
        out[:, c] = np.interp(rows, ys, tmp[:, c])
    return out


# ---------------------------------------------------------------------------
# raw map dumps
# ---------------------------------------------------------------------------

def save_map(values: np.ndarray, path) -> None:
    """Binary dump: u32 rows, u32 cols (little-endian), then float64 row-major."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("map dumps are 2-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *values.shape))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated map dump")
    rows, cols = struct.unpack("<II", blob[:8])
    if len(blob) != 8 + rows * cols * 8:
        raise ValueError(f"{path}: map dump size mismatch")
    return np.frombuffer(blob[8:], dtype="<f8").reshape(rows, cols).copy()
