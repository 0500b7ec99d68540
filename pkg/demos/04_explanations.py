"""Run SmoothGrad, Grad-CAM, and LIME against the demo checkpoint.

Because the data is synthetic, the right answer is known: explanations for
the true class should point at the planted rectangle.  Run demo 03 first.
"""

from pathlib import Path

import numpy as np

from specxplain.data import SyntheticSpec, synth_generate
from specxplain.lime import cnn_predict_fn, lime_explain
from specxplain.model import load_checkpoint
from specxplain.render import render_saliency, write_png
from specxplain.tensor import Rng
from specxplain.xai import gradcam, smoothgrad
from specxplain.audio import pixels_to_input_array

HERE = Path(__file__).parent
OUT = HERE / "out" / "04"
OUT.mkdir(parents=True, exist_ok=True)
checkpoint = HERE / "out" / "03" / "model.cnnx"
if not checkpoint.exists():
    raise SystemExit("run 03_synthetic_training.py first")

model = load_checkpoint(checkpoint)
dataset = synth_generate(SyntheticSpec(samples_per_class=60), Rng(42))
image = dataset.images[115]  # held-out class-1 image
mask = dataset.masks[115]
true_class = int(dataset.labels[115])
x = pixels_to_input_array(image.pixels)
write_png(image.pixels, OUT / "input.png")
print(f"explaining a class-{true_class} image; patch occupies "
      f"{(mask == 255).mean():.1%} of the pixels")

sg = smoothgrad(model, x, true_class, n=25, noise_level=0.5, rng=Rng(0))
render_saliency(sg, image, OUT / "smoothgrad.png")
print(f"smoothgrad: {sg.params['n']} noisy samples, "
      f"map max {sg.values.max():.2e}")

# raw-logit score first (the default); on a barely-confident model all the
# pooled gradients can come out negative and the ReLU empties the map, so
# also show the probability score, which backpropagates the class contrast
for score in ("logit", "prob"):
    cam = gradcam(model, x, true_class, score=score)
    render_saliency(cam, image, OUT / f"gradcam_{score}.png")
    inside = cam.values[mask == 255].mean()
    outside = cam.values[mask == 0].mean()
    print(f"gradcam[{score}]: mean relevance inside patch {inside:.3f} "
          f"vs outside {outside:.3f}")

lime = lime_explain(cnn_predict_fn(model), image, true_class,
                    n_features=3, n_samples=150, rng=Rng(1))
write_png(lime.masked_pixels, OUT / "lime.png")
sel = np.isin(lime.segments.labels, lime.selected)
iou = (sel & (mask == 255)).sum() / (sel | (mask == 255)).sum()
print(f"lime: {lime.segments.n_segments} segments, kept {lime.selected}, "
      f"IoU with patch {iou:.2f}, surrogate R^2 {lime.r_squared:.3f}")
print(f"overlays in {OUT}")
