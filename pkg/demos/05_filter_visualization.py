"""Activation maximization: what the filters and the class logits want.

Synthesizes inputs that maximize the last filters of each conv layer and
each class logit of the demo checkpoint.  Run demo 03 first.
"""

from pathlib import Path

import numpy as np

from specxplain.model import LABELS, load_checkpoint
from specxplain.render import write_png
from specxplain.tensor import Rng
from specxplain.xai import maximize_class, maximize_filter

HERE = Path(__file__).parent
OUT = HERE / "out" / "05"
OUT.mkdir(parents=True, exist_ok=True)
checkpoint = HERE / "out" / "03" / "model.cnnx"
if not checkpoint.exists():
    raise SystemExit("run 03_synthetic_training.py first")

model = load_checkpoint(checkpoint)

for layer, n_filters in (("conv1", 16), ("conv2", 32), ("conv3", 64)):
    idx = n_filters - 1  # the last filter of each layer
    am = maximize_filter(model, layer, idx, steps=48, step_size=0.1, rng=Rng(idx))
    write_png(np.rint(am.image * 255).astype(np.uint8), OUT / f"{layer}_filter{idx}.png")
    print(f"{layer} filter {idx}: objective {am.trajectory[0]:+.4f} -> {am.objective:+.4f}")

for class_idx, label in enumerate(LABELS):
    am = maximize_class(model, class_idx, steps=48, step_size=0.1, rng=Rng(class_idx))
    write_png(np.rint(am.image * 255).astype(np.uint8), OUT / f"class_{label}.png")
    print(f"class {label}: logit {am.trajectory[0]:+.4f} -> {am.objective:+.4f}")

print(f"images in {OUT}")
