"""Train the CNN on a small planted-feature set and keep the checkpoint.

Each class carries a bright rectangle at a class-specific position over a
shared texture distribution, so the network has one honest feature to find.
The later demos reuse demos/out/03/model.cnnx.
"""

import time
from pathlib import Path

import numpy as np

from specxplain.data import SyntheticSpec, synth_generate
from specxplain.model import TrainConfig, build_cnn, evaluate, fit, history_to_csv, save_checkpoint
from specxplain.render import plot_history, write_png
from specxplain.tensor import Rng

OUT = Path(__file__).parent / "out" / "03"
OUT.mkdir(parents=True, exist_ok=True)

spec = SyntheticSpec(samples_per_class=60)
dataset = synth_generate(spec, Rng(42))
x, y = dataset.to_arrays()
train_idx = np.r_[0:48, 60:108]
test_idx = np.r_[48:60, 108:120]
write_png(dataset.images[0].pixels, OUT / "sample_class0.png")
write_png(dataset.images[60].pixels, OUT / "sample_class1.png")
print(f"dataset: {len(train_idx)} train / {len(test_idx)} test images of "
      f"{spec.height}x{spec.width}")

config = TrainConfig(epochs=12, batch_size=16, learning_rate=0.003, seed=42)
model = build_cnn(config, Rng(42), input_height=spec.height, input_width=spec.width)
print(f"model: {model.parameter_count():,} trainable parameters at this geometry")

start = time.time()
history = fit(model, (x[train_idx], y[train_idx]), (x[test_idx], y[test_idx]), config)
print(f"trained {len(history)} epochs in {time.time() - start:.0f} s")
for row in history:
    print(f"  epoch {row['epoch']}: train acc {row['train_acc']:.3f}, "
          f"val acc {row['val_acc']:.3f}")

result = evaluate(model, (x[test_idx], y[test_idx]))
print(f"test accuracy {result['accuracy']:.3f}")
print(f"confusion matrix:\n{result['confusion']}")

save_checkpoint(model, OUT / "model.cnnx")
history_to_csv(history, OUT / "history.csv")
plot_history(history, OUT / "loss.png", OUT / "accuracy.png")
print(f"checkpoint and curves in {OUT}")
