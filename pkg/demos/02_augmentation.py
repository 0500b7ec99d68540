"""Show the three augmentation techniques and the 40 -> 2,760 arithmetic.

Stretching runs a phase vocoder (duration changes, pitch does not), noise
adds a scaled unit-variance Gaussian, and shifting rotates the buffer by
15% of the sample rate.  The default plan pairs 17 stretch factors with
{plain, +noise, +shift, +noise+shift}: 68 variants per clip.
"""

from pathlib import Path

import numpy as np

from specxplain.audio import (
    AudioClip,
    AugmentationPlan,
    add_noise,
    augment_set,
    canonical_shift_offset,
    time_shift,
    time_stretch,
)
from specxplain.tensor import Rng

OUT = Path(__file__).parent / "out" / "02"
OUT.mkdir(parents=True, exist_ok=True)
SR = 44_100

t = np.arange(SR) / SR
clip = AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), SR)

for factor in (0.5, 1.0, 1.9):
    stretched = time_stretch(clip, factor)
    spectrum = np.abs(np.fft.rfft(stretched.samples))
    peak = np.argmax(spectrum) * SR / len(stretched)
    print(f"stretch x{factor}: {len(clip)} -> {len(stretched)} samples, "
          f"dominant frequency {peak:.1f} Hz")

silence = AudioClip(np.zeros(SR), SR)
noisy = add_noise(silence, 0.005, Rng(0))
print(f"noise amp 0.005 on silence: sample std {noisy.samples.std():.4f}")

offset = canonical_shift_offset(SR)
shifted = time_shift(clip, offset)
print(f"shift: rotated by {offset} samples (15% of the sample rate)")

plan = AugmentationPlan()
print(f"default plan: {len(plan.stretch_factors)} stretch factors x 4 combos "
      f"= {plan.variants_per_clip} variants per clip")

clips = [AudioClip(0.4 * np.sin(2 * np.pi * f * t), SR) for f in (300, 500)]
augmented = augment_set(clips, plan, Rng(1))
print(f"{len(clips)} clips -> {len(augmented)} clips "
      f"(40 would give {40 * (1 + plan.variants_per_clip)})")
