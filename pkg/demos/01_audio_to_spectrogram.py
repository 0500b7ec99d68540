"""Walk one synthetic cough-like recording through the image pipeline.

Builds a short burst-plus-tone clip, then shows every preprocessing stage:
power spectrogram, Mel pooling, dB scaling, 8-bit inversion + flip, and the
final width-820 network input.  Outputs land in demos/out/01/.
"""

from pathlib import Path

import numpy as np

from specxplain.audio import (
    AudioClip,
    load_wav,
    mel_spectrogram,
    power_spectrogram,
    resize_width,
    save_wav,
    to_input_tensor,
    to_mel_image,
)
from specxplain.render import write_png

OUT = Path(__file__).parent / "out" / "01"
OUT.mkdir(parents=True, exist_ok=True)
SR = 44_100

# a crude dry-cough stand-in: two noisy bursts over a weak tonal bed
rng = np.random.default_rng(7)
t = np.arange(int(1.5 * SR)) / SR
signal = 0.05 * np.sin(2 * np.pi * 320 * t)
for start, dur in ((0.3, 0.12), (0.8, 0.2)):
    lo, hi = int(start * SR), int((start + dur) * SR)
    envelope = np.hanning(hi - lo)
    signal[lo:hi] += 0.6 * envelope * rng.standard_normal(hi - lo)
clip = AudioClip(np.clip(signal, -1, 1), SR)

save_wav(clip, OUT / "cough.wav")
clip = load_wav(OUT / "cough.wav")
print(f"clip: {len(clip)} samples at {clip.sample_rate} Hz "
      f"({clip.duration:.2f} s)")

power = power_spectrogram(clip)
print(f"power spectrogram: {power.shape[0]} freq bins x {power.shape[1]} frames")

mel = mel_spectrogram(clip)
print(f"mel spectrogram: {mel.shape[0]} bands x {mel.shape[1]} frames, "
      f"range [{mel.min():.1f}, {mel.max():.1f}] dB")

image = to_mel_image(mel, provenance={"source": "cough.wav"})
write_png(image.pixels, OUT / "mel_image.png")
print(f"8-bit image: {image.pixels.shape}, low frequencies at the bottom row, "
      "high energy rendered dark")

resized = resize_width(image, 820)
write_png(resized.pixels, OUT / "mel_image_820.png")
tensor = to_input_tensor(resized, expected_width=820)
print(f"network input: {tensor.shape}, values in [{tensor.data.min():.2f}, "
      f"{tensor.data.max():.2f}]")
print(f"artifacts in {OUT}")
