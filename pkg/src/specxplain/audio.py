"""Cough audio to normalized Mel-spectrogram images, plus augmentation.

The pipeline is: WAV -> mono float samples -> short-time Fourier power
spectrogram (1024-sample Hann windows, hop 512) -> 128-band triangular Mel
filterbank -> dB scaling -> 8-bit image that is intensity-inverted and
vertically flipped so low frequencies sit at the bottom row.

Augmentation combines pitch-preserving time stretching (phase vocoder),
additive Gaussian noise, and circular time shifting.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from specxplain.tensor import Rng, Tensor

CANONICAL_SAMPLE_RATE = 44_100
N_FFT = 1024
HOP = 512
N_MELS = 128
DB_FLOOR = 80.0
_AMIN = 1e-10


@dataclass
class AudioClip:
    """Mono sample buffer in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-D sample buffer")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_wav(path) -> AudioClip:
    """Decode a PCM WAV file to a mono clip in [-1, 1].

    8-bit (unsigned) and 16-bit (signed) PCM are supported; multi-channel
    audio is averaged to mono; the sample rate comes from the header.
    """
    path = Path(path)
    with wave.open(str(path), "rb") as wf:
        if wf.getcomptype() != "NONE":
            raise ValueError(f"{path}: unsupported WAV encoding {wf.getcomptype()!r}")
        width = wf.getsampwidth()
        n_channels = wf.getnchannels()
        n_frames = wf.getnframes()
        if n_frames == 0:
            raise ValueError(f"{path}: zero-length audio")
        raw = wf.readframes(n_frames)
        rate = wf.getframerate()
    if width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    else:
        raise ValueError(f"{path}: unsupported sample width {width * 8} bit")
    data = data.reshape(-1, n_channels).mean(axis=1)
    return AudioClip(data, rate, provenance={"source": str(path)})


def save_wav(clip: AudioClip, path) -> None:
    """Write a clip as 16-bit mono PCM."""
    pcm = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# STFT machinery (shared by the spectrogram path and the phase vocoder)
# ---------------------------------------------------------------------------

def _stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centered (reflect-padded) STFT; returns complex (n_fft//2+1, frames)."""
    window = get_window("hann", n_fft, fftbins=True)
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (xp.size - n_fft) // hop
    starts = np.arange(n_frames) * hop
    frames = xp[starts[:, None] + np.arange(n_fft)]
    return np.fft.rfft(frames * window, axis=1).T


def _istft(spec: np.ndarray, n_fft: int, hop: int, length: int) -> np.ndarray:
    """Overlap-add inverse of :func:`_stft`, trimmed/padded to ``length``."""
    window = get_window("hann", n_fft, fftbins=True)
    n_frames = spec.shape[1]
    out_len = n_fft + hop * (n_frames - 1)
    y = np.zeros(out_len)
    norm = np.zeros(out_len)
    frames = np.fft.irfft(spec, n=n_fft, axis=0) * window[:, None]
    wsq = window ** 2
    for t in range(n_frames):
        y[t * hop : t * hop + n_fft] += frames[:, t]
        norm[t * hop : t * hop + n_fft] += wsq
    y /= np.maximum(norm, 1e-12)
    y = y[n_fft // 2 :]
    if y.size < length:
        y = np.pad(y, (0, length - y.size))
    return y[:length]


def time_stretch(clip: AudioClip, factor: float) -> AudioClip:
    """Scale duration by ``factor`` in [0.3, 1.9], preserving pitch.

    Phase-vocoder stretch: STFT magnitudes are linearly interpolated along
    time while phases advance by the accumulated per-bin increment, so a
    pure tone stays at its frequency.  Output length is round(len * factor).
    """
    if not 0.3 <= factor <= 1.9:
        raise ValueError(f"stretch factor must lie in [0.3, 1.9], got {factor}")
    n_fft, hop = N_FFT, N_FFT // 4
    spec = _stft(clip.samples, n_fft, hop)
    n_bins, n_frames = spec.shape
    rate = 1.0 / factor
    steps = np.arange(0, n_frames, rate)
    spec = np.concatenate([spec, np.zeros((n_bins, 2), dtype=complex)], axis=1)

    omega = np.linspace(0, np.pi * hop, n_bins)  # expected phase advance per hop
    phase = np.angle(spec[:, 0])
    out = np.empty((n_bins, steps.size), dtype=complex)
    for i, step in enumerate(steps):
        t0 = int(step)
        alpha = step - t0
        c0, c1 = spec[:, t0], spec[:, t0 + 1]
        mag = (1.0 - alpha) * np.abs(c0) + alpha * np.abs(c1)
        out[:, i] = mag * np.exp(1j * phase)
        dphi = np.angle(c1) - np.angle(c0) - omega
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        phase += omega + dphi

    target = int(round(clip.samples.size * factor))
    y = np.clip(_istft(out, n_fft, hop, target), -1.0, 1.0)
    prov = dict(clip.provenance)
    prov["stretch"] = factor
    return AudioClip(y, clip.sample_rate, provenance=prov)


def add_noise(clip: AudioClip, amplitude: float, rng: Rng) -> AudioClip:
    """Add ``amplitude`` times unit-variance Gaussian noise, clipped to [-1, 1]."""
    if amplitude < 0:
        raise ValueError(f"noise amplitude must be >= 0, got {amplitude}")
    noisy = np.clip(clip.samples + amplitude * rng.normal(clip.samples.size), -1.0, 1.0)
    prov = dict(clip.provenance)
    prov["noise_amp"] = amplitude
    return AudioClip(noisy, clip.sample_rate, provenance=prov)


def time_shift(clip: AudioClip, offset: int) -> AudioClip:
    """Circularly rotate the sample buffer by ``offset`` samples.

    At most one full rotation is allowed; shifting by the exact length is
    the identity.
    """
    if abs(offset) > clip.samples.size:
        raise ValueError(f"|offset| {abs(offset)} exceeds clip length {clip.samples.size}")
    prov = dict(clip.provenance)
    prov["shift"] = int(offset)
    return AudioClip(np.roll(clip.samples, offset), clip.sample_rate, provenance=prov)


def canonical_shift_offset(sample_rate: int = CANONICAL_SAMPLE_RATE, fraction: float = 0.15) -> int:
    """The default shift: 15% of the sample rate (6,615 samples at 44.1 kHz)."""
    return int(round(fraction * sample_rate))


# ---------------------------------------------------------------------------
# spectrograms
# ---------------------------------------------------------------------------

def power_spectrogram(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Squared-magnitude STFT: (n_fft//2+1) frequency bins x (1 + N//hop) frames."""
    if clip.samples.size < n_fft:
        raise ValueError(f"clip of {clip.samples.size} samples is shorter than one {n_fft}-sample window")
    spec = _stft(clip.samples, n_fft, hop)
    return np.abs(spec) ** 2


def hz_to_mel(f):
    """Perceptual Mel value of frequency ``f`` in Hz: 2595 log10(1 + f/700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    """Inverse of :func:`hz_to_mel`."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("Mel value must be non-negative")
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = CANONICAL_SAMPLE_RATE) -> np.ndarray:
    """Triangular filters with centers equally spaced on the Mel axis.

    Returns (n_mels, n_fft//2+1) nonnegative weights; filter i rises from
    Mel breakpoint i to i+1 and falls back to zero at i+2.
    """
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, fft_freqs.size))
    for i in range(n_mels):
        lower, center, upper = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rise = (fft_freqs - lower) / (center - lower)
        fall = (upper - fft_freqs) / (upper - center)
        fb[i] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def power_to_db(power: np.ndarray, floor_db: float = DB_FLOOR) -> np.ndarray:
    """10 log10 relative to the maximum, floored at -floor_db."""
    ref = max(float(power.max()), _AMIN)
    db = 10.0 * np.log10(np.maximum(power, _AMIN)) - 10.0 * np.log10(ref)
    return np.maximum(db, -floor_db)


def mel_spectrogram(clip: AudioClip, n_mels: int = N_MELS, n_fft: int = N_FFT,
                    hop: int = HOP, floor_db: float = DB_FLOOR) -> np.ndarray:
    """dB-scaled Mel spectrogram, shape (n_mels, frames). Row 0 = lowest band."""
    fb = mel_filterbank(n_mels, n_fft, clip.sample_rate)
    return power_to_db(fb @ power_spectrogram(clip, n_fft, hop), floor_db)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

@dataclass
class MelImage:
    """128-row 8-bit spectrogram image, stored post-inversion and post-flip.

    Row 127 holds the lowest Mel band; dark pixels mark high energy.
    """

    pixels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != N_MELS:
            raise ValueError(f"MelImage must be {N_MELS} x W, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            if self.pixels.min() < 0 or self.pixels.max() > 255:
                raise ValueError("pixel values must lie in [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def to_mel_image(spec: np.ndarray, provenance: dict | None = None) -> MelImage:
    """Min-max scale to [0, 255], invert intensity, and flip vertically.

    A constant spectrogram (min == max) maps to the all-zero image.
    """
    spec = np.asarray(spec, dtype=np.float64)
    if not np.all(np.isfinite(spec)):
        raise ValueError("spectrogram contains non-finite values")
    lo, hi = spec.min(), spec.max()
    if hi == lo:
        pixels = np.zeros(spec.shape, dtype=np.uint8)
    else:
        scaled = np.rint((spec - lo) / (hi - lo) * 255.0)
        pixels = (255 - scaled).astype(np.uint8)
    return MelImage(pixels[::-1].copy(), provenance=dict(provenance or {}))


def resize_width(img: MelImage, target_width: int = 820) -> MelImage:
    """Bilinear interpolation along the time axis only; height stays 128."""
    if target_width < 1:
        raise ValueError("target width must be positive")
    w = img.width
    if w == target_width:
        return MelImage(img.pixels.copy(), provenance=dict(img.provenance))
    old_x = np.arange(w, dtype=np.float64)
    new_x = np.linspace(0.0, w - 1.0, target_width) if w > 1 else np.zeros(target_width)
    out = np.empty((img.pixels.shape[0], target_width))
    src = img.pixels.astype(np.float64)
    for r in range(src.shape[0]):
        out[r] = np.interp(new_x, old_x, src[r])
    return MelImage(np.rint(out).astype(np.uint8), provenance=dict(img.provenance))


def to_input_tensor(img: MelImage, expected_width: int | None = None) -> Tensor:
    """Scale pixels to [0, 1] and replicate into three identical channels."""
    if expected_width is not None and img.width != expected_width:
        raise ValueError(f"image width {img.width} != expected {expected_width}")
    gray = img.pixels.astype(np.float64) / 255.0
    return Tensor(np.repeat(gray[:, :, None], 3, axis=2))


def pixels_to_input_array(pixels: np.ndarray) -> np.ndarray:
    """Raw array form of :func:`to_input_tensor` for batched callers."""
    gray = np.asarray(pixels, dtype=np.float64) / 255.0
    return np.repeat(gray[..., None], 3, axis=-1)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def default_stretch_factors() -> tuple[float, ...]:
    """0.3 to 1.9 in steps of 0.1 (17 factors)."""
    return tuple(round(0.3 + 0.1 * i, 1) for i in range(17))


@dataclass(frozen=True)
class AugmentationPlan:
    """Which variants to emit per clip.

    Each stretch factor is combined with {plain, +noise, +shift, +noise+shift},
    so the default plan yields 17 x 4 = 68 variants per input clip and a
    40-clip set grows to 2,760 clips including the originals.
    """

    stretch_factors: tuple[float, ...] = field(default_factory=default_stretch_factors)
    noise_amplitude: float = 0.005
    shift_fraction: float = 0.15

    @property
    def variants_per_clip(self) -> int:
        return 4 * len(self.stretch_factors)

    @classmethod
    def none(cls) -> "AugmentationPlan":
        return cls(stretch_factors=())


def augment_clip(clip: AudioClip, plan: AugmentationPlan, rng: Rng) -> list[AudioClip]:
    """All plan variants of one clip (originals not included).

    The shift offset is ``round(shift_fraction * sample_rate)`` and must stay
    below the stretched clip length, so very short clips reject shifting.
    """
    offset = canonical_shift_offset(clip.sample_rate, plan.shift_fraction)
    out: list[AudioClip] = []
    for f in plan.stretch_factors:
        stretched = time_stretch(clip, f)
        out.append(stretched)
        out.append(add_noise(stretched, plan.noise_amplitude, rng))
        out.append(time_shift(stretched, offset))
        out.append(time_shift(add_noise(stretched, plan.noise_amplitude, rng), offset))
    return out


def augment_set(clips: list[AudioClip], plan: AugmentationPlan, rng: Rng) -> list[AudioClip]:
    """Originals plus plan variants; per-clip rng streams derive from the index."""
    if not clips:
        raise ValueError("augment_set needs at least one clip")
    out: list[AudioClip] = []
    for i, clip in enumerate(clips):
        out.append(clip)
        out.extend(augment_clip(clip, plan, rng.derive(i)))
    return out
