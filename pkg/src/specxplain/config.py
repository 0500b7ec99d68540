"""Run configuration: one JSON-serializable object covering every knob.

Resolution order (lowest to highest precedence): built-in defaults, config
file, command-line flags, and the ``SPECXPLAIN_SEED`` environment variable
for the master seed.  Unknown keys in a config file are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from specxplain.audio import AugmentationPlan
from specxplain.model import TrainConfig

SEED_ENV_VAR = "SPECXPLAIN_SEED"


@dataclass
class AudioConfig:
    sample_rate: int = 44_100
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 128
    target_width: int = 820


@dataclass
class AugmentConfig:
    stretch_min: float = 0.3
    stretch_max: float = 1.9
    stretch_step: float = 0.1
    noise_amplitude: float = 0.005
    shift_fraction: float = 0.15
    enabled: bool = True

    def plan(self) -> AugmentationPlan:
        if not self.enabled:
            return AugmentationPlan.none()
        n = int(round((self.stretch_max - self.stretch_min) / self.stretch_step)) + 1
        factors = tuple(round(self.stretch_min + i * self.stretch_step, 6) for i in range(n))
        return AugmentationPlan(stretch_factors=factors,
                                noise_amplitude=self.noise_amplitude,
                                shift_fraction=self.shift_fraction)


@dataclass
class XaiConfig:
    smoothgrad_samples: int = 50
    smoothgrad_noise: float = 0.5
    score: str = "logit"
    gradcam_tap: str = "post_pool"
    lime_features: int = 5
    lime_samples: int = 150
    quickshift_kernel_size: float = 4.0
    quickshift_max_dist: float = 200.0
    quickshift_ratio: float = 0.2
    am_steps: int = 256
    am_step_size: float = 0.05


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    xai: XaiConfig = field(default_factory=XaiConfig)
    test_fraction: float = 0.2
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {"train": TrainConfig, "audio": AudioConfig,
             "augment": AugmentConfig, "xai": XaiConfig}


def _build_section(cls, values: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    return cls(**values)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from an optional JSON file plus flat overrides.

    Overrides use dotted names (``train.epochs``, ``xai.lime_samples``) or
    top-level names (``seed``, ``jobs``, ``test_fraction``).
    """
    file_values: dict = {}
    if path is not None:
        with open(path) as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise ValueError(f"{path}: config must be a JSON object")

    merged: dict = {section: dict() for section in _SECTIONS}
    top: dict = {}
    for key, value in file_values.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be an object")
            merged[key].update(value)
        elif key in ("seed", "jobs", "test_fraction"):
            top[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"unknown config section {section!r}")
            merged[section][name] = value
        elif key in ("seed", "jobs", "test_fraction"):
            top[key] = value
        else:
            raise ValueError(f"unknown config override {key!r}")

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        top["seed"] = int(env_seed)

    sections = {name: _build_section(cls, merged[name], name)
                for name, cls in _SECTIONS.items()}
    config = RunConfig(**sections, **top)
    # the master seed drives training too unless the file pinned one explicitly
    if "seed" not in file_values.get("train", {}) and "train.seed" not in (overrides or {}):
        config.train.seed = config.seed
    return config
