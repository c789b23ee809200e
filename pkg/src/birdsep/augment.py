"""Training-time augmentation chain for classifier examples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer, mix_at_snr, peak_normalize
from .labels import LabelSet, LabeledClip


class AugmentConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    window_s: float = 5.0
    gain_range: tuple[float, float] = (0.05, 0.75)
    p_example_mix: float = 0.5
    p_noise: float = 0.75
    noise_snr_range_db: tuple[float, float] = (0.0, 40.0)
    p_noise_only: float = 0.1
    noise_only_independent: bool = False
    p_lowpass: float = 1.0
    lowpass_slope_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        for name in ("gain_range", "noise_snr_range_db", "lowpass_slope_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise AugmentConfigError(f"{name} is not ordered: {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        for name in ("p_example_mix", "p_noise", "p_noise_only", "p_lowpass"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentConfigError(f"{name}={p} is not a probability")
        lo, hi = self.gain_range
        if not 0.0 < lo <= hi <= 1.0:
            raise AugmentConfigError(f"gain_range {self.gain_range} must lie in (0, 1]")

    @property
    def uses_noise(self) -> bool:
        return self.p_noise > 0 or (self.noise_only_independent and self.p_noise_only > 0)

    def check_noise_pool(self, noise_pool) -> None:
        if self.uses_noise and not noise_pool:
            raise AugmentConfigError("noise mixing is enabled but the noise pool is empty")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**d)


def random_crop(audio: AudioBuffer, n: int, rng: np.random.Generator) -> AudioBuffer:
    if len(audio) < n:
        raise ValueError(f"clip of {len(audio)} samples is shorter than the {n}-sample window")
    start = int(rng.integers(0, len(audio) - n + 1))
    return audio.crop(start, n)


def fit_noise(noise: AudioBuffer, n: int, rng: np.random.Generator) -> AudioBuffer:
    """Loop short noise up to ``n`` samples, randomly crop long noise."""
    if len(noise) == 0:
        raise ValueError("empty noise clip")
    if len(noise) < n:
        reps = -(-n // len(noise))
        return noise.with_samples(np.tile(noise.samples, reps)[:n])
    return random_crop(noise, n, rng)


def augment_example(clip: LabeledClip, pool, noise_pool, rng: np.random.Generator,
                    cfg: AugmentConfig | None = None) -> LabeledClip:
    """Time shift -> gain -> example mix -> noise mix / noise-only substitution."""
    cfg = cfg or AugmentConfig()
    cfg.check_noise_pool(noise_pool)
    sr = clip.audio.sample_rate_hz
    n = int(round(cfg.window_s * sr))
    audio = peak_normalize(random_crop(clip.audio, n, rng), float(rng.uniform(*cfg.gain_range)))
    labels = clip.labels

    if pool and rng.random() < cfg.p_example_mix:
        partner = pool[int(rng.integers(len(pool)))]
        other = peak_normalize(random_crop(partner.audio, n, rng), float(rng.uniform(*cfg.gain_range)))
        audio = audio.with_samples(audio.samples + other.samples)
        labels = labels.union(partner.labels)

    def noise_clip():
        return fit_noise(noise_pool[int(rng.integers(len(noise_pool)))], n, rng)

    noise, noise_only = None, False
    if cfg.noise_only_independent and rng.random() < cfg.p_noise_only:
        noise_only = True
    elif rng.random() < cfg.p_noise:
        noise = noise_clip()
        snr = float(rng.uniform(*cfg.noise_snr_range_db))
        if not cfg.noise_only_independent and rng.random() < cfg.p_noise_only:
            noise_only = True
        elif not noise.is_silent and not audio.is_silent:
            audio = mix_at_snr(audio, noise, snr)
    if noise_only:
        noise = noise if noise is not None else noise_clip()
        audio = peak_normalize(noise, float(rng.uniform(*cfg.gain_range)))
        labels = LabelSet()
    return LabeledClip(audio, labels)
