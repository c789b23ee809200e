"""Mel spectrogram, PCEN and the outlier-robust channel normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from .audio import AudioBuffer


@dataclass
class PcenParams:
    smooth: float = 0.025
    alpha: float = 0.98
    delta: float = 2.0
    root: float = 0.5
    eps: float = 1e-6


@dataclass
class FrontendConfig:
    frame_rate_hz: float = 100.0
    frame_length_s: float = 0.08
    fmin_hz: float = 60.0
    fmax_hz: float = 10000.0
    n_channels: int = 160
    n_fft: int | None = None
    pcen: PcenParams = field(default_factory=PcenParams)
    norm_eps: float = 1e-6


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Time x channel feature matrix plus the framing metadata."""

    values: np.ndarray
    frame_rate_hz: float
    frame_length_s: float
    freq_range_hz: tuple[float, float]
    n_channels: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.n_channels:
            raise ValueError(f"values shape {values.shape} does not match n_channels={self.n_channels}")
        lo, hi = self.freq_range_hz
        if not lo < hi:
            raise ValueError(f"invalid frequency range {self.freq_range_hz}")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "MelSpectrogram":
        return replace(self, values=values)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_channels: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_channels + 2))
    return edges[1:-1]


def mel_filterbank(n_channels: int, n_fft: int, sample_rate_hz: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    """Triangular filters (peak 1) on the HTK mel scale, shape (n_fft//2+1, n_channels)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_channels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling)).T


def frame_starts(n_samples: int, frame_len: int, hop: float) -> np.ndarray:
    """Start sample of every full frame; hops may be fractional."""
    if n_samples < frame_len:
        return np.zeros(0, dtype=np.int64)
    n_frames = int(math.floor((n_samples - frame_len) / hop + 1e-9)) + 1
    return np.floor(np.arange(n_frames) * hop + 1e-9).astype(np.int64)


def mel_spectrogram(audio: AudioBuffer, cfg: FrontendConfig | None = None) -> MelSpectrogram:
    cfg = cfg or FrontendConfig()
    sr = audio.sample_rate_hz
    if cfg.fmax_hz > sr / 2 or cfg.fmin_hz < 0 or cfg.fmin_hz >= cfg.fmax_hz:
        raise ValueError(f"frequency range ({cfg.fmin_hz}, {cfg.fmax_hz}) Hz invalid at {sr} Hz sample rate")
    frame_len = int(round(cfg.frame_length_s * sr))
    hop = sr / cfg.frame_rate_hz
    starts = frame_starts(len(audio), frame_len, hop)
    if starts.size == 0:
        raise ValueError(f"audio of {len(audio)} samples is shorter than one {frame_len}-sample frame")
    n_fft = cfg.n_fft or 1 << (frame_len - 1).bit_length()
    window = sps.get_window("hann", frame_len)
    frames = audio.samples[starts[:, None] + np.arange(frame_len)[None, :]] * window
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_channels, n_fft, sr, cfg.fmin_hz, cfg.fmax_hz)
    return MelSpectrogram(
        values=power @ fb,
        frame_rate_hz=cfg.frame_rate_hz,
        frame_length_s=frame_len / sr,
        freq_range_hz=(cfg.fmin_hz, cfg.fmax_hz),
        n_channels=cfg.n_channels,
    )


def pcen(mel: MelSpectrogram, params: PcenParams | None = None) -> MelSpectrogram:
    """Per-channel energy normalization.

    The smoother starts at the first frame's energy, so a constant input
    is at steady state from frame zero.
    """
    p = params or PcenParams()
    E = mel.values
    if not np.all(np.isfinite(E)):
        raise ValueError("pcen input contains non-finite values")
    if E.shape[0] == 0:
        return mel
    s = p.smooth
    # y[n] = s*x[n] + (1-s)*y[n-1] with y[-1] = E[0]
    zi = ((1.0 - s) * E[0])[None, :]
    M, _ = sps.lfilter([s], [1.0, -(1.0 - s)], E, axis=0, zi=zi)
    out = (E / (p.eps + M) ** p.alpha + p.delta) ** p.root - p.delta ** p.root
    return mel.with_values(out)


def channel_normalize(feat: MelSpectrogram, eps: float = 1e-6) -> MelSpectrogram:
    """Standardize each channel with statistics that ignore upper outliers.

    Values above mean + one standard deviation are left out when the
    final mean and deviation are computed; every frame is still scaled.
    """
    x = feat.values
    if x.shape[0] < 2:
        raise ValueError("channel_normalize needs at least two frames")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    keep = x <= (mu + sd)[None, :]
    n = keep.sum(axis=0)
    mu2 = np.where(keep, x, 0.0).sum(axis=0) / n
    var2 = np.where(keep, (x - mu2[None, :]) ** 2, 0.0).sum(axis=0) / n
    sd2 = np.sqrt(var2)
    return feat.with_values((x - mu2[None, :]) / np.maximum(sd2, eps)[None, :])


def lowpass_scale(feat: MelSpectrogram, cutoff_channel: int, slope_db_per_channel: float) -> MelSpectrogram:
    """Attenuate channels at and above ``cutoff_channel`` by a dB-per-channel ramp."""
    if not 0 <= cutoff_channel < feat.n_channels:
        raise ValueError(f"cutoff channel {cutoff_channel} outside [0, {feat.n_channels})")
    if slope_db_per_channel < 0:
        raise ValueError("slope must be nonnegative")
    k = np.arange(feat.n_channels)
    gain = 10.0 ** (-slope_db_per_channel * np.maximum(k - cutoff_channel, 0) / 20.0)
    return feat.with_values(feat.values * gain[None, :])


def draw_lowpass(rng: np.random.Generator, n_channels: int, slope_range=(0.5, 2.0)) -> tuple[int, float]:
    """Random (cutoff, slope) pair: cutoff uniform over [n/4, n)."""
    cutoff = int(rng.integers(n_channels // 4, n_channels))
    slope = float(rng.uniform(*slope_range))
    return cutoff, slope


def classifier_features(audio: AudioBuffer, cfg: FrontendConfig | None = None,
                        lowpass: tuple[int, float] | None = None) -> MelSpectrogram:
    """Mel -> optional low-pass -> PCEN -> channel normalization."""
    cfg = cfg or FrontendConfig()
    mel = mel_spectrogram(audio, cfg)
    if lowpass is not None:
        mel = lowpass_scale(mel, *lowpass)
    return channel_normalize(pcen(mel, cfg.pcen), cfg.norm_eps)
