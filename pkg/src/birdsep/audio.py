"""Mono waveform container and the gain, mixing and I/O primitives around it."""

from __future__ import annotations

import logging
import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

logger = logging.getLogger(__name__)


class AudioFormatError(ValueError):
    """Raised for WAV files that cannot be decoded into a mono buffer."""


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Immutable mono waveform.

    Samples are stored as a read-only float64 array with nominal range
    [-1, 1]. Values outside that range are allowed (clipped field audio
    exists) but must be finite.
    """

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if int(self.sample_rate_hz) != self.sample_rate_hz or self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be a positive integer, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0

    @property
    def power(self) -> float:
        """Mean squared amplitude over the whole buffer."""
        if not len(self):
            return 0.0
        return float(np.mean(np.square(self.samples)))

    @property
    def is_silent(self) -> bool:
        return self.peak == 0.0

    def with_samples(self, samples: np.ndarray) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate_hz)

    def crop(self, start: int, length: int) -> "AudioBuffer":
        if start < 0 or start + length > len(self):
            raise ValueError(f"crop [{start}, {start + length}) outside buffer of length {len(self)}")
        return AudioBuffer(self.samples[start:start + length], self.sample_rate_hz)

    @classmethod
    def zeros(cls, n: int, sample_rate_hz: int) -> "AudioBuffer":
        return cls(np.zeros(n), sample_rate_hz)


@dataclass(frozen=True, eq=False)
class MoMExample:
    """Two reference mixtures and their sum."""

    x1: AudioBuffer
    x2: AudioBuffer
    mom: AudioBuffer


def _check_compatible(a: AudioBuffer, b: AudioBuffer, what: str) -> None:
    if a.sample_rate_hz != b.sample_rate_hz:
        raise ValueError(f"{what}: sample rates differ ({a.sample_rate_hz} vs {b.sample_rate_hz})")
    if len(a) != len(b):
        raise ValueError(f"{what}: lengths differ ({len(a)} vs {len(b)})")


def peak_normalize(audio: AudioBuffer, target_peak: float) -> AudioBuffer:
    """Scale ``audio`` so its largest absolute sample equals ``target_peak``.

    Silent input is returned unchanged; check ``result.is_silent``. Inputs
    that are already clipped (peak above 1) are scaled like any other.
    """
    if not 0.0 < target_peak <= 1.0:
        raise ValueError(f"target_peak must lie in (0, 1], got {target_peak}")
    peak = audio.peak
    if peak == 0.0:
        logger.debug("peak_normalize: silent input left unchanged")
        return audio
    if peak == target_peak:
        return audio
    return audio.with_samples(audio.samples * (target_peak / peak))


def noise_gain_for_snr(signal_power: float, noise_power: float, snr_db: float) -> float:
    """Amplitude gain on the noise that yields ``snr_db`` against the signal."""
    if noise_power <= 0.0:
        raise ValueError("noise has zero power; SNR mixing is undefined")
    return math.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(signal: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    """Return ``signal + g * noise`` with ``g`` chosen for the requested SNR."""
    _check_compatible(signal, noise, "mix_at_snr")
    g = noise_gain_for_snr(signal.power, noise.power, snr_db)
    return signal.with_samples(signal.samples + g * noise.samples)


def make_mom(x1: AudioBuffer, x2: AudioBuffer) -> MoMExample:
    _check_compatible(x1, x2, "make_mom")
    return MoMExample(x1=x1, x2=x2, mom=x1.with_samples(x1.samples + x2.samples))


def resample(audio: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """Polyphase windowed-sinc resampling.

    A Kaiser window with beta 8.6 keeps the stopband below -60 dB; the
    scipy default (beta 5) does not.
    """
    if target_rate_hz == audio.sample_rate_hz:
        return audio
    g = math.gcd(int(target_rate_hz), audio.sample_rate_hz)
    up, down = int(target_rate_hz) // g, audio.sample_rate_hz // g
    out = sps.resample_poly(audio.samples, up, down, window=("kaiser", 8.6))
    return AudioBuffer(out, int(target_rate_hz))


def read_wav(path) -> AudioBuffer:
    """Read a PCM-16 or float-32 WAV file.

    Stereo files are averaged to mono; more than two channels is an error.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            rate, data = wavfile.read(fh)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, wave.Error, IndexError, UnboundLocalError, struct.error) as exc:
        # scipy leaks UnboundLocalError and struct.error on some malformed headers
        raise AudioFormatError(f"{path}: cannot decode WAV ({exc})") from exc
    if data.ndim == 2:
        if data.shape[1] > 2:
            raise AudioFormatError(f"{path}: {data.shape[1]} channels; only mono or stereo is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}; expected PCM-16 or float-32")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioBuffer(samples, int(rate))


def write_wav(path, audio: AudioBuffer, fmt: str = "float32") -> None:
    """Write ``audio`` as mono WAV; ``fmt`` is ``"float32"`` or ``"pcm16"``."""
    if fmt == "float32":
        data = audio.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), audio.sample_rate_hz, data)
