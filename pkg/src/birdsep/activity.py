"""Pick high-energy training windows out of weakly labeled recordings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks_cwt

from .audio import AudioBuffer
from .frontend import FrontendConfig, MelSpectrogram, mel_spectrogram

LOG_FLOOR = 1e-6


@dataclass(frozen=True)
class PeakWindow:
    start_s: float
    duration_s: float
    peak_energy: float
    peak_frame: int

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


@dataclass
class ActivityConfig:
    window_s: float = 6.0
    max_windows: int = 5
    widths: tuple[int, ...] = (5, 10, 20, 40)
    min_separation_s: float = 3.0
    # peaks must clear median + min_peak_sigma * robust std of the energy curve
    min_peak_sigma: float = 5.0


def log_mel(mel: MelSpectrogram) -> MelSpectrogram:
    return mel.with_values(np.log(mel.values + LOG_FLOOR))


def frame_energy(mel: MelSpectrogram) -> np.ndarray:
    """Per-frame sum over channels of a log-mel spectrogram."""
    if mel.n_frames == 0:
        return np.zeros(0)
    return mel.values.sum(axis=1)


def cwt_peaks(energy, widths) -> np.ndarray:
    """Ricker-wavelet ridge peaks of an energy curve, sorted by frame."""
    energy = np.asarray(energy, dtype=np.float64)
    widths = np.asarray(sorted(widths), dtype=np.float64)
    if widths.size == 0 or np.any(widths < 1):
        raise ValueError("widths must be nonempty and >= 1")
    if energy.size < widths.max():
        return np.zeros(0, dtype=np.int64)
    # remove the baseline; zero-padded convolution otherwise makes edge ridges
    centered = energy - np.median(energy)
    if not np.any(centered):
        return np.zeros(0, dtype=np.int64)
    peaks = np.unique(np.asarray(find_peaks_cwt(centered, widths), dtype=np.int64))
    # ridges in flat stretches land at or below the baseline
    return peaks[centered[peaks] > 0] if peaks.size else peaks


def significant_peaks(energy, peaks, radius: int, min_sigma: float) -> np.ndarray:
    """Snap each peak to the energy maximum within ``radius`` frames, then drop
    those not ``min_sigma`` robust deviations (scaled MAD) above the median."""
    energy = np.asarray(energy, dtype=np.float64)
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size == 0:
        return peaks
    snapped = np.array([lo + int(np.argmax(energy[lo:p + radius + 1]))
                        for p, lo in ((p, max(0, p - radius)) for p in peaks)], dtype=np.int64)
    centered = energy - np.median(energy)
    sigma = 1.4826 * np.median(np.abs(centered))
    return np.unique(snapped[centered[snapped] > min_sigma * sigma])


def select_windows(rec: AudioBuffer, max_windows: int | None = None,
                   cfg: ActivityConfig | None = None,
                   frontend: FrontendConfig | None = None) -> list[PeakWindow]:
    """Up to ``max_windows`` windows, highest peak-frame energy first."""
    cfg = cfg or ActivityConfig()
    frontend = frontend or FrontendConfig()
    max_windows = cfg.max_windows if max_windows is None else max_windows
    if len(rec) == 0 or max_windows <= 0:
        return []
    duration = rec.duration_s
    if len(rec) < int(round(frontend.frame_length_s * rec.sample_rate_hz)):
        return [PeakWindow(0.0, duration, 0.0, 0)]
    mel = log_mel(mel_spectrogram(rec, frontend))
    energy = frame_energy(mel)
    hop_s = 1.0 / mel.frame_rate_hz
    center_offset = mel.frame_length_s / 2.0

    def frame_time(i):
        return i * hop_s + center_offset

    if duration <= cfg.window_s:
        best = int(np.argmax(energy))
        return [PeakWindow(0.0, duration, float(energy[best]), best)]

    peaks = significant_peaks(energy, cwt_peaks(energy, cfg.widths), max(cfg.widths) // 2, cfg.min_peak_sigma)
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(energy))])
    # stable descending sort; equal energies keep frame order
    order = peaks[np.argsort(-energy[peaks], kind="stable")]
    kept: list[int] = []
    for p in order:
        if all(abs(frame_time(p) - frame_time(q)) >= cfg.min_separation_s for q in kept):
            kept.append(int(p))
        if len(kept) == max_windows:
            break
    windows = []
    for p in kept:
        start = frame_time(p) - cfg.window_s / 2.0
        start = min(max(start, 0.0), duration - cfg.window_s)
        windows.append(PeakWindow(float(start), cfg.window_s, float(energy[p]), p))
    return windows
