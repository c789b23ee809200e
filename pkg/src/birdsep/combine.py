"""Separate-then-classify scoring and the three evaluation modes."""

from __future__ import annotations

import enum
import logging
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, peak_normalize, read_wav
from .labels import DatasetError, ManifestRecord
from .metrics import EvalMatrix, EvalReport, evaluate

logger = logging.getLogger(__name__)

CHANNEL_PEAK = 0.5


class CombineMode(enum.Enum):
    MixOnly = "mix"
    SeparationOnly = "sep"
    MixPlusSeparation = "mix+sep"

    @classmethod
    def parse(cls, s: str) -> "CombineMode":
        for m in cls:
            if s in (m.value, m.name):
                return m
        raise ValueError(f"unknown mode {s!r}; expected one of {[m.value for m in cls]}")


def _check_rates(separator, ensemble) -> None:
    if separator is not None and separator.cfg.sample_rate_hz != ensemble.sample_rate_hz:
        raise ValueError(f"separator rate {separator.cfg.sample_rate_hz} != classifier rate {ensemble.sample_rate_hz}")


def channel_windows(window: AudioBuffer, separator, channel_peak: float = CHANNEL_PEAK) -> list[AudioBuffer]:
    """Separated channels, each peak-normalized; silent channels stay silent."""
    return [peak_normalize(s, channel_peak) for s in separator.separate(window).sources]


def combine_scores(mix_probs: np.ndarray, channel_probs: np.ndarray | None, mode: CombineMode) -> np.ndarray:
    """mix_probs: (C,); channel_probs: (M, C)."""
    if mode is CombineMode.MixOnly:
        return np.asarray(mix_probs, dtype=np.float64)
    sep = np.max(channel_probs, axis=0)
    if mode is CombineMode.SeparationOnly:
        return sep
    return np.maximum(sep, mix_probs)


def separate_classify(window: AudioBuffer, separator, ensemble, mode: CombineMode) -> np.ndarray:
    """Per-species probabilities for one window under ``mode``."""
    mode = CombineMode.parse(mode) if isinstance(mode, str) else mode
    if window.sample_rate_hz != ensemble.sample_rate_hz:
        raise ValueError(f"window rate {window.sample_rate_hz} != classifier rate {ensemble.sample_rate_hz}")
    if mode is CombineMode.MixOnly:
        return ensemble.species_probabilities([window])[0]
    if separator is None:
        raise ValueError(f"mode {mode.value} needs a separator")
    _check_rates(separator, ensemble)
    channels = channel_windows(window, separator)
    mix_needed = mode is CombineMode.MixPlusSeparation
    probs = ensemble.species_probabilities(([window] if mix_needed else []) + channels)
    if mix_needed:
        return combine_scores(probs[0], probs[1:], mode)
    return combine_scores(None, probs, mode)


def label_matrix(records: list[ManifestRecord], species: tuple[str, ...]) -> np.ndarray:
    index = {s: i for i, s in enumerate(species)}
    y = np.zeros((len(records), len(species)), dtype=np.int8)
    for r, rec in enumerate(records):
        for code in rec.foreground:
            if code in index:
                y[r, index[code]] = 1
    return y


def load_windows(records: list[ManifestRecord]) -> list[AudioBuffer]:
    missing = [r.path for r in records if not Path(r.path).exists()]
    if missing:
        raise DatasetError(f"missing audio file(s): {', '.join(missing)}")
    return [read_wav(r.path) for r in records]


def score_all_modes(windows: list[AudioBuffer], separator, ensemble) -> dict[CombineMode, np.ndarray]:
    """Scores for every mode, separating each window once."""
    _check_rates(separator, ensemble)
    out = {m: [] for m in CombineMode}
    for w in windows:
        channels = channel_windows(w, separator)
        probs = ensemble.species_probabilities([w] + channels)
        for m in CombineMode:
            out[m].append(combine_scores(probs[0], probs[1:], m))
    return {m: np.stack(v) for m, v in out.items()}


def evaluate_dataset(records: list[ManifestRecord], separator, ensemble, mode: CombineMode,
                     min_count: int = 5) -> EvalReport:
    mode = CombineMode.parse(mode) if isinstance(mode, str) else mode
    windows = load_windows(records)
    scores = np.stack([separate_classify(w, separator, ensemble, mode) for w in windows])
    ev = EvalMatrix(scores, label_matrix(records, ensemble.species_names), ensemble.species_names)
    return evaluate(ev, min_count, mode.value)


def evaluate_all_modes(records: list[ManifestRecord], separator, ensemble,
                       min_count: int = 5) -> dict[CombineMode, EvalReport]:
    windows = load_windows(records)
    labels = label_matrix(records, ensemble.species_names)
    scores = score_all_modes(windows, separator, ensemble)
    return {m: evaluate(EvalMatrix(s, labels, ensemble.species_names), min_count, m.value)
            for m, s in scores.items()}
