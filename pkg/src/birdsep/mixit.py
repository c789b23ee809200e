"""Mixture invariant training: thresholded SNR loss, exact assignment search, training loop."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import AudioBuffer, MoMExample, make_mom, peak_normalize
from .autodiff import Tensor, adam_step
from .separator import Separator, SeparatorConfig

logger = logging.getLogger(__name__)

MAX_SOURCES = 16


def snr_threshold(snr_max_db: float) -> float:
    return 10.0 ** (-snr_max_db / 10.0)


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def snr_loss(y, y_hat, snr_max_db: float = 30.0) -> float:
    """Negative SNR with a soft clamp at ``snr_max_db``.

    Written as ``10*log10(err/ref + tau)``, which equals
    ``-10*log10(ref / (err + tau*ref))`` and gives exactly ``-snr_max_db``
    for a perfect estimate.
    """
    y, y_hat = _samples(y), _samples(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"snr_loss: shapes differ ({y.shape} vs {y_hat.shape})")
    ref = float(np.sum(y * y))
    if ref == 0.0:
        raise ValueError("snr_loss: reference has zero energy")
    err = float(np.sum((y - y_hat) ** 2))
    return 10.0 * math.log10(err / ref + snr_threshold(snr_max_db))


@lru_cache(maxsize=None)
def assignment_matrices(n_sources: int) -> np.ndarray:
    """All 2 x M binary matrices with unit column sums, shape (2**M, 2, M).

    Order is lexicographic over the column assignments (source 0 most
    significant), which fixes the tie-break.
    """
    if n_sources > MAX_SOURCES:
        raise ValueError(f"assignment enumeration limited to {MAX_SOURCES} sources, got {n_sources}")
    rows = np.array(list(itertools.product((0, 1), repeat=n_sources)), dtype=np.int64)
    A = np.zeros((rows.shape[0], 2, n_sources), dtype=np.float64)
    A[:, 0, :] = rows == 0
    A[:, 1, :] = rows == 1
    A.setflags(write=False)
    return A


def _all_assignment_losses(refs: np.ndarray, sources: np.ndarray, tau: float) -> np.ndarray:
    """refs (..., 2, T), sources (..., M, T) -> losses (..., 2**M)."""
    A = assignment_matrices(sources.shape[-2])
    est = np.einsum("knm,...mt->...knt", A, sources)
    err = np.sum((refs[..., None, :, :] - est) ** 2, axis=-1)
    ref = np.sum(refs * refs, axis=-1)[..., None, :]
    return np.sum(10.0 * np.log10(err / ref + tau), axis=-1)


def mixit_loss(x1, x2, sources, snr_max_db: float = 30.0) -> tuple[float, np.ndarray]:
    """Minimum over assignments of the summed per-mixture SNR loss.

    Returns the loss and the minimizing 2 x M assignment matrix.
    """
    x1, x2 = _samples(x1), _samples(x2)
    S = np.stack([_samples(s) for s in sources]) if not isinstance(sources, np.ndarray) else np.asarray(sources, dtype=np.float64)
    if S.shape[0] > MAX_SOURCES:
        raise ValueError(f"assignment enumeration limited to {MAX_SOURCES} sources, got {S.shape[0]}")
    if x1.shape != x2.shape or S.shape[1:] != x1.shape:
        raise ValueError("mixit_loss: all signals must have equal length")
    refs = np.stack([x1, x2])
    if np.any(np.sum(refs * refs, axis=-1) == 0):
        raise ValueError("mixit_loss: reference mixture has zero energy")
    losses = _all_assignment_losses(refs, S, snr_threshold(snr_max_db))
    k = int(np.argmin(losses))
    return float(losses[k]), assignment_matrices(S.shape[0])[k].copy()


def best_assignments(refs: np.ndarray, sources: np.ndarray, snr_max_db: float) -> np.ndarray:
    """Batched search: refs (B, 2, T), sources (B, M, T) -> (B, 2, M) matrices."""
    losses = _all_assignment_losses(refs.astype(np.float64), sources.astype(np.float64), snr_threshold(snr_max_db))
    return assignment_matrices(sources.shape[-2])[np.argmin(losses, axis=-1)]


def mixit_graph_loss(sources: Tensor, refs: np.ndarray, A: np.ndarray, snr_max_db: float) -> Tensor:
    """Differentiable MixIT loss at fixed assignments, averaged over the batch."""
    est = ad.matmul(Tensor(A.astype(sources.dtype)), sources)
    diff = Tensor(refs.astype(sources.dtype)) - est
    err = (diff * diff).sum(axis=-1)
    ref = np.sum(refs.astype(np.float64) ** 2, axis=-1).astype(sources.dtype)
    per = ad.log10(err / Tensor(ref) + snr_threshold(snr_max_db)) * 10.0
    return per.sum(axis=-1).mean()


# ---------------------------------------------------------------- training

@dataclass
class SeparatorTrainConfig:
    steps: int = 5000
    batch_size: int = 8
    learning_rate: float = 1e-3
    crop_s: float = 1.0
    snr_max_db: float = 30.0
    reference_peak: float = 0.5
    seed: int = 0
    checkpoint_every: int = 1000
    max_resample: int = 100

    @classmethod
    def from_dict(cls, d: dict) -> "SeparatorTrainConfig":
        return cls(**d)


class PairSampler:
    """Draws pairs of distinct recordings, without replacement within an epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 2:
            raise ValueError("need at least two reference mixtures")
        self.n, self.rng = n, rng
        self._queue: list[int] = []

    def next_pair(self) -> tuple[int, int]:
        if len(self._queue) < 2:
            self._queue = [int(i) for i in self.rng.permutation(self.n)]
        return self._queue.pop(), self._queue.pop()


def _random_crop(rec: AudioBuffer, n: int, rng) -> np.ndarray:
    if len(rec) <= n:
        out = np.zeros(n)
        out[:len(rec)] = rec.samples
        return out
    start = int(rng.integers(0, len(rec) - n + 1))
    return rec.samples[start:start + n]


def sample_mom_batch(recordings: list[AudioBuffer], sampler: PairSampler, n_samples: int,
                     batch_size: int, cfg: SeparatorTrainConfig, rng) -> np.ndarray:
    """(B, 2, T) batch of peak-normalized reference pairs."""
    refs = np.zeros((batch_size, 2, n_samples))
    for b in range(batch_size):
        for attempt in range(cfg.max_resample):
            i, j = sampler.next_pair()
            pair = [_random_crop(recordings[k], n_samples, rng) for k in (i, j)]
            if all(np.any(p) for p in pair):
                break
            logger.info("silent reference crop (recordings %d, %d); resampling", i, j)
        else:
            raise RuntimeError("could not draw a non-silent reference pair")
        sr = recordings[i].sample_rate_hz
        for n, p in enumerate(pair):
            refs[b, n] = peak_normalize(AudioBuffer(p, sr), cfg.reference_peak).samples
    return refs


def loss_and_grads(model: Separator, refs: np.ndarray, snr_max_db: float) -> tuple[float, np.ndarray, dict]:
    """Forward + backward on one MoM batch. Returns (loss, assignments, grads)."""
    model.store.zero_grad()
    mom = refs.sum(axis=1)
    sources, _ = model.forward(mom)
    A = best_assignments(refs, sources.data, snr_max_db)
    loss = mixit_graph_loss(sources, refs, A, snr_max_db)
    loss.backward()
    grads = {k: (v if v is not None else np.zeros_like(model.store[k].data)) for k, v in model.store.grads().items()}
    return loss.item(), A, grads


def train_separator(recordings: list[AudioBuffer], model_cfg: SeparatorConfig | None = None,
                    train_cfg: SeparatorTrainConfig | None = None, out_dir=None,
                    log_path=None) -> tuple[Separator, list[dict]]:
    """Train a separator with MixIT on mixtures of two sampled recordings."""
    model_cfg = model_cfg or SeparatorConfig()
    train_cfg = train_cfg or SeparatorTrainConfig()
    recordings = [r for r in recordings if not r.is_silent]
    if len(recordings) < 2:
        raise ValueError("need at least two non-silent reference mixtures")
    for r in recordings:
        if r.sample_rate_hz != model_cfg.sample_rate_hz:
            raise ValueError(f"recording rate {r.sample_rate_hz} != separator rate {model_cfg.sample_rate_hz}")
    model = Separator(model_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    sampler = PairSampler(len(recordings), rng)
    n = int(round(train_cfg.crop_s * model_cfg.sample_rate_hz))
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for step in range(1, train_cfg.steps + 1):
            refs = sample_mom_batch(recordings, sampler, n, train_cfg.batch_size, train_cfg, rng)
            loss, A, grads = loss_and_grads(model, refs, train_cfg.snr_max_db)
            adam_step(model.store, grads, lr=train_cfg.learning_rate)
            hist = np.bincount(A[:, 0, :].sum(axis=1).astype(int), minlength=model_cfg.n_sources + 1)
            rec = {"step": step, "loss": loss, "assignment_histogram": hist.tolist()}
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if out_dir and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                model.save(Path(out_dir) / f"step_{step:06d}.ckpt", {"train": asdict(train_cfg)})
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        model.save(Path(out_dir) / "final.ckpt", {"train": asdict(train_cfg)})
    return model, history


def build_mom_examples(pairs: list[tuple[AudioBuffer, AudioBuffer]], reference_peak: float = 0.5) -> list[MoMExample]:
    return [make_mom(peak_normalize(a, reference_peak), peak_normalize(b, reference_peak)) for a, b in pairs]


def separate_moms(model: Separator, examples: list[MoMExample]) -> list[np.ndarray]:
    return [model.separate(ex.mom).as_array() for ex in examples]
