"""Masking separator: learnable basis, dilated-conv mask network, consistency projection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import AudioBuffer
from .autodiff import ParameterStore, Tensor, glorot_uniform


@dataclass
class SeparatorConfig:
    sample_rate_hz: int = 22050
    basis_window_ms: float = 1.0
    basis_hop_ms: float = 0.5
    n_basis: int = 256
    n_sources: int = 4
    n_blocks: int = 4
    n_repeats: int = 2
    hidden_channels: int = 64
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    layer_scale_init: float = 0.1
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.n_sources < 2:
            raise ValueError("n_sources must be >= 2")
        if self.n_basis < 1:
            raise ValueError("n_basis must be >= 1")
        if self.hop > self.window:
            raise ValueError(f"basis hop ({self.hop}) exceeds window ({self.window})")
        if len(self.dilations) != self.n_blocks:
            raise ValueError(f"need {self.n_blocks} dilations, got {len(self.dilations)}")

    @property
    def window(self) -> int:
        return max(1, int(round(self.basis_window_ms * self.sample_rate_hz / 1000.0)))

    @property
    def hop(self) -> int:
        return max(1, int(round(self.basis_hop_ms * self.sample_rate_hz / 1000.0)))

    @classmethod
    def from_dict(cls, d: dict) -> "SeparatorConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


@dataclass
class SeparatedSources:
    sources: list[AudioBuffer] = field(default_factory=list)

    def __len__(self):
        return len(self.sources)

    def as_array(self) -> np.ndarray:
        return np.stack([s.samples for s in self.sources])


def mixture_consistency(sources, mixture):
    """Add an equal share of the residual to each source so they sum to ``mixture``.

    Works on numpy arrays of shape (..., M, T) / (..., T) and on Tensors.
    """
    if isinstance(sources, Tensor):
        M = sources.shape[-2]
        mix = mixture if isinstance(mixture, Tensor) else Tensor(np.asarray(mixture, dtype=sources.dtype))
        resid = (mix - sources.sum(axis=-2)) * (1.0 / M)
        return sources + resid.reshape(*resid.shape[:-1], 1, resid.shape[-1])
    sources = np.asarray(sources, dtype=np.float64)
    mixture = np.asarray(mixture, dtype=np.float64)
    if sources.shape[-1] != mixture.shape[-1]:
        raise ValueError(f"source length {sources.shape[-1]} != mixture length {mixture.shape[-1]}")
    M = sources.shape[-2]
    resid = (mixture - sources.sum(axis=-2)) / M
    return sources + resid[..., None, :]


class Separator:
    """Separation model holding its configuration and parameters."""

    def __init__(self, cfg: SeparatorConfig | None = None, store: ParameterStore | None = None):
        self.cfg = cfg or SeparatorConfig()
        self.dtype = np.dtype(self.cfg.dtype)
        self.store = store if store is not None else self._init_params(np.random.default_rng(self.cfg.seed))

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng) -> ParameterStore:
        c, dt = self.cfg, self.dtype
        N, H, W, K = c.n_basis, c.hidden_channels, c.window, c.kernel_size
        s = ParameterStore()
        analysis = glorot_uniform(rng, (W, N), W, N, np.float64)
        s.add("basis/analysis", analysis.astype(dt))
        s.add("basis/synthesis", np.linalg.pinv(analysis).astype(dt))
        s.add("in/norm_gain", np.ones(N, dt))
        s.add("in/norm_bias", np.zeros(N, dt))
        s.add("in/w", glorot_uniform(rng, (N, H), N, H, dt))
        s.add("in/b", np.zeros(H, dt))
        for r in range(c.n_repeats):
            for b in range(c.n_blocks):
                p = f"tdcn/r{r}b{b}/"
                s.add(p + "conv_w", glorot_uniform(rng, (K, H, H), K * H, K * H, dt))
                s.add(p + "conv_b", np.zeros(H, dt))
                s.add(p + "norm_gain", np.ones(H, dt))
                s.add(p + "norm_bias", np.zeros(H, dt))
                s.add(p + "out_w", glorot_uniform(rng, (H, H), H, H, dt))
                s.add(p + "out_b", np.zeros(H, dt))
                s.add(p + "scale", np.full(H, c.layer_scale_init, dt))
        s.add("mask/w", glorot_uniform(rng, (H, c.n_sources * N), H, c.n_sources * N, dt))
        s.add("mask/b", np.zeros(c.n_sources * N, dt))
        return s

    # -- framing ------------------------------------------------------------

    def _layout(self, n_samples: int) -> tuple[int, int, int]:
        """(left pad, padded length, frame count) for an input of ``n_samples``."""
        win, hop = self.cfg.window, self.cfg.hop
        left = win - hop
        n_frames = max(1, math.ceil((n_samples + 2 * left - win) / hop) + 1)
        return left, (n_frames - 1) * hop + win, n_frames

    def _coverage(self, n_samples: int) -> np.ndarray:
        left, total, n_frames = self._layout(n_samples)
        cov = ad.tensor._ola_np(np.ones((n_frames, self.cfg.window)), self.cfg.hop)
        return cov[left:left + n_samples]

    def analyze_tensor(self, x: np.ndarray) -> Tensor:
        """(B, T) waveforms -> (B, F, N) coefficients."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] < self.cfg.window:
            raise ValueError(f"input of {x.shape[-1]} samples is shorter than the {self.cfg.window}-sample basis window")
        left, total, _ = self._layout(x.shape[-1])
        xp = np.zeros((*x.shape[:-1], total), dtype=self.dtype)
        xp[..., left:left + x.shape[-1]] = x
        frames = ad.frame(Tensor(xp), self.cfg.window, self.cfg.hop)
        return frames @ self.store["basis/analysis"]

    def synthesize_tensor(self, coeffs: Tensor, n_samples: int) -> Tensor:
        """(..., F, N) coefficients -> (..., T) waveforms, trimmed to ``n_samples``."""
        left, _, _ = self._layout(n_samples)
        frames = coeffs @ self.store["basis/synthesis"]
        wave = ad.overlap_add(frames, self.cfg.hop)
        wave = wave[..., left:left + n_samples]
        return wave * Tensor(1.0 / self._coverage(n_samples).astype(self.dtype))

    def analyze(self, audio: AudioBuffer) -> np.ndarray:
        with ad.no_grad():
            return self.analyze_tensor(audio.samples[None, :]).data[0]

    def synthesize(self, coeffs: np.ndarray, n_samples: int) -> AudioBuffer:
        with ad.no_grad():
            out = self.synthesize_tensor(Tensor(np.asarray(coeffs, dtype=self.dtype)), n_samples).data
        return AudioBuffer(out.astype(np.float64), self.cfg.sample_rate_hz)

    # -- network --------------------------------------------------------------

    def masks(self, coeffs: Tensor) -> Tensor:
        """(B, F, N) coefficients -> (B, F, M, N) sigmoid masks."""
        c, p = self.cfg, self.store
        B, F, N = coeffs.shape
        h = ad.layer_norm(coeffs, axes=(1, 2)) * p["in/norm_gain"] + p["in/norm_bias"]
        h = ad.dense(h, p["in/w"], p["in/b"])
        K = c.kernel_size
        for r in range(c.n_repeats):
            for b, d in enumerate(c.dilations):
                q = f"tdcn/r{r}b{b}/"
                pad = d * (K - 1)
                y = ad.conv1d(h, p[q + "conv_w"], dilation=d, padding=(pad // 2, pad - pad // 2)) + p[q + "conv_b"]
                y = ad.relu(y)
                y = ad.layer_norm(y, axes=(1, 2)) * p[q + "norm_gain"] + p[q + "norm_bias"]
                y = ad.dense(y, p[q + "out_w"], p[q + "out_b"])
                h = h + ad.layer_scale(y, p[q + "scale"])
        logits = ad.dense(ad.relu(h), p["mask/w"], p["mask/b"])
        return ad.sigmoid(logits.reshape(B, F, c.n_sources, N))

    def forward(self, mixture: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, T) mixtures -> ((B, M, T) consistent sources, (B, F, M, N) masks)."""
        mixture = np.asarray(mixture, dtype=self.dtype)
        B, T = mixture.shape
        coeffs = self.analyze_tensor(mixture)
        masks = self.masks(coeffs)
        masked = masks * coeffs.reshape(B, coeffs.shape[1], 1, coeffs.shape[2])
        sources = self.synthesize_tensor(masked.transpose(0, 2, 1, 3), T)
        return mixture_consistency(sources, mixture), masks

    def separate(self, mixture: AudioBuffer) -> SeparatedSources:
        if mixture.sample_rate_hz != self.cfg.sample_rate_hz:
            raise ValueError(f"mixture sample rate {mixture.sample_rate_hz} != separator rate {self.cfg.sample_rate_hz}")
        if mixture.is_silent:
            return SeparatedSources([AudioBuffer.zeros(len(mixture), mixture.sample_rate_hz)
                                     for _ in range(self.cfg.n_sources)])
        with ad.no_grad():
            sources, _ = self.forward(mixture.samples[None, :])
        out = sources.data[0].astype(np.float64)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("separator produced non-finite activations")
        # re-project in float64 so the sum is exact to double rounding
        out = mixture_consistency(out, mixture.samples)
        return SeparatedSources([AudioBuffer(s, mixture.sample_rate_hz) for s in out])

    # -- persistence --------------------------------------------------------

    def metadata(self) -> dict:
        return {"kind": "separator", "config": self.cfg.to_dict()}

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.metadata()
        if extra:
            meta.update(extra)
        ad.save(path, self.store, meta)

    @classmethod
    def load(cls, path) -> "Separator":
        store, meta = ad.load(path)
        if meta.get("kind") != "separator":
            raise ValueError(f"{path}: not a separator checkpoint")
        return cls(SeparatorConfig.from_dict(meta["config"]), store)
