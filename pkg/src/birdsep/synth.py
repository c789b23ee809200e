"""Synthetic birdsong: harmonic FM chirp trains over colored noise, with ground-truth stems."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, write_wav
from .labels import LabelSet, ManifestRecord, Taxonomy, write_manifest, write_path_list


@dataclass(frozen=True)
class SynthSpecies:
    code: str
    base_freq_hz: float
    sweep_hz_per_s: float
    call_duration_s: float
    period_s: float
    harmonics: tuple[float, ...] = (1.0, 0.4)
    genus: str = ""
    family: str = ""
    order: str = ""

    @property
    def max_freq_hz(self) -> float:
        top = self.base_freq_hz + max(self.sweep_hz_per_s * self.call_duration_s, 0.0)
        return top * len(self.harmonics)

    @property
    def min_freq_hz(self) -> float:
        return self.base_freq_hz + min(self.sweep_hz_per_s * self.call_duration_s, 0.0)


def render_call(sp: SynthSpecies, sample_rate_hz: int) -> np.ndarray:
    """One raised-cosine-windowed harmonic sweep, peak-free (unnormalized)."""
    if sp.max_freq_hz >= sample_rate_hz / 2:
        raise ValueError(f"species {sp.code}: {sp.max_freq_hz:.0f} Hz exceeds Nyquist at {sample_rate_hz} Hz")
    n = max(2, int(round(sp.call_duration_s * sample_rate_hz)))
    t = np.arange(n) / sample_rate_hz
    phase = 2.0 * np.pi * (sp.base_freq_hz * t + 0.5 * sp.sweep_hz_per_s * t * t)
    tone = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(sp.harmonics))
    env = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))
    return tone * env


def render_song(sp: SynthSpecies, n_samples: int, sample_rate_hz: int, rng: np.random.Generator,
                amplitude: float = 1.0, onsets_s=None) -> np.ndarray:
    """Repeated calls at the species' period (jittered), scaled to peak ``amplitude``."""
    call = render_call(sp, sample_rate_hz)
    call = call / np.max(np.abs(call))
    out = np.zeros(n_samples)
    if onsets_s is None:
        t = rng.uniform(0.0, sp.period_s)
        onsets_s = []
        while t * sample_rate_hz < n_samples:
            onsets_s.append(t)
            t += sp.period_s * rng.uniform(0.8, 1.2)
    for t0 in onsets_s:
        i = int(round(t0 * sample_rate_hz))
        seg = call[:max(0, min(call.size, n_samples - i))]
        out[i:i + seg.size] += seg
    return amplitude * out


def colored_noise(n_samples: int, rng: np.random.Generator, tilt: float = 1.0) -> np.ndarray:
    """Unit-RMS noise with power spectrum ~ 1/f**tilt."""
    if n_samples == 0:
        return np.zeros(0)
    spec = np.fft.rfft(rng.standard_normal(n_samples))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    noise = np.fft.irfft(spec / f ** (tilt / 2.0), n=n_samples)
    return noise / np.sqrt(np.mean(noise ** 2))


def synth_clip(species, duration_s: float, noise_floor_db: float, rng: np.random.Generator,
               sample_rate_hz: int = 22050, amplitudes=None, background=()):
    """Sum of per-species songs plus noise at ``noise_floor_db`` dB RMS (re full scale).

    Species listed in ``background`` are rendered like the rest but labeled
    as background. Returns (audio, labels, stems) where stems maps species
    code to its waveform and holds the noise under ``"noise"``.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * sample_rate_hz))
    species = list(species)
    if amplitudes is None:
        amplitudes = [1.0] * len(species)
    stems = {}
    total = np.zeros(n)
    for sp, amp in zip(species, amplitudes):
        stems[sp.code] = render_song(sp, n, sample_rate_hz, rng, amp)
        total = total + stems[sp.code]
    if math.isfinite(noise_floor_db):
        stems["noise"] = colored_noise(n, rng) * 10.0 ** (noise_floor_db / 20.0)
        total = total + stems["noise"]
    bg = frozenset(background)
    fg = frozenset(sp.code for sp in species) - bg
    return AudioBuffer(total, sample_rate_hz), LabelSet(fg, bg), stems


@dataclass
class SynthConfig:
    sample_rate_hz: int = 22050
    n_species: int = 8
    n_extra_species: int = 0
    n_heldout_species: int = 0
    clips_per_species: int = 20
    extra_clips_per_species: int = 5
    clip_s: float = 6.0
    eval_clips: int = 60
    eval_clip_s: float = 5.0
    eval_max_species: int = 3
    eval_quiet_db: tuple[float, float] = (-18.0, -6.0)
    mom_eval_pairs: int = 40
    noise_clips: int = 10
    noise_clip_s: float = 8.0
    noise_floor_db: float = -45.0
    p_background: float = 0.5
    background_db: tuple[float, float] = (-20.0, -8.0)
    weak_label_drop: float = 0.0
    f_lo_hz: float = 700.0
    f_hi_hz: float = 8000.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("eval_quiet_db", "background_db"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def make_species(n: int, rng: np.random.Generator, f_lo_hz: float = 700.0, f_hi_hz: float = 8000.0,
                 prefix: str = "sp", start: int = 0) -> list[SynthSpecies]:
    """``n`` species whose fundamentals sit in log-spaced bands across [f_lo, f_hi]."""
    edges = np.geomspace(f_lo_hz, f_hi_hz / 2.0, n + 1)
    out = []
    for i in range(n):
        lo, hi = edges[i], edges[i + 1]
        k = start + i
        dur = float(rng.uniform(0.12, 0.3))
        base = float(rng.uniform(lo, lo + 0.4 * (hi - lo)))
        sweep = float(rng.uniform(0.2, 0.5) * (hi - lo) / dur * rng.choice([-1.0, 1.0]))
        if sweep < 0:
            base = base - sweep * dur
        out.append(SynthSpecies(
            code=f"{prefix}{k:02d}", base_freq_hz=base, sweep_hz_per_s=sweep, call_duration_s=dur,
            period_s=float(rng.uniform(0.5, 1.0)), harmonics=(1.0, float(rng.uniform(0.2, 0.6))),
            genus=f"gen{k // 2:02d}", family=f"fam{k // 4:02d}", order=f"ord{k // 8:02d}"))
    return out


@dataclass
class SynthDataset:
    root: Path
    species: list[SynthSpecies]
    taxonomy: Taxonomy
    train: list[ManifestRecord]
    eval: list[ManifestRecord]
    mom_pairs: list[tuple[str, str]]
    noise: list[str]
    heldout: list[str] = field(default_factory=list)


def build_synth_dataset(cfg: SynthConfig, out_dir) -> SynthDataset:
    """Write a reproducible synthetic corpus under ``out_dir``.

    Files: taxonomy.tsv, targets.txt, train.jsonl (weakly labeled clips),
    eval.jsonl (strongly labeled segments with overlapping species),
    mom_eval.jsonl (held-out reference pairs), noise.txt, and the WAVs.
    """
    root = Path(out_dir)
    sr = cfg.sample_rate_hz
    rng = np.random.default_rng(cfg.seed)
    targets = make_species(cfg.n_species, rng, cfg.f_lo_hz, cfg.f_hi_hz)
    extra = make_species(cfg.n_extra_species, rng, cfg.f_lo_hz, cfg.f_hi_hz, prefix="xs", start=cfg.n_species) \
        if cfg.n_extra_species else []
    heldout = make_species(cfg.n_heldout_species, rng, cfg.f_lo_hz, cfg.f_hi_hz, prefix="ho",
                           start=cfg.n_species + cfg.n_extra_species) if cfg.n_heldout_species else []
    known = targets + extra
    taxonomy = Taxonomy({s.code: (s.genus, s.family, s.order) for s in known}, tuple(s.code for s in targets))
    root.mkdir(parents=True, exist_ok=True)
    taxonomy.write(root / "taxonomy.tsv")
    write_path_list(root / "targets.txt", taxonomy.targets)

    def write(rel, audio):
        write_wav(root / rel, audio)
        return rel

    train = []
    for primary_list, per in ((targets, cfg.clips_per_species), (extra, cfg.extra_clips_per_species)):
        for sp in primary_list:
            for c in range(per):
                species, amps, bg = [sp], [float(rng.uniform(0.5, 1.0))], []
                if rng.random() < cfg.p_background and len(targets) > 1:
                    other = targets[int(rng.choice([i for i, t in enumerate(targets) if t.code != sp.code]))]
                    species.append(other)
                    amps.append(amps[0] * 10.0 ** (rng.uniform(*cfg.background_db) / 20.0))
                    bg.append(other.code)
                audio, labels, _ = synth_clip(species, cfg.clip_s, cfg.noise_floor_db, rng, sr, amps, bg)
                kept_bg = tuple(b for b in sorted(labels.background) if rng.random() >= cfg.weak_label_drop)
                rel = write(f"audio/train/{sp.code}_{c:03d}.wav", audio)
                train.append(ManifestRecord(rel, tuple(sorted(labels.foreground)), kept_bg))
    write_manifest(root / "train.jsonl", train)

    evals = []
    for e in range(cfg.eval_clips):
        k = int(rng.integers(1, cfg.eval_max_species + 1))
        idx = sorted(int(i) for i in rng.choice(len(targets), size=k, replace=False))
        species = [targets[i] for i in idx]
        amps = [float(rng.uniform(0.5, 1.0))]
        amps += [amps[0] * 10.0 ** (rng.uniform(*cfg.eval_quiet_db) / 20.0) for _ in species[1:]]
        order = rng.permutation(k)
        amps = [amps[int(j)] for j in order]
        audio, labels, _ = synth_clip(species, cfg.eval_clip_s, cfg.noise_floor_db, rng, sr, amps)
        rel = write(f"audio/eval/seg_{e:04d}.wav", audio)
        evals.append(ManifestRecord(rel, tuple(sorted(labels.foreground)), ()))
    write_manifest(root / "eval.jsonl", evals)

    pool = heldout if len(heldout) >= 2 else targets
    pairs = []
    for p in range(cfg.mom_eval_pairs):
        i, j = (int(v) for v in rng.choice(len(pool), size=2, replace=False))
        recs = []
        for side, sp in (("a", pool[i]), ("b", pool[j])):
            audio, _, _ = synth_clip([sp], cfg.clip_s, cfg.noise_floor_db, rng, sr, [float(rng.uniform(0.5, 1.0))])
            recs.append(write(f"audio/mom/pair_{p:04d}_{side}.wav", audio))
        pairs.append(tuple(recs))
    with open(root / "mom_eval.jsonl", "w") as fh:
        for a, b in pairs:
            fh.write(json.dumps({"x1": a, "x2": b}) + "\n")

    noise = []
    for k in range(cfg.noise_clips):
        tilt = float(rng.uniform(0.0, 2.0))
        audio = AudioBuffer(0.1 * colored_noise(int(cfg.noise_clip_s * sr), rng, tilt), sr)
        noise.append(write(f"audio/noise/noise_{k:03d}.wav", audio))
    write_path_list(root / "noise.txt", noise)
    (root / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return SynthDataset(root, targets + extra + heldout, taxonomy, train, evals, pairs, noise,
                        [s.code for s in heldout])
