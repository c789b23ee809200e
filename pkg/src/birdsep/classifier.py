"""Multi-label species classifier with taxonomic heads and logit-domain ensembling."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import AudioBuffer, read_wav
from .augment import AugmentConfig, augment_example
from .autodiff import ParameterStore, Tensor, adam_step, glorot_uniform
from .frontend import FrontendConfig, PcenParams, classifier_features, draw_lowpass
from .labels import (LEVELS, DatasetError, HeadTargets, LabeledClip, ManifestRecord, Taxonomy,
                     check_manifest, head_targets)

logger = logging.getLogger(__name__)

HEADS = ("species", *LEVELS, "detection")
PROB_EPS = 1e-6


@dataclass
class ClassifierConfig:
    sample_rate_hz: int = 22050
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    widths: tuple[int, ...] = (32, 64, 128, 256)
    hidden_dim: int = 256
    kernel_size: int = 3
    label_smoothing: float = 0.1
    head_weight: float = 0.1
    detection_weight: float = 1.0
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        d = dict(d)
        fe = dict(d.pop("frontend", {}))
        fe["pcen"] = PcenParams(**fe.get("pcen", {}))
        d["widths"] = tuple(d.get("widths", cls.widths))
        return cls(frontend=FrontendConfig(**fe), **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class ClassifierOutput:
    logits: dict[str, np.ndarray]

    def __post_init__(self):
        for name, v in self.logits.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite logits in head {name!r}")


# ---------------------------------------------------------------- losses / pooling

def autopool(hidden, alpha):
    """Softmax-weighted temporal pooling.

    hidden: (..., T, D); alpha: (D,). alpha = 0 is mean pooling, large
    alpha approaches max pooling. Accepts numpy arrays or Tensors.
    """
    if isinstance(hidden, Tensor) or isinstance(alpha, Tensor):
        hidden, alpha = ad.as_tensor(hidden), ad.as_tensor(alpha)
        w = ad.softmax(hidden * alpha, axis=-2)
        return (w * hidden).sum(axis=-2)
    hidden = np.asarray(hidden, dtype=np.float64)
    z = hidden * np.asarray(alpha, dtype=np.float64)
    z = z - z.max(axis=-2, keepdims=True)
    w = np.exp(z)
    # normalize after summing so alpha = 0 reduces to sum / T bit for bit
    return (w * hidden).sum(axis=-2) / w.sum(axis=-2)


def _softplus(x):
    return np.logaddexp(0.0, x)


def smoothed_bce(logits, targets, smoothing: float = 0.1, mask=None) -> float:
    """Label-smoothed sigmoid cross-entropy averaged over unmasked entries."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64) * (1.0 - smoothing) + smoothing / 2.0
    m = np.ones_like(z) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), z.shape)
    denom = m.sum()
    if denom == 0:
        logger.debug("smoothed_bce: every entry masked")
        return 0.0
    per = y * _softplus(-z) + (1.0 - y) * _softplus(z)
    return float(np.sum(np.where(m > 0, per, 0.0)) / denom)


def smoothed_bce_tensor(logits: Tensor, targets: np.ndarray, smoothing: float, mask: np.ndarray) -> Tensor:
    dt = logits.dtype
    y = (targets * (1.0 - smoothing) + smoothing / 2.0).astype(dt)
    m = np.asarray(mask, dtype=dt)
    denom = float(m.sum())
    if denom == 0:
        return Tensor(np.zeros((), dt))
    per = Tensor(y) * ad.softplus(-logits) + Tensor(1.0 - y) * ad.softplus(logits)
    return (per * Tensor(m)).sum() * (1.0 / denom)


def taxonomic_loss(outputs, targets: HeadTargets, head_weight: float = 0.1, detection_weight: float = 1.0,
                   smoothing: float = 0.1):
    """Species + head_weight * (genus + family + order) + detection_weight * detection.

    ``outputs`` maps head name to logits (numpy or Tensor). Returns a float
    for numpy inputs and a Tensor otherwise.
    """
    logits = outputs.logits if isinstance(outputs, ClassifierOutput) else outputs
    graph = any(isinstance(v, Tensor) for v in logits.values())
    bce = smoothed_bce_tensor if graph else smoothed_bce
    weights = {"species": 1.0, "genus": head_weight, "family": head_weight, "order": head_weight,
               "detection": detection_weight}
    total = None
    for head in HEADS:
        if weights[head] == 0:
            continue
        term = bce(logits[head], targets.targets[head], smoothing, targets.masks[head]) * weights[head]
        total = term if total is None else total + term
    return total


def stack_targets(items: list[HeadTargets]) -> HeadTargets:
    return HeadTargets({h: np.stack([t.targets[h] for t in items]) for h in HEADS},
                       {h: np.stack([t.masks[h] for t in items]) for h in HEADS})


def logit(p):
    return np.log(p) - np.log1p(-p)


def ensemble_logit_average(probabilities, eps: float = PROB_EPS) -> np.ndarray:
    """Average member probabilities in the logit domain; axis 0 indexes members."""
    p = np.clip(np.asarray(probabilities, dtype=np.float64), eps, 1.0 - eps)
    z = logit(p).mean(axis=0)
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------- model

class Classifier:
    """Conv backbone over PCEN features, AutoPool, one dense head per taxonomy level."""

    def __init__(self, cfg: ClassifierConfig, head_sizes: dict[str, int], species_names=(),
                 store: ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.head_sizes = dict(head_sizes)
        self.head_sizes.setdefault("detection", 1)
        self.species_names = tuple(species_names)
        self.dtype = np.dtype(cfg.dtype)
        self.store = store if store is not None else self._init_params(np.random.default_rng(seed))

    @classmethod
    def for_taxonomy(cls, cfg: ClassifierConfig, taxonomy: Taxonomy, seed: int = 0) -> "Classifier":
        sizes = {lvl: taxonomy.size(lvl) for lvl in ("species", *LEVELS)}
        return cls(cfg, sizes, taxonomy.targets, seed=seed)

    def _init_params(self, rng) -> ParameterStore:
        c, dt, k = self.cfg, self.dtype, self.cfg.kernel_size
        s = ParameterStore()
        cin = 1
        for i, w in enumerate(c.widths):
            s.add(f"conv{i}/w", glorot_uniform(rng, (k, k, cin, w), k * k * cin, k * k * w, dt))
            s.add(f"conv{i}/b", np.zeros(w, dt))
            s.add(f"conv{i}/norm_gain", np.ones(w, dt))
            s.add(f"conv{i}/norm_bias", np.zeros(w, dt))
            cin = w
        s.add("proj/w", glorot_uniform(rng, (cin, c.hidden_dim), cin, c.hidden_dim, dt))
        s.add("proj/b", np.zeros(c.hidden_dim, dt))
        s.add("autopool/alpha", np.zeros(c.hidden_dim, dt))
        for head in HEADS:
            n = self.head_sizes[head]
            s.add(f"head/{head}/w", glorot_uniform(rng, (c.hidden_dim, n), c.hidden_dim, n, dt))
            s.add(f"head/{head}/b", np.zeros(n, dt))
        return s

    @property
    def time_downsampling(self) -> int:
        return 2 ** len(self.cfg.widths)

    def backbone_forward(self, features) -> Tensor:
        """(B, T, F) normalized features -> (B, T', D) hidden sequence."""
        x = np.asarray(features.values if hasattr(features, "values") else features, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.cfg.frontend.n_channels:
            raise ValueError(f"features of shape {x.shape} do not match {self.cfg.frontend.n_channels} channels")
        if min(x.shape[1], x.shape[2]) < self.time_downsampling:
            raise ValueError(f"features {x.shape} too small for {len(self.cfg.widths)} pooling stages")
        p = self.store
        h = Tensor(x[..., None])
        for i in range(len(self.cfg.widths)):
            h = ad.conv2d(h, p[f"conv{i}/w"]) + p[f"conv{i}/b"]
            h = ad.layer_norm(h, axes=(1, 2), eps=1e-5) * p[f"conv{i}/norm_gain"] + p[f"conv{i}/norm_bias"]
            h = ad.max_pool2d(ad.relu(h), 2)
        h = h.mean(axis=2)
        return ad.relu(ad.dense(h, p["proj/w"], p["proj/b"]))

    def forward(self, features) -> dict[str, Tensor]:
        hidden = self.backbone_forward(features)
        pooled = autopool(hidden, self.store["autopool/alpha"])
        return {h: ad.dense(pooled, self.store[f"head/{h}/w"], self.store[f"head/{h}/b"]) for h in HEADS}

    def features(self, audio: AudioBuffer, lowpass=None):
        if audio.sample_rate_hz != self.cfg.sample_rate_hz:
            raise ValueError(f"audio rate {audio.sample_rate_hz} != classifier rate {self.cfg.sample_rate_hz}")
        return classifier_features(audio, self.cfg.frontend, lowpass).values

    def predict(self, windows) -> ClassifierOutput:
        """Logits for a window or a list of windows.

        Windows run one at a time so a window's scores never depend on what
        it was batched with.
        """
        if isinstance(windows, AudioBuffer):
            windows = [windows]
        rows = []
        with ad.no_grad():
            for w in windows:
                out = self.forward(self.features(w)[None])
                rows.append({h: t.data[0].astype(np.float64) for h, t in out.items()})
        return ClassifierOutput({h: np.stack([r[h] for r in rows]) for h in HEADS})

    def species_probabilities(self, windows) -> np.ndarray:
        z = self.predict(windows).logits["species"]
        return 1.0 / (1.0 + np.exp(-z))

    def metadata(self) -> dict:
        return {"kind": "classifier", "config": self.cfg.to_dict(), "head_sizes": self.head_sizes,
                "species": list(self.species_names)}

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.metadata()
        if extra:
            meta.update(extra)
        ad.save(path, self.store, meta)

    @classmethod
    def load(cls, path) -> "Classifier":
        store, meta = ad.load(path)
        if meta.get("kind") != "classifier":
            raise ValueError(f"{path}: not a classifier checkpoint")
        return cls(ClassifierConfig.from_dict(meta["config"]), meta["head_sizes"], meta["species"], store=store)


class ClassifierEnsemble:
    def __init__(self, members: list[Classifier]):
        if not members:
            raise ValueError("ensemble needs at least one member")
        names = {m.species_names for m in members}
        if len(names) != 1:
            raise ValueError("ensemble members disagree on species")
        self.members = members

    @property
    def sample_rate_hz(self) -> int:
        return self.members[0].cfg.sample_rate_hz

    @property
    def species_names(self):
        return self.members[0].species_names

    def species_probabilities(self, windows) -> np.ndarray:
        return ensemble_logit_average(np.stack([m.species_probabilities(windows) for m in self.members]))

    @classmethod
    def load(cls, paths) -> "ClassifierEnsemble":
        return cls([Classifier.load(p) for p in paths])


# ---------------------------------------------------------------- training

@dataclass
class ClassifierTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 0.01
    n_models: int = 3
    seed: int = 0
    checkpoint_every: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierTrainConfig":
        d = dict(d)
        aug = AugmentConfig.from_dict(d.pop("augment", {}))
        return cls(augment=aug, **d)


def load_clips(records: list[ManifestRecord], taxonomy: Taxonomy) -> list[LabeledClip]:
    check_manifest(records, taxonomy)
    clips = []
    for r in records:
        if not Path(r.path).exists():
            raise DatasetError(f"missing audio file {r.path}")
        clips.append(LabeledClip(read_wav(r.path), r.labels))
    return clips


def make_batch(model: Classifier, clips, noise_pool, taxonomy: Taxonomy, batch_size: int,
               aug: AugmentConfig, rng) -> tuple[np.ndarray, HeadTargets]:
    feats, targets = [], []
    n_ch = model.cfg.frontend.n_channels
    for _ in range(batch_size):
        clip = clips[int(rng.integers(len(clips)))]
        ex = augment_example(clip, clips, noise_pool, rng, aug)
        lowpass = draw_lowpass(rng, n_ch, aug.lowpass_slope_range) if rng.random() < aug.p_lowpass else None
        feats.append(model.features(ex.audio, lowpass))
        targets.append(head_targets(ex.labels, taxonomy))
    return np.stack(feats), stack_targets(targets)


def train_one(clips, noise_pool, taxonomy: Taxonomy, cfg: ClassifierConfig, tcfg: ClassifierTrainConfig,
              seed: int, log=None, out_path=None) -> tuple[Classifier, list[float]]:
    model = Classifier.for_taxonomy(cfg, taxonomy, seed=seed)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(1, tcfg.steps + 1):
        x, tg = make_batch(model, clips, noise_pool, taxonomy, tcfg.batch_size, tcfg.augment, rng)
        model.store.zero_grad()
        loss = taxonomic_loss(model.forward(x), tg, cfg.head_weight, cfg.detection_weight, cfg.label_smoothing)
        loss.backward()
        adam_step(model.store, lr=tcfg.learning_rate)
        losses.append(loss.item())
        if log is not None:
            log.write(json.dumps({"seed": seed, "step": step, "loss": losses[-1]}) + "\n")
        if out_path and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            model.save(Path(str(out_path).replace(".ckpt", f"_step{step:06d}.ckpt")))
    return model, losses


def train_classifier(clips, noise_pool, taxonomy: Taxonomy, cfg: ClassifierConfig | None = None,
                     tcfg: ClassifierTrainConfig | None = None, out_dir=None,
                     log_path=None) -> tuple[ClassifierEnsemble, list[list[float]]]:
    """Train ``n_models`` classifiers from scratch with seeds seed, seed+1, ..."""
    cfg = cfg or ClassifierConfig()
    tcfg = tcfg or ClassifierTrainConfig()
    tcfg.augment.check_noise_pool(noise_pool)
    for c in clips:
        for code in (*c.labels.foreground, *c.labels.background):
            if code not in taxonomy.rows:
                raise DatasetError(f"label {code!r} not in taxonomy")
    members, curves = [], []
    log = open(log_path, "w") if log_path else None
    try:
        for i in range(tcfg.n_models):
            out_path = Path(out_dir) / f"classifier_{i}.ckpt" if out_dir else None
            model, losses = train_one(clips, noise_pool, taxonomy, cfg, tcfg, tcfg.seed + i, log, out_path)
            if out_path:
                model.save(out_path, {"seed": tcfg.seed + i})
            members.append(model)
            curves.append(losses)
    finally:
        if log:
            log.close()
    return ClassifierEnsemble(members), curves
