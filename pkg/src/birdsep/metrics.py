"""Ranking metrics for multi-label classification and SI-SNR based separation scores.

Ties in scores are broken by ascending index (example index for per-class
rankings, class index for per-example rankings), so every metric is a
deterministic function of the score order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .mixit import MAX_SOURCES, assignment_matrices

logger = logging.getLogger(__name__)

SI_SNR_EPS = 1e-12
AUC_CLAMP = 1e-6


@dataclass(frozen=True, eq=False)
class EvalMatrix:
    scores: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.ndim != 2 or scores.shape != labels.shape:
            raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D shapes")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be binary")
        names = tuple(self.class_names) or tuple(str(i) for i in range(scores.shape[1]))
        if len(names) != scores.shape[1]:
            raise ValueError("class_names length does not match the number of classes")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))
        object.__setattr__(self, "class_names", names)


@dataclass
class EvalReport:
    cmap: float
    lwlrap: float
    d_prime: float
    top1: float
    per_class_ap: dict[str, float] = field(default_factory=dict)
    min_count: int = 5
    mode: str | None = None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "cmap": self.cmap, "lwlrap": self.lwlrap, "d_prime": self.d_prime,
                "top1": self.top1, "min_count": self.min_count, "per_class_ap": self.per_class_ap}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def per_class_table(self) -> str:
        lines = ["class\tap"]
        lines += [f"{name}\t{ap:.10f}" for name, ap in self.per_class_ap.items()]
        return "\n".join(lines) + "\n"


def _descending(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-scores, kind="stable")


def average_precision(scores, labels) -> float:
    """Mean over positives of precision at that positive's rank.

    Accumulated as an exact rational and rounded once, so hand-checkable
    values such as 5/6 come out as the nearest double.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.sum() == 0:
        raise ValueError("average precision undefined without positives")
    ranked = labels[_descending(scores)]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    total = sum(Fraction(int(h), int(r)) for h, r in zip(hits[ranks - 1], ranks))
    return float(total / len(ranks))


def per_class_ap(ev: EvalMatrix, min_count: int = 5) -> dict[str, float]:
    out = {}
    for c, name in enumerate(ev.class_names):
        if ev.labels[:, c].sum() >= min_count:
            out[name] = average_precision(ev.scores[:, c], ev.labels[:, c])
    return out


def cmap(ev: EvalMatrix, min_count: int = 5) -> float:
    aps = per_class_ap(ev, min_count)
    if not aps:
        raise ValueError(f"no class has at least {min_count} positives")
    return float(np.mean(list(aps.values())))


def lwlrap(ev: EvalMatrix) -> float:
    """Label-weighted label-ranking average precision."""
    total = int(ev.labels.sum())
    if total == 0:
        raise ValueError("lwlrap undefined without positive labels")
    acc = 0.0
    for s, y in zip(ev.scores, ev.labels):
        if not y.any():
            continue
        ranked = y[_descending(s)]
        hits = np.cumsum(ranked)
        ranks = np.arange(1, ranked.size + 1)
        acc += float(np.sum((hits / ranks)[ranked == 1]))
    return acc / total


def auc(scores, labels) -> float:
    """ROC AUC (Mann-Whitney), ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def d_prime_from_auc(a: float) -> float:
    a = min(max(a, AUC_CLAMP), 1.0 - AUC_CLAMP)
    return float(math.sqrt(2.0) * ndtri(a))


def d_prime(ev: EvalMatrix, average: str = "micro") -> float:
    """sqrt(2) * probit(AUC); ``micro`` pools every (example, class) pair."""
    if average == "micro":
        return d_prime_from_auc(auc(ev.scores, ev.labels))
    if average == "macro":
        aucs = [auc(ev.scores[:, c], ev.labels[:, c]) for c in range(ev.labels.shape[1])
                if 0 < ev.labels[:, c].sum() < ev.labels.shape[0]]
        if not aucs:
            raise ValueError("no class has both positives and negatives")
        return d_prime_from_auc(float(np.mean(aucs)))
    raise ValueError(f"unknown average {average!r}")


def top1_precision(ev: EvalMatrix) -> float:
    has_pos = ev.labels.any(axis=1)
    if not has_pos.all():
        logger.info("top1_precision: %d examples without positives excluded", int((~has_pos).sum()))
    if not has_pos.any():
        raise ValueError("top-1 precision undefined: no example has a positive label")
    best = np.argmax(ev.scores[has_pos], axis=1)
    return float(np.mean(ev.labels[has_pos][np.arange(best.size), best] == 1))


def evaluate(ev: EvalMatrix, min_count: int = 5, mode: str | None = None) -> EvalReport:
    return EvalReport(cmap=cmap(ev, min_count), lwlrap=lwlrap(ev), d_prime=d_prime(ev),
                      top1=top1_precision(ev), per_class_ap=per_class_ap(ev, min_count),
                      min_count=min_count, mode=mode)


# ---------------------------------------------------------------- separation

def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def si_snr(ref, est, eps: float = SI_SNR_EPS) -> float:
    """Scale-invariant SNR in dB, clamped to +-10*log10(1/eps) (about 120 dB).

    ``eps`` is scaled by the estimate's energy, so the result is exactly
    invariant to rescaling either signal. A silent estimate scores the floor.
    """
    ref, est = _as_array(ref), _as_array(est)
    rr = float(np.dot(ref, ref))
    if rr == 0.0:
        raise ValueError("si_snr: reference has zero energy")
    ee = float(np.dot(est, est))
    if ee == 0.0:
        return 10.0 * math.log10(eps / (1.0 + eps))
    target = (np.dot(est, ref) / rr) * ref
    noise = est - target
    floor = eps * ee
    return 10.0 * math.log10((float(np.dot(target, target)) + floor) / (float(np.dot(noise, noise)) + floor))


def mom_si_snri(x1, x2, sources) -> float:
    """SI-SNR improvement of the best assignment of ``sources`` to (x1, x2)."""
    x1, x2 = _as_array(x1), _as_array(x2)
    S = np.asarray([_as_array(s) for s in sources])
    if S.shape[0] > MAX_SOURCES:
        raise ValueError(f"assignment enumeration limited to {MAX_SOURCES} sources")
    mom = x1 + x2
    baseline = 0.5 * (si_snr(x1, mom) + si_snr(x2, mom))
    best = -math.inf
    for A in assignment_matrices(S.shape[0]):
        e1, e2 = A[0] @ S, A[1] @ S
        best = max(best, 0.5 * (si_snr(x1, e1) + si_snr(x2, e2)))
    return best - baseline


def momi(examples, separated) -> float:
    """Mean SI-SNR improvement over mixtures of mixtures."""
    if len(examples) != len(separated):
        raise ValueError("one set of separated sources is needed per example")
    if not examples:
        raise ValueError("momi needs at least one example")
    return float(np.mean([mom_si_snri(ex.x1, ex.x2, s) for ex, s in zip(examples, separated)]))
