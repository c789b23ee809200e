"""Taxonomy, label sets and the manifest/taxonomy file formats."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioBuffer

LEVELS = ("genus", "family", "order")


class DatasetError(ValueError):
    pass


@dataclass
class Taxonomy:
    """Species -> (genus, family, order), with per-level index tables.

    ``species`` lists every known species in file order. ``targets`` is the
    subset the species head predicts; other species still count towards
    the genus/family/order heads and bird detection.
    """

    rows: dict[str, tuple[str, str, str]]
    targets: tuple[str, ...] = ()

    def __post_init__(self):
        self.species = tuple(self.rows)
        self.targets = tuple(self.targets) or self.species
        unknown = [t for t in self.targets if t not in self.rows]
        if unknown:
            raise DatasetError(f"target species missing from taxonomy: {unknown}")
        self.index = {"species": {s: i for i, s in enumerate(self.targets)}}
        for lvl, col in zip(LEVELS, range(3)):
            names: dict[str, int] = {}
            for s in self.species:
                names.setdefault(self.rows[s][col], len(names))
            self.index[lvl] = names

    def size(self, level: str) -> int:
        return len(self.index[level])

    def names(self, level: str) -> list[str]:
        return list(self.index[level])

    def rollup(self, code: str) -> dict[str, str]:
        if code not in self.rows:
            raise DatasetError(f"species {code!r} not in taxonomy")
        return dict(zip(LEVELS, self.rows[code]))

    @classmethod
    def read(cls, path, targets=None) -> "Taxonomy":
        rows = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            missing = {"species_code", *LEVELS} - set(reader.fieldnames or [])
            if missing:
                raise DatasetError(f"{path}: taxonomy file lacks columns {sorted(missing)}")
            for r in reader:
                code = r["species_code"].strip()
                if code in rows:
                    raise DatasetError(f"{path}: duplicate species {code!r}")
                rows[code] = (r["genus"].strip(), r["family"].strip(), r["order"].strip())
        return cls(rows, tuple(targets or ()))

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("species_code\tgenus\tfamily\torder\n")
            for code, (g, f, o) in self.rows.items():
                fh.write(f"{code}\t{g}\t{f}\t{o}\n")


@dataclass(frozen=True)
class LabelSet:
    foreground: frozenset[str] = frozenset()
    background: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "foreground", frozenset(self.foreground))
        object.__setattr__(self, "background", frozenset(self.background) - frozenset(self.foreground))

    def union(self, other: "LabelSet") -> "LabelSet":
        return LabelSet(self.foreground | other.foreground, self.background | other.background)

    def rollups(self, taxonomy: Taxonomy) -> dict[str, set[str]]:
        out = {lvl: set() for lvl in LEVELS}
        for code in self.foreground:
            for lvl, name in taxonomy.rollup(code).items():
                out[lvl].add(name)
        return out


@dataclass(frozen=True, eq=False)
class LabeledClip:
    audio: AudioBuffer
    labels: LabelSet = field(default_factory=LabelSet)

    @property
    def bird_present(self) -> bool:
        return bool(self.labels.foreground)


@dataclass
class HeadTargets:
    """Per-head targets and loss masks for one clip."""

    targets: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]


def head_targets(labels: LabelSet, taxonomy: Taxonomy) -> HeadTargets:
    """Multi-hot targets per head; background species are masked out.

    A background species also masks its genus/family/order unless the
    foreground already makes that taxon positive.
    """
    targets, masks = {}, {}
    for lvl in ("species", *LEVELS):
        targets[lvl] = np.zeros(taxonomy.size(lvl))
        masks[lvl] = np.ones(taxonomy.size(lvl))
    for code in labels.foreground:
        if code in taxonomy.index["species"]:
            targets["species"][taxonomy.index["species"][code]] = 1.0
        for lvl, name in taxonomy.rollup(code).items():
            targets[lvl][taxonomy.index[lvl][name]] = 1.0
    for code in labels.background:
        if code in taxonomy.index["species"]:
            masks["species"][taxonomy.index["species"][code]] = 0.0
        if code in taxonomy.rows:
            for lvl, name in taxonomy.rollup(code).items():
                i = taxonomy.index[lvl][name]
                if targets[lvl][i] == 0.0:
                    masks[lvl][i] = 0.0
    targets["detection"] = np.array([1.0 if labels.foreground else 0.0])
    masks["detection"] = np.ones(1)
    return HeadTargets(targets, masks)


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestRecord:
    path: str
    foreground: tuple[str, ...] = ()
    background: tuple[str, ...] = ()

    @property
    def labels(self) -> LabelSet:
        return LabelSet(frozenset(self.foreground), frozenset(self.background))


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"path": r.path, "foreground": list(r.foreground),
                                 "background": list(r.background)}) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    """JSON-lines records; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec_path = Path(d["path"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{n}: bad manifest record ({exc})") from exc
            if not rec_path.is_absolute():
                rec_path = path.parent / rec_path
            out.append(ManifestRecord(str(rec_path), tuple(d.get("foreground", ())), tuple(d.get("background", ()))))
    return out


def check_manifest(records, taxonomy: Taxonomy) -> None:
    for r in records:
        for code in (*r.foreground, *r.background):
            if code not in taxonomy.rows:
                raise DatasetError(f"{r.path}: label {code!r} not in taxonomy")


def read_path_list(path) -> list[str]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            p = Path(line)
            out.append(str(p if p.is_absolute() else path.parent / p))
    return out


def write_path_list(path, paths) -> None:
    Path(path).write_text("".join(f"{p}\n" for p in paths))
