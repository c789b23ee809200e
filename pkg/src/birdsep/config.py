"""Global JSON configuration file.

Top-level keys (all optional; missing keys take the dataclass defaults):

    separator          SeparatorConfig fields
    separator_train    SeparatorTrainConfig fields
    classifier         ClassifierConfig fields, with a nested "frontend" object
                       (FrontendConfig fields, nested "pcen" for PcenParams)
    classifier_train   ClassifierTrainConfig fields, with a nested "augment"
                       object holding AugmentConfig fields
    activity           ActivityConfig fields
    synth              SynthConfig fields

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .activity import ActivityConfig
from .classifier import ClassifierConfig, ClassifierTrainConfig
from .mixit import SeparatorTrainConfig
from .separator import SeparatorConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


def _activity_from_dict(d: dict) -> ActivityConfig:
    d = dict(d)
    if "widths" in d:
        d["widths"] = tuple(d["widths"])
    return ActivityConfig(**d)


SECTIONS = {
    "separator": (SeparatorConfig, SeparatorConfig.from_dict),
    "separator_train": (SeparatorTrainConfig, SeparatorTrainConfig.from_dict),
    "classifier": (ClassifierConfig, ClassifierConfig.from_dict),
    "classifier_train": (ClassifierTrainConfig, ClassifierTrainConfig.from_dict),
    "activity": (ActivityConfig, _activity_from_dict),
    "synth": (SynthConfig, SynthConfig.from_dict),
}


@dataclass
class Config:
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    separator_train: SeparatorTrainConfig = field(default_factory=SeparatorTrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    classifier_train: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    activity: ActivityConfig = field(default_factory=ActivityConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        out = {}
        for name, (kind, parse) in SECTIONS.items():
            try:
                out[name] = parse(d.get(name, {}))
            except TypeError as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        return cls(**out)

    def to_dict(self) -> dict:
        return {f.name: asdict(getattr(self, f.name)) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return Config.from_dict(d)
