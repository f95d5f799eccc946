"""Run configuration: the JSON document read by ``nasf run``.

Sections are ``ga``, ``eval`` and ``data`` plus a top-level ``mode``. Unknown
keys anywhere are rejected so typos fail loudly instead of silently using a
default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from nasf import curator
from nasf.evaluator import EvaluationConfig
from nasf.search.ga import GAConfig


class ConfigError(ValueError):
    pass


SOURCES = ("synthetic", "cifar10")
CIFAR_SHAPE = (3, 32, 32)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    data_dir: str | None = None
    classes: int = 4
    image_shape: tuple[int, int, int] = (3, 8, 8)
    # synthetic generator only
    n_train: int = 512
    n_test: int = 256
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(d) for d in self.image_shape))
        if self.source not in SOURCES:
            raise ValueError(f"data.source must be one of {SOURCES}, got {self.source!r}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError(f"data.image_shape must be three positive ints, got {self.image_shape}")
        if self.source == "cifar10":
            if not self.data_dir:
                raise ValueError("data.data_dir is required for cifar10")
            if self.classes != 10 or self.image_shape != CIFAR_SHAPE:
                raise ValueError("cifar10 has 10 classes of shape [3, 32, 32]")
        elif self.classes < 2:
            raise ValueError("data.classes must be >= 2")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("data.n_train and data.n_test must be >= 1")
        if self.noise < 0:
            raise ValueError("data.noise must be >= 0")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["image_shape"] = list(self.image_shape)
        return doc

    def load(self) -> tuple[curator.Dataset, curator.Dataset]:
        if self.source == "cifar10":
            return curator.load_cifar10(self.data_dir)
        return curator.synthetic_dataset(self.seed, self.n_train, self.n_test, self.classes,
                                         self.image_shape, self.noise)


@dataclass(frozen=True)
class RunConfig:
    ga: GAConfig = field(default_factory=GAConfig)
    eval: EvaluationConfig = field(default_factory=EvaluationConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def mode(self) -> str:
        return self.ga.mode

    def to_dict(self) -> dict:
        ga = asdict(self.ga)
        mode = ga.pop("mode")
        return {"ga": ga, "eval": self.eval.to_dict(), "data": self.data.to_dict(), "mode": mode}

    def with_mode(self, mode: str) -> "RunConfig":
        ga = asdict(self.ga)
        ga["mode"] = mode
        return RunConfig(GAConfig(**ga), self.eval, self.data)


def _section(cls, doc, name: str, exclude=()):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def parse_config(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - {"ga", "eval", "data", "mode"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    ga_doc = dict(doc.get("ga") or {})
    if not isinstance(doc.get("ga", {}), dict):
        raise ConfigError("section 'ga' must be an object")
    unknown = sorted(set(ga_doc) - ({f.name for f in fields(GAConfig)} - {"mode"}))
    if unknown:
        raise ConfigError(f"unknown key(s) in 'ga': {', '.join(unknown)}")
    if "mode" in doc:
        ga_doc["mode"] = doc["mode"]
    return RunConfig(_section(GAConfig, ga_doc, "ga"),
                     _section(EvaluationConfig, doc.get("eval"), "eval"),
                     _section(DataConfig, doc.get("data"), "data"))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc)
