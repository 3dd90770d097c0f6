"""Run configuration: nested dataclasses loaded from strict JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

from .basedet import DetectorConfig
from .evalkit import EvalSettings
from .nessnet import TrainConfig
from .stability import StabilityConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    input: str | None = None
    output: str | None = None
    model: str | None = None


@dataclass
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: Paths = field(default_factory=Paths)
    # keypoints per image
    n: int = 1024
    # master seed; replaces every section seed
    seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        from dataclasses import replace

        return replace(
            self,
            seed=seed,
            stability=replace(self.stability, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"]["kind"] = self.detector.kind.value
        return d


_SECTIONS = {"detector": DetectorConfig, "stability": StabilityConfig, "train": TrainConfig,
             "eval": EvalSettings, "paths": Paths}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    known = set(_SECTIONS) | {"n", "seed"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs = {name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    n = data.get("n", 1024)
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"n must be a positive integer, got {n!r}")
    cfg = RunConfig(n=n, **kwargs)
    return cfg.with_seed(int(data.get("seed", 0)))


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def default_config_text() -> str:
    return resources.files(__package__).joinpath("default_config.json").read_text(encoding="utf-8")


def default_config() -> RunConfig:
    return from_dict(json.loads(default_config_text()))
