"""Run configuration: JSON loading with strict key checking, and seed streams."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .inference import InferenceConfig
from .model import ModelConfig
from .mosaic import MosaicConfig
from .seeding import STREAMS, SeedStreams  # noqa: F401
from .training import PretrainConfig, TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "mosaic": MosaicConfig,
    "inference": InferenceConfig,
}


class ConfigError(ValueError):
    pass


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mosaic: MosaicConfig = field(default_factory=MosaicConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def toy(cls, **kw) -> "RunConfig":
        cfg = cls(**kw)
        cfg.model = ModelConfig.toy()
        cfg.mosaic = MosaicConfig(output_size=64, blend_border_range=(2, 6))
        cfg.inference = InferenceConfig.toy()
        cfg.pretrain = PretrainConfig(mae_decoder_depth=2, mae_decoder_dim=32,
                                      mae_decoder_heads=4, learning_rate=1e-3, batch_size=8)
        cfg.train = TrainConfig(learning_rate=5e-4, batch_size=8)
        return cfg

    @classmethod
    def from_dict(cls, doc: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``doc`` on ``base`` (defaults if None); unknown keys are fatal."""
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        allowed = set(SECTIONS) | {"command", "seed", "paths"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level config keys {unknown}")
        cfg = base if base is not None else cls()
        for name, section_cls in SECTIONS.items():
            if name in doc:
                merged = dict(_to_jsonable(getattr(cfg, name)))
                if not isinstance(doc[name], dict):
                    raise ConfigError(f"{name}: expected an object")
                merged.update(doc[name])
                setattr(cfg, name, _build(section_cls, merged, name))
        if "seed" in doc:
            cfg.seed = int(doc["seed"])
        if "command" in doc:
            cfg.command = str(doc["command"])
        if "paths" in doc:
            cfg.paths = dict(doc["paths"])
        return cfg

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
        return cls.from_dict(doc, base)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def streams(self) -> SeedStreams:
        return SeedStreams(self.seed)
