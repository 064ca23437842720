"""Run configuration: one JSON document, schema-validated, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .data import DatasetSpec
from .evolution import EvolutionConfig
from .morphisms import MorphConfig
from .netgraph import TrainConfig
from .tensor import SgdrSchedule


class ConfigError(ValueError):
    pass


def load_schema(name: str) -> dict:
    text = resources.files("morphnas").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc, schema_name: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{schema_name}: {where}: {exc.message}") from exc


@dataclass
class ModelConfig:
    stem: int = 8
    block: int = 16
    final: int = 32
    init_seed: int | None = None


@dataclass
class TrainingConfig:
    batch_size: int = 32
    l_max: float = 0.05
    t0: int = 1
    t_mult: int = 2
    weight_decay: float = 1e-4
    restart_per_burst: bool = False
    check_finite: bool = False

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            self.batch_size, SgdrSchedule(self.l_max, self.t0, self.t_mult),
            self.weight_decay, self.restart_per_burst, self.check_finite,
        )


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"
    output_dir: str = "runs/search"
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    evolution: dict = field(default_factory=dict)
    morph: dict = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def evolution_config(self) -> EvolutionConfig:
        return EvolutionConfig(seed=self.seed, **self.evolution)

    def morph_config(self) -> MorphConfig:
        kw = dict(self.morph)
        if "ops" in kw:
            kw["ops"] = tuple(kw["ops"])
        return MorphConfig(**kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        validate(doc, "config")
        try:
            cfg = cls(
                seed=doc.get("seed", 0),
                precision=doc.get("precision", "float32"),
                output_dir=doc.get("output_dir", "runs/search"),
                model=ModelConfig(**doc.get("model", {})),
                dataset=DatasetSpec(**doc.get("dataset", {})),
                evolution=dict(doc.get("evolution", {})),
                morph=dict(doc.get("morph", {})),
                training=TrainingConfig(**doc.get("training", {})),
            )
            cfg.evolution_config()
            cfg.morph_config()
            cfg.training.to_train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """``section.key=value`` overrides; values are parsed as JSON when possible."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = doc
        parts = key.split(".")
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = value
    return doc


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_json(apply_overrides(doc, overrides or []))
