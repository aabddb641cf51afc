"""Run configuration: one JSON document, validated against the shipped schema."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .data import ManifestCorpus, SyntheticCorpus
from .encoder import Encoder, EncoderConfig, build_encoder, load_encoder, preset
from .exceptions import ConfigurationError
from .features import read_manifest
from .losses import DistillConfig

SYNTHETIC_DEFAULTS = {
    "class_seed": 0, "num_utterances": 64, "min_frames": 320, "max_frames": 480, "feature_dim": 80,
    "num_classes": 4, "stack_factor": 2, "class_scale": 1.0, "noise": 1.0, "smoothing": 3,
    "min_segment": 20, "max_segment": 60,
}


def load_schema() -> dict:
    text = resources.files("colld").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def _pointer(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def validate_config(doc: Any) -> None:
    """Raise ConfigurationError naming the offending key on the first schema violation."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    err = jsonschema.exceptions.best_match(errors)
    path = list(err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            path.append(extra[0])
    elif err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        if missing:
            path.append(missing[0])
    raise ConfigurationError(f"invalid config: {err.message}", key=_pointer(path))


@dataclass
class EncoderSpec:
    preset: str
    seed: int
    overrides: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def config(self) -> EncoderConfig:
        return preset(self.preset, **self.overrides)

    def to_dict(self) -> dict:
        return {"preset": self.preset, "seed": self.seed, "overrides": dict(self.overrides),
                "checkpoint": self.checkpoint}


@dataclass
class RunConfig:
    seed: int
    steps: int
    output_dir: str
    teacher: EncoderSpec
    student: EncoderSpec
    distill: DistillConfig
    data: dict
    base_dir: str = "."

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: str = ".") -> "RunConfig":
        validate_config(doc)
        data = dict(doc["data"])
        if data["source"] == "synthetic":
            data = {**SYNTHETIC_DEFAULTS, **data}
        else:
            data.setdefault("stack_factor", 2)
        try:
            distill = DistillConfig.from_dict(doc.get("distill", {}))
        except ConfigurationError as exc:
            raise ConfigurationError(exc.message, key=f"distill.{exc.key}") from None
        cfg = cls(doc["seed"], doc["steps"], doc["output_dir"], EncoderSpec(**doc["teacher"]),
                  EncoderSpec(**doc["student"]), distill, data, base_dir)
        cfg.check()
        return cfg

    def check(self) -> None:
        for role in ("teacher", "student"):
            spec = getattr(self, role)
            try:
                spec.config()
            except ConfigurationError as exc:
                raise ConfigurationError(exc.message,
                                         key=f"{role}.overrides.{exc.key}" if exc.key else role) from None
        if self.steps > self.distill.total_steps:
            raise ConfigurationError(f"steps {self.steps} exceeds distill.total_steps {self.distill.total_steps}",
                                     key="steps")

    def to_dict(self) -> dict:
        """Fully resolved form; itself schema-valid and sufficient to rerun."""
        return {"seed": self.seed, "steps": self.steps, "output_dir": self.output_dir,
                "teacher": self.teacher.to_dict(), "student": self.student.to_dict(),
                "distill": self.distill.to_dict(), "data": dict(self.data)}

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def build_corpus(self):
        d = self.data
        if d["source"] == "synthetic":
            kwargs = {k: v for k, v in d.items() if k != "source"}
            return SyntheticCorpus(**kwargs)
        return ManifestCorpus(read_manifest(self.resolve_path(d["path"])), stack_factor=d["stack_factor"])

    def build_encoder(self, role: str) -> Encoder:
        spec: EncoderSpec = getattr(self, role)
        if spec.checkpoint:
            enc, _ = load_encoder(self.resolve_path(spec.checkpoint))
            want = spec.config()
            if enc.config.to_dict() | {"preset_name": None} != want.to_dict() | {"preset_name": None}:
                raise ConfigurationError(f"{role} checkpoint architecture differs from its preset and overrides",
                                         key=f"{role}.checkpoint")
            return enc
        return build_encoder(spec.config(), seed=spec.seed)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}", key="--config") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}", key="--config") from None
    return RunConfig.from_dict(doc, base_dir=str(path.parent))
