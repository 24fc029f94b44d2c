"""Run configuration: one JSON document, sectioned, with unknown keys rejected.

Schema (every key optional; defaults shown by ``python -m cprl config``)::

    {
      "data":     {"scenes", "levels", "size", "seed", "label_noise", "split_seed", "source", "split_file"},
      "model":    {"kind": "baseline" | "cprl", "widths": [c1, c2]},
      "cprl":     {"channels", "bias", "tau", "s_branch"},
      "train":    {"epochs", "batch_size", "lr", "adversary_lr", "betas", "eps", "weight_decay",
                   "grad_clip", "seed", "pns", "objective", "sn_iters", "schedule"},
      "attack":   {"family", "epsilon", "step_size", "steps", "random_start", "seed"},
      "analysis": {"epsilon_grid", "landscape_extent", "landscape_resolution", "n_images",
                   "landscape_seed", "dump_stage", "batch_size"},
      "output":   {"root"}
    }
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

from .attacks import AttackSpec
from .layer import CprlConfig
from .training import TrainConfig

OUTPUT_ENV = "CPRL_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    scenes: int = 40
    levels: int = 5
    size: int = 32
    seed: int = 0
    label_noise: float = 0.0
    split_seed: int = 0
    source: Optional[str] = None      # archive/manifest directory; generated when None
    split_file: Optional[str] = None  # reuse a saved split


@dataclass
class ModelConfig:
    kind: str = "cprl"
    widths: List[int] = field(default_factory=lambda: [8, 16])

    def __post_init__(self):
        if self.kind not in ("baseline", "cprl"):
            raise ValueError(f"model kind must be 'baseline' or 'cprl', got {self.kind!r}")


@dataclass
class AnalysisConfig:
    epsilon_grid: List[float] = field(default_factory=lambda: [0.0, 0.5 / 255, 1.0 / 255, 2.0 / 255, 4.0 / 255])
    landscape_extent: float = 1.0
    landscape_resolution: int = 11
    landscape_seed: int = 0
    n_images: int = 10
    dump_stage: str = "pooled"
    batch_size: int = 64


@dataclass
class OutputConfig:
    root: Optional[str] = None


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "cprl": CprlConfig,
    "train": TrainConfig,
    "attack": AttackSpec,
    "analysis": AnalysisConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    cprl: CprlConfig = field(default_factory=CprlConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {unknown}")
        parts = {}
        for name, section in SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(section)}
            bad = sorted(set(values) - allowed)
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {bad}")
            try:
                parts[name] = section(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from None
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def override(self, **changes) -> "RunConfig":
        """Copy with ``section__key=value`` overrides applied and re-validated."""
        raw = copy.deepcopy(self.to_dict())
        for key, value in changes.items():
            if value is None:
                continue
            section, _, name = key.partition("__")
            if section not in raw or name not in raw[section]:
                raise ConfigError(f"unknown override {key!r}")
            raw[section][name] = value
        return RunConfig.from_dict(raw)

    def hash(self) -> str:
        """Short content hash of the effective config (output root excluded)."""
        d = self.to_dict()
        d.pop("output", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def output_root(self) -> str:
        return self.output.root or os.environ.get(OUTPUT_ENV) or "runs"
