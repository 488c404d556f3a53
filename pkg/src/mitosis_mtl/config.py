"""Experiment configuration: a flat ``section.key = value`` text file.

Example::

    name = toy
    output_dir = runs
    data.synthetic = true
    data.n_domains = 7
    data.seed = 1
    model.input_size = 64
    train.epochs = 50
    train.learning_rate = 1e-3
    inference.tta = true

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .augmentation import AugConfig
from .data import SynthSpec
from .errors import InvalidConfig, MissingFile
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig

OUTPUT_ENV = "MITOSIS_MTL_OUTPUT"
DEFAULT_OUTPUT = "runs"


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    synthetic: bool = True
    n_domains: int = 7
    per_domain: int = 40
    atypical_ratio: float = 0.25
    patch_size: int = 64
    seed: int = 0

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.n_domains, self.per_domain, self.atypical_ratio, self.patch_size)


@dataclass(frozen=True)
class InferenceConfig:
    tta: bool = True
    batch_size: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = field(default_factory=default_output_dir)
    jobs: int = 1
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    aug: AugConfig = AugConfig()
    loss: LossConfig = LossConfig()
    inference: InferenceConfig = InferenceConfig()

    @property
    def experiment_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    def validate(self) -> None:
        if not self.name or "/" in self.name:
            raise InvalidConfig(f"experiment name must be a non-empty path component, got {self.name!r}")
        if self.jobs < 1:
            raise InvalidConfig(f"jobs must be >= 1, got {self.jobs}")
        if self.data.synthetic:
            self.data.synth_spec().validate()
            if self.data.patch_size != self.model.input_size:
                raise InvalidConfig(
                    f"data.patch_size {self.data.patch_size} != model.input_size {self.model.input_size}"
                )
        elif not self.data.manifest:
            raise InvalidConfig("data.manifest is required when data.synthetic = false")
        elif not Path(self.data.manifest).is_file():
            raise MissingFile(f"manifest not found: {self.data.manifest}")
        self.model.validate()
        self.train.validate()
        if self.inference.batch_size < 1:
            raise InvalidConfig(f"inference.batch_size must be >= 1, got {self.inference.batch_size}")
        if self.aug.sigma_alpha < 0 or self.aug.sigma_beta < 0:
            raise InvalidConfig("augmentation sigmas must be nonnegative")
        if self.loss.eps_dice <= 0 or self.loss.eps_prob <= 0:
            raise InvalidConfig("loss epsilons must be positive")

    def to_text(self, runtime: bool = True) -> str:
        """Config file text; ``runtime=False`` drops keys that cannot change results."""
        lines = [f"name = {self.name}"]
        if runtime:
            lines += [f"output_dir = {self.output_dir}", f"jobs = {self.jobs}"]
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                lines.append(f"{section}.{f.name} = {_format(getattr(getattr(self, section), f.name))}")
        return "\n".join(lines) + "\n"


SECTIONS = ("data", "model", "train", "aug", "loss", "inference")
TOP_LEVEL = ("name", "output_dir", "jobs")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {key}: {exc}") from None
    return raw


def parse_assignments(lines: Iterable[str], source: str = "<overrides>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidConfig(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(cfg: ExperimentConfig, values: Mapping[str, str]) -> ExperimentConfig:
    top: dict = {}
    per_section: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in values.items():
        if key in TOP_LEVEL:
            top[key] = _coerce(key, raw, getattr(cfg, key))
            continue
        section, _, name = key.partition(".")
        if section not in per_section:
            raise InvalidConfig(f"unknown config key {key!r}")
        current = getattr(cfg, section)
        if name not in {f.name for f in dataclasses.fields(current)}:
            raise InvalidConfig(f"unknown config key {key!r}")
        per_section[section][name] = _coerce(key, raw, getattr(current, name))
    updated = {s: dataclasses.replace(getattr(cfg, s), **kv) for s, kv in per_section.items() if kv}
    return dataclasses.replace(cfg, **top, **updated)


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Defaults, then the file, then ``overrides`` (flags win)."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"config file not found: {path}")
        cfg = apply_overrides(cfg, parse_assignments(path.read_text().splitlines(), str(path)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
