"""Experiment configuration: one INI section per component, flat keys."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SynthTaskSpec
from .decode import DecodeConfig
from .errors import ConfigError, ContractError
from .glm import GlancingConfig
from .model import PRESETS, ModelConfig, preset

OBJECTIVES = ("glm", "nat", "mlm_ablation", "glat_ctc", "ctc", "at")
LR_POLICIES = ("inverse_sqrt", "linear", "constant")


@dataclass
class TaskConfig:
    vocab_size: int = 32
    min_len: int = 3
    max_len: int = 12
    transformation: str = "local_reorder"
    seed: int = 0
    n_train: int = 5000
    n_valid: int = 200
    n_test: int = 500
    train_prefix: str = ""      # read corpus files instead of generating
    valid_prefix: str = ""
    distill_teacher: str = ""   # AT checkpoint used to distil the training targets

    def spec(self) -> SynthTaskSpec:
        return SynthTaskSpec(self.vocab_size, self.min_len, self.max_len, self.transformation, self.seed)


@dataclass
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_policy: str = "inverse_sqrt"
    lr_end: float = 1e-5
    warmup_steps: int = 200
    total_steps: int = 3000
    batch_size: int = 64


@dataclass
class RunConfig:
    seed: int = 1
    log_interval: int = 50
    valid_interval: int = 250
    keep_best: int = 5
    average_best: bool = True


@dataclass
class ExperimentConfig:
    objective: str = "glm"
    preset: str = "toy"
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    glancing: GlancingConfig = field(default_factory=GlancingConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    SECTIONS = ("model", "task", "glancing", "optim", "run", "decode")

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.optim.lr_policy not in LR_POLICIES:
            raise ConfigError(f"lr_policy must be one of {LR_POLICIES}")
        if self.optim.total_steps < 1 or self.optim.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if self.run.keep_best < 1:
            raise ConfigError("keep_best must be at least 1")
        if self.model.vocab_size != self.task.vocab_size:
            raise ConfigError(f"model vocab {self.model.vocab_size} != task vocab {self.task.vocab_size}")
        if self.task.max_len > self.model.max_len:
            raise ConfigError("task max_len exceeds the model's max_len")
        try:
            self.model.validate()
            self.glancing.validate()
            self.task.spec().validate()
            self.decode.validate()
        except ContractError as e:
            raise ConfigError(str(e)) from e
        if self.objective in ("glat_ctc", "ctc") and self.decode.mode not in ("ctc",):
            raise ConfigError("CTC objectives decode with mode=ctc")
        if self.objective == "at" and self.decode.mode != "at_greedy":
            raise ConfigError("the at objective decodes with mode=at_greedy")

    # -- serialisation --------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {"objective": self.objective, "preset": self.preset}
        for sec in self.SECTIONS:
            cp[sec] = {f.name: str(getattr(getattr(self, sec), f.name))
                       for f in fields(getattr(self, sec))}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        exp = cp["experiment"] if cp.has_section("experiment") else {}
        name = exp.get("preset", "toy")
        cfg = cls(objective=exp.get("objective", "glm"), preset=name, model=preset(name))
        for sec in cls.SECTIONS:
            if cp.has_section(sec):
                setattr(cfg, sec, fill_section(getattr(cfg, sec), dict(cp[sec])))
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with overrides given as ``section__key=value`` or top-level keys."""
        new = ExperimentConfig.from_ini(self.to_ini())
        for key, value in dotted.items():
            if "__" in key:
                sec, k = key.split("__", 1)
                setattr(new, sec, fill_section(getattr(new, sec), {k: value}))
            else:
                setattr(new, key, value)
        return new


def _coerce(tp, raw):
    if not isinstance(raw, str):
        return raw
    if tp in (bool, "bool"):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if tp in (int, "int"):
        return int(raw)
    if tp in (float, "float"):
        return float(raw)
    return raw


def fill_section(obj, values: dict):
    """Copy of a config dataclass with string values coerced to the field types."""
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown key {k!r} for {type(obj).__name__}")
        try:
            updates[k] = _coerce(known[k].type, v)
        except ValueError as e:
            raise ConfigError(f"{type(obj).__name__}.{k}: {e}") from e
    return dataclasses.replace(obj, **updates)


def default_config(objective: str = "glm", **overrides) -> ExperimentConfig:
    """Desk-scale defaults for an objective, with ``section__key`` overrides."""
    cfg = ExperimentConfig(objective=objective)
    if objective in ("glat_ctc", "ctc"):
        cfg.decode.mode = "ctc"
    elif objective == "at":
        cfg.decode.mode = "at_greedy"
        cfg.model.causal = True
    if objective == "mlm_ablation":
        cfg.glancing.selection_strategy = "uniform_mlm"
        cfg.glancing.input_mode = "mask_token"
    if objective in ("nat", "ctc"):
        cfg.glancing.ratio = 0.0
    return cfg.replace(**overrides) if overrides else cfg
