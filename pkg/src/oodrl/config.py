"""Experiment configuration: INI-style text with one section per module.

Keys may also appear before any section header; they are routed to the
section that owns them. Unknown keys, keys in the wrong section, type
mismatches and invariant violations raise :class:`ConfigError` naming the
offending key.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from oodrl import gridworld
from oodrl.agent import TrainConfig
from oodrl.models import ModelKind

ROOT = "__root__"
RUNTIME_KEYS = {("experiment", "out_dir"), ("experiment", "jobs")}


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ExperimentSection(_Section):
    model: Literal["mcd", "mccd", "boot", "bootp"] = "boot"
    seed: int = Field(0, ge=0, lt=2**64)
    out_dir: str = "runs/oodrl"
    jobs: int = Field(1, ge=1)


class ModelSection(_Section):
    T: int = Field(10, ge=1)
    K: int = Field(10, ge=2)
    beta: float = Field(1.0, ge=0.0)
    keep_prob: float = Field(0.95, gt=0.0, le=1.0)
    hidden: int = Field(64, ge=1)
    temperature: float = Field(0.1, gt=0.0)
    init_drop_prob: float = Field(0.1, gt=0.0, lt=1.0)
    weight_reg: float = Field(1e-6, ge=0.0)
    dropout_reg: float = Field(1e-5, ge=0.0)
    nll_beta: float = Field(1.0, ge=0.0, le=1.0)


class AgentSection(_Section):
    episodes: int = Field(10000, ge=1)
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    lr: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(32, ge=1)
    replay_capacity: int = Field(10000, ge=1)
    warmup_transitions: int = Field(500, ge=0)
    target_sync_interval: int = Field(100, ge=1)
    epsilon_start: float = Field(1.0, ge=0.0, le=1.0)
    epsilon_end: float = Field(0.05, ge=0.0, le=1.0)
    epsilon_decay_episodes: int = Field(2000, ge=0)
    snapshot_interval: int = Field(100, ge=1)
    mask_prob: float = Field(0.2, ge=0.0, le=1.0)
    ensemble_epsilon: bool = True


class GridworldSection(_Section):
    width: int = Field(12, ge=2)
    height: int = Field(4, ge=1)
    wall_x: int = 6
    gap_y: int = 1
    max_steps: int = Field(100, ge=1)
    step_reward: float = -1.0
    goal_reward: float = 100.0


class EvaluationSection(_Section):
    eval_runs: int = Field(30, ge=1)
    threshold_quantile: float = Field(0.95, gt=0.0, le=1.0)


SECTIONS = {
    "experiment": ExperimentSection,
    "model": ModelSection,
    "agent": AgentSection,
    "gridworld": GridworldSection,
    "evaluation": EvaluationSection,
}
KEY_OWNER = {key: name for name, cls in SECTIONS.items() for key in cls.model_fields}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSection = ExperimentSection()
    model: ModelSection = ModelSection()
    agent: AgentSection = AgentSection()
    gridworld: GridworldSection = GridworldSection()
    evaluation: EvaluationSection = EvaluationSection()

    # ------------------------------------------------------------ module views

    def model_kind(self) -> ModelKind:
        return ModelKind(tag=self.experiment.model.upper(), **self.model.model_dump())

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.experiment.seed, **self.agent.model_dump())

    def grid_spec(self, variant: str = "train") -> gridworld.GridSpec:
        g = self.gridworld
        return gridworld.make_env(variant, width=g.width, height=g.height, wall_x=g.wall_x, gap_y=g.gap_y,
                                  max_steps=g.max_steps, step_reward=g.step_reward, goal_reward=g.goal_reward)

    def check(self) -> "ExperimentConfig":
        """Build every module object once so cross-field invariants surface here."""
        for section, build in (("model", self.model_kind), ("agent", self.train_config),
                               ("gridworld", lambda: (self.grid_spec("train"), self.grid_spec("mirror")))):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(f"[{section}] {exc}") from exc
        return self

    def with_overrides(self, **flat) -> "ExperimentConfig":
        """Copy with ``key=value`` overrides (keys as in the config file); ``None`` values are ignored."""
        data = self.model_dump()
        for key, value in flat.items():
            if value is None:
                continue
            if key not in KEY_OWNER:
                raise ConfigError(f"unknown key {key!r}")
            data[KEY_OWNER[key]][key] = value
        return _validate(data)

    def config_hash(self) -> str:
        return hashlib.sha256(serialize(self, runtime=False).encode()).hexdigest()


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: ExperimentConfig, runtime: bool = True) -> str:
    """Canonical text form; ``runtime=False`` omits keys that cannot affect results."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        values = getattr(cfg, name).model_dump()
        parser[name] = {k: _format(v) for k, v in values.items() if runtime or (name, k) not in RUNTIME_KEYS}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _validate(data: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"])
        raise ConfigError(f"{key}: {err['msg']}") from exc
    return cfg.check()


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a config document; missing keys take defaults."""
    stripped = [ln.strip() for ln in text.splitlines()]
    first = next((ln for ln in stripped if ln and not ln.startswith(("#", ";"))), "")
    if not first.startswith("["):
        text = f"[{ROOT}]\n" + text
    parser = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    data: dict[str, dict] = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section != ROOT and section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser.items(section):
            owner = KEY_OWNER.get(key)
            if owner is None:
                raise ConfigError(f"unknown key {key!r}")
            if section != ROOT and owner != section:
                raise ConfigError(f"key {key!r} belongs in [{owner}], not [{section}]")
            if key in data[owner]:
                raise ConfigError(f"duplicate key {key!r}")
            value = value.strip().strip('"')
            data[owner][key] = value.lower() if key == "model" else value
    return _validate(data)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
