"""Experiment configuration: TOML files, dotted-key overrides, strict validation."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .envs import DEFAULT_AGENTS, TASKS, Physics, make_task
from .policy import CONSTRAINT_MODES, PARAMETERIZATIONS

ALGORITHMS = ("ppo", "ddpg")


class ConfigError(ValueError):
    pass


@dataclass
class TaskConfig:
    name: str = "navigation"
    n_agents: int = 0                 # 0 picks the task default
    horizon: int = 100
    dt: float = 0.1
    drag: float = 0.25
    max_force: float = 1.0
    agent_radius: float = 0.05
    food_radius: float = 0.05
    grid_size: int = 20


@dataclass
class AlgorithmConfig:
    name: str = "ppo"
    centralized_critic: bool = False
    gamma: float = 0.99
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    max_grad_norm: float = 1.0
    lr_final_fraction: float = 1.0    # learning rates decay linearly to this fraction; 1 keeps them constant
    # on-policy
    gae_lambda: float = 0.9
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 512
    entropy_coef: float = 0.0
    # off-policy
    buffer_size: int = 100_000
    batch_size: int = 256
    tau_target: float = 0.005
    noise_std: float = 0.1
    noise_final_std: float = 0.0
    updates_per_iter: int = 100
    warmup_frames: int = 0


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    parameterization: str = "auto"   # auto: homogeneous sigma for ppo, deterministic for ddpg
    critic_hidden: list = field(default_factory=lambda: [64, 64])


@dataclass
class DicoConfig:
    mode: str = "equality"
    snd_des: float = 0.0
    tau: float = 0.01
    eps_floor: float = 1e-8
    bound_actions: bool = False
    overflow_penalty: bool = False
    overflow_weight: float = 1.0
    envelope_noise: float = 0.05      # slack on the soft-update tracking envelope


@dataclass
class RunConfig:
    seeds: list = field(default_factory=lambda: [0])
    frames: int = 360_000
    frames_per_iter: int = 6000
    out_dir: str = "runs/default"
    jobs: int = 1
    eval_episodes: int = 32
    save_checkpoints: bool = True


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dico: DicoConfig = field(default_factory=DicoConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # derived views
    @property
    def parameterization(self) -> str:
        if self.model.parameterization != "auto":
            return self.model.parameterization
        return "stochastic_homogeneous_sigma" if self.algorithm.name == "ppo" else "deterministic"

    @property
    def n_agents(self) -> int:
        return self.task.n_agents or DEFAULT_AGENTS[self.task.name]

    @property
    def n_envs(self) -> int:
        return self.run.frames_per_iter // self.task.horizon

    @property
    def n_iters(self) -> int:
        return self.run.frames // self.run.frames_per_iter

    def physics(self) -> Physics:
        t = self.task
        return Physics(dt=t.dt, drag=t.drag, max_force=t.max_force, agent_radius=t.agent_radius,
                       food_radius=t.food_radius, horizon=t.horizon)

    def make_task(self):
        kw = {"grid_size": self.task.grid_size} if self.task.name == "sampling" else {}
        return make_task(self.task.name, self.n_agents, self.physics(), **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()

    def with_overrides(self, overrides: dict[str, Any] | list[str]) -> "ExperimentConfig":
        data = self.to_dict()
        apply_overrides(data, overrides)
        return from_dict(data)


_SECTION_TYPES = {"task": TaskConfig, "algorithm": AlgorithmConfig, "model": ModelConfig,
                  "dico": DicoConfig, "run": RunConfig}


def _coerce(section: str, key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{section}.{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{section}.{key} must be a list")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{section}.{key} must be a string")
    return value


def from_dict(data: dict) -> ExperimentConfig:
    """Build and validate a config; unknown sections or keys are errors."""
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTION_TYPES.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        defaults = cls()
        known = {f.name for f in fields(cls)}
        bad = set(section) - known
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
        kwargs = {k: _coerce(name, k, v, getattr(defaults, k)) for k, v in section.items()}
        parts[name] = cls(**kwargs)
    cfg = ExperimentConfig(**parts)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    t, a, m, d, r = cfg.task, cfg.algorithm, cfg.model, cfg.dico, cfg.run
    if t.name not in TASKS:
        raise ConfigError(f"unknown task {t.name!r}; choose from {sorted(TASKS)}")
    if a.name not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {a.name!r}; choose from {ALGORITHMS}")
    if m.parameterization != "auto" and m.parameterization not in PARAMETERIZATIONS:
        raise ConfigError(f"unknown parameterization {m.parameterization!r}")
    if a.name == "ddpg" and cfg.parameterization != "deterministic":
        raise ConfigError("the off-policy trainer needs the deterministic parameterization")
    if a.name == "ppo" and cfg.parameterization == "deterministic":
        raise ConfigError("the on-policy trainer needs a stochastic parameterization")
    if d.mode not in CONSTRAINT_MODES:
        raise ConfigError(f"unknown constraint mode {d.mode!r}")
    if d.snd_des < 0:
        raise ConfigError("dico.snd_des must be nonnegative")
    if not 0.0 <= d.tau <= 1.0:
        raise ConfigError("dico.tau must lie in [0, 1]")
    if d.eps_floor <= 0:
        raise ConfigError("dico.eps_floor must be positive")
    if d.overflow_weight < 0:
        raise ConfigError("dico.overflow_weight must be nonnegative")
    if d.overflow_penalty and not d.bound_actions:
        raise ConfigError("dico.overflow_penalty needs dico.bound_actions = true")
    if not r.seeds:
        raise ConfigError("run.seeds must be nonempty")
    if t.horizon < 1 or r.frames_per_iter < t.horizon or r.frames_per_iter % t.horizon:
        raise ConfigError("run.frames_per_iter must be a positive multiple of task.horizon")
    if r.frames < r.frames_per_iter:
        raise ConfigError("run.frames must cover at least one iteration")
    if any(h <= 0 for h in m.hidden) or any(h <= 0 for h in m.critic_hidden):
        raise ConfigError("layer widths must be positive")
    if a.name == "ppo" and a.minibatch_size < 1:
        raise ConfigError("algorithm.minibatch_size must be positive")
    if a.name == "ddpg" and a.batch_size > a.buffer_size:
        raise ConfigError("algorithm.batch_size exceeds the replay capacity")
    if not 0.0 <= a.lr_final_fraction <= 1.0:
        raise ConfigError("algorithm.lr_final_fraction must lie in [0, 1]")
    if r.jobs < 1:
        raise ConfigError("run.jobs must be >= 1")
    try:
        cfg.make_task()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value`` with the value parsed as TOML (bare words fall back to strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def apply_overrides(data: dict, overrides) -> None:
    items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
    for key, value in items:
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = parts
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {section!r}")
        data.setdefault(section, {})[name] = value


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Defaults, then file values, then command-line overrides."""
    data: dict = {}
    if path is not None:
        data = tomllib.loads(Path(path).read_text())
    if overrides:
        apply_overrides(data, overrides)
    return from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_toml())
