"""Run configuration: dataclasses with full-scale defaults and a JSON loader."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .errors import ConfigError, ScenarioError
from .networks import NetworkArch
from .scenario import ScenarioRandomization

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


def stage1_scenarios() -> ScenarioRandomization:
    """One learning agent among 2 to 4 robots."""
    return ScenarioRandomization(agent_count=(3, 5), policy_agents=1, background_controller="robot")


def stage2_scenarios(agent_count: int = 8) -> ScenarioRandomization:
    """Self-play among ``agent_count`` learning agents with staggered entries."""
    return ScenarioRandomization(agent_count=(agent_count, agent_count), initial_fraction=0.25,
                                 entry_window_s=(0.0, 30.0))


def benchmark_scenarios() -> ScenarioRandomization:
    return ScenarioRandomization(agent_count=(2, 8), initial_fraction=0.4, equal_priority_prob=0.25)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.9
    alpha: float = 0.7
    stage1_episodes: int = 20000
    stage2_episodes: int = 50000
    direct_episodes: int = 70000
    stage2_agent_count: int = 8
    lr_policy: float = 1e-4
    lr_critic: float = 1e-3
    tau: float = 0.01
    entropy_coef: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    max_steps: int = 600
    checkpoint_every: int = 1000
    log_every: int = 100
    workers: int = 1
    stage1_scenarios: ScenarioRandomization = field(default_factory=stage1_scenarios)
    stage2_scenarios: ScenarioRandomization = field(default_factory=stage2_scenarios)
    network: NetworkArch = field(default_factory=NetworkArch)

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma: {self.gamma} outside [0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha: {self.alpha} outside [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau: {self.tau} outside (0, 1]")
        for name in ("stage1_episodes", "stage2_episodes", "direct_episodes", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: {getattr(self, name)} must be >= 0")
        for name in ("stage2_agent_count", "max_steps", "checkpoint_every", "log_every", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: {getattr(self, name)} must be >= 1")
        for name in ("lr_policy", "lr_critic"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: {getattr(self, name)} must be positive")
        if self.entropy_coef < 0:
            raise ConfigError(f"entropy_coef: {self.entropy_coef} must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer: '{self.optimizer}' is not one of {list(OPTIMIZERS)}")
        if self.stage2_agent_count > self.network.q_slots:
            raise ConfigError(
                f"stage2_agent_count: {self.stage2_agent_count} exceeds the critic's {self.network.q_slots} slots"
            )
        for name in ("stage1_scenarios", "stage2_scenarios"):
            scenarios = getattr(self, name)
            try:
                scenarios.validate()
            except ScenarioError as err:
                raise ConfigError(f"{name}.{err}") from err
            if scenarios.agent_count[1] > self.network.q_slots:
                raise ConfigError(f"{name}.agent_count: {scenarios.agent_count} exceeds {self.network.q_slots} slots")
        return self


@dataclass(frozen=True)
class EvalConfig:
    scenarios: int = 100
    seed: int = 0
    methods: Tuple[str, ...] = ("idas", "idas-v", "idas-direct", "idm", "fsm-idm")
    repetitions: int = 20
    sweep_points: int = 9
    scene_count: int = 4
    epsilon_s: float = 2.0
    bootstrap_samples: int = 1000
    max_steps: int = 600
    workers: int = 1
    benchmark_scenarios: ScenarioRandomization = field(default_factory=benchmark_scenarios)

    def validate(self) -> "EvalConfig":
        for name in ("scenarios", "repetitions", "sweep_points", "scene_count", "max_steps", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: {getattr(self, name)} must be >= 1")
        if self.epsilon_s <= 0:
            raise ConfigError(f"epsilon_s: {self.epsilon_s} must be positive")
        if self.bootstrap_samples < 0:
            raise ConfigError(f"bootstrap_samples: {self.bootstrap_samples} must be >= 0")
        try:
            self.benchmark_scenarios.validate()
        except ScenarioError as err:
            raise ConfigError(f"benchmark_scenarios.{err}") from err
        return self


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    path: Optional[Path] = None


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    """1-based line where ``key`` (or the section itself) first appears; 0 when not found."""
    start = 0
    match = re.search(rf'"{re.escape(section)}"\s*:', text)
    if match:
        start = match.start()
        if key is None:
            return text.count("\n", 0, start) + 1
    if key is not None:
        match = re.search(rf'"{re.escape(key)}"\s*:', text[start:])
        if match:
            return text.count("\n", 0, start + match.start()) + 1
    return 0


def _coerce(value: Any, default: Any, where: str, line: int) -> Any:
    if default is None:
        return value
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if not isinstance(value, bool):
        if isinstance(default, float) and isinstance(value, (int, float)):
            return float(value)
        if isinstance(default, int) and isinstance(value, int):
            return value
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise ConfigError(f"line {line}: '{where}' expects {type(default).__name__}, got {value!r}")


def _build(cls, values: Any, section: str, text: str, base: Optional[Dict[str, Any]] = None,
           fixed: Optional[Dict[str, Any]] = None):
    """Instantiate ``cls`` from ``base`` defaults updated by a JSON section."""
    if not isinstance(values, dict):
        raise ConfigError(f"line {_line_of(text, section)}: section '{section}' must be a JSON object")
    fixed = fixed or {}
    known = {f.name for f in fields(cls)} - set(fixed)
    kwargs: Dict[str, Any] = dict(base or {})
    for key, value in values.items():
        line = _line_of(text, section, key)
        if key not in known:
            raise ConfigError(f"line {line}: unknown key '{key}' in section '{section}'")
        default = kwargs[key] if key in kwargs else getattr(cls(), key)
        kwargs[key] = _coerce(value, default, f"{section}.{key}", line)
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"line {_line_of(text, section)}: section '{section}': {err}") from err


SECTIONS = ("train", "stage1_scenarios", "stage2_scenarios", "network", "eval", "benchmark_scenarios")


def parse_config(text: str, path: Optional[Path] = None) -> RunConfig:
    try:
        document = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as err:
        raise ConfigError(f"line {err.lineno}: invalid JSON, {err.msg}") from err
    if not isinstance(document, dict):
        raise ConfigError("line 1: a config document must be a JSON object")
    for section in document:
        if section not in SECTIONS:
            raise ConfigError(
                f"line {_line_of(text, section)}: unknown section '{section}', expected one of {list(SECTIONS)}"
            )

    sections = {name: document.get(name, {}) for name in SECTIONS}
    network = _build(NetworkArch, sections["network"], "network", text)
    agent_count = sections["train"].get("stage2_agent_count", 8) if isinstance(sections["train"], dict) else 8
    if not isinstance(agent_count, int):
        agent_count = 8
    nested = {
        "network": network,
        "stage1_scenarios": _build(ScenarioRandomization, sections["stage1_scenarios"], "stage1_scenarios", text,
                                   base=_as_dict(stage1_scenarios())),
        "stage2_scenarios": _build(ScenarioRandomization, sections["stage2_scenarios"], "stage2_scenarios", text,
                                   base=_as_dict(stage2_scenarios(agent_count))),
    }
    train = _build(TrainConfig, sections["train"], "train", text, fixed=nested)
    bench = _build(ScenarioRandomization, sections["benchmark_scenarios"], "benchmark_scenarios", text,
                   base=_as_dict(benchmark_scenarios()))
    evaluation = _build(EvalConfig, sections["eval"], "eval", text, fixed={"benchmark_scenarios": bench})

    for section, config in (("train", train), ("eval", evaluation)):
        try:
            config.validate()
        except ConfigError as err:
            key = str(err).split(":", 1)[0].split(".")[0]
            line = _line_of(text, key) if key in SECTIONS else _line_of(text, section, key)
            raise ConfigError(f"line {line}: {err}") from err
    return RunConfig(train=train, eval=evaluation, path=path)


def _as_dict(config: ScenarioRandomization) -> Dict[str, Any]:
    return {f.name: getattr(config, f.name) for f in fields(config)}


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """Read and validate a JSON config; ``None`` gives the full-scale defaults."""
    if path is None:
        return parse_config("{}")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"path: {path} does not exist, please provide correct path")
    config = parse_config(path.read_text(), path)
    log.info("loaded config %s", path)
    return config


def override(config: RunConfig, **train_values: Any) -> RunConfig:
    """Copy with flag values applied over the file; ``None`` values are ignored."""
    values = {k: v for k, v in train_values.items() if v is not None}
    if not values:
        return config
    return replace(config, train=replace(config.train, **values).validate())
