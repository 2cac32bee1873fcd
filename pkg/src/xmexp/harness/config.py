"""Flat ``key=value`` run configuration files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..envs import DEFAULT_MAX_STEPS, TASKS, make_task
from ..explainers import ExplainerConfig
from ..marl import TrainConfig, train_config


class ConfigError(ValueError):
    pass


PROFILES = ("desk", "paper")
_BASE_KEYS = {"task": str, "n_agents": int, "seed": int, "lambda_attn": float, "profile": str, "max_steps": int}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "attention_entropy_weight"}
_EXPLAINER_FIELDS = {f.name: f for f in dataclasses.fields(ExplainerConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key: str, text: str, kind: Any):
    kind = {"bool": bool, "int": int, "float": float, "str": str}.get(kind, kind) if isinstance(kind, str) else kind
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == "tuple[float, ...]" or getattr(kind, "__origin__", None) is tuple:
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    task: str = "navigation"
    n_agents: int = 3
    seed: int = 0
    lambda_attn: float | None = None  # None: the task's default weight
    profile: str = "desk"
    max_steps: int | None = None
    train_overrides: dict = field(default_factory=dict)
    explainer_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if self.lambda_attn is not None and self.lambda_attn < 0:
            raise ConfigError("lambda_attn must be >= 0")

    def env_config(self, n_agents: int | None = None):
        return make_task(
            self.task, n_agents or self.n_agents, max_steps=self.max_steps or DEFAULT_MAX_STEPS[self.task]
        )

    def train_config(self) -> TrainConfig:
        cfg = train_config(self.task, self.profile, **self.train_overrides)
        if self.lambda_attn is not None:
            cfg = dataclasses.replace(cfg, attention_entropy_weight=self.lambda_attn)
        return cfg

    def explainer_config(self) -> ExplainerConfig:
        return ExplainerConfig(**self.explainer_overrides)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "n_agents": self.n_agents, "seed": self.seed,
            "lambda_attn": self.lambda_attn, "profile": self.profile, "max_steps": self.max_steps,
            **self.train_overrides, **self.explainer_overrides,
        }


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    base: dict[str, Any] = {}
    train: dict[str, Any] = {}
    expl: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in base or key in train or key in expl:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        if key in _BASE_KEYS:
            base[key] = _coerce(key, value, _BASE_KEYS[key])
        elif key in _TRAIN_FIELDS:
            train[key] = _coerce(key, value, _TRAIN_FIELDS[key].type)
        elif key in _EXPLAINER_FIELDS:
            expl[key] = _coerce(key, value, _EXPLAINER_FIELDS[key].type)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    try:
        cfg = RunConfig(**base, train_overrides=train, explainer_overrides=expl)
        make_task(cfg.task, cfg.n_agents)
        cfg.explainer_config()
        cfg.train_config()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_run_config(path, extra: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Read a config file; ``extra`` holds additional ``key=value`` lines (e.g. CLI ``--set``)."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_run_config(_merge(text, extra), str(p))


def _merge(text: str, extra) -> str:
    if not extra:
        return text
    keys = {e.split("=", 1)[0].strip() for e in extra}
    kept = [ln for ln in text.splitlines() if ln.split("#", 1)[0].split("=", 1)[0].strip() not in keys]
    return "\n".join(kept + list(extra))
