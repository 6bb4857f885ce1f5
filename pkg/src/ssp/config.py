"""Flat key/value run configuration.

A run is described by one YAML file of scalar keys plus command-line
``--key=value`` overrides, so any experiment is reproducible from a
single file and a short command line. Values are parsed with YAML scalar
rules (``10`` is an int, ``0.5`` a float, ``true`` a bool); nested
structures are rejected on purpose.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Mapping

import yaml

from .arena import ArenaConfig, BatchStrategy
from .credit import LengthNorm
from .rollout import RolloutLimits


class ConfigError(ValueError):
    """Bad configuration file, key, or value: a usage error."""


# Every key any command understands. Unknown keys are usage errors so a
# typo cannot silently change a run.
KNOWN_KEYS = frozenset(
    {
        # shared
        "seed",
        "workers",
        "backend",
        "judge",
        "corpus",
        "out",
        # arena
        "steps",
        "batch_size",
        "group_size",
        "strategy",
        "reset_period",
        "buffer_capacity",
        "noise_docs",
        "rag_samples",
        "question_searches",
        "top_k",
        "rollout_temperature",
        "beta",
        "learning_rate",
        "proposer_learning_rate",
        "length_norm",
        "format_fail_reward",
        "proposer_warmup_steps",
        "allow_dummy",
        "starved_tolerance",
        "checkpoint_every",
        "out_dir",
        "metrics_path",
        "records_path",
        "answers",
        "max_search_calls",
        "proposer_max_search_calls",
        "max_new_tokens",
        "max_total_chars",
        # fact-chain game
        "game_entities",
        "game_corpus_seed",
        # retriever service / index
        "bind",
        "index_path",
        # eval
        "qa",
        "sample_cap",
        "dataset",
        # scripted episodes
        "script",
        "role",
        "task",
        "episodes",
        # gradcheck
        "trials",
        "vocab_size",
        "max_len",
        "fd_step",
        "tolerance",
    }
)

_MISSING = object()


@dataclass(frozen=True)
class Config:
    values: Mapping[str, object]

    def has(self, key: str) -> bool:
        return key in self.values and self.values[key] is not None

    def _fetch(self, key: str, default):
        """Return the stored value, or ``default`` (``_MISSING`` = required)."""
        if not self.has(key):
            if default is _MISSING:
                raise ConfigError(f"missing required config key '{key}'")
            return _MISSING, default
        return self.values[key], None

    def get_str(self, key: str, default: str | None = _MISSING) -> str | None:
        value, fallback = self._fetch(key, default)
        if value is _MISSING:
            return fallback
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise ConfigError(f"config key '{key}' must be a string, got {value!r}")
        return str(value)

    def get_int(self, key: str, default: int | None = _MISSING) -> int | None:
        value, fallback = self._fetch(key, default)
        if value is _MISSING:
            return fallback
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer, got {value!r}")
        return value

    def get_float(self, key: str, default: float | None = _MISSING) -> float | None:
        value, fallback = self._fetch(key, default)
        if value is _MISSING:
            return fallback
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number, got {value!r}")
        return float(value)

    def get_bool(self, key: str, default: bool | None = _MISSING) -> bool | None:
        value, fallback = self._fetch(key, default)
        if value is _MISSING:
            return fallback
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be a boolean, got {value!r}")
        return value


def _validate_keys(values: Mapping[str, object], source: str) -> None:
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {source}: {', '.join(unknown)}")
    for key, value in values.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"config key '{key}' must be a scalar, got a {type(value).__name__}")


def load_config(path: str | os.PathLike[str]) -> Config:
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must be a flat key/value mapping")
    _validate_keys(data, str(path))
    return Config(values=data)


def parse_overrides(pairs: list[str]) -> Config:
    """Parse ``key=value`` strings; values follow YAML scalar typing.

    A value that YAML would read as a mapping or list (free text with a
    ``": "`` in it, say) is kept as the raw string instead: overrides can
    only ever be scalars, so the structured reading is never intended.
    """
    values: dict[str, object] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        try:
            value = yaml.safe_load(raw) if raw != "" else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"override '{pair}' has a malformed value: {exc}") from exc
        if isinstance(value, (dict, list)):
            value = raw
        values[key] = value
    _validate_keys(values, "command line")
    return Config(values=values)


def merge_configs(*configs: Config) -> Config:
    """Later configs win; used as file < overrides < --seed."""
    merged: dict[str, object] = {}
    for cfg in configs:
        merged.update(cfg.values)
    return Config(values=merged)


def _enum_value(raw: str, enum_cls, key: str):
    normalized = raw.strip().lower().replace("-", "_")
    for member in enum_cls:
        if member.value == normalized or member.name.lower() == normalized:
            return member
    options = ", ".join(m.value for m in enum_cls)
    raise ConfigError(f"config key '{key}' must be one of: {options} (got {raw!r})")


def rollout_limits(cfg: Config, base: RolloutLimits, search_key: str = "max_search_calls") -> RolloutLimits:
    return RolloutLimits(
        max_search_calls=cfg.get_int(search_key, base.max_search_calls),
        max_new_tokens_per_turn=cfg.get_int("max_new_tokens", base.max_new_tokens_per_turn),
        max_total_model_chars=cfg.get_int("max_total_chars", base.max_total_model_chars),
    )


def arena_config(cfg: Config, base: ArenaConfig | None = None) -> ArenaConfig:
    """ArenaConfig from flat keys, starting from ``base`` (or defaults)."""
    out = base if base is not None else ArenaConfig()
    updates: dict[str, object] = {}
    for key in (
        "batch_size",
        "group_size",
        "steps",
        "seed",
        "reset_period",
        "noise_docs",
        "rag_samples",
        "question_searches",
        "top_k",
        "proposer_warmup_steps",
        "starved_tolerance",
        "workers",
        "checkpoint_every",
    ):
        if cfg.has(key):
            updates[key] = cfg.get_int(key)
    for key in (
        "rollout_temperature",
        "beta",
        "learning_rate",
        "proposer_learning_rate",
        "format_fail_reward",
    ):
        if cfg.has(key):
            updates[key] = cfg.get_float(key)
    if cfg.has("buffer_capacity"):
        updates["buffer_capacity"] = cfg.get_int("buffer_capacity")
    if cfg.has("allow_dummy"):
        updates["allow_dummy"] = cfg.get_bool("allow_dummy")
    if cfg.has("strategy"):
        updates["strategy"] = _enum_value(cfg.get_str("strategy"), BatchStrategy, "strategy")
    if cfg.has("length_norm"):
        updates["length_norm"] = _enum_value(cfg.get_str("length_norm"), LengthNorm, "length_norm")
    for key in ("out_dir", "metrics_path", "records_path"):
        if cfg.has(key):
            updates[key] = cfg.get_str(key)
    out = dataclasses.replace(out, **updates)
    solver_limits = rollout_limits(cfg, out.solver_limits)
    proposer_base = rollout_limits(cfg, out.proposer_limits)
    if cfg.has("proposer_max_search_calls"):
        proposer_base = dataclasses.replace(
            proposer_base, max_search_calls=cfg.get_int("proposer_max_search_calls")
        )
    return dataclasses.replace(out, solver_limits=solver_limits, proposer_limits=proposer_base)
