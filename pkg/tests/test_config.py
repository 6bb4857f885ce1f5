"""Flat-file configuration: loading, override typing, strict keys, and
the mapping onto arena settings."""

from __future__ import annotations

import pytest

from ssp.arena import ArenaConfig, BatchStrategy
from ssp.config import (
    Config,
    ConfigError,
    arena_config,
    load_config,
    merge_configs,
    parse_overrides,
    rollout_limits,
)
from ssp.credit import LengthNorm
from ssp.rollout import RolloutLimits


def write_cfg(tmp_path, text: str):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


# ----------------------------------------------------------------- loading


def test_load_config_reads_yaml_scalars(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "steps: 20\nbeta: 0.5\nallow_dummy: true\nqa: data.jsonl\n"))
    assert cfg.get_int("steps") == 20
    assert cfg.get_float("beta") == 0.5
    assert cfg.get_bool("allow_dummy") is True
    assert cfg.get_str("qa") == "data.jsonl"


def test_load_config_empty_file_is_empty_mapping(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "\n"))
    assert cfg.values == {}


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("- a\n- b\n", "mapping"),
        ("steps: 20\nbogus_key: 1\n", "bogus_key"),
        ("steps: {a: 1}\n", "scalar"),
        ("answers: [x, y]\n", "scalar"),
        ("steps: [\n", "malformed"),
    ],
)
def test_load_config_rejects_bad_files(tmp_path, text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(write_cfg(tmp_path, text))


def test_load_config_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_config_error_is_a_value_error():
    assert issubclass(ConfigError, ValueError)


# ----------------------------------------------------------------- getters


def test_getters_enforce_types():
    cfg = Config(values={"steps": "twenty", "beta": "x", "allow_dummy": 1, "qa": True})
    with pytest.raises(ConfigError, match="integer"):
        cfg.get_int("steps")
    with pytest.raises(ConfigError, match="number"):
        cfg.get_float("beta")
    with pytest.raises(ConfigError, match="boolean"):
        cfg.get_bool("allow_dummy")
    with pytest.raises(ConfigError, match="string"):
        cfg.get_str("qa")


def test_bool_is_not_an_int_or_float():
    cfg = Config(values={"steps": True, "beta": False})
    with pytest.raises(ConfigError):
        cfg.get_int("steps")
    with pytest.raises(ConfigError):
        cfg.get_float("beta")


def test_int_widens_to_float_and_str():
    cfg = Config(values={"beta": 2, "out": 5})
    assert cfg.get_float("beta") == 2.0
    assert cfg.get_str("out") == "5"


def test_required_keys_raise_and_defaults_fill():
    cfg = Config(values={})
    with pytest.raises(ConfigError, match="missing required"):
        cfg.get_str("qa")
    assert cfg.get_int("steps", 7) == 7
    assert cfg.get_str("out", None) is None


def test_explicit_null_counts_as_absent():
    cfg = Config(values={"out": None})
    assert not cfg.has("out")
    assert cfg.get_str("out", "fallback") == "fallback"


# --------------------------------------------------------------- overrides


def test_overrides_follow_yaml_typing():
    cfg = parse_overrides(["steps=20", "beta=0.5", "allow_dummy=true", "qa=data.jsonl", "out="])
    assert cfg.values == {
        "steps": 20,
        "beta": 0.5,
        "allow_dummy": True,
        "qa": "data.jsonl",
        "out": "",
    }


def test_override_value_with_colon_stays_a_string():
    # YAML would read "State...: blue." as a one-entry mapping; free-text
    # override values must survive as the literal string instead.
    cfg = parse_overrides(["task=State the color named in this question: blue."])
    assert cfg.values == {"task": "State the color named in this question: blue."}


def test_override_value_that_looks_like_a_list_stays_a_string():
    cfg = parse_overrides(["answers=[a, b]"])
    assert cfg.values == {"answers": "[a, b]"}


@pytest.mark.parametrize("pair", ["steps", "=5", "bogus_key=1"])
def test_overrides_reject_bad_pairs(pair):
    with pytest.raises(ConfigError):
        parse_overrides([pair])


def test_merge_later_wins():
    merged = merge_configs(
        Config(values={"steps": 1, "beta": 0.1}),
        Config(values={"steps": 2}),
        Config(values={"seed": 3}),
    )
    assert merged.values == {"steps": 2, "beta": 0.1, "seed": 3}


# ----------------------------------------------------------- arena mapping


def test_arena_config_maps_every_field():
    cfg = Config(
        values={
            "batch_size": 4,
            "group_size": 3,
            "steps": 11,
            "seed": 5,
            "strategy": "full-reuse",
            "reset_period": 6,
            "buffer_capacity": 100,
            "noise_docs": 2,
            "rag_samples": 2,
            "question_searches": 2,
            "top_k": 5,
            "rollout_temperature": 0.7,
            "beta": 0.02,
            "learning_rate": 0.3,
            "proposer_learning_rate": 0.05,
            "length_norm": "all_tokens",
            "format_fail_reward": -0.1,
            "proposer_warmup_steps": 4,
            "allow_dummy": False,
            "starved_tolerance": 9,
            "workers": 2,
            "checkpoint_every": 5,
            "out_dir": "runs/x",
            "metrics_path": "m.csv",
            "records_path": "r.jsonl",
            "max_search_calls": 7,
            "proposer_max_search_calls": 2,
            "max_new_tokens": 64,
            "max_total_chars": 4096,
        }
    )
    out = arena_config(cfg)
    assert out.batch_size == 4 and out.group_size == 3 and out.steps == 11
    assert out.seed == 5
    assert out.strategy is BatchStrategy.FULL_REUSE
    assert out.reset_period == 6 and out.buffer_capacity == 100
    assert out.noise_docs == 2 and out.rag_samples == 2
    assert out.question_searches == 2 and out.top_k == 5
    assert out.rollout_temperature == 0.7 and out.beta == 0.02
    assert out.learning_rate == 0.3 and out.proposer_learning_rate == 0.05
    assert out.length_norm is LengthNorm.ALL_TOKENS
    assert out.format_fail_reward == -0.1
    assert out.proposer_warmup_steps == 4
    assert out.allow_dummy is False and out.starved_tolerance == 9
    assert out.workers == 2 and out.checkpoint_every == 5
    assert out.out_dir == "runs/x"
    assert out.metrics_path == "m.csv" and out.records_path == "r.jsonl"
    assert out.solver_limits == RolloutLimits(7, 64, 4096)
    assert out.proposer_limits == RolloutLimits(2, 64, 4096)


def test_arena_config_preserves_base_for_unset_keys():
    base = ArenaConfig(batch_size=8, learning_rate=0.1, solver_limits=RolloutLimits(6, 8, 8192))
    out = arena_config(Config(values={"steps": 3}), base)
    assert out.steps == 3
    assert out.batch_size == 8
    assert out.learning_rate == 0.1
    assert out.solver_limits == RolloutLimits(6, 8, 8192)


@pytest.mark.parametrize("raw", ["full_reuse", "full-reuse", "FULL_REUSE", " Full-Reuse "])
def test_strategy_spellings(raw):
    out = arena_config(Config(values={"strategy": raw}))
    assert out.strategy is BatchStrategy.FULL_REUSE


def test_bad_enum_lists_options():
    with pytest.raises(ConfigError, match="dummy_padding"):
        arena_config(Config(values={"strategy": "nonsense"}))
    with pytest.raises(ConfigError, match="unmasked_count"):
        arena_config(Config(values={"length_norm": "nonsense"}))


def test_rollout_limits_overrides_and_base():
    base = RolloutLimits(3, 8, 8192)
    assert rollout_limits(Config(values={}), base) == base
    assert rollout_limits(Config(values={"max_search_calls": 9}), base) == RolloutLimits(9, 8, 8192)
    custom = rollout_limits(
        Config(values={"proposer_max_search_calls": 1}), base, search_key="proposer_max_search_calls"
    )
    assert custom.max_search_calls == 1
