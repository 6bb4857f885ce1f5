"""Command-line interface.

Commands
    index            Build a BM25 index file from a JSONL corpus.
    serve-retriever  Serve an index over the HTTP retrieval protocol.
    selfplay         Run the self-play training loop (toy or remote).
    eval             Score a policy on a QA file (pass@1).
    gradcheck        Finite-difference audit of the GRPO gradient.
    rollout-dump     Run scripted episodes and dump trajectory JSONL.

Every command takes ``--config FILE`` (a flat YAML mapping) plus
``--key=value`` overrides, with ``--seed N`` as shorthand for
``--seed=N``. Overrides win over the file; there is no nested flag
grammar. Exit codes: 0 success, 1 usage error, 2 runtime failure,
3 gradcheck tolerance exceeded. Errors print one structured line on
stderr: ``error: <kind>: <message>``.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from . import config as config_mod
from .adjudicator import EmJudge, Judge, JudgeProtocolError, LlmJudge
from .arena import Arena, ArenaConfig, StepStarved
from .backends import BackendError, RemoteBackend, ScriptedBackend, derive_seed
from .config import Config, ConfigError, load_config, merge_configs, parse_overrides
from .credit import run_gradcheck_suite
from .dialogue import Role, dump_trajectory
from .evalsuite import DEFAULT_SAMPLE_CAP, append_csv_summary, evaluate
from .factchain import (
    DEFAULT_CORPUS_SEED,
    DEFAULT_NUM_ENTITIES,
    build_game,
    game_arena_config,
)
from .retriever import (
    BM25Index,
    CorpusError,
    InvalidQuery,
    build_index,
    load_index,
    save_index,
    serve_retriever,
)
from .rollout import RolloutLimits, run_episode

USAGE = """\
usage: ssp COMMAND [--config FILE] [--seed N] [--key=value ...]

commands:
  index            build a BM25 index (keys: corpus, out)
  serve-retriever  serve an index over HTTP (keys: index_path | corpus, bind)
  selfplay         run the self-play training loop (keys: backend, steps, ...)
  eval             score a policy on a QA file (keys: qa, backend, sample_cap, ...)
  gradcheck        finite-difference audit of the update rule (keys: trials, tolerance, ...)
  rollout-dump     run scripted episodes to a trajectory file (keys: script, role, task, out)

exit codes: 0 ok, 1 usage error, 2 runtime failure, 3 gradcheck tolerance exceeded
"""


def _fail(kind: str, message: str, code: int) -> int:
    line = " ".join(str(message).split()) or "unspecified"
    print(f"error: {kind}: {line}", file=sys.stderr)
    return code


def _load_index_from(cfg: Config, required: bool = True) -> BM25Index | None:
    if cfg.has("index_path"):
        return load_index(cfg.get_str("index_path"))
    if cfg.has("corpus"):
        return build_index(cfg.get_str("corpus"))
    if required:
        raise ConfigError("provide either 'index_path' or 'corpus'")
    return None


def _make_judge(cfg: Config) -> Judge:
    mode = cfg.get_str("judge", "em").strip().lower()
    if mode == "em":
        return EmJudge()
    if mode == "llm":
        return LlmJudge(RemoteBackend())
    raise ConfigError(f"config key 'judge' must be 'em' or 'llm', got {mode!r}")


def _load_script(path: str) -> list[str]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read script file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"script file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise ValueError(f"script file {path} must be a JSON list of strings")
    return data


def _read_answer_pool(path: str) -> list[str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read answers file {path}: {exc}") from exc
    pool = [line.strip() for line in lines if line.strip()]
    if not pool:
        raise ValueError(f"answers file {path} contains no answers")
    return pool


# ---------------------------------------------------------------- commands


def _cmd_index(cfg: Config) -> int:
    corpus = cfg.get_str("corpus")
    out = cfg.get_str("out")
    index = build_index(corpus)
    save_index(index, out)
    print(
        f"indexed documents={index.stats.num_docs} terms={index.stats.num_terms} path={out}"
    )
    return 0


def _cmd_serve_retriever(cfg: Config) -> int:
    bind = cfg.get_str("bind", "127.0.0.1:8001")
    index = _load_index_from(cfg)
    print(f"serving retriever bind={bind} documents={index.stats.num_docs}", flush=True)
    try:
        serve_retriever(index, bind)
    except KeyboardInterrupt:
        pass
    return 0


def _build_arena(cfg: Config) -> Arena:
    backend_kind = cfg.get_str("backend", "toy").strip().lower()
    judge = _make_judge(cfg)
    if backend_kind == "toy":
        game = build_game(
            num_entities=cfg.get_int("game_entities", DEFAULT_NUM_ENTITIES),
            corpus_seed=cfg.get_int("game_corpus_seed", DEFAULT_CORPUS_SEED),
        )
        base = game_arena_config(game, seed=cfg.get_int("seed", 0))
        arena_cfg = config_mod.arena_config(cfg, base)
        return Arena(
            game.proposer_backend,
            game.solver_backend,
            game.index,
            game.answer_pool,
            judge,
            arena_cfg,
        )
    if backend_kind == "remote":
        index = _load_index_from(cfg)
        pool = _read_answer_pool(cfg.get_str("answers"))
        arena_cfg = config_mod.arena_config(cfg, ArenaConfig())
        backend = RemoteBackend()
        return Arena(backend, backend, index, pool, judge, arena_cfg)
    raise ConfigError(f"config key 'backend' must be 'toy' or 'remote', got {backend_kind!r}")


def _cmd_selfplay(cfg: Config) -> int:
    arena = _build_arena(cfg)
    out_dir = arena.cfg.out_dir
    if out_dir and (Path(out_dir) / "state.json").exists():
        arena.load_checkpoint(out_dir)
        print(f"resumed step={arena.step_index} dir={out_dir}", flush=True)
    metrics = arena.run()
    if metrics:
        last = metrics[-1]
        print(
            f"selfplay steps={arena.step_index}"
            f" valid_question_rate={last.valid_question_rate:.3f}"
            f" mean_solver_reward={last.mean_solver_reward:.3f}"
            f" mean_proposer_reward={last.mean_proposer_reward:.3f}"
        )
    else:
        print(f"selfplay steps={arena.step_index}")
    return 0


def _cmd_eval(cfg: Config) -> int:
    qa = cfg.get_str("qa")
    backend_kind = cfg.get_str("backend", "toy").strip().lower()
    index = _load_index_from(cfg, required=False)
    base_limits = RolloutLimits()
    if backend_kind == "scripted":
        backend = ScriptedBackend(_load_script(cfg.get_str("script")))
    elif backend_kind == "toy":
        game = build_game(
            num_entities=cfg.get_int("game_entities", DEFAULT_NUM_ENTITIES),
            corpus_seed=cfg.get_int("game_corpus_seed", DEFAULT_CORPUS_SEED),
        )
        backend = game.solver_backend
        base_limits = game.solver_limits
        if index is None:
            index = game.index
    elif backend_kind == "remote":
        backend = RemoteBackend()
    else:
        raise ConfigError(
            f"config key 'backend' must be 'toy', 'scripted' or 'remote', got {backend_kind!r}"
        )
    report = evaluate(
        qa,
        backend,
        index,
        _make_judge(cfg),
        sample_cap=cfg.get_int("sample_cap", DEFAULT_SAMPLE_CAP),
        seed=cfg.get_int("seed", 0),
        limits=config_mod.rollout_limits(cfg, base_limits),
        top_k=cfg.get_int("top_k", 3),
        workers=cfg.get_int("workers", 1),
    )
    print(f"pass@1 {report.pass_at_1:.3f}")
    print(
        f"evaluated={report.n_evaluated} correct={report.n_correct} total={report.n_total}"
    )
    if cfg.has("out"):
        out = cfg.get_str("out")
        dataset = cfg.get_str("dataset", Path(qa).stem)
        append_csv_summary(out, dataset, report)
        print(f"summary dataset={dataset} path={out}")
    return 0


def _cmd_gradcheck(cfg: Config) -> int:
    result = run_gradcheck_suite(
        trials=cfg.get_int("trials", 50),
        seed=cfg.get_int("seed", 0),
        vocab_size=cfg.get_int("vocab_size", 12),
        max_len=cfg.get_int("max_len", 8),
        step=cfg.get_float("fd_step", 1e-5),
        tolerance=cfg.get_float("tolerance", 1e-4),
    )
    print(
        f"gradcheck trials={result['trials']}"
        f" max_rel_err={result['max_rel_err']:.3e}"
        f" tolerance={result['tolerance']:g}"
        f" passed={'true' if result['passed'] else 'false'}"
    )
    return 0 if result["passed"] else 3


def _cmd_rollout_dump(cfg: Config) -> int:
    role_raw = cfg.get_str("role", Role.SOLVER_SEARCH.value).strip().lower()
    try:
        role = Role(role_raw)
    except ValueError as exc:
        raise ConfigError(f"config key 'role' must be one of: {', '.join(r.value for r in Role)}") from exc
    if role is Role.SOLVER_RAG:
        raise ConfigError("role 'solver_rag' needs assembled materials; use the selfplay loop")
    task = cfg.get_str("task")
    out = cfg.get_str("out")
    episodes = cfg.get_int("episodes", 1)
    if episodes < 1:
        raise ConfigError("config key 'episodes' must be at least 1")
    backend = ScriptedBackend(_load_script(cfg.get_str("script")))
    index = _load_index_from(cfg, required=False)
    limits = config_mod.rollout_limits(cfg, RolloutLimits())
    seed = cfg.get_int("seed", 0)
    lines = []
    for e in range(episodes):
        traj = run_episode(
            role,
            task,
            backend,
            index,
            limits,
            seed=derive_seed(seed, e),
            temperature=cfg.get_float("rollout_temperature", 0.0),
            top_k=cfg.get_int("top_k", 3),
            question_searches=cfg.get_int("question_searches", 3),
        )
        lines.append(dump_trajectory(traj))
    Path(out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"rollout-dump episodes={episodes} path={out}")
    return 0


_COMMANDS = {
    "index": _cmd_index,
    "serve-retriever": _cmd_serve_retriever,
    "selfplay": _cmd_selfplay,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "rollout-dump": _cmd_rollout_dump,
}


def _parse_args(args: list[str]) -> tuple[str | None, list[str]] | int:
    """Split argv into (config path, override pairs); int means exit now."""
    config_path: str | None = None
    pairs: list[str] = []
    i = 0
    while i < len(args):
        tok = args[i]
        if tok in ("-h", "--help"):
            print(USAGE)
            return 0
        if tok == "--config":
            i += 1
            if i >= len(args):
                return _fail("usage", "--config requires a file path", 1)
            config_path = args[i]
        elif tok.startswith("--config="):
            config_path = tok.partition("=")[2]
        elif tok == "--seed":
            i += 1
            if i >= len(args):
                return _fail("usage", "--seed requires an integer", 1)
            pairs.append(f"seed={args[i]}")
        elif tok.startswith("--") and "=" in tok:
            pairs.append(tok[2:])
        else:
            return _fail("usage", f"unexpected argument '{tok}'", 1)
        i += 1
    return config_path, pairs


def main(argv: list[str] | None = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        print(USAGE, file=sys.stderr)
        return 1
    if args[0] in ("-h", "--help", "help"):
        print(USAGE)
        return 0
    command, rest = args[0], args[1:]
    handler = _COMMANDS.get(command)
    if handler is None:
        return _fail("usage", f"unknown command '{command}'", 1)
    parsed = _parse_args(rest)
    if isinstance(parsed, int):
        return parsed
    config_path, pairs = parsed
    try:
        file_cfg = load_config(config_path) if config_path else Config(values={})
        cfg = merge_configs(file_cfg, parse_overrides(pairs))
        return handler(cfg)
    except ConfigError as exc:
        return _fail("usage", str(exc), 1)
    except StepStarved as exc:
        return _fail("runtime", f"training starved: {exc}", 2)
    except (
        BackendError,
        JudgeProtocolError,
        CorpusError,
        InvalidQuery,
        OSError,
        ValueError,
    ) as exc:
        return _fail("runtime", str(exc), 2)


if __name__ == "__main__":
    sys.exit(main())
