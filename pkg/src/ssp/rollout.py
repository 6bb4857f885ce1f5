"""Multi-turn episode engine: generation, tag parsing, tool dispatch, budgets.

An episode alternates model turns with environment observations. Search
actions are executed against the BM25 index and their results injected
as ``<information>`` blocks; terminal tags end the episode. Budgets are
enforced per the trajectory contract: a parse failure is a format error,
while running out of search calls, per-turn tokens or total characters
truncates the episode.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import prompts
from .backends import Backend, BackendError, Finish, GenerationRequest, derive_seed
from .dialogue import (
    Role,
    SegmentKind,
    Terminal,
    Trajectory,
    Turn,
    parse_turn,
    render_observation,
    wrap_information,
)
from .retriever import DEFAULT_TOP_K, BM25Index, Document, InvalidQuery, retrieve

# Rollout generations always stop at a closing action tag.
ROLLOUT_STOP_SEQUENCES = ("</search>", "</answer>", "</question>")

DEFAULT_MAX_SEARCH_CALLS = 10
DEFAULT_MAX_NEW_TOKENS = 512
DEFAULT_MAX_TOTAL_CHARS = 8192


@dataclass(frozen=True)
class RolloutLimits:
    max_search_calls: int = DEFAULT_MAX_SEARCH_CALLS
    max_new_tokens_per_turn: int = DEFAULT_MAX_NEW_TOKENS
    max_total_model_chars: int = DEFAULT_MAX_TOTAL_CHARS

    def __post_init__(self) -> None:
        if self.max_search_calls < 0:
            raise ValueError(f"max_search_calls must be >= 0, got {self.max_search_calls}")
        if self.max_new_tokens_per_turn < 1:
            raise ValueError(
                f"max_new_tokens_per_turn must be >= 1, got {self.max_new_tokens_per_turn}"
            )
        if self.max_total_model_chars < 1:
            raise ValueError(
                f"max_total_model_chars must be >= 1, got {self.max_total_model_chars}"
            )


@dataclass(frozen=True)
class RagTask:
    """Input for a RAG solver episode: a question plus closed materials."""

    question: str
    materials: tuple[Document, ...]


@dataclass(frozen=True)
class EpisodeError:
    """A slot whose backend failed; kept so groups preserve episode order."""

    index: int
    message: str


def build_messages(
    role: Role,
    task,
    question_searches: int = 3,
    examples: tuple[str, str, str] = prompts.DEFAULT_EXAMPLE_QUESTIONS,
) -> list[dict]:
    if role is Role.PROPOSER:
        return prompts.proposer_messages(str(task), question_searches, examples)
    if role is Role.SOLVER_SEARCH:
        return prompts.solver_messages(str(task))
    if role is Role.SOLVER_RAG:
        if not isinstance(task, RagTask):
            raise TypeError("RAG episodes take a RagTask")
        return prompts.rag_solver_messages(task.question, prompts.render_materials(task.materials))
    raise ValueError(f"unknown role {role}")


def run_episode(
    role: Role,
    task,
    backend: Backend,
    index: BM25Index | None,
    limits: RolloutLimits = RolloutLimits(),
    seed: int = 0,
    temperature: float = 1.0,
    top_k: int = DEFAULT_TOP_K,
    question_searches: int = 3,
    examples: tuple[str, str, str] = prompts.DEFAULT_EXAMPLE_QUESTIONS,
) -> Trajectory:
    """Run one episode to its terminal.

    Per-call seeds derive from ``(seed, turn_index)`` so concurrent
    episodes reproduce bit-identically. ``BackendError`` propagates to the
    caller; it is an infrastructure failure, not a trajectory outcome.
    """
    messages = build_messages(role, task, question_searches, examples)
    traj = Trajectory(role=role, prompt=prompts.flat_prompt(messages), turns=[])
    searches = 0
    total_chars = 0

    for turn_index in range(1_000_000):
        request = GenerationRequest(
            messages=tuple(messages),
            temperature=temperature,
            max_new_tokens=limits.max_new_tokens_per_turn,
            stop_sequences=ROLLOUT_STOP_SEQUENCES,
            seed=derive_seed(seed, turn_index),
        )
        result = backend.generate(request)
        text = result.text
        total_chars += len(text)
        parsed = parse_turn(text, role)
        turn = Turn(model_text=text, segments=parsed.segments, chain=result.chain)
        traj.turns.append(turn)
        traj.warnings += parsed.warnings

        if parsed.error is not None:
            if _budget_hit(result, text, total_chars, limits):
                traj.terminal = Terminal.TRUNCATED
            else:
                traj.terminal = Terminal.FORMAT_ERROR
                traj.format_reason = parsed.error
            return traj

        action = parsed.action
        if action.kind is not SegmentKind.SEARCH:
            traj.terminal = Terminal.COMPLETED
            return traj

        if role is Role.SOLVER_RAG:
            # unreachable: RAG parsing never yields a search action
            raise AssertionError("RAG turns cannot search")

        if searches >= limits.max_search_calls:
            # the over-budget search is refused: no observation, episode ends
            traj.terminal = Terminal.TRUNCATED
            return traj
        searches += 1
        if index is None:
            raise BackendError("Config", "search role requires a retriever index")
        try:
            hits = retrieve(index, action.text, k=top_k)
        except InvalidQuery:
            hits = []
        observation = render_observation(hits)
        turn.observation = observation
        turn.hits = tuple(hits)
        messages = list(messages) + [
            {"role": "assistant", "content": text},
            {"role": "user", "content": wrap_information(observation)},
        ]
        if total_chars >= limits.max_total_model_chars:
            traj.terminal = Terminal.TRUNCATED
            return traj
    raise AssertionError("episode failed to terminate")


def _budget_hit(result, text: str, total_chars: int, limits: RolloutLimits) -> bool:
    """Did this turn end because a budget ran out (rather than by model choice)?

    Character counts proxy for tokens on text backends; the toy backend's
    chain length counts sampled symbols exactly.
    """
    if total_chars >= limits.max_total_model_chars:
        return True
    if result.finish is not Finish.LENGTH:
        return False
    if result.chain is not None:
        return len(result.chain) >= limits.max_new_tokens_per_turn
    return len(text) >= limits.max_new_tokens_per_turn


def run_group(
    role: Role,
    task,
    backend: Backend,
    index: BM25Index | None,
    n: int,
    limits: RolloutLimits = RolloutLimits(),
    seed: int = 0,
    temperature: float = 1.0,
    top_k: int = DEFAULT_TOP_K,
    workers: int = 1,
    question_searches: int = 3,
) -> list[Trajectory | EpisodeError]:
    """Run ``n`` episodes of the same task; total, never fail-fast.

    Episode ``j`` uses seed ``derive_seed(seed, j)``, so results are
    independent of scheduling. Failed episodes come back as
    :class:`EpisodeError` in their slot.
    """

    def one(j: int) -> Trajectory | EpisodeError:
        try:
            return run_episode(
                role,
                task,
                backend,
                index,
                limits=limits,
                seed=derive_seed(seed, j),
                temperature=temperature,
                top_k=top_k,
                question_searches=question_searches,
            )
        except BackendError as exc:
            return EpisodeError(index=j, message=str(exc))

    if workers <= 1:
        return [one(j) for j in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n)))
