"""Synthetic fact-chain game: a fully closed training world for the
self-play loop, small enough to train on one core in seconds.

World
    ``num_entities`` entities are arranged in one seeded ring; entity X's
    unique successor is stated by a link document ("E07 links to E23 .").
    Each entity also has a profile document, giving ~2 docs per entity.
    Questions are multi-hop chain lookups: "Starting from entity E07,
    follow the link chain for exactly 2 steps. Which entity do you
    reach?" The truth is the ring successor applied ``hops`` times.

Roles
    Both roles are bigram :class:`~ssp.credit.ToyPolicy` tables sampled
    through a :class:`~ssp.backends.SymbolCodec`. The codec is a pure
    function of the message history: it derives a conditioning symbol
    describing the dialogue state and renders sampled action symbols to
    concrete tag text, resolving entities by re-reading the observations.

    Proposer: given truth T, each SEARCH walks one step backward from T
    (query "links to {current}"), and ASK emits the chain question whose
    start is the current entity and whose hop count is the number of
    searches performed — so deeper walks yield harder questions, and the
    hop-depth choice is exactly what its policy learns.

    Solver: each SEARCH walks one step forward from the question's start
    entity; ANSWER answers the entity reached so far. The conditioning
    symbol encodes how many searches remain (``LEFT:d``), ``OVER`` once
    past the target depth, and ``LOST`` when the question or chain cannot
    be resolved (e.g. the dummy padding problem).

Warm start
    The initial tables emulate a search-competent but imperfect starting
    model: they emit well-formed tags with high probability (a small EOS
    mass produces natural format failures), prefer searching while
    searches remain, but ALSO prefer searching when none remain — so the
    greedy starting solver over-searches and fails, while sampled
    rollouts succeed often enough to carry a learning signal. The
    verification rows (``RAG:*``) answer reliably from materials and are
    never trained: verification episodes are admission infrastructure,
    not training data.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .arena import ArenaConfig
from .backends import ToyBackend, derive_seed
from .credit import ToyPolicy
from .evalsuite import QaItem, evaluate
from .adjudicator import EmJudge
from .retriever import BM25Index, Document, index_documents
from .rollout import RolloutLimits

DEFAULT_NUM_ENTITIES = 100
DEFAULT_CORPUS_SEED = 7
MAX_HOPS = 3

QUESTION_TEMPLATE = (
    "Starting from entity {start}, follow the link chain for exactly {hops} steps. "
    "Which entity do you reach?"
)
_QUESTION_RE = re.compile(
    r"Starting from entity (E\d+), follow the link chain for exactly (\d+) steps\."
)
_TRUTH_RE = re.compile(r"The answer I provided is: (E\d+)\.")
_RAG_PROMPT_PREFIX = "Answer the given question based on the provided materials."

SOLVER_VOCAB = (
    "LEFT:0",
    "LEFT:1",
    "LEFT:2",
    "LEFT:3",
    "OVER",
    "LOST",
    "RAG:OK",
    "RAG:NONE",
    "SEARCH",
    "ANSWER",
    "EOS",
)
PROPOSER_VOCAB = ("P:0", "P:1", "P:2", "P:3", "SEARCH", "ASK", "EOS")

_STOP_SYMBOLS = frozenset({"SEARCH", "ANSWER", "ASK", "EOS"})

# Logit value for symbols a state should essentially never emit.
_FLOOR = -8.0

_SOLVER_INIT_ROWS: dict[str, dict[str, float]] = {
    # Greedy argmax over-searches at LEFT:0; sampling still answers often.
    "LEFT:0": {"SEARCH": 1.0, "ANSWER": 0.55, "EOS": -1.0},
    "LEFT:1": {"SEARCH": 1.2, "ANSWER": 0.1, "EOS": -1.0},
    "LEFT:2": {"SEARCH": 1.2, "ANSWER": 0.0, "EOS": -1.0},
    "LEFT:3": {"SEARCH": 1.2, "ANSWER": 0.0, "EOS": -1.0},
    "OVER": {"SEARCH": 0.0, "ANSWER": 1.0, "EOS": -1.0},
    "LOST": {"SEARCH": -1.0, "ANSWER": 2.0, "EOS": -1.0},
    "RAG:OK": {"SEARCH": -2.0, "ANSWER": 3.0, "EOS": -2.0},
    "RAG:NONE": {"SEARCH": -2.0, "ANSWER": 2.0, "EOS": -2.0},
}
_PROPOSER_INIT_ROWS: dict[str, dict[str, float]] = {
    "P:0": {"SEARCH": 2.0, "ASK": -0.5, "EOS": -1.5},
    "P:1": {"SEARCH": 0.5, "ASK": 1.2, "EOS": -1.5},
    "P:2": {"SEARCH": 0.2, "ASK": 1.2, "EOS": -1.5},
    "P:3": {"SEARCH": -0.5, "ASK": 2.2, "EOS": -1.5},
}


def entity_name(i: int, width: int = 2) -> str:
    return f"E{i:0{width}d}"


def build_corpus(
    num_entities: int = DEFAULT_NUM_ENTITIES, seed: int = DEFAULT_CORPUS_SEED
) -> tuple[list[Document], dict[str, str]]:
    """Entities in one seeded ring; one link and one profile doc each."""
    if num_entities < MAX_HOPS + 2:
        raise ValueError("corpus needs enough entities for multi-hop chains")
    width = max(2, len(str(num_entities - 1)))
    entities = [entity_name(i, width) for i in range(num_entities)]
    rng = np.random.default_rng(derive_seed(seed))
    order = [entities[int(k)] for k in rng.permutation(num_entities)]
    successors = {
        order[k]: order[(k + 1) % num_entities] for k in range(num_entities)
    }
    docs: list[Document] = []
    for e in entities:
        docs.append(
            Document(
                doc_id=f"link-{e}",
                title=f"{e} link record",
                text=f"{e} links to {successors[e]} .",
            )
        )
        docs.append(
            Document(
                doc_id=f"prof-{e}",
                title=f"{e} profile",
                text=f"{e} is a registered entity in the catalog .",
            )
        )
    return docs, successors


def _information_texts(messages: Sequence[dict]) -> list[str]:
    return [
        m["content"]
        for m in messages
        if m.get("role") == "user" and m.get("content", "").startswith("<information>")
    ]


def _forward_step(current: str, text: str) -> str | None:
    m = re.search(rf"{re.escape(current)} links to (E\d+) \.", text)
    return m.group(1) if m else None


def _backward_step(current: str, text: str) -> str | None:
    m = re.search(rf"(E\d+) links to {re.escape(current)} \.", text)
    return m.group(1) if m else None


@dataclass(frozen=True)
class _SolverState:
    mode: str  # "search" | "rag"
    current: str | None  # entity reached so far (search) / resolved answer (rag)
    hops: int | None
    searches_done: int
    resolved: bool


class SolverCodec:
    """Symbol codec for both solver modes (tag search and RAG free text)."""

    def _state(self, messages: Sequence[dict]) -> _SolverState:
        users = [m for m in messages if m.get("role") == "user"]
        if users and users[0]["content"].startswith(_RAG_PROMPT_PREFIX):
            return self._rag_state(users[0]["content"])
        return self._search_state(messages)

    def _rag_state(self, prompt: str) -> _SolverState:
        answer: str | None = None
        resolved = False
        qsplit = prompt.rsplit("\n\nQuestion: ", 1)
        if len(qsplit) == 2:
            m = _QUESTION_RE.search(qsplit[1])
            if m:
                current, hops = m.group(1), int(m.group(2))
                for _ in range(hops):
                    nxt = _forward_step(current, qsplit[0])
                    if nxt is None:
                        current = None
                        break
                    current = nxt
                if current is not None:
                    answer, resolved = current, True
        return _SolverState("rag", answer, None, 0, resolved)

    def _search_state(self, messages: Sequence[dict]) -> _SolverState:
        users = [m for m in messages if m.get("role") == "user"]
        question = ""
        if users and "Question:" in users[0]["content"]:
            question = users[0]["content"].split("Question:", 1)[1]
        m = _QUESTION_RE.search(question)
        observations = _information_texts(messages)
        if not m:
            return _SolverState("search", None, None, len(observations), False)
        current: str | None = m.group(1)
        hops = int(m.group(2))
        for text in observations:
            if current is None:
                break
            current = _forward_step(current, text)
        return _SolverState("search", current, hops, len(observations), current is not None)

    def seed_symbol(self, messages: Sequence[dict]) -> str:
        state = self._state(messages)
        if state.mode == "rag":
            return "RAG:OK" if state.resolved else "RAG:NONE"
        if not state.resolved or state.hops is None or state.hops < 1:
            return "LOST"
        deficit = state.hops - state.searches_done
        if deficit < 0:
            return "OVER"
        return f"LEFT:{min(deficit, MAX_HOPS)}"

    def stops_generation(self, symbol: str) -> bool:
        return symbol in _STOP_SYMBOLS

    def render(self, symbols: Sequence[str], messages: Sequence[dict]) -> str:
        state = self._state(messages)
        entity = state.current or "unknown"
        parts: list[str] = []
        for sym in symbols:
            if sym == "SEARCH":
                if state.mode == "rag":
                    parts.append("The materials are insufficient.")
                else:
                    parts.append(f"<search> {entity} links </search>")
            elif sym == "ANSWER":
                if state.mode == "rag":
                    parts.append(f"Answer: {entity}")
                else:
                    parts.append(f"<answer> {entity} </answer>")
            # EOS and conditioning symbols render to nothing.
        return "\n".join(parts)


class ProposerCodec:
    """Symbol codec for the proposer: backward walk from the given truth."""

    def _state(self, messages: Sequence[dict]) -> tuple[str | None, int]:
        truth: str | None = None
        for m in messages:
            if m.get("role") == "user":
                found = _TRUTH_RE.search(m["content"])
                if found:
                    truth = found.group(1)
                    break
        observations = _information_texts(messages)
        current = truth
        for text in observations:
            if current is None:
                break
            current = _backward_step(current, text)
        return current, len(observations)

    def seed_symbol(self, messages: Sequence[dict]) -> str:
        _, done = self._state(messages)
        return f"P:{min(done, MAX_HOPS)}"

    def stops_generation(self, symbol: str) -> bool:
        return symbol in _STOP_SYMBOLS

    def render(self, symbols: Sequence[str], messages: Sequence[dict]) -> str:
        current, done = self._state(messages)
        entity = current or "unknown"
        parts: list[str] = []
        for sym in symbols:
            if sym == "SEARCH":
                parts.append(f"<search> links to {entity} </search>")
            elif sym == "ASK":
                question = QUESTION_TEMPLATE.format(start=entity, hops=done)
                parts.append(f"<question> {question} </question>")
        return "\n".join(parts)


def _table(vocab: Sequence[str], rows: dict[str, dict[str, float]]) -> np.ndarray:
    idx = {s: i for i, s in enumerate(vocab)}
    logits = np.zeros((len(vocab), len(vocab)), dtype=np.float64)
    for row, cols in rows.items():
        logits[idx[row], :] = _FLOOR
        for col, value in cols.items():
            logits[idx[row], idx[col]] = value
    return logits


def init_solver_policy() -> ToyPolicy:
    return ToyPolicy(vocab=SOLVER_VOCAB, logits=_table(SOLVER_VOCAB, _SOLVER_INIT_ROWS))


def init_proposer_policy() -> ToyPolicy:
    return ToyPolicy(
        vocab=PROPOSER_VOCAB, logits=_table(PROPOSER_VOCAB, _PROPOSER_INIT_ROWS)
    )


@dataclass
class GameBundle:
    """Everything needed to run the self-play loop on the fact-chain world."""

    documents: list[Document]
    successors: dict[str, str]
    entities: list[str]
    index: BM25Index
    proposer_backend: ToyBackend
    solver_backend: ToyBackend
    answer_pool: list[str]
    proposer_limits: RolloutLimits
    solver_limits: RolloutLimits


def build_game(
    num_entities: int = DEFAULT_NUM_ENTITIES, corpus_seed: int = DEFAULT_CORPUS_SEED
) -> GameBundle:
    docs, successors = build_corpus(num_entities, corpus_seed)
    entities = sorted(successors)
    index = index_documents(docs)
    return GameBundle(
        documents=docs,
        successors=successors,
        entities=entities,
        index=index,
        proposer_backend=ToyBackend(init_proposer_policy(), ProposerCodec()),
        solver_backend=ToyBackend(init_solver_policy(), SolverCodec()),
        answer_pool=list(entities),
        # The proposer may walk at most MAX_HOPS steps back; the solver
        # gets slack beyond the deepest question to expose over-searching.
        proposer_limits=RolloutLimits(
            max_search_calls=MAX_HOPS, max_new_tokens_per_turn=8, max_total_model_chars=8192
        ),
        solver_limits=RolloutLimits(
            max_search_calls=MAX_HOPS + 3, max_new_tokens_per_turn=8, max_total_model_chars=8192
        ),
    )


def game_arena_config(game: GameBundle, seed: int = 0, steps: int = 200) -> ArenaConfig:
    """The tuned loop configuration for this game.

    One shared definition so command-line runs and regression checks
    train the exact same way. A batch of 8 keeps the per-step probability
    of an all-invalid proposal batch negligible at the warm-start valid
    rate, and the learning rate is sized for single full-batch updates on
    bigram tables rather than minibatched network steps.
    """
    return ArenaConfig(
        batch_size=8,
        group_size=5,
        steps=steps,
        seed=seed,
        learning_rate=0.1,
        beta=0.01,
        rollout_temperature=1.0,
        question_searches=MAX_HOPS,
        proposer_limits=game.proposer_limits,
        solver_limits=game.solver_limits,
    )


def chain_answer(successors: dict[str, str], start: str, hops: int) -> str:
    current = start
    for _ in range(hops):
        current = successors[current]
    return current


def heldout_items(game: GameBundle, per_hop: int = 10, seed: int = 99) -> list[QaItem]:
    """Held-out chain questions, disjoint RNG from everything trained on."""
    rng = np.random.default_rng(derive_seed(seed, 1))
    items: list[QaItem] = []
    for hops in range(1, MAX_HOPS + 1):
        picks = rng.choice(len(game.entities), size=per_hop, replace=False)
        for k in picks:
            start = game.entities[int(k)]
            question = QUESTION_TEMPLATE.format(start=start, hops=hops)
            items.append(
                QaItem(question=question, golden_answers=(chain_answer(game.successors, start, hops),))
            )
    return items


def heldout_pass_rate(policy: ToyPolicy, game: GameBundle, items: Sequence[QaItem]) -> float:
    """Greedy (temperature 0) pass@1 of a solver policy on held-out items."""
    backend = ToyBackend(policy.snapshot(), SolverCodec())
    report = evaluate(
        items,
        backend,
        game.index,
        EmJudge(),
        sample_cap=len(items),
        seed=0,
        limits=game.solver_limits,
    )
    return report.pass_at_1
