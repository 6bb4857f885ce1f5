"""Admission control for proposed questions.

A candidate question passes a cheap rule filter first (format, emptiness,
search usage, length, answer leakage), then a RAG verification: a solver
must answer it correctly from the proposer's own evidence set plus a few
noise documents sampled from other trajectories in the batch. The noise
kills questions that are only answerable relative to a closed document
set ("which of these documents..." style hacks) while leaving honestly
grounded questions unaffected.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .adjudicator import Judge, normalize
from .backends import Backend, derive_seed
from .dialogue import Role, Terminal, Trajectory, extract_answer
from .retriever import Document
from .rollout import RagTask, RolloutLimits, run_episode

MIN_QUESTION_CHARS = 20
DEFAULT_NOISE_DOCS = 4


class FilterReason(str, Enum):
    OK = "Ok"
    EMPTY_QUESTION = "EmptyQuestion"
    NO_SEARCH_INVOKED = "NoSearchInvoked"
    TOO_SHORT = "TooShort"
    CONTAINS_ANSWER = "ContainsAnswer"
    FORMAT_ERROR = "FormatError"
    RAG_REJECTED = "RagRejected"


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reason: FilterReason

    def __post_init__(self) -> None:
        if self.accepted != (self.reason is FilterReason.OK):
            raise ValueError("accepted must hold exactly when reason is Ok")


@dataclass(frozen=True)
class VerificationRecord:
    """Outcome of the RAG check for one candidate question."""

    question: str
    truth: str
    materials: tuple[Document, ...]
    noise_doc_ids: tuple[str, ...]
    solver_answer: str | None
    judged_correct: bool
    trajectories: tuple[Trajectory, ...] = ()


def rule_filter(question: str, traj: Trajectory, truth: str) -> FilterVerdict:
    """Cheap checks, applied in a fixed order; the first failure names the reason.

    Order: format error, empty question, no search invoked, too short
    (under 20 normalized characters), contains the answer (normalized
    substring). Truncated proposals carry no question and fail as empty.
    """
    if traj.terminal is Terminal.FORMAT_ERROR:
        return FilterVerdict(False, FilterReason.FORMAT_ERROR)
    if not question.strip():
        return FilterVerdict(False, FilterReason.EMPTY_QUESTION)
    if traj.search_count == 0:
        return FilterVerdict(False, FilterReason.NO_SEARCH_INVOKED)
    norm_q = normalize(question)
    if len(norm_q) < MIN_QUESTION_CHARS:
        return FilterVerdict(False, FilterReason.TOO_SHORT)
    norm_truth = normalize(truth)
    if norm_truth and norm_truth in norm_q:
        return FilterVerdict(False, FilterReason.CONTAINS_ANSWER)
    return FilterVerdict(True, FilterReason.OK)


def assemble_materials(
    batch_observations: Sequence[Sequence[Document]],
    i: int,
    m: int = DEFAULT_NOISE_DOCS,
    seed: int = 0,
    corpus: Sequence[Document] | None = None,
) -> tuple[list[Document], list[str]]:
    """Materials for candidate ``i``: its own evidence plus ``m`` noise docs.

    Noise is drawn uniformly without replacement from the union of the
    other candidates' evidence sets, excluding anything in the own set by
    doc_id. If that pool is too small the remainder comes from the corpus
    (same exclusions). Returns ``(materials, noise_doc_ids)``; materials
    keep the own evidence first, in retrieval order.
    """
    own = list(batch_observations[i])
    own_ids = {d.doc_id for d in own}
    pool: list[Document] = []
    pool_ids: set[str] = set()
    for j, obs in enumerate(batch_observations):
        if j == i:
            continue
        for doc in obs:
            if doc.doc_id not in own_ids and doc.doc_id not in pool_ids:
                pool_ids.add(doc.doc_id)
                pool.append(doc)

    rng = np.random.default_rng(derive_seed(seed, i))
    noise: list[Document] = []
    if len(pool) >= m:
        picks = rng.choice(len(pool), size=m, replace=False)
        noise = [pool[k] for k in picks]
    else:
        noise = list(pool)
        if corpus is not None:
            taken = own_ids | pool_ids
            extra_pool = [d for d in corpus if d.doc_id not in taken]
            need = min(m - len(noise), len(extra_pool))
            if need > 0:
                picks = rng.choice(len(extra_pool), size=need, replace=False)
                noise.extend(extra_pool[k] for k in picks)
    return own + noise, [d.doc_id for d in noise]


def rag_verify(
    question: str,
    truth: str,
    materials: Sequence[Document],
    solver_backend: Backend,
    judge: Judge,
    noise_doc_ids: Sequence[str] = (),
    samples: int = 1,
    limits: RolloutLimits = RolloutLimits(),
    seed: int = 0,
) -> VerificationRecord:
    """Check that a RAG solver recovers the truth from the materials.

    Runs ``samples`` episodes at temperature 0 (one by default); every
    sample must be judged correct for the record to pass. A format error
    in the verification episode counts as a wrong answer, never as a
    crash.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    task = RagTask(question=question, materials=tuple(materials))
    answers: list[str | None] = []
    trajs: list[Trajectory] = []
    all_correct = True
    for s in range(samples):
        traj = run_episode(
            Role.SOLVER_RAG,
            task,
            solver_backend,
            index=None,
            limits=limits,
            seed=derive_seed(seed, s),
            temperature=0.0,
        )
        trajs.append(traj)
        if traj.terminal is not Terminal.COMPLETED:
            answers.append(None)
            all_correct = False
            continue
        answer = extract_answer(traj)
        answers.append(answer)
        if not judge.judge(question, answer, truth).correct:
            all_correct = False
    return VerificationRecord(
        question=question,
        truth=truth,
        materials=tuple(materials),
        noise_doc_ids=tuple(noise_doc_ids),
        solver_answer=answers[0],
        judged_correct=all_correct,
        trajectories=tuple(trajs),
    )
