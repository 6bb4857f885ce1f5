"""QA benchmark evaluation: run the search solver over a QA file at
temperature 0 and report pass@1.

Large files are subsampled without replacement to ``sample_cap`` items
(500 by default). The sample is a permutation prefix: under the same
seed, a smaller cap always selects a prefix of a larger cap's sample, so
quick smoke evals are consistent with full ones.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .adjudicator import Judge, judge_any
from .backends import Backend, BackendError, derive_seed
from .dialogue import Role, Terminal, extract_answer
from .retriever import BM25Index
from .rollout import RolloutLimits, run_episode

DEFAULT_SAMPLE_CAP = 500

CSV_HEADER = "dataset,n_total,n_evaluated,n_correct,pass_at_1"


@dataclass(frozen=True)
class QaItem:
    question: str
    golden_answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.question:
            raise ValueError("question must be non-empty")
        if not self.golden_answers:
            raise ValueError("golden_answers must be non-empty")


@dataclass(frozen=True)
class ItemRecord:
    index: int
    question: str
    prediction: str | None
    correct: bool
    matched_golden: int | None
    terminal: str | None
    error: str | None


@dataclass(frozen=True)
class EvalReport:
    n_total: int
    n_evaluated: int
    n_correct: int
    pass_at_1: float
    records: tuple[ItemRecord, ...]


def load_qa_items(path: str | os.PathLike[str]) -> list[QaItem]:
    """Read one JSON object per line: {"question", "golden_answers"}."""
    items: list[QaItem] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            try:
                question = obj["question"]
                goldens = obj["golden_answers"]
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
            if not isinstance(question, str) or not isinstance(goldens, list):
                raise ValueError(f"{path}:{lineno}: malformed record")
            if not all(isinstance(g, str) for g in goldens):
                raise ValueError(f"{path}:{lineno}: golden answers must be strings")
            items.append(QaItem(question=question, golden_answers=tuple(goldens)))
    if not items:
        raise ValueError(f"{path}: no QA items found")
    return items


def sample_indices(n_total: int, sample_cap: int, seed: int) -> list[int]:
    """Uniform sample without replacement as a permutation prefix."""
    if sample_cap < 1:
        raise ValueError("sample_cap must be >= 1")
    rng = np.random.default_rng(derive_seed(seed))
    order = rng.permutation(n_total)
    return [int(k) for k in order[: min(sample_cap, n_total)]]


def _evaluate_item(
    index_in_file: int,
    item: QaItem,
    backend: Backend,
    index: BM25Index | None,
    judge: Judge,
    limits: RolloutLimits,
    seed: int,
    top_k: int,
) -> ItemRecord:
    try:
        traj = run_episode(
            Role.SOLVER_SEARCH,
            item.question,
            backend,
            index=index,
            limits=limits,
            seed=derive_seed(seed, index_in_file),
            temperature=0.0,
            top_k=top_k,
        )
    except BackendError as exc:
        return ItemRecord(
            index=index_in_file,
            question=item.question,
            prediction=None,
            correct=False,
            matched_golden=None,
            terminal=None,
            error=str(exc),
        )
    if traj.terminal is not Terminal.COMPLETED:
        return ItemRecord(
            index=index_in_file,
            question=item.question,
            prediction=None,
            correct=False,
            matched_golden=None,
            terminal=traj.terminal.value,
            error=None,
        )
    prediction = extract_answer(traj)
    correct, matched = judge_any(judge, item.question, prediction, item.golden_answers)
    return ItemRecord(
        index=index_in_file,
        question=item.question,
        prediction=prediction,
        correct=correct,
        matched_golden=matched,
        terminal=traj.terminal.value,
        error=None,
    )


def evaluate(
    qa: str | os.PathLike[str] | Sequence[QaItem],
    backend: Backend,
    index: BM25Index | None,
    judge: Judge,
    sample_cap: int = DEFAULT_SAMPLE_CAP,
    seed: int = 0,
    limits: RolloutLimits = RolloutLimits(),
    top_k: int = 3,
    workers: int = 1,
) -> EvalReport:
    """One temperature-0 solver episode per sampled item; pass@1 on the result.

    Backend failures on individual items are recorded as incorrect with
    an error flag rather than aborting the run. Records are ordered by
    sample position, so reports are deterministic under a fixed seed and
    a scripted backend.
    """
    items = load_qa_items(qa) if isinstance(qa, (str, Path, os.PathLike)) else list(qa)
    if not items:
        raise ValueError("no QA items to evaluate")
    chosen = sample_indices(len(items), sample_cap, seed)

    def work(k: int) -> ItemRecord:
        return _evaluate_item(k, items[k], backend, index, judge, limits, seed, top_k)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(work, chosen))
    else:
        records = [work(k) for k in chosen]

    n_correct = sum(1 for r in records if r.correct)
    return EvalReport(
        n_total=len(items),
        n_evaluated=len(records),
        n_correct=n_correct,
        pass_at_1=n_correct / len(records),
        records=tuple(records),
    )


def csv_summary_row(dataset: str, report: EvalReport) -> str:
    if "," in dataset:
        raise ValueError("dataset name must not contain commas")
    return (
        f"{dataset},{report.n_total},{report.n_evaluated},"
        f"{report.n_correct},{report.pass_at_1:.6f}"
    )


def append_csv_summary(path: str | os.PathLike[str], dataset: str, report: EvalReport) -> None:
    """Append one summary row, writing the header when the file is new."""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new_file:
            fh.write(CSV_HEADER + "\n")
        fh.write(csv_summary_row(dataset, report) + "\n")
