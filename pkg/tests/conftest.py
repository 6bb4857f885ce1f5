"""Shared test helpers: synthetic corpora and the acceptance summary."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from ssp.retriever import Document

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

# One line per acceptance criterion, echoed in the terminal summary so a
# full run ends with a readable pass/fail table.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"[{number:02d}] {'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


# A small word pool with skewed frequencies so document frequencies vary:
# common words appear in many documents, rare ones in few.
_WORDS = [f"word{i:02d}" for i in range(40)]


def make_synthetic_corpus(n_docs: int, seed: int) -> list[Document]:
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, len(_WORDS) + 1)
    weights /= weights.sum()
    docs = []
    for i in range(n_docs):
        title_words = rng.choice(_WORDS, size=2, p=weights)
        body_words = rng.choice(_WORDS, size=int(rng.integers(3, 12)), p=weights)
        docs.append(
            Document(
                doc_id=f"doc{i:04d}",
                title=" ".join(title_words),
                text=" ".join(body_words),
            )
        )
    return docs


def make_synthetic_queries(n_queries: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    queries = []
    for _ in range(n_queries):
        words = rng.choice(_WORDS, size=int(rng.integers(1, 5)))
        queries.append(" ".join(words))
    return queries
