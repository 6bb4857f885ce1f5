"""Answer normalization and correctness judging.

Two judge modes share one interface: a normalized containment match (the
default, no model calls) and an LLM judge that asks a backend to answer
strictly "Correct" or "Wrong". Containment is one-directional: the
ground truth, as a whole-word sequence, must appear in order inside the
prediction. That direction matches the judge rubric's "the model answer
includes the correct answer" criterion; gaps are allowed so middle
initials or titles inside the prediction do not break a match.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence

from . import prompts
from .backends import Backend, GenerationRequest

_ARTICLES = ("a", "an", "the")
_PUNCT_RE = re.compile(r"[^0-9a-z\s]")
_WS_RE = re.compile(r"\s+")


class JudgeMode(str, Enum):
    EM = "em"
    LLM = "llm"


class JudgeProtocolError(RuntimeError):
    """The LLM judge replied with something other than Correct/Wrong."""


@dataclass(frozen=True)
class Judgment:
    correct: bool
    mode: JudgeMode
    raw_judge_text: str | None = None


def normalize(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace, drop leading articles."""
    out = _PUNCT_RE.sub(" ", text.lower())
    out = _WS_RE.sub(" ", out).strip()
    tokens = out.split(" ") if out else []
    while tokens and tokens[0] in _ARTICLES:
        tokens = tokens[1:]
    return " ".join(tokens)


def _is_subsequence(needle: Sequence[str], haystack: Sequence[str]) -> bool:
    it = iter(haystack)
    return all(tok in it for tok in needle)


def em_match(prediction: str, truth: str) -> bool:
    """Exact or whole-word containment match on normalized forms.

    The truth's token sequence must appear in order (gaps allowed) within
    the prediction's tokens. An empty normalized truth only matches an
    empty normalized prediction.
    """
    pred_tokens = normalize(prediction).split()
    truth_tokens = normalize(truth).split()
    if not truth_tokens:
        return not pred_tokens
    return _is_subsequence(truth_tokens, pred_tokens)


class Judge(Protocol):
    def judge(self, question: str, prediction: str, truth: str) -> Judgment: ...


class EmJudge:
    """Deterministic normalized-containment judge; ignores the question."""

    def judge(self, question: str, prediction: str, truth: str) -> Judgment:
        return Judgment(correct=em_match(prediction, truth), mode=JudgeMode.EM)


class LlmJudge:
    """Backend-driven judge with a strict two-word protocol.

    The prompt is rendered from the shipped template at temperature 0.
    Replies must be exactly "Correct" or "Wrong" after trimming; anything
    else is retried (``retries`` more calls), then raises
    :class:`JudgeProtocolError`.
    """

    def __init__(self, backend: Backend, retries: int = 1, max_new_tokens: int = 8) -> None:
        self.backend = backend
        self.retries = retries
        self.max_new_tokens = max_new_tokens

    def judge(self, question: str, prediction: str, truth: str) -> Judgment:
        messages = prompts.judge_messages(question, prediction, truth)
        last = ""
        for _ in range(self.retries + 1):
            result = self.backend.generate(
                GenerationRequest(
                    messages=tuple(messages),
                    temperature=0.0,
                    max_new_tokens=self.max_new_tokens,
                )
            )
            last = result.text.strip()
            if last == "Correct":
                return Judgment(correct=True, mode=JudgeMode.LLM, raw_judge_text=result.text)
            if last == "Wrong":
                return Judgment(correct=False, mode=JudgeMode.LLM, raw_judge_text=result.text)
        raise JudgeProtocolError(f"judge reply not in {{Correct, Wrong}}: {last!r}")


def judge_any(
    judge: Judge, question: str, prediction: str, goldens: Sequence[str]
) -> tuple[bool, int | None]:
    """First-accept scan over golden answers, in the order given."""
    for i, golden in enumerate(goldens):
        if judge.judge(question, prediction, golden).correct:
            return True, i
    return False, None
