"""Turn grammar and trajectory containers for search dialogues.

A model turn for the tag roles is ``[stray text] [<think>...</think>]``
followed by exactly one action tag, either ``<search>query</search>`` or
the role's terminal tag (``<question>`` for the proposer, ``<answer>``
for the search solver). The RAG solver replies in free text and marks
its answer with a final ``Answer:`` line. ``<information>`` blocks are
produced only by the environment and are never parsed from model output.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from .retriever import Document, RetrievalHit


class Role(str, Enum):
    PROPOSER = "proposer"
    SOLVER_SEARCH = "solver_search"
    SOLVER_RAG = "solver_rag"


class Terminal(str, Enum):
    COMPLETED = "completed"
    TRUNCATED = "truncated"
    FORMAT_ERROR = "format_error"


class SegmentKind(str, Enum):
    THINK = "think"
    SEARCH = "search"
    INFORMATION = "information"
    ANSWER = "answer"
    QUESTION = "question"
    PLAIN = "plain"


class FormatErrorCode(str, Enum):
    UNCLOSED_TAG = "UnclosedTag"
    NESTED_TAG = "NestedTag"
    MULTIPLE_ACTIONS = "MultipleActions"
    MISSING_ACTION = "MissingAction"
    WRONG_ROLE_TAG = "WrongRoleTag"


class ExtractionError(ValueError):
    """Raised when a question/answer is requested from an unsuitable trajectory."""


# Which terminal tag each tag role may emit. RAG turns are free text.
_TERMINAL_TAG = {Role.PROPOSER: "question", Role.SOLVER_SEARCH: "answer"}
_TAG_KIND = {
    "think": SegmentKind.THINK,
    "search": SegmentKind.SEARCH,
    "answer": SegmentKind.ANSWER,
    "question": SegmentKind.QUESTION,
}
_TAG_RE = re.compile(r"</?(think|search|answer|question|information)>")
RAG_ANSWER_MARKER = "Answer:"

# Rendering template for one retrieved document inside an information block.
OBSERVATION_DOC_TEMPLATE = 'Doc {i} (Title: "{title}") {text}'


@dataclass(frozen=True)
class Segment:
    """A typed span of turn text. ``span`` indexes into the source string."""

    kind: SegmentKind
    text: str
    span: tuple[int, int]


@dataclass(frozen=True)
class ParseResult:
    segments: tuple[Segment, ...]
    error: FormatErrorCode | None
    warnings: int

    @property
    def action(self) -> Segment | None:
        """The single action segment when the turn parsed cleanly."""
        if self.error is not None:
            return None
        for seg in self.segments:
            if seg.kind in (SegmentKind.SEARCH, SegmentKind.ANSWER, SegmentKind.QUESTION):
                return seg
        return None


@dataclass
class Turn:
    """One model turn plus the observation the environment injected after it.

    ``observation`` is present exactly when the turn's action was a search
    and the episode continued. ``hits`` keeps the structured retrieval
    results behind the rendered observation. ``chain`` is backend-specific
    sampling metadata (the toy backend records its transition chain here).
    """

    model_text: str
    segments: tuple[Segment, ...]
    observation: str | None = None
    hits: tuple[RetrievalHit, ...] = ()
    chain: Any = None


@dataclass
class Trajectory:
    role: Role
    prompt: str
    turns: list[Turn] = field(default_factory=list)
    terminal: Terminal = Terminal.COMPLETED
    format_reason: FormatErrorCode | None = None
    warnings: int = 0

    @property
    def model_chars(self) -> int:
        return sum(len(t.model_text) for t in self.turns)

    @property
    def search_count(self) -> int:
        return sum(
            1
            for t in self.turns
            for s in t.segments
            if s.kind is SegmentKind.SEARCH
        )


def parse_turn(raw: str, role: Role) -> ParseResult:
    """Parse one turn of model output under the role's grammar.

    Returns the parsed segments plus an error code on grammar violations;
    on error the segments hold the successfully parsed prefix. Stray text
    around tags is kept as Plain segments and bumps the warning counter,
    as does ignored trailing text after the action.
    """
    if role is Role.SOLVER_RAG:
        return _parse_rag_turn(raw)

    terminal_tag = _TERMINAL_TAG[role]
    tokens = [
        (m.start(), m.end(), m.group(1), m.group(0).startswith("</"))
        for m in _TAG_RE.finditer(raw)
    ]
    segments: list[Segment] = []
    warnings = 0
    pos = 0
    think_seen = False
    action_seen = False

    def fail(code: FormatErrorCode) -> ParseResult:
        return ParseResult(tuple(segments), code, warnings)

    i = 0
    while i < len(tokens):
        start, end, name, is_close = tokens[i]
        gap = raw[pos:start]
        if gap.strip():
            warnings += 1
            if not action_seen:
                segments.append(Segment(SegmentKind.PLAIN, gap, (pos, start)))
            # trailing text after the action is ignored entirely
        if action_seen:
            return fail(FormatErrorCode.MULTIPLE_ACTIONS)
        if is_close:
            # a closer with no matching opener
            return fail(FormatErrorCode.UNCLOSED_TAG)
        if name == "information":
            return fail(FormatErrorCode.WRONG_ROLE_TAG)
        if name not in ("think", "search", terminal_tag):
            # a known action tag that belongs to a different role
            return fail(FormatErrorCode.WRONG_ROLE_TAG)
        if name == "think" and think_seen:
            return fail(FormatErrorCode.MULTIPLE_ACTIONS)
        # interior must run straight to the matching closer
        if i + 1 >= len(tokens):
            return fail(FormatErrorCode.UNCLOSED_TAG)
        nstart, nend, nname, nclose = tokens[i + 1]
        if not nclose:
            return fail(FormatErrorCode.NESTED_TAG)
        if nname != name:
            return fail(FormatErrorCode.UNCLOSED_TAG)
        interior = raw[end:nstart]
        segments.append(Segment(_TAG_KIND[name], interior, (end, nstart)))
        if name == "think":
            think_seen = True
        else:
            action_seen = True
        pos = nend
        i += 2

    tail = raw[pos:]
    if tail.strip():
        warnings += 1
        if not action_seen:
            segments.append(Segment(SegmentKind.PLAIN, tail, (pos, len(raw))))
    if not action_seen:
        return ParseResult(tuple(segments), FormatErrorCode.MISSING_ACTION, warnings)
    return ParseResult(tuple(segments), None, warnings)


def _parse_rag_turn(raw: str) -> ParseResult:
    """Free-text turn: everything up to the last ``Answer:`` marker is reasoning."""
    idx = raw.rfind(RAG_ANSWER_MARKER)
    if idx < 0:
        segs = (
            (Segment(SegmentKind.PLAIN, raw, (0, len(raw))),) if raw.strip() else ()
        )
        return ParseResult(segs, FormatErrorCode.MISSING_ACTION, 0)
    segments: list[Segment] = []
    if raw[:idx].strip():
        segments.append(Segment(SegmentKind.PLAIN, raw[:idx], (0, idx)))
    astart = idx + len(RAG_ANSWER_MARKER)
    segments.append(Segment(SegmentKind.ANSWER, raw[astart:].strip(), (astart, len(raw))))
    return ParseResult(tuple(segments), None, 0)


def render_segments(segments: Iterable[Segment]) -> str:
    """Inverse of :func:`parse_turn` for tag-role segments (modulo spans)."""
    parts: list[str] = []
    for seg in segments:
        if seg.kind is SegmentKind.PLAIN:
            parts.append(seg.text)
        elif seg.kind is SegmentKind.INFORMATION:
            parts.append(wrap_information(seg.text))
        else:
            parts.append(f"<{seg.kind.value}>{seg.text}</{seg.kind.value}>")
    return "".join(parts)


def render_observation(hits: Iterable[RetrievalHit]) -> str:
    """Render retrieval hits as the inner text of an information block."""
    lines = [
        OBSERVATION_DOC_TEMPLATE.format(i=i, title=h.doc.title, text=h.doc.text)
        for i, h in enumerate(hits, start=1)
    ]
    return "\n".join(lines)


def wrap_information(inner: str) -> str:
    return f"<information>\n{inner}\n</information>"


def extract_question(traj: Trajectory) -> str:
    """The proposed question of a completed proposer trajectory."""
    if traj.role is not Role.PROPOSER:
        raise ExtractionError(f"cannot extract a question from role {traj.role.value}")
    if traj.terminal is not Terminal.COMPLETED:
        raise ExtractionError(f"trajectory terminal is {traj.terminal.value}, not completed")
    seg = _final_action(traj)
    if seg is None or seg.kind is not SegmentKind.QUESTION:
        raise ExtractionError("completed proposer trajectory lacks a question segment")
    return seg.text.strip()


def extract_answer(traj: Trajectory) -> str:
    """The final answer of a completed solver trajectory (either solver role)."""
    if traj.role is Role.PROPOSER:
        raise ExtractionError("cannot extract an answer from a proposer trajectory")
    if traj.terminal is not Terminal.COMPLETED:
        raise ExtractionError(f"trajectory terminal is {traj.terminal.value}, not completed")
    seg = _final_action(traj)
    if seg is None or seg.kind is not SegmentKind.ANSWER:
        raise ExtractionError("completed solver trajectory lacks an answer segment")
    return seg.text.strip()


def _final_action(traj: Trajectory) -> Segment | None:
    if not traj.turns:
        return None
    for seg in reversed(traj.turns[-1].segments):
        if seg.kind in (SegmentKind.SEARCH, SegmentKind.ANSWER, SegmentKind.QUESTION):
            return seg
    return None


def collect_observations(traj: Trajectory) -> list[Document]:
    """All retrieved documents across turns, deduplicated by doc_id.

    The first retrieval of a document wins; order follows retrieval order.
    This is the trajectory's evidence set used for verification materials.
    """
    seen: set[str] = set()
    docs: list[Document] = []
    for turn in traj.turns:
        for hit in turn.hits:
            if hit.doc.doc_id not in seen:
                seen.add(hit.doc.doc_id)
                docs.append(hit.doc)
    return docs


def flatten_segments(traj: Trajectory) -> list[Segment]:
    """Model segments of every turn, with one Information segment per observation.

    The prompt is not part of the flattened sequence; it never contributes
    to the loss.
    """
    flat: list[Segment] = []
    for turn in traj.turns:
        flat.extend(turn.segments)
        if turn.observation is not None:
            flat.append(
                Segment(SegmentKind.INFORMATION, turn.observation, (0, len(turn.observation)))
            )
    return flat


def loss_mask(traj: Trajectory) -> list[bool]:
    """True exactly on model-produced segments of :func:`flatten_segments`.

    Information segments are environment-injected and excluded from the
    loss. Any policy tokenization must map segments to token ranges and
    inherit these bits.
    """
    return [seg.kind is not SegmentKind.INFORMATION for seg in flatten_segments(traj)]


def dump_trajectory(traj: Trajectory) -> str:
    """One byte-stable JSON line per trajectory."""
    payload = {
        "role": traj.role.value,
        "prompt": traj.prompt,
        "turns": [
            {"model_text": t.model_text, "observation": t.observation} for t in traj.turns
        ],
        "terminal": traj.terminal.value,
    }
    return json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def load_trajectory(line: str) -> Trajectory:
    """Rebuild a trajectory from a dumped line. Segments are reparsed; hits are not persisted."""
    payload = json.loads(line)
    role = Role(payload["role"])
    turns = []
    for t in payload["turns"]:
        parsed = parse_turn(t["model_text"], role)
        turns.append(
            Turn(model_text=t["model_text"], segments=parsed.segments, observation=t["observation"])
        )
    return Trajectory(
        role=role,
        prompt=payload["prompt"],
        turns=turns,
        terminal=Terminal(payload["terminal"]),
    )
