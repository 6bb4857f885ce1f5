"""Text generation behind one interface: scripted, toy-policy and remote HTTP.

All backends share stop-sequence semantics: the first occurrence of any
stop sequence terminates the output, the returned text ends exactly at
(and includes) the matched sequence, and ``finish`` is ``STOP`` with
``stop_hit`` set. Every other termination (token budget, natural end of
generation, a scripted line without a stop match) reports ``LENGTH``
with ``stop_hit = None``.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol, Sequence

import numpy as np
import requests

from .credit import TokenChain, ToyPolicy

ENV_BASE_URL = "SSP_LLM_BASE_URL"
ENV_API_KEY = "SSP_LLM_API_KEY"

_MASK64 = (1 << 64) - 1
_VALID_ROLES = ("system", "user", "assistant")


class Finish(str, Enum):
    STOP = "stop"
    LENGTH = "length"


class BackendError(RuntimeError):
    """Episode-level generation failure (distinct from a model format error)."""

    def __init__(self, kind: str, message: str) -> None:
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class UnsupportedOperation(RuntimeError):
    """Raised when a backend cannot satisfy an operation (e.g. snapshotting)."""


def derive_seed(*parts: int) -> int:
    """Stable mixing of integer seed parts into one 64-bit seed."""
    ss = np.random.SeedSequence([int(p) & _MASK64 for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class GenerationRequest:
    """One generation call. ``messages`` follow chat order (system/user/assistant)."""

    messages: tuple[dict, ...]
    temperature: float = 1.0
    max_new_tokens: int = 256
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))
        if self.temperature < 0.0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        for msg in self.messages:
            if msg.get("role") not in _VALID_ROLES:
                raise ValueError(f"message role must be one of {_VALID_ROLES}, got {msg.get('role')!r}")
            if not isinstance(msg.get("content"), str):
                raise ValueError("message content must be a string")


@dataclass(frozen=True)
class GenerationResult:
    """Backend output. ``chain`` carries the toy backend's sampled transitions."""

    text: str
    finish: Finish
    stop_hit: str | None = None
    chain: TokenChain | None = None

    def __post_init__(self) -> None:
        if self.finish is Finish.STOP:
            if self.stop_hit is None:
                raise ValueError("finish=stop requires stop_hit")
            if not self.text.endswith(self.stop_hit):
                raise ValueError("text must end exactly at the matched stop sequence")
        elif self.stop_hit is not None:
            raise ValueError("stop_hit requires finish=stop")


def _truncate_at_stop(text: str, stops: Sequence[str]) -> tuple[str, str | None]:
    """Cut ``text`` at the earliest stop occurrence; ties pick the longer match."""
    best: tuple[int, str] | None = None
    for stop in stops:
        if not stop:
            continue
        idx = text.find(stop)
        if idx < 0:
            continue
        if best is None or idx < best[0] or (idx == best[0] and len(stop) > len(best[1])):
            best = (idx, stop)
    if best is None:
        return text, None
    idx, stop = best
    return text[: idx + len(stop)], stop


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationResult: ...


class ScriptedBackend:
    """Plays back a fixed list of turn texts, one per generate call.

    Deterministic test policy. Single consumer: calls are serialized with
    a lock and consume lines in order; running out raises
    ``BackendError("ScriptExhausted", ...)``.
    """

    def __init__(self, lines: Sequence[str]) -> None:
        self._lines = list(lines)
        self._next = 0
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return len(self._lines) - self._next

    def generate(self, request: GenerationRequest) -> GenerationResult:
        with self._lock:
            if self._next >= len(self._lines):
                raise BackendError("ScriptExhausted", f"script of {len(self._lines)} lines is exhausted")
            line = self._lines[self._next]
            self._next += 1
        text, hit = _truncate_at_stop(line, request.stop_sequences)
        if hit is not None:
            return GenerationResult(text=text, finish=Finish.STOP, stop_hit=hit)
        return GenerationResult(text=text, finish=Finish.LENGTH)


class SymbolCodec(Protocol):
    """Bridges a toy policy's symbol stream and the dialogue text surface."""

    def seed_symbol(self, messages: Sequence[dict]) -> str:
        """Conditioning symbol for the next turn, derived from the chat so far."""
        ...

    def stops_generation(self, symbol: str) -> bool:
        """True when a sampled symbol ends the turn (action tags, terminator)."""
        ...

    def render(self, symbols: Sequence[str], messages: Sequence[dict]) -> str:
        """Map one turn's sampled symbols to model text."""
        ...


class ToyBackend:
    """Samples turns from a bigram :class:`ToyPolicy` through a codec.

    Generation is a pure function of (request, request.seed): the seed
    feeds a fresh RNG, the codec derives the conditioning symbol from the
    messages, and symbols are drawn until an action symbol, the
    terminator, or the token budget. Temperature 0 takes argmax with
    lowest-index tie-breaking.
    """

    def __init__(self, policy: ToyPolicy, codec: SymbolCodec) -> None:
        self.policy = policy
        self.codec = codec

    def generate(self, request: GenerationRequest) -> GenerationResult:
        rng = np.random.default_rng(derive_seed(request.seed if request.seed is not None else 0))
        context = self.codec.seed_symbol(request.messages)
        prev_idx = self.policy.index(context)
        symbols: list[str] = []
        prevs: list[int] = []
        nexts: list[int] = []
        for _ in range(request.max_new_tokens):
            p = self.policy.probs(prev_idx, temperature=request.temperature)
            if request.temperature == 0.0:
                nxt = int(np.argmax(p))
            else:
                nxt = int(rng.choice(len(p), p=p))
            prevs.append(prev_idx)
            nexts.append(nxt)
            symbol = self.policy.vocab[nxt]
            symbols.append(symbol)
            prev_idx = nxt
            if self.codec.stops_generation(symbol):
                break
        chain = TokenChain.from_lists(prevs, nexts)
        text = self.codec.render(symbols, request.messages)
        text, hit = _truncate_at_stop(text, request.stop_sequences)
        if hit is not None:
            return GenerationResult(text=text, finish=Finish.STOP, stop_hit=hit, chain=chain)
        return GenerationResult(text=text, finish=Finish.LENGTH, chain=chain)


def snapshot_reference(backend: Backend) -> ToyPolicy:
    """Frozen copy of a toy backend's policy, used as the KL anchor."""
    if isinstance(backend, ToyBackend):
        return backend.policy.snapshot()
    raise UnsupportedOperation(f"{type(backend).__name__} does not expose policy parameters")


@dataclass
class RemoteBackend:
    """HTTP generation client.

    POSTs ``{"messages", "temperature", "max_new_tokens", "stop"}`` to
    ``{base_url}/generate`` and expects ``{"text", "finish", "stop_hit"}``.
    Transport failures and 5xx responses retry with exponential backoff
    before raising ``BackendError``; client errors raise immediately.
    Partial text is never reported as a stop: ``finish`` is STOP only for
    a verified stop-sequence match.
    """

    base_url: str | None = None
    api_key: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.2
    session: requests.Session = field(default_factory=requests.Session, repr=False)

    def __post_init__(self) -> None:
        if self.base_url is None:
            self.base_url = os.environ.get(ENV_BASE_URL)
        if self.api_key is None:
            self.api_key = os.environ.get(ENV_API_KEY)
        if not self.base_url:
            raise BackendError("Config", f"no base URL; set {ENV_BASE_URL} or pass base_url")
        self.base_url = self.base_url.rstrip("/")

    def generate(self, request: GenerationRequest) -> GenerationResult:
        payload = {
            "messages": list(request.messages),
            "temperature": request.temperature,
            "max_new_tokens": request.max_new_tokens,
            "stop": list(request.stop_sequences),
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = "unknown"
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self.session.post(
                    f"{self.base_url}/generate", json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = f"transport: {exc}"
                continue
            if resp.status_code >= 500:
                last_error = f"server error {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise BackendError("Http", f"status {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                text = body["text"]
                finish = body["finish"]
                stop_hit = body.get("stop_hit")
            except (ValueError, KeyError, TypeError) as exc:
                raise BackendError("Protocol", f"malformed generate response: {exc}") from exc
            return self._normalize(text, finish, stop_hit, request.stop_sequences)
        raise BackendError("Http", f"giving up after {self.max_retries + 1} attempts ({last_error})")

    def _normalize(
        self, text: str, finish: str, stop_hit: str | None, stops: Sequence[str]
    ) -> GenerationResult:
        if not isinstance(text, str) or finish not in ("stop", "length"):
            raise BackendError("Protocol", f"bad generate payload (finish={finish!r})")
        # Trust but verify: re-derive the stop cut from the text itself.
        cut, hit = _truncate_at_stop(text, stops)
        if hit is not None:
            return GenerationResult(text=cut, finish=Finish.STOP, stop_hit=hit)
        if finish == "stop" and stop_hit:
            # Server claims a stop we cannot verify in the text.
            raise BackendError("Protocol", f"server reported stop_hit={stop_hit!r} absent from text")
        return GenerationResult(text=text, finish=Finish.LENGTH)
