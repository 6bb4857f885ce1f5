"""Lexical BM25 retrieval over a JSONL corpus, plus a small HTTP search service.

The index is immutable once built. Scoring uses the BM25 variant with a
nonnegative idf, ``ln(1 + (N - df + 0.5) / (df + 0.5))``, over the
concatenation of title and text tokens. Ties in score are broken by
ascending ``doc_id`` so rankings are reproducible across runs and
insertion orders.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from math import log
from pathlib import Path

BM25_K1 = 1.2
BM25_B = 0.75
DEFAULT_TOP_K = 3

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class CorpusError(ValueError):
    """Raised when a corpus file cannot be ingested."""


class InvalidQuery(ValueError):
    """Raised when a query normalizes to zero tokens."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    """One corpus record. ``doc_id``, ``title`` and ``text`` are non-empty."""

    doc_id: str
    title: str
    text: str

    def __post_init__(self) -> None:
        for name in ("doc_id", "title", "text"):
            if not getattr(self, name).strip():
                raise ValueError(f"document field {name!r} is empty")


@dataclass(frozen=True)
class RetrievalHit:
    """A scored document. Scores are strictly positive by construction."""

    doc: Document
    score: float

    def __post_init__(self) -> None:
        if not self.score > 0.0:
            raise ValueError(f"retrieval hit must have positive score, got {self.score}")


@dataclass(frozen=True)
class IndexStats:
    num_docs: int
    num_terms: int
    avg_doc_len: float


@dataclass(frozen=True)
class BM25Index:
    """Immutable inverted index. Build via :func:`build_index` or :func:`index_documents`."""

    documents: tuple[Document, ...]
    # term -> tuple of (position in self.documents, term frequency)
    postings: dict[str, tuple[tuple[int, int], ...]] = field(repr=False)
    doc_lengths: tuple[int, ...] = field(repr=False)
    stats: IndexStats = field(repr=False)


def index_documents(documents: list[Document]) -> BM25Index:
    """Build an index over in-memory documents.

    Raises:
        CorpusError: on duplicate ``doc_id``.
    """
    seen: set[str] = set()
    for doc in documents:
        if doc.doc_id in seen:
            raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)

    postings: dict[str, list[tuple[int, int]]] = {}
    lengths: list[int] = []
    for pos, doc in enumerate(documents):
        tokens = tokenize(doc.title) + tokenize(doc.text)
        lengths.append(len(tokens))
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((pos, tf))

    n = len(documents)
    avg_len = (sum(lengths) / n) if n else 0.0
    stats = IndexStats(num_docs=n, num_terms=len(postings), avg_doc_len=avg_len)
    frozen = {term: tuple(entries) for term, entries in postings.items()}
    return BM25Index(
        documents=tuple(documents),
        postings=frozen,
        doc_lengths=tuple(lengths),
        stats=stats,
    )


def build_index(corpus_path: str | Path) -> BM25Index:
    """Ingest a JSONL corpus file.

    Each line holds ``{"id": ..., "title": ..., "text": ...}``. Ingestion
    errors name the offending 1-based line number so corpora are fixable.
    """
    documents: list[Document] = []
    ids_to_line: dict[str, int] = {}
    path = Path(corpus_path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            try:
                doc = Document(
                    doc_id=str(record["id"]),
                    title=str(record["title"]),
                    text=str(record["text"]),
                )
            except KeyError as exc:
                raise CorpusError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            if doc.doc_id in ids_to_line:
                raise CorpusError(
                    f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r} "
                    f"(first seen at line {ids_to_line[doc.doc_id]})"
                )
            ids_to_line[doc.doc_id] = lineno
            documents.append(doc)
    return index_documents(documents)


def save_index(index: BM25Index, path: str | Path) -> None:
    """Persist an index as a JSON artifact (documents plus scoring params)."""
    payload = {
        "format": "ssp-bm25-v1",
        "k1": BM25_K1,
        "b": BM25_B,
        "documents": [
            {"id": d.doc_id, "title": d.title, "text": d.text} for d in index.documents
        ],
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def load_index(path: str | Path) -> BM25Index:
    """Load a previously saved index artifact. Rebuild is deterministic."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "ssp-bm25-v1":
        raise CorpusError(f"{path}: not an index artifact")
    documents = [
        Document(doc_id=str(r["id"]), title=str(r["title"]), text=str(r["text"]))
        for r in payload["documents"]
    ]
    return index_documents(documents)


def retrieve(index: BM25Index, query: str, k: int = DEFAULT_TOP_K) -> list[RetrievalHit]:
    """Score the corpus against ``query`` and return the top ``k`` hits.

    Only documents with a strictly positive score are returned, so the
    result may be shorter than ``k``. Duplicate query terms count once;
    terms are processed in first-occurrence order so accumulation is
    deterministic.

    Raises:
        InvalidQuery: if the query has no tokens after normalization.
        ValueError: if ``k < 1``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    terms = tokenize(query)
    if not terms:
        raise InvalidQuery(f"query {query!r} is empty after normalization")

    seen_terms: set[str] = set()
    scores: dict[int, float] = {}
    n = index.stats.num_docs
    avg_len = index.stats.avg_doc_len
    for term in terms:
        if term in seen_terms:
            continue
        seen_terms.add(term)
        entries = index.postings.get(term)
        if not entries:
            continue
        df = len(entries)
        idf = log(1.0 + (n - df + 0.5) / (df + 0.5))
        for pos, tf in entries:
            dl = index.doc_lengths[pos]
            denom = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avg_len)
            scores[pos] = scores.get(pos, 0.0) + idf * (tf * (BM25_K1 + 1.0)) / denom

    ranked = sorted(
        ((pos, s) for pos, s in scores.items() if s > 0.0),
        key=lambda item: (-item[1], index.documents[item[0]].doc_id),
    )
    return [RetrievalHit(doc=index.documents[pos], score=s) for pos, s in ranked[:k]]


class _RetrieverHandler(BaseHTTPRequestHandler):
    """POST /retrieve with ``{"queries": [...], "topk": n}``."""

    index: BM25Index = None  # type: ignore[assignment]

    def log_message(self, fmt: str, *args) -> None:  # noqa: A003 - silence default stderr log
        pass

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:  # noqa: N802 - http.server API
        if self.path != "/retrieve":
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length)
            payload = json.loads(raw)
            queries = payload["queries"]
            topk = payload["topk"]
            if not isinstance(queries, list) or not all(isinstance(q, str) for q in queries):
                raise ValueError("queries must be a list of strings")
            if not isinstance(topk, int) or isinstance(topk, bool) or topk < 1:
                raise ValueError("topk must be an integer >= 1")
            result = []
            for query in queries:
                hits = retrieve(self.index, query, k=topk)
                result.append(
                    [
                        {
                            "id": h.doc.doc_id,
                            "title": h.doc.title,
                            "text": h.doc.text,
                            "score": h.score,
                        }
                        for h in hits
                    ]
                )
        except (KeyError, ValueError, json.JSONDecodeError, InvalidQuery) as exc:
            self._reply(400, {"error": str(exc)})
            return
        self._reply(200, {"result": result})


def make_retriever_server(index: BM25Index, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Create (but do not start) the HTTP service. ``port=0`` picks a free port."""
    handler = type("BoundRetrieverHandler", (_RetrieverHandler,), {"index": index})
    return ThreadingHTTPServer((host, port), handler)


def serve_retriever(index: BM25Index, bind: str = "127.0.0.1:8001") -> None:
    """Serve ``/retrieve`` until interrupted. Reads are lock-free; the index is immutable."""
    host, _, port = bind.partition(":")
    server = make_retriever_server(index, host=host or "127.0.0.1", port=int(port or "8001"))
    try:
        server.serve_forever()
    finally:
        server.server_close()


def start_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    """Run a server on a daemon thread; callers shut it down via ``server.shutdown()``."""
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
