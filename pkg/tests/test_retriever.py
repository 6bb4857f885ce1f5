"""Retriever tests, anchored by an independent brute-force BM25 oracle."""

from __future__ import annotations

import math
import re

import pytest

from conftest import FIXTURES, make_synthetic_corpus, make_synthetic_queries
from ssp.retriever import (
    BM25Index,
    CorpusError,
    Document,
    InvalidQuery,
    build_index,
    index_documents,
    load_index,
    retrieve,
    save_index,
    tokenize,
)

# ------------------------------------------------------------------ oracle
#
# Deliberately separate implementation: split-based tokenizer, per-query
# full scan, no inverted index. Kept dumb so disagreement means a bug in
# the fast path, not a shared mistake.


def oracle_tokenize(text: str) -> list[str]:
    return [t for t in re.split(r"[^a-z0-9]+", text.lower()) if t]


def oracle_scores(docs: list[Document], query: str) -> dict[str, float]:
    k1, b = 1.2, 0.75
    doc_tokens = [oracle_tokenize(d.title) + oracle_tokenize(d.text) for d in docs]
    n = len(docs)
    avg_len = sum(len(t) for t in doc_tokens) / n if n else 0.0
    scores: dict[str, float] = {}
    for term in dict.fromkeys(oracle_tokenize(query)):
        df = sum(1 for tokens in doc_tokens if term in tokens)
        if df == 0:
            continue
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        for doc, tokens in zip(docs, doc_tokens):
            tf = tokens.count(term)
            if tf == 0:
                continue
            denom = tf + k1 * (1.0 - b + b * len(tokens) / avg_len)
            scores[doc.doc_id] = scores.get(doc.doc_id, 0.0) + idf * tf * (k1 + 1.0) / denom
    return scores


def oracle_topk(docs: list[Document], query: str, k: int) -> list[tuple[str, float]]:
    scores = oracle_scores(docs, query)
    ranked = sorted(
        ((doc_id, s) for doc_id, s in scores.items() if s > 0.0),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


def assert_matches_oracle(index: BM25Index, docs: list[Document], query: str, k: int) -> None:
    got = [(h.doc.doc_id, h.score) for h in retrieve(index, query, k)]
    want = oracle_topk(docs, query, k)
    assert [g[0] for g in got] == [w[0] for w in want], f"order mismatch for {query!r}"
    for (gid, gscore), (_, wscore) in zip(got, want):
        assert gscore == pytest.approx(wscore, abs=1e-9), f"score mismatch on {gid}"


# ------------------------------------------------------------------- tests


def test_tokenizer_lowercases_and_splits_on_non_alphanumerics():
    assert tokenize("Apple, fruit-basket 42!") == ["apple", "fruit", "basket", "42"]
    assert tokenize("  \n") == []


def test_fruits_corpus_counts_and_single_term_query():
    index = build_index(FIXTURES / "fruits.jsonl")
    assert index.stats.num_docs == 3
    hits = retrieve(index, "orange", k=3)
    assert [h.doc.doc_id for h in hits] == ["d3"]
    assert all(h.score > 0 for h in hits)


def test_fruits_apple_ranking_matches_oracle():
    index = build_index(FIXTURES / "fruits.jsonl")
    docs = list(index.documents)
    assert_matches_oracle(index, docs, "apple", k=3)


def test_k_larger_than_corpus_is_a_cap_not_an_error():
    index = build_index(FIXTURES / "fruits.jsonl")
    assert len(retrieve(index, "doc", k=10)) == 3


def test_empty_corpus_builds_and_returns_no_hits(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    index = build_index(path)
    assert index.stats.num_docs == 0
    assert retrieve(index, "anything", k=3) == []


def test_duplicate_doc_id_rejected(tmp_path):
    path = tmp_path / "dup.jsonl"
    path.write_text(
        '{"id": "d1", "title": "a", "text": "x"}\n'
        '{"id": "d2", "title": "b", "text": "y"}\n'
        '{"id": "d1", "title": "c", "text": "z"}\n',
        encoding="utf-8",
    )
    with pytest.raises(CorpusError, match=r"d1"):
        build_index(path)


def test_malformed_line_error_names_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "d1", "title": "a", "text": "x"}\nnot json\n', encoding="utf-8")
    with pytest.raises(CorpusError, match=r":2:"):
        build_index(path)


def test_missing_field_error_names_line(tmp_path):
    path = tmp_path / "missing.jsonl"
    path.write_text('{"id": "d1", "title": "a"}\n', encoding="utf-8")
    with pytest.raises(CorpusError, match=r":1:.*text"):
        build_index(path)


def test_blank_title_or_text_rejected():
    with pytest.raises(ValueError):
        Document(doc_id="d1", title="  ", text="x")
    with pytest.raises(ValueError):
        Document(doc_id="d1", title="x", text="\n")


def test_empty_query_raises_invalid_query():
    index = build_index(FIXTURES / "fruits.jsonl")
    with pytest.raises(InvalidQuery):
        retrieve(index, " ,;! ", k=3)


def test_k_below_one_rejected():
    index = build_index(FIXTURES / "fruits.jsonl")
    with pytest.raises(ValueError):
        retrieve(index, "apple", k=0)


def test_zero_score_documents_are_omitted():
    docs = [
        Document(doc_id="a", title="t", text="apple"),
        Document(doc_id="b", title="t", text="banana"),
    ]
    index = index_documents(docs)
    hits = retrieve(index, "apple", k=5)
    assert [h.doc.doc_id for h in hits] == ["a"]


def test_score_ties_break_by_doc_id_ascending():
    docs = [
        Document(doc_id="z-last", title="same title", text="apple pie"),
        Document(doc_id="a-first", title="same title", text="apple pie"),
    ]
    index = index_documents(docs)
    hits = retrieve(index, "apple", k=2)
    assert [h.doc.doc_id for h in hits] == ["a-first", "z-last"]
    assert hits[0].score == hits[1].score


def test_duplicate_query_terms_count_once():
    index = build_index(FIXTURES / "fruits.jsonl")
    once = retrieve(index, "apple", k=3)
    twice = retrieve(index, "apple apple", k=3)
    assert [(h.doc.doc_id, h.score) for h in once] == [(h.doc.doc_id, h.score) for h in twice]


def test_random_corpus_matches_oracle():
    docs = make_synthetic_corpus(100, seed=3)
    index = index_documents(docs)
    for query in make_synthetic_queries(50, seed=4):
        assert_matches_oracle(index, docs, query, k=3)


def test_save_load_round_trip(tmp_path):
    docs = make_synthetic_corpus(30, seed=5)
    index = index_documents(docs)
    path = tmp_path / "index.json"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.stats == index.stats
    for query in make_synthetic_queries(10, seed=6):
        before = [(h.doc.doc_id, h.score) for h in retrieve(index, query, k=3)]
        after = [(h.doc.doc_id, h.score) for h in retrieve(loaded, query, k=3)]
        assert before == after


def test_load_rejects_foreign_json(tmp_path):
    path = tmp_path / "foreign.json"
    path.write_text('{"hello": "world"}', encoding="utf-8")
    with pytest.raises(CorpusError):
        load_index(path)
