"""Evidence chunking and lexical retrieval.

Retrieval is scoped to a single sample's own evidence: both fabrication
generation and mask filling must be grounded in what the sample actually
cites, never in a global corpus. BM25 keeps ranking deterministic and
offline-testable; ties break on ascending chunk index.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .data import DataError, Sample
from .metrics import tokenize

BM25_K1 = 1.2
BM25_B = 0.75


@dataclass(frozen=True)
class Chunk:
    sample_id: str
    index: int
    text: str
    token_count: int


def chunk_knowledge(sample: Sample, max_tokens: int, overlap: int) -> list[Chunk]:
    """Sliding-window chunks over the sample's evidence token stream.

    Windows start every ``max_tokens - overlap`` tokens. Boundary chunks
    extend to the raw string ends so a short knowledge field round-trips as
    a single chunk equal to itself.
    """
    if overlap < 0 or overlap >= max_tokens:
        raise ValueError("overlap must satisfy 0 <= overlap < max_tokens")
    knowledge_text = "\n".join(sample.knowledge).strip()
    if not knowledge_text:
        raise DataError(f"sample {sample.id!r} has empty knowledge")
    seq = tokenize(knowledge_text)
    if not seq.tokens:
        raise DataError(f"sample {sample.id!r} has no tokenizable knowledge")

    step = max_tokens - overlap
    chunks: list[Chunk] = []
    for index, start in enumerate(range(0, len(seq.tokens), step)):
        stop = min(start + max_tokens, len(seq.tokens))
        char_start = 0 if start == 0 else seq.offsets[start][0]
        char_end = len(knowledge_text) if stop == len(seq.tokens) else seq.offsets[stop - 1][1]
        chunks.append(
            Chunk(
                sample_id=sample.id,
                index=index,
                text=knowledge_text[char_start:char_end],
                token_count=stop - start,
            )
        )
    return chunks


def bm25_scores(query: str, chunks: list[Chunk]) -> list[float]:
    """BM25 (k1=1.2, b=0.75) of the query against each chunk."""
    docs = [tokenize(c.text).tokens for c in chunks]
    n_docs = len(docs)
    avgdl = sum(len(d) for d in docs) / n_docs
    doc_freq: Counter[str] = Counter()
    for doc in docs:
        doc_freq.update(set(doc))

    query_tokens = tokenize(query).tokens
    scores = []
    for doc in docs:
        tf = Counter(doc)
        score = 0.0
        for term in query_tokens:
            if term not in tf:
                continue
            idf = math.log(1.0 + (n_docs - doc_freq[term] + 0.5) / (doc_freq[term] + 0.5))
            freq = tf[term]
            denom = freq + BM25_K1 * (1.0 - BM25_B + BM25_B * len(doc) / avgdl)
            score += idf * freq * (BM25_K1 + 1.0) / denom
        scores.append(score)
    return scores


def retrieve(query: str, chunks: list[Chunk], k: int) -> list[Chunk]:
    """Top-k chunks by BM25 score; equal scores rank by ascending index."""
    if not chunks:
        raise ValueError("chunks must be non-empty")
    if k < 1:
        raise ValueError("k must be positive")
    if len({c.sample_id for c in chunks}) != 1:
        raise ValueError("retrieve operates on one sample's chunks at a time")
    scores = bm25_scores(query, chunks)
    ranked = sorted(zip(scores, chunks), key=lambda pair: (-pair[0], pair[1].index))
    return [chunk for _, chunk in ranked[: min(k, len(chunks))]]
