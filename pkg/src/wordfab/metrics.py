"""Deterministic text algorithms: tokenization, LCS, ROUGE-L recall, cosine.

Everything in this module is pure and dependency-free so that scores are
reproducible bit-for-bit across runs and platforms.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

# A word is a run of Unicode letters/digits. Underscores and punctuation
# act as separators and never become tokens; digits are kept because
# dosages and measurements are common fabrication targets.
_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass(frozen=True)
class TokenSeq:
    """Lowercase word tokens plus their (start, end) spans in the source text."""

    tokens: tuple[str, ...]
    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.offsets):
            raise ValueError("token count must equal offset count")
        prev_end = -1
        for start, end in self.offsets:
            if start < prev_end or end <= start:
                raise ValueError("offsets must be strictly increasing and non-overlapping")
            prev_end = end

    def __len__(self) -> int:
        return len(self.tokens)


def word_spans(text: str) -> list[tuple[str, int, int]]:
    """Return (token, start, end) triples with original casing preserved."""
    return [(m.group(0), m.start(), m.end()) for m in _WORD_RE.finditer(text)]


def tokenize(text: str) -> TokenSeq:
    """Split text into lowercase word tokens; offsets index the original string."""
    spans = word_spans(text)
    return TokenSeq(
        tokens=tuple(tok.lower() for tok, _, _ in spans),
        offsets=tuple((start, end) for _, start, end in spans),
    )


def _as_tokens(seq: TokenSeq | Sequence[str]) -> Sequence[str]:
    return seq.tokens if isinstance(seq, TokenSeq) else seq


def lcs_length(a: TokenSeq | Sequence[str], b: TokenSeq | Sequence[str]) -> int:
    """Length of a longest common subsequence, by dynamic programming."""
    xs, ys = _as_tokens(a), _as_tokens(b)
    if not xs or not ys:
        return 0
    prev = [0] * (len(ys) + 1)
    for x in xs:
        curr = [0] * (len(ys) + 1)
        for j, y in enumerate(ys, start=1):
            if x == y:
                curr[j] = prev[j - 1] + 1
            else:
                curr[j] = max(prev[j], curr[j - 1])
        prev = curr
    return prev[-1]


def rouge_l_recall(reference: str, candidate: str) -> float:
    """Sentence-level ROUGE-L recall: LCS length over reference token count."""
    ref = tokenize(reference)
    if not ref.tokens:
        raise ValueError("reference tokenizes to zero tokens")
    cand = tokenize(candidate)
    return lcs_length(ref, cand) / len(ref)


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine of the angle between two equal-dimension nonzero vectors."""
    if len(u) != len(v):
        raise ValueError(f"dimension mismatch: {len(u)} vs {len(v)}")
    dot = 0.0
    nu = 0.0
    nv = 0.0
    for x, y in zip(u, v):
        dot += x * y
        nu += x * x
        nv += y * y
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    value = dot / math.sqrt(nu * nv)
    # Guard against floating-point drift outside [-1, 1].
    return max(-1.0, min(1.0, value))
