"""Complementary masking and evidence-grounded reconstruction.

Each row sentence yields two masked variants: maskable tokens (everything
except stopwords; the row separator is punctuation and never a token) are
split by parity of their rank, so every maskable token is hidden in exactly
one variant. Each variant is reconstructed by a chat call that must replace
placeholders with evidence-supported phrases while leaving unmasked tokens
untouched; a validator enforces that invariant and failed reconstructions
degrade to "unverifiable" rather than aborting the sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .data import RunConfig, derive_seed
from .metrics import word_spans
from .prompts import PromptLibrary
from .providers import ChatRequest, Provider
from .retrieval import Chunk, retrieve

_FILL_RETRIES = 2
_CORRECTIVE_NOTE = (
    "Your previous reply changed words outside the masks or left a mask "
    "unfilled. Reply again with only the completed sentence: every [MASK_i] "
    "replaced, every other word exactly as given."
)


class DegenerateRowError(Exception):
    """The row sentence has no maskable token; the row is skipped and recorded."""


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = (resources.files("wordfab") / "data" / "stopwords.txt").read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.lower())
    return frozenset(words)


def mask_token(mask_id: int) -> str:
    return f"[MASK_{mask_id}]"


@dataclass(frozen=True)
class MaskedPair:
    """Two complementary masked renderings of one sentence.

    ``map_a[i]``/``map_b[i]`` give the token position that mask id ``i``
    hides in the respective variant. Tokens keep their original casing;
    offsets index the source sentence.
    """

    sentence: str
    tokens: tuple[str, ...]
    offsets: tuple[tuple[int, int], ...]
    map_a: tuple[int, ...]
    map_b: tuple[int, ...]

    def mask_map(self, variant: str) -> tuple[int, ...]:
        if variant == "A":
            return self.map_a
        if variant == "B":
            return self.map_b
        raise ValueError(f"unknown variant {variant!r}")

    def maskable_positions(self) -> tuple[int, ...]:
        return tuple(sorted(self.map_a + self.map_b))

    def masked_tokens(self, variant: str) -> tuple[str, ...]:
        masked = {pos: mask_token(i) for i, pos in enumerate(self.mask_map(variant))}
        return tuple(masked.get(i, tok) for i, tok in enumerate(self.tokens))

    def masked_text(self, variant: str) -> str:
        """The source sentence with masked token spans replaced by placeholders."""
        out = self.sentence
        positions = {pos: i for i, pos in enumerate(self.mask_map(variant))}
        for pos in sorted(positions, reverse=True):
            start, end = self.offsets[pos]
            out = out[:start] + mask_token(positions[pos]) + out[end:]
        return out

    def unmasked_tokens(self, variant: str) -> tuple[str, ...]:
        hidden = set(self.mask_map(variant))
        return tuple(tok for i, tok in enumerate(self.tokens) if i not in hidden)


def complementary_masks(sentence: str) -> MaskedPair:
    """Split maskable tokens by parity: even ranks to variant A, odd to B."""
    spans = word_spans(sentence)
    if not spans:
        raise DegenerateRowError(f"no tokens in row sentence {sentence!r}")
    stop = stopwords()
    maskable = [i for i, (tok, _, _) in enumerate(spans) if tok.lower() not in stop]
    if not maskable:
        raise DegenerateRowError(f"no maskable token in row sentence {sentence!r}")
    return MaskedPair(
        sentence=sentence,
        tokens=tuple(tok for tok, _, _ in spans),
        offsets=tuple((start, end) for _, start, end in spans),
        map_a=tuple(pos for rank, pos in enumerate(maskable) if rank % 2 == 0),
        map_b=tuple(pos for rank, pos in enumerate(maskable) if rank % 2 == 1),
    )


@dataclass(frozen=True)
class Reconstruction:
    row_index: int
    variant: str
    text: str
    fills: tuple[tuple[int, str], ...]
    valid: bool


def check_reconstruction(pair: MaskedPair, variant: str, text: str) -> tuple[bool, dict[int, str]]:
    """Validate mask-fill output and extract per-mask fills.

    Valid means: the variant's unmasked tokens appear unchanged (case
    folded) and in order, with extra tokens only where masks sit, and every
    mask received at least one token.
    """
    if "[MASK_" in text:
        return False, {}
    out_tokens = [tok.lower() for tok, _, _ in word_spans(text)]
    template = pair.masked_tokens(variant)
    mask_positions = {pos: i for i, pos in enumerate(pair.mask_map(variant))}

    fills: dict[int, str] = {}
    j = 0
    pending_mask: int | None = None
    for pos, element in enumerate(template):
        if pos in mask_positions:
            pending_mask = mask_positions[pos]
            fills[pending_mask] = ""
            continue
        expected = element.lower()
        captured: list[str] = []
        while j < len(out_tokens) and out_tokens[j] != expected:
            captured.append(out_tokens[j])
            j += 1
        if j >= len(out_tokens):
            return False, {}
        if captured:
            if pending_mask is None:
                return False, {}
            fills[pending_mask] = " ".join(captured)
        j += 1
        pending_mask = None
    if pending_mask is not None:
        fills[pending_mask] = " ".join(out_tokens[j:])
        j = len(out_tokens)
    if j < len(out_tokens):
        return False, {}
    if any(not phrase for phrase in fills.values()):
        return False, {}
    return True, fills


def fill(
    pair: MaskedPair,
    variant: str,
    evidence: list[Chunk],
    provider: Provider,
    templates: PromptLibrary,
    config: RunConfig,
    *,
    row_index: int = 0,
    sample_id: str = "",
) -> Reconstruction:
    """Reconstruct one masked variant from evidence; never raises on bad fills."""
    if not pair.mask_map(variant):
        raise ValueError(f"variant {variant} has no placeholder to fill")
    masked = pair.masked_text(variant)
    evidence_text = "\n".join(f"- {chunk.text}" for chunk in evidence)
    prompt = templates.render("maskfill", masked=masked, evidence=evidence_text)
    messages: list[dict] = [{"role": "user", "content": prompt}]
    raw = ""
    for attempt in range(1 + _FILL_RETRIES):
        req = ChatRequest(
            model=config.chat_model,
            messages=tuple(messages),
            temperature=0.0,
            seed=derive_seed(config.seed, "fill", sample_id, variant, str(row_index), str(attempt)),
            max_output_tokens=config.max_output_tokens,
            extra=tuple(sorted(config.chat_extra.items())),
        )
        raw = provider.chat(req, purpose="fill").strip()
        ok, fills = check_reconstruction(pair, variant, raw)
        if ok:
            return Reconstruction(
                row_index=row_index,
                variant=variant,
                text=raw,
                fills=tuple(sorted(fills.items())),
                valid=True,
            )
        messages = messages + [
            {"role": "assistant", "content": raw},
            {"role": "user", "content": _CORRECTIVE_NOTE},
        ]
    return Reconstruction(row_index=row_index, variant=variant, text=raw, fills=(), valid=False)


def reconstruct_row(
    sentence: str,
    chunks: list[Chunk],
    config: RunConfig,
    provider: Provider,
    templates: PromptLibrary,
    *,
    row_index: int = 0,
    sample_id: str = "",
) -> tuple[Reconstruction, Reconstruction]:
    """Mask a row sentence both ways and fill each variant from retrieved evidence.

    The retrieval query is the fully unmasked sentence. A variant with no
    masks (single maskable token) is returned as the original sentence.
    """
    pair = complementary_masks(sentence)
    evidence = retrieve(sentence, chunks, config.top_k_chunks)
    out = []
    for variant in ("A", "B"):
        if pair.mask_map(variant):
            out.append(
                fill(
                    pair,
                    variant,
                    evidence,
                    provider,
                    templates,
                    config,
                    row_index=row_index,
                    sample_id=sample_id,
                )
            )
        else:
            out.append(
                Reconstruction(row_index=row_index, variant=variant, text=sentence, fills=(), valid=True)
            )
    return out[0], out[1]
