"""Hybrid pair evaluation: embedding gate, LLM adjudication, rule aggregation.

Reconstruction pairs are compared by embedding cosine first; only pairs whose
similarity falls below the gate threshold are sent to the adjudicator, which
decides factual conflict versus benign wording variation. One confirmed
conflict (configurable) flips the response-level verdict to fabrication.
Rows whose reconstructions could not be validated count as unverifiable and
never as conflicts.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .data import DataError, LabeledInstance, RunConfig, Sample, derive_seed, labeled_instances
from .maskfill import DegenerateRowError, reconstruct_row
from .metrics import cosine_similarity
from .prompts import PromptLibrary
from .providers import ChatRequest, EmbedRequest, Provider
from .retrieval import chunk_knowledge, retrieve
from .text2table import DecompositionError, decompose, row_sentence

logger = logging.getLogger(__name__)

_ADJUDICATE_RETRIES = 2
_CORRECTIVE_NOTE = "Reply with exactly one word: CONFLICT or BENIGN."


class AdjudicationError(Exception):
    """The adjudicator never produced a parseable verdict for a gated pair."""


@dataclass(frozen=True)
class PairVerdict:
    row_index: int
    embed_similarity: float
    gated: bool
    adjudication: str  # conflict | benign | skipped
    final_conflict: bool

    def to_dict(self) -> dict:
        return {
            "row_index": self.row_index,
            "embed_similarity": self.embed_similarity,
            "gated": self.gated,
            "adjudication": self.adjudication,
            "final_conflict": self.final_conflict,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PairVerdict":
        return cls(
            row_index=raw["row_index"],
            embed_similarity=raw["embed_similarity"],
            gated=raw["gated"],
            adjudication=raw["adjudication"],
            final_conflict=raw["final_conflict"],
        )


@dataclass(frozen=True)
class DetectionReport:
    sample_id: str
    label: str
    predicted: str
    verdicts: tuple[PairVerdict, ...] = ()
    unverifiable_rows: int = 0

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "label": self.label,
            "predicted": self.predicted,
            "unverifiable_rows": self.unverifiable_rows,
            "verdicts": [v.to_dict() for v in self.verdicts],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DetectionReport":
        return cls(
            sample_id=raw["sample_id"],
            label=raw["label"],
            predicted=raw["predicted"],
            verdicts=tuple(PairVerdict.from_dict(v) for v in raw.get("verdicts", [])),
            unverifiable_rows=raw.get("unverifiable_rows", 0),
        )


@dataclass(frozen=True)
class UndetectableRecord:
    sample_id: str
    label: str
    reason: str

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "label": self.label, "undetectable": True, "reason": self.reason}


def gate(
    recon_a: str,
    recon_b: str,
    tau_emb: float,
    provider: Provider,
    embed_model: str = "",
) -> tuple[float, bool]:
    """Embedding-similarity gate: flagged iff cosine is strictly below tau."""
    if not recon_a.strip() or not recon_b.strip():
        raise ValueError("gate requires two non-empty texts")
    vectors = provider.embed(EmbedRequest(model=embed_model, inputs=(recon_a, recon_b)), purpose="gate")
    similarity = cosine_similarity(vectors[0], vectors[1])
    return similarity, similarity < tau_emb


def _gate_pair(
    original: str,
    recon_a: str,
    recon_b: str,
    config: RunConfig,
    provider: Provider,
) -> tuple[float, bool]:
    if config.pair_mode == "reconstructions":
        return gate(recon_a, recon_b, config.tau_emb, provider, config.embed_model)
    # against_original: the most divergent reconstruction drives gating.
    vectors = provider.embed(
        EmbedRequest(model=config.embed_model, inputs=(original, recon_a, recon_b)), purpose="gate"
    )
    similarity = min(
        cosine_similarity(vectors[0], vectors[1]),
        cosine_similarity(vectors[0], vectors[2]),
    )
    return similarity, similarity < config.tau_emb


def adjudicate(
    original: str,
    recon_a: str,
    recon_b: str,
    evidence_text: str,
    provider: Provider,
    templates: PromptLibrary,
    config: RunConfig,
    *,
    sample_id: str = "",
    row_index: int = 0,
) -> str:
    """Ask the adjudicator whether a gated pair conflicts; returns conflict|benign."""
    prompt = templates.render(
        "adjudicate", original=original, recon_a=recon_a, recon_b=recon_b, evidence=evidence_text
    )
    messages: list[dict] = [{"role": "user", "content": prompt}]
    for attempt in range(1 + _ADJUDICATE_RETRIES):
        req = ChatRequest(
            model=config.chat_model,
            messages=tuple(messages),
            temperature=0.0,
            seed=derive_seed(config.seed, "adjudicate", sample_id, str(row_index), str(attempt)),
            max_output_tokens=config.max_output_tokens,
            extra=tuple(sorted(config.chat_extra.items())),
        )
        raw = provider.chat(req, purpose="adjudicate")
        answer = raw.strip().strip(".").upper()
        if answer == "CONFLICT":
            return "conflict"
        if answer == "BENIGN":
            return "benign"
        messages = messages + [
            {"role": "assistant", "content": raw},
            {"role": "user", "content": _CORRECTIVE_NOTE},
        ]
    raise AdjudicationError(f"no CONFLICT/BENIGN verdict after {1 + _ADJUDICATE_RETRIES} attempts")


def aggregate(verdicts: Sequence[PairVerdict], min_conflicts: int) -> str:
    """Response-level rule: fabrication iff enough confirmed conflicts."""
    conflicts = sum(1 for v in verdicts if v.final_conflict)
    return "fabrication" if conflicts >= min_conflicts else "ground_truth"


def detect(
    instance: LabeledInstance,
    sample: Sample,
    config: RunConfig,
    provider: Provider,
    templates: PromptLibrary,
) -> DetectionReport:
    """Run the full detection pipeline over one answer under test.

    Raises DecompositionError when the statement cannot be tabled; callers
    treat that instance as undetectable and exclude it from metrics.
    """
    if not instance.text.strip():
        raise ValueError("instance text must be non-empty")
    if not any(chunk.strip() for chunk in sample.knowledge):
        raise DataError(f"sample {sample.id!r} has no knowledge for detection")

    table = decompose(
        instance.text,
        sample.question,
        provider,
        templates,
        model=config.chat_model,
        sample_id=sample.id,
        seed=config.seed,
        max_output_tokens=config.max_output_tokens,
        chat_extra=tuple(sorted(config.chat_extra.items())),
    )
    chunks = chunk_knowledge(sample, config.chunk_max_tokens, config.chunk_overlap)

    verdicts: list[PairVerdict] = []
    unverifiable = 0
    for row in table.rows:
        sentence = row_sentence(row)
        try:
            recon_a, recon_b = reconstruct_row(
                sentence,
                chunks,
                config,
                provider,
                templates,
                row_index=row.row_index,
                sample_id=sample.id,
            )
        except DegenerateRowError:
            unverifiable += 1
            continue
        if not (recon_a.valid and recon_b.valid):
            unverifiable += 1
            continue
        similarity, gated = _gate_pair(sentence, recon_a.text, recon_b.text, config, provider)
        if not gated:
            adjudication = "skipped"
        else:
            evidence_text = "\n".join(
                f"- {chunk.text}" for chunk in retrieve(sentence, chunks, config.top_k_chunks)
            )
            try:
                adjudication = adjudicate(
                    sentence,
                    recon_a.text,
                    recon_b.text,
                    evidence_text,
                    provider,
                    templates,
                    config,
                    sample_id=sample.id,
                    row_index=row.row_index,
                )
            except AdjudicationError:
                unverifiable += 1
                continue
        verdicts.append(
            PairVerdict(
                row_index=row.row_index,
                embed_similarity=similarity,
                gated=gated,
                adjudication=adjudication,
                final_conflict=gated and adjudication == "conflict",
            )
        )
    return DetectionReport(
        sample_id=sample.id,
        label=instance.label,
        predicted=aggregate(verdicts, config.aggregation_min_conflicts),
        verdicts=tuple(verdicts),
        unverifiable_rows=unverifiable,
    )


def detect_dataset(
    samples: Sequence[Sample],
    config: RunConfig,
    provider: Provider,
    templates: PromptLibrary,
    jobs: int = 1,
) -> tuple[list[DetectionReport | UndetectableRecord], int]:
    """Detect both instances of every sample that carries gt_llm and fabrication.

    Returns records in instance order plus the count of skipped samples
    (those lacking the texts needed to form instances).
    """
    instances: list[tuple[LabeledInstance, Sample]] = []
    skipped = 0
    for sample in samples:
        if not sample.gt_llm or not sample.fabrication:
            skipped += 1
            logger.warning("sample %s lacks gt_llm/fabrication; skipped", sample.id)
            continue
        gt, fab = labeled_instances(sample)
        instances.append((gt, sample))
        instances.append((fab, sample))

    def run_one(item: tuple[LabeledInstance, Sample]) -> DetectionReport | UndetectableRecord:
        instance, sample = item
        try:
            return detect(instance, sample, config, provider, templates)
        except DecompositionError as exc:
            logger.warning("sample %s (%s) undetectable: %s", sample.id, instance.label, exc)
            return UndetectableRecord(sample_id=sample.id, label=instance.label, reason=str(exc))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run_one, instances))
    else:
        records = [run_one(item) for item in instances]
    return records, skipped


def save_reports(records: Iterable[DetectionReport | UndetectableRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False))
            fh.write("\n")


def load_reports(path: str | Path) -> tuple[list[DetectionReport], list[dict]]:
    """Read a report file; returns detection reports and undetectable records."""
    reports: list[DetectionReport] = []
    undetectable: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed report line: {exc}") from exc
            if raw.get("undetectable"):
                undetectable.append(raw)
            else:
                try:
                    reports.append(DetectionReport.from_dict(raw))
                except (KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed report record: {exc}") from exc
    return reports, undetectable
