"""Fabrication benchmark generation.

Pipeline per sample: rewrite the human ground truth into assistant style,
then loop candidate fabrications through two gates until one passes or the
iteration budget runs out. Gate one is structural: ROUGE-L recall against
the rewritten ground truth must reach the configured threshold, otherwise
the candidate is discarded as structurally divergent. Gate two is a blind
preference test: a judge sees both answers in seed-randomized order and
picks the factually correct one; only candidates the judge prefers over the
truth are kept, since those are the deceptive ones worth benchmarking.
"""

from __future__ import annotations

import dataclasses
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .data import DataError, QcMeta, RunConfig, Sample, derive_seed
from .metrics import lcs_length, rouge_l_recall, tokenize
from .prompts import PromptLibrary
from .providers import ChatRequest, Provider, ProviderError
from .retrieval import chunk_knowledge, retrieve

logger = logging.getLogger(__name__)

_EMPTY_RETRIES = 3
_RETRY_TEMPERATURE = 0.7
_JUDGE_RETRIES = 2
_JUDGE_CORRECTIVE = "Reply with exactly one character: A or B."


class JudgeFormatError(Exception):
    """The preference judge never produced a parseable A/B answer."""


@dataclass(frozen=True)
class QcOutcome:
    """One quality-control iteration over one candidate fabrication."""

    candidate: str
    rouge_recall: float
    structural_pass: bool
    sppo_pass: bool
    iteration: int

    @property
    def reason(self) -> str:
        if self.structural_pass and self.sppo_pass:
            return "accepted"
        if not self.structural_pass:
            return "structural"
        return "sppo"


@dataclass
class GenerationResult:
    samples: list[Sample]
    accepted: int = 0
    rejected: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def accepted_fraction(self) -> float:
        total = len(self.samples)
        return self.accepted / total if total else 0.0


def _chat_once(
    provider: Provider,
    config: RunConfig,
    prompt: str,
    *,
    purpose: str,
    temperature: float,
    request_seed: int,
) -> str:
    req = ChatRequest(
        model=config.chat_model,
        messages=({"role": "user", "content": prompt},),
        temperature=temperature,
        seed=request_seed,
        max_output_tokens=config.max_output_tokens,
        extra=tuple(sorted(config.chat_extra.items())),
    )
    return provider.chat(req, purpose=purpose)


def rewrite(
    question: str,
    knowledge_text: str,
    gt_human: str,
    provider: Provider,
    templates: PromptLibrary,
    config: RunConfig,
    *,
    sample_id: str = "",
) -> str:
    """Restyle a human-written ground truth without changing its content."""
    if not question.strip() or not knowledge_text.strip() or not gt_human.strip():
        raise ValueError("rewrite requires non-empty question, knowledge, and ground truth")
    prompt = templates.render("rewrite", question=question, knowledge=knowledge_text, ground_truth=gt_human)
    for attempt in range(_EMPTY_RETRIES):
        out = _chat_once(
            provider,
            config,
            prompt,
            purpose="rewrite",
            temperature=0.0 if attempt == 0 else _RETRY_TEMPERATURE,
            request_seed=derive_seed(config.seed, "rewrite", sample_id, str(attempt)),
        ).strip()
        if out:
            return out
    raise ProviderError(f"empty rewrite for sample {sample_id!r} after {_EMPTY_RETRIES} attempts")


def fabricate(
    question: str,
    evidence_text: str,
    gt_llm: str,
    provider: Provider,
    templates: PromptLibrary,
    config: RunConfig,
    *,
    temperature: float = 0.0,
    sample_id: str = "",
    iteration: int = 1,
) -> str:
    """Generate one evidence-conditioned candidate fabrication."""
    if not gt_llm.strip():
        raise ValueError("fabricate requires a non-empty rewritten ground truth")
    prompt = templates.render(
        "fabricate",
        question=question,
        knowledge=evidence_text,
        ground_truth=gt_llm,
        word_cap=str(config.word_change_cap),
    )
    return _chat_once(
        provider,
        config,
        prompt,
        purpose="fabricate",
        temperature=temperature,
        request_seed=derive_seed(config.seed, "qc", sample_id, str(iteration)),
    ).strip()


def changed_token_count(gt_llm: str, candidate: str) -> int:
    """Rough count of altered tokens: length of the longer side minus the LCS."""
    a, b = tokenize(gt_llm).tokens, tokenize(candidate).tokens
    return max(len(a), len(b)) - lcs_length(a, b)


def sppo_judge(
    question: str,
    knowledge_text: str,
    gt_llm: str,
    candidate: str,
    rng_seed: int,
    provider: Provider,
    templates: PromptLibrary,
    config: RunConfig,
    *,
    sample_id: str = "",
) -> str:
    """Blind A/B preference test; returns prefers_gt or prefers_candidate.

    Presentation order is drawn from ``rng_seed`` so position bias cannot
    systematically leak into the retention decision.
    """
    if not gt_llm.strip() or not candidate.strip():
        raise ValueError("judge requires two non-empty answers")
    gt_first = random.Random(rng_seed).random() < 0.5
    answer_a, answer_b = (gt_llm, candidate) if gt_first else (candidate, gt_llm)
    prompt = templates.render(
        "judge", question=question, knowledge=knowledge_text, answer_a=answer_a, answer_b=answer_b
    )
    messages: list[dict] = [{"role": "user", "content": prompt}]
    for attempt in range(1 + _JUDGE_RETRIES):
        req = ChatRequest(
            model=config.chat_model,
            messages=tuple(messages),
            temperature=0.0,
            seed=derive_seed(config.seed, "judge", sample_id, str(rng_seed), str(attempt)),
            max_output_tokens=config.max_output_tokens,
            extra=tuple(sorted(config.chat_extra.items())),
        )
        raw = provider.chat(req, purpose="judge")
        answer = raw.strip().strip(".").upper()
        if answer in ("A", "B"):
            picked_gt = (answer == "A") == gt_first
            return "prefers_gt" if picked_gt else "prefers_candidate"
        messages = messages + [
            {"role": "assistant", "content": raw},
            {"role": "user", "content": _JUDGE_CORRECTIVE},
        ]
    raise JudgeFormatError(f"no A/B answer after {1 + _JUDGE_RETRIES} attempts")


def qc_loop(
    sample: Sample,
    config: RunConfig,
    provider: Provider,
    templates: PromptLibrary,
    *,
    trail: list[QcOutcome] | None = None,
) -> Sample:
    """Iterate fabricate -> structural gate -> preference gate for one sample.

    On success the fabrication and quality metadata are attached; after
    ``max_qc_iters`` failed candidates the sample is marked rejected and the
    last candidate discarded. The first iteration samples at temperature 0;
    later ones use a mildly raised temperature to escape repeated failures.
    """
    if not sample.gt_llm:
        raise DataError(f"sample {sample.id!r} has no rewritten ground truth")
    chunks = chunk_knowledge(sample, config.chunk_max_tokens, config.chunk_overlap)
    evidence = retrieve(f"{sample.question} {sample.gt_llm}", chunks, config.top_k_chunks)
    evidence_text = "\n".join(f"- {chunk.text}" for chunk in evidence)
    knowledge_text = "\n".join(sample.knowledge)

    last_rouge = 0.0
    for iteration in range(1, config.max_qc_iters + 1):
        candidate = fabricate(
            sample.question,
            evidence_text,
            sample.gt_llm,
            provider,
            templates,
            config,
            temperature=0.0 if iteration == 1 else _RETRY_TEMPERATURE,
            sample_id=sample.id,
            iteration=iteration,
        )
        score = rouge_l_recall(sample.gt_llm, candidate)
        last_rouge = score
        structural = score >= config.tau_str
        sppo = False
        if structural:
            changed = changed_token_count(sample.gt_llm, candidate)
            if changed > config.word_change_cap:
                logger.info(
                    "sample %s iteration %d changed %d tokens (cap %d)",
                    sample.id, iteration, changed, config.word_change_cap,
                )
            verdict = sppo_judge(
                sample.question,
                knowledge_text,
                sample.gt_llm,
                candidate,
                derive_seed(config.seed, "judge-order", sample.id, str(iteration)),
                provider,
                templates,
                config,
                sample_id=sample.id,
            )
            sppo = verdict == "prefers_candidate"
        if trail is not None:
            trail.append(QcOutcome(candidate, score, structural, sppo, iteration))
        if structural and sppo:
            return dataclasses.replace(
                sample,
                fabrication=candidate,
                qc_meta=QcMeta(rouge_recall=score, sppo_rounds=iteration, status="accepted"),
            )
    return dataclasses.replace(
        sample,
        fabrication=None,
        qc_meta=QcMeta(rouge_recall=last_rouge, sppo_rounds=config.max_qc_iters, status="rejected"),
    )


def generate_dataset(
    samples: Sequence[Sample],
    config: RunConfig,
    provider: Provider,
    templates: PromptLibrary,
    jobs: int = 1,
) -> GenerationResult:
    """Rewrite then quality-control every sample; failures are fail-soft."""

    def run_one(sample: Sample) -> tuple[Sample, str | None]:
        if not sample.gt_human or not sample.question or not any(k.strip() for k in sample.knowledge):
            return sample, "missing question, knowledge, or gt_human"
        try:
            knowledge_text = "\n".join(sample.knowledge)
            gt_llm = rewrite(
                sample.question, knowledge_text, sample.gt_human, provider, templates, config,
                sample_id=sample.id,
            )
            extra = dict(sample.extra)
            extra["rewrite_rouge"] = rouge_l_recall(sample.gt_human, gt_llm)
            staged = dataclasses.replace(sample, gt_llm=gt_llm, extra=extra)
            return qc_loop(staged, config, provider, templates), None
        except Exception as exc:  # fail-soft: record and continue
            logger.warning("sample %s failed: %s", sample.id, exc)
            return sample, str(exc)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_one, samples))
    else:
        outcomes = [run_one(s) for s in samples]

    result = GenerationResult(samples=[s for s, _ in outcomes])
    for sample, error in outcomes:
        if error is not None:
            result.failures.append((sample.id, error))
        elif sample.qc_meta.status == "accepted":
            result.accepted += 1
        elif sample.qc_meta.status == "rejected":
            result.rejected += 1
    return result


def recheck_accepted(samples: Sequence[Sample], tau_str: float) -> list[str]:
    """Post-hoc structural audit: ids of accepted samples violating the gate."""
    bad = []
    for sample in samples:
        if sample.qc_meta.status != "accepted":
            continue
        if not sample.gt_llm or not sample.fabrication:
            bad.append(sample.id)
            continue
        score = rouge_l_recall(sample.gt_llm, sample.fabrication)
        recorded = sample.qc_meta.rouge_recall
        ok = score >= tau_str and recorded is not None and abs(recorded - score) <= 1e-9
        if not ok:
            bad.append(sample.id)
    return bad
