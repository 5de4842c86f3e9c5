"""Evaluation harness: splits, classification metrics, variance, audits.

The positive class for the confusion matrix is ``fabrication``. Per-class
precision/recall/F1 treat each class as positive for its own row; "overall"
is the unweighted macro average of the two rows, which is appropriate for a
dataset balanced by construction (one truthful and one fabricated instance
per sample). Variance across runs is the population standard deviation,
reported in percentage points.
"""

from __future__ import annotations

import dataclasses
import logging
import random
import statistics
from dataclasses import dataclass, field
from typing import Sequence

from .data import LABELS, DataError, LabeledInstance, RunConfig, Sample, derive_seed
from .fabgen import rewrite
from .metrics import cosine_similarity, rouge_l_recall
from .prompts import PromptLibrary
from .providers import EmbedRequest, Provider

logger = logging.getLogger(__name__)


class SplitError(DataError):
    """The dataset cannot be split under the disjointness constraints."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class EvalReport:
    fabrication: ClassMetrics
    ground_truth: ClassMetrics
    overall: ClassMetrics
    matrix: ConfusionMatrix
    excluded_undetectable: int = 0

    def metric(self, class_name: str, metric_name: str) -> float:
        return getattr(getattr(self, class_name), metric_name)

    def to_dict(self) -> dict:
        return {
            "fabrication": self.fabrication.to_dict(),
            "ground_truth": self.ground_truth.to_dict(),
            "overall": self.overall.to_dict(),
            "matrix": self.matrix.to_dict(),
            "excluded_undetectable": self.excluded_undetectable,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(
            fabrication=ClassMetrics(**raw["fabrication"]),
            ground_truth=ClassMetrics(**raw["ground_truth"]),
            overall=ClassMetrics(**raw["overall"]),
            matrix=ConfusionMatrix(**raw["matrix"]),
            excluded_undetectable=raw.get("excluded_undetectable", 0),
        )


VARIANCE_METRICS = ("precision", "recall", "f1")
VARIANCE_CLASSES = ("fabrication", "ground_truth", "overall")


@dataclass(frozen=True)
class VarianceReport:
    """Population standard deviation per metric, in percentage points."""

    entries: tuple[tuple[str, tuple[tuple[str, float], ...]], ...]
    runs: int

    def value(self, class_name: str, metric_name: str) -> float:
        return dict(dict(self.entries)[class_name])[metric_name]

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            **{cls: dict(metrics) for cls, metrics in self.entries},
        }


def _prf(tp: int, fp: int, fn: int) -> ClassMetrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassMetrics(precision=precision, recall=recall, f1=f1)


def report_from_matrix(matrix: ConfusionMatrix, excluded_undetectable: int = 0) -> EvalReport:
    fab = _prf(matrix.tp, matrix.fp, matrix.fn)
    # ground_truth as positive class: its true positives are the tn cells.
    gt = _prf(matrix.tn, matrix.fn, matrix.fp)
    overall = ClassMetrics(
        precision=(fab.precision + gt.precision) / 2,
        recall=(fab.recall + gt.recall) / 2,
        f1=(fab.f1 + gt.f1) / 2,
    )
    return EvalReport(
        fabrication=fab,
        ground_truth=gt,
        overall=overall,
        matrix=matrix,
        excluded_undetectable=excluded_undetectable,
    )


def score(
    predictions: Sequence[tuple[LabeledInstance, str]],
    excluded_undetectable: int = 0,
) -> EvalReport:
    """Score (instance, predicted-label) pairs against the instances' gold labels."""
    if not predictions:
        raise DataError("nothing to score: no predictions given")
    tp = fp = tn = fn = 0
    for instance, predicted in predictions:
        if predicted not in LABELS:
            raise DataError(f"unknown predicted label {predicted!r}")
        if instance.label == "fabrication":
            if predicted == "fabrication":
                tp += 1
            else:
                fn += 1
        else:
            if predicted == "fabrication":
                fp += 1
            else:
                tn += 1
    return report_from_matrix(ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn), excluded_undetectable)


def variance(reports: Sequence[EvalReport]) -> VarianceReport:
    """Cross-run spread of every metric, as population std in percentage points."""
    if len(reports) < 2:
        raise DataError("variance needs at least 2 reports")
    entries = []
    for class_name in VARIANCE_CLASSES:
        metrics = []
        for metric_name in VARIANCE_METRICS:
            values = [r.metric(class_name, metric_name) for r in reports]
            metrics.append((metric_name, statistics.pstdev(values) * 100.0))
        entries.append((class_name, tuple(metrics)))
    return VarianceReport(entries=tuple(entries), runs=len(reports))


def _normalize_question(question: str) -> str:
    return " ".join(question.lower().split())


def split_disjoint(
    samples: Sequence[Sample],
    train_ratio: float,
    seed: int,
) -> tuple[list[Sample], list[Sample]]:
    """Split into topic- and question-disjoint train/test sets.

    Whole topic groups are assigned greedily in seed-shuffled order until the
    train side approaches ``train_ratio``. Topics sharing a normalized
    question text are merged first, so no question ever straddles the split.
    """
    if not (0.0 < train_ratio < 1.0):
        raise ValueError("train_ratio must lie strictly between 0 and 1")
    topics = sorted({s.topic for s in samples})
    if len(topics) < 2:
        raise SplitError("need at least 2 distinct topics for a disjoint split")

    # Union-find over topics; duplicated questions merge their topics.
    parent = {t: t for t in topics}

    def find(t: str) -> str:
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    def union(a: str, b: str) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    by_question: dict[str, str] = {}
    for sample in samples:
        key = _normalize_question(sample.question)
        if key in by_question:
            union(by_question[key], sample.topic)
        else:
            by_question[key] = sample.topic

    groups: dict[str, list[Sample]] = {}
    for sample in samples:
        groups.setdefault(find(sample.topic), []).append(sample)
    if len(groups) < 2:
        raise SplitError("question overlap merges all topics into one group")

    order = sorted(groups)
    random.Random(derive_seed(seed, "split")).shuffle(order)

    target = train_ratio * len(samples)
    train_ids: set[str] = set()
    test_ids: set[str] = set()
    train_n = 0
    for i, key in enumerate(order):
        group = groups[key]
        is_last = i == len(order) - 1
        # Fill train until the target, but never leave the test side empty.
        # The first group always lands in train (target > 0), so both sides
        # are non-empty on exit.
        if train_n < target and not (is_last and not test_ids):
            train_ids.update(s.id for s in group)
            train_n += len(group)
        else:
            test_ids.update(s.id for s in group)
    train = [s for s in samples if s.id in train_ids]
    test = [s for s in samples if s.id in test_ids]
    return train, test


def make_rewritten_variant(
    samples: Sequence[Sample],
    config: RunConfig,
    provider: Provider,
    templates: PromptLibrary,
) -> list[Sample]:
    """Ablation variant: the truthful instance becomes a rewrite of gt_human.

    The existing incorrect answer is left byte-identical, so only stylistic
    artifacts move between the original dataset and the variant.
    """
    out: list[Sample] = []
    for sample in samples:
        if not sample.gt_human or not sample.fabrication:
            logger.warning("sample %s lacks gt_human or fabrication; kept unchanged", sample.id)
            out.append(sample)
            continue
        try:
            gt_llm = rewrite(
                sample.question,
                "\n".join(sample.knowledge),
                sample.gt_human,
                provider,
                templates,
                config,
                sample_id=sample.id,
            )
            extra = dict(sample.extra)
            extra["rewrite_rouge"] = rouge_l_recall(sample.gt_human, gt_llm)
            out.append(dataclasses.replace(sample, gt_llm=gt_llm, extra=extra))
        except Exception as exc:  # fail-soft, as in generation
            logger.warning("variant rewrite failed for %s: %s", sample.id, exc)
            out.append(sample)
    return out


@dataclass(frozen=True)
class AuditSummary:
    """Distribution of gt/fabrication embedding similarity over accepted pairs."""

    count: int
    mean: float
    std: float
    deciles: tuple[float, ...]  # 10th..90th percentile
    mean_rouge_recall: float
    values: tuple[float, ...] = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "std": self.std,
            "deciles": list(self.deciles),
            "mean_rouge_recall": self.mean_rouge_recall,
            "values": list(self.values),
        }


def similarity_audit(samples: Sequence[Sample], provider: Provider, config: RunConfig) -> AuditSummary:
    """Embed gt/fabrication pairs of accepted samples and summarize their cosine."""
    accepted = [
        s for s in samples if s.qc_meta.status == "accepted" and s.gt_llm and s.fabrication
    ]
    if not accepted:
        raise DataError("no accepted samples with gt_llm and fabrication to audit")
    sims: list[float] = []
    rouges: list[float] = []
    for sample in accepted:
        vectors = provider.embed(
            EmbedRequest(model=config.embed_model, inputs=(sample.gt_llm, sample.fabrication)),
            purpose="audit",
        )
        sims.append(cosine_similarity(vectors[0], vectors[1]))
        rouges.append(rouge_l_recall(sample.gt_llm, sample.fabrication))
    if len(sims) >= 2:
        deciles = tuple(statistics.quantiles(sims, n=10, method="inclusive"))
        std = statistics.pstdev(sims)
    else:
        deciles = tuple([sims[0]] * 9)
        std = 0.0
    return AuditSummary(
        count=len(sims),
        mean=statistics.fmean(sims),
        std=std,
        deciles=deciles,
        mean_rouge_recall=statistics.fmean(rouges),
        values=tuple(sims),
    )
