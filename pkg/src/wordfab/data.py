"""Canonical record types, dataset file I/O, and run configuration.

Datasets are UTF-8 files with one JSON object per line. Optional fields are
omitted when absent (never written as nulls), and unknown fields survive a
load/save round-trip so external annotations are not destroyed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable


class DataError(Exception):
    """Malformed or inconsistent dataset content."""


class ConfigError(Exception):
    """Invalid run configuration or override."""


STATUSES = ("accepted", "rejected", "pending")
LABELS = ("fabrication", "ground_truth")

_QC_FIELDS = ("rouge_recall", "sppo_rounds", "status")
_SAMPLE_FIELDS = ("id", "question", "knowledge", "gt_human", "gt_llm", "fabrication", "topic", "qc_meta")


@dataclass(frozen=True)
class QcMeta:
    """Quality-control bookkeeping for one sample."""

    rouge_recall: float | None = None
    sppo_rounds: int = 0
    status: str = "pending"
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise DataError(f"unknown qc status {self.status!r}")
        if self.sppo_rounds < 0:
            raise DataError("sppo_rounds must be non-negative")
        if self.rouge_recall is not None and not (0.0 <= self.rouge_recall <= 1.0):
            raise DataError("rouge_recall must lie in [0, 1]")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.rouge_recall is not None:
            out["rouge_recall"] = self.rouge_recall
        out["sppo_rounds"] = self.sppo_rounds
        out["status"] = self.status
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "QcMeta":
        extra = {k: v for k, v in raw.items() if k not in _QC_FIELDS}
        return cls(
            rouge_recall=raw.get("rouge_recall"),
            sppo_rounds=int(raw.get("sppo_rounds", 0)),
            status=raw.get("status", "pending"),
            extra=extra,
        )


@dataclass(frozen=True)
class Sample:
    """One benchmark record.

    ``knowledge`` holds the retrieved evidence as ordered text chunks. A
    single evidence string is accepted on load and normalized to a one-chunk
    tuple; chunking for retrieval happens downstream.
    """

    id: str
    question: str
    knowledge: tuple[str, ...]
    topic: str = ""
    gt_human: str | None = None
    gt_llm: str | None = None
    fabrication: str | None = None
    qc_meta: QcMeta = field(default_factory=QcMeta)
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise DataError("sample id must be non-empty")
        if self.qc_meta.status == "accepted" and not self.fabrication:
            raise DataError(f"sample {self.id!r} is accepted but has no fabrication")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"id": self.id, "question": self.question, "knowledge": list(self.knowledge)}
        if self.gt_human is not None:
            out["gt_human"] = self.gt_human
        if self.gt_llm is not None:
            out["gt_llm"] = self.gt_llm
        if self.fabrication is not None:
            out["fabrication"] = self.fabrication
        out["topic"] = self.topic
        out["qc_meta"] = self.qc_meta.to_dict()
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "Sample":
        if not isinstance(raw, dict):
            raise DataError("record is not an object")
        for key in ("id", "question", "knowledge"):
            if key not in raw:
                raise DataError(f"record is missing required field {key!r}")
        knowledge = raw["knowledge"]
        if isinstance(knowledge, str):
            knowledge = [knowledge]
        if not isinstance(knowledge, list) or not all(isinstance(k, str) for k in knowledge):
            raise DataError("knowledge must be a string or an array of strings")
        extra = {k: v for k, v in raw.items() if k not in _SAMPLE_FIELDS}
        return cls(
            id=str(raw["id"]),
            question=str(raw["question"]),
            knowledge=tuple(knowledge),
            topic=str(raw.get("topic", "")),
            gt_human=raw.get("gt_human"),
            gt_llm=raw.get("gt_llm"),
            fabrication=raw.get("fabrication"),
            qc_meta=QcMeta.from_dict(raw.get("qc_meta", {})),
            extra=extra,
        )


@dataclass(frozen=True)
class LabeledInstance:
    """One answer under test: the classification unit for detection."""

    sample_id: str
    text: str
    label: str

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")


def labeled_instances(sample: Sample) -> tuple[LabeledInstance, LabeledInstance]:
    """Expand a sample into its truthful and fabricated instances."""
    if not sample.gt_llm or not sample.fabrication:
        raise DataError(f"sample {sample.id!r} lacks gt_llm or fabrication")
    return (
        LabeledInstance(sample.id, sample.gt_llm, "ground_truth"),
        LabeledInstance(sample.id, sample.fabrication, "fabrication"),
    )


def load_dataset(path: str | Path) -> list[Sample]:
    """Read a line-delimited dataset; ids are verified unique."""
    samples: list[Sample] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                sample = Sample.from_dict(raw)
            except (json.JSONDecodeError, DataError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if sample.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return samples


def save_dataset(samples: Iterable[Sample], path: str | Path) -> None:
    """Write samples as one JSON object per line; absent fields are omitted."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_dict(), ensure_ascii=False))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; file values are overridable from the CLI."""

    # Quality-control and detection thresholds.
    tau_str: float = 0.7
    tau_emb: float = 0.85
    max_qc_iters: int = 5
    word_change_cap: int = 3
    aggregation_min_conflicts: int = 1
    # How reconstruction pairs are compared: the two reconstructions against
    # each other, or each reconstruction against the original row.
    pair_mode: str = "reconstructions"
    # Evidence chunking and retrieval.
    top_k_chunks: int = 3
    chunk_max_tokens: int = 128
    chunk_overlap: int = 32
    # Randomness root; every component derives a named substream from it.
    seed: int = 0
    # Provider wiring.
    provider: str = "mock"
    base_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    chat_model: str = ""
    embed_model: str = ""
    max_output_tokens: int = 1024
    max_in_flight: int = 4
    cache_dir: str = ""
    replay_dir: str = ""
    replay_source: str = "mock"
    strict_replay: bool = True
    # Opaque fields merged verbatim into chat payloads (e.g. reasoning knobs
    # that have no portable representation).
    chat_extra: dict = field(default_factory=dict)
    templates_dir: str = ""

    def __post_init__(self) -> None:
        for name in ("tau_str", "tau_emb"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.max_qc_iters < 1:
            raise ConfigError("max_qc_iters must be >= 1")
        for name in ("top_k_chunks", "chunk_max_tokens", "max_output_tokens", "aggregation_min_conflicts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.chunk_overlap < 0 or self.chunk_overlap >= self.chunk_max_tokens:
            raise ConfigError("chunk_overlap must satisfy 0 <= overlap < chunk_max_tokens")
        if self.pair_mode not in ("reconstructions", "against_original"):
            raise ConfigError(f"unknown pair_mode {self.pair_mode!r}")
        if self.provider not in ("mock", "openai", "replay"):
            raise ConfigError(f"unknown provider {self.provider!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, pairs: Iterable[str]) -> "RunConfig":
        """Apply ``key=value`` overrides; values for non-string fields are JSON."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        updates: dict[str, Any] = {}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            if key not in types:
                raise ConfigError(f"unknown config field {key!r}")
            if types[key] in ("str", str):
                updates[key] = value
            else:
                try:
                    updates[key] = json.loads(value)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"override {key}={value!r} is not valid JSON: {exc}") from exc
        try:
            return dataclasses.replace(self, **updates)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seed(seed: int, *parts: str) -> int:
    """Derive a named random substream from the root seed."""
    material = "|".join([str(seed), *parts]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")
