"""Gate, adjudication, aggregation, and end-to-end detection tests."""

from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordfab.data import LabeledInstance, QcMeta, RunConfig, Sample
from wordfab.hybrid_eval import (
    AdjudicationError,
    DetectionReport,
    PairVerdict,
    UndetectableRecord,
    adjudicate,
    aggregate,
    detect,
    detect_dataset,
    gate,
    load_reports,
    save_reports,
)
from wordfab.maskfill import complementary_masks
from wordfab.prompts import PromptLibrary
from wordfab.providers import MockProvider, scripted_vector_pair
from wordfab.text2table import row_sentence

TEMPLATES = PromptLibrary()
CFG = RunConfig()


def verdict(row=0, sim=0.5, gated=True, adjudication="conflict"):
    return PairVerdict(
        row_index=row,
        embed_similarity=sim,
        gated=gated,
        adjudication=adjudication,
        final_conflict=gated and adjudication == "conflict",
    )


def test_gate_identical_texts_not_flagged():
    provider = MockProvider()
    sim, gated = gate("same text", "same text", 0.85, provider)
    assert sim == pytest.approx(1.0, abs=1e-12)
    assert not gated


def test_gate_scripted_similarity_flags():
    u, v = scripted_vector_pair(0.30)
    provider = MockProvider(embed_overrides={"textA": u, "textB": v})
    sim, gated = gate("textA", "textB", 0.85, provider)
    assert sim == pytest.approx(0.30, abs=1e-12)
    assert gated


def test_gate_boundary_is_strict():
    u, v = scripted_vector_pair(0.85)
    provider = MockProvider(embed_overrides={"textA": u, "textB": v})
    sim, gated = gate("textA", "textB", 0.85, provider)
    assert sim == pytest.approx(0.85, abs=1e-12)
    assert not gated


def test_gate_rejects_empty_text():
    with pytest.raises(ValueError):
        gate("", "x", 0.85, MockProvider())


def test_adjudicate_parses_verdicts():
    assert adjudicate("o", "a", "b", "e", MockProvider(responses=["CONFLICT"]), TEMPLATES, CFG) == "conflict"
    assert adjudicate("o", "a", "b", "e", MockProvider(responses=["benign."]), TEMPLATES, CFG) == "benign"


def test_adjudicate_reasks_then_fails_on_prose():
    provider = MockProvider(responses=["well, it depends", "hmm", "maybe benign?"])
    with pytest.raises(AdjudicationError):
        adjudicate("o", "a", "b", "e", provider, TEMPLATES, CFG)
    assert provider.counters["chat"] == 3


def test_aggregate_rules():
    assert aggregate([], 1) == "ground_truth"
    assert aggregate([verdict()], 1) == "fabrication"
    two_benign_one_conflict = [
        verdict(adjudication="benign"),
        verdict(row=1, adjudication="benign"),
        verdict(row=2, adjudication="conflict"),
    ]
    assert aggregate(two_benign_one_conflict, 2) == "ground_truth"
    assert aggregate(two_benign_one_conflict, 1) == "fabrication"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), max_size=6), st.integers(1, 3), st.integers(0, 5))
def test_aggregate_monotonicity(conflicts, min_conflicts, flip_index):
    verdicts = [
        verdict(row=i, adjudication="conflict" if c else "benign") for i, c in enumerate(conflicts)
    ]
    before = aggregate(verdicts, min_conflicts)
    if flip_index < len(verdicts):
        verdicts[flip_index] = verdict(row=flip_index, adjudication="conflict")
    after = aggregate(verdicts, min_conflicts)
    assert not (before == "fabrication" and after == "ground_truth")


# ---------------------------------------------------------------------------
# End-to-end detection with a scripted provider


def scripted_sample() -> Sample:
    return Sample(
        id="sx",
        question="How do metformin and lisinopril act?",
        knowledge=("Metformin lowers fasting glucose. Lisinopril reduces systolic blood pressure.",),
        topic="cardio",
        gt_llm="Metformin lowers fasting glucose. Lisinopril reduces systolic blood pressure.",
        fabrication="Metformin lowers fasting glucose. Lisinopril raises systolic blood pressure.",
        qc_meta=QcMeta(0.9, 1, "accepted"),
    )


ROWS = {
    "Metformin lowers fasting glucose. Lisinopril reduces systolic blood pressure.": [
        ("Metformin", "lowers fasting glucose"),
        ("Lisinopril", "reduces systolic blood pressure"),
    ],
    "Metformin lowers fasting glucose. Lisinopril raises systolic blood pressure.": [
        ("Metformin", "lowers fasting glucose"),
        ("Lisinopril", "raises systolic blood pressure"),
    ],
}

# Row sentence under test -> the evidence-true rendering of that row.
TRUTH_BY_ROW = {
    "Metformin — lowers fasting glucose": "Metformin — lowers fasting glucose",
    "Lisinopril — reduces systolic blood pressure": "Lisinopril — reduces systolic blood pressure",
    "Lisinopril — raises systolic blood pressure": "Lisinopril — reduces systolic blood pressure",
}


def _fill_from_truth(masked: str, truth: str) -> str:
    out_words = []
    for masked_word, true_word in zip(masked.split(), truth.split()):
        out_words.append(true_word if masked_word.startswith("[MASK_") else masked_word)
    return " ".join(out_words)


def build_fill_script() -> dict[str, str]:
    """Exact masked-text -> filled-text table for every row variant."""
    script: dict[str, str] = {}
    for sentence, truth in TRUTH_BY_ROW.items():
        pair = complementary_masks(sentence)
        for variant in ("A", "B"):
            if pair.mask_map(variant):
                masked = pair.masked_text(variant)
                script[masked] = _fill_from_truth(masked, truth)
    return script


FILL_SCRIPT = build_fill_script()


def scripted_chat(req):
    """Deterministic stand-in for the three chat roles in the detect pipeline."""
    prompt = req.messages[0]["content"]
    if prompt.startswith("TASK: decompose-statement"):
        statement = prompt.split("STATEMENT:")[1].strip()
        return json.dumps([{"entity": e, "description": d} for e, d in ROWS[statement]])
    if prompt.startswith("TASK: fill-masked-sentence"):
        masked = prompt.split("MASKED SENTENCE:")[1].strip()
        return FILL_SCRIPT[masked]
    if prompt.startswith("TASK: adjudicate-reconstruction-pair"):
        return "CONFLICT"
    raise AssertionError(f"unexpected chat request: {prompt[:60]!r}")


def test_detect_consistent_instance_predicts_ground_truth():
    sample = scripted_sample()
    provider = MockProvider(chat_fn=scripted_chat)
    instance = LabeledInstance("sx", sample.gt_llm, "ground_truth")
    report = detect(instance, sample, CFG, provider, TEMPLATES)
    assert report.predicted == "ground_truth"
    assert all(v.embed_similarity == pytest.approx(1.0, abs=1e-12) for v in report.verdicts)
    assert all(v.adjudication == "skipped" for v in report.verdicts)
    assert provider.counters.get("chat:adjudicate", 0) == 0


def test_detect_flipped_instance_predicts_fabrication():
    sample = scripted_sample()
    provider = MockProvider(chat_fn=scripted_chat)
    instance = LabeledInstance("sx", sample.fabrication, "fabrication")
    report = detect(instance, sample, CFG, provider, TEMPLATES)
    assert report.predicted == "fabrication"
    gated = [v for v in report.verdicts if v.gated]
    assert len(gated) == 1
    assert gated[0].row_index == 1
    assert gated[0].final_conflict
    # Skip discipline: exactly one adjudication call for exactly one gated pair.
    assert provider.counters["chat:adjudicate"] == 1


def test_detect_repeat_runs_identical():
    sample = scripted_sample()
    instance = LabeledInstance("sx", sample.fabrication, "fabrication")
    first = detect(instance, sample, CFG, MockProvider(chat_fn=scripted_chat), TEMPLATES)
    second = detect(instance, sample, CFG, MockProvider(chat_fn=scripted_chat), TEMPLATES)
    assert first == second


def test_detect_dataset_order_and_undetectable(tmp_path):
    sample = scripted_sample()

    def flaky_chat(req):
        prompt = req.messages[0]["content"]
        if prompt.startswith("TASK: decompose-statement") and "raises" in prompt:
            return "no table for you"
        return scripted_chat(req)

    provider = MockProvider(chat_fn=flaky_chat)
    records, skipped = detect_dataset([sample], CFG, provider, TEMPLATES)
    assert skipped == 0
    assert len(records) == 2
    assert isinstance(records[0], DetectionReport)
    assert records[0].label == "ground_truth"
    assert isinstance(records[1], UndetectableRecord)

    path = tmp_path / "reports.jsonl"
    save_reports(records, path)
    reports, undetectable = load_reports(path)
    assert len(reports) == 1 and len(undetectable) == 1
    assert reports[0] == records[0]
    assert undetectable[0]["undetectable"] is True


def test_detect_dataset_skips_incomplete_samples():
    incomplete = Sample(id="s0", question="q", knowledge=("k",), topic="t")
    records, skipped = detect_dataset([incomplete], CFG, MockProvider(), TEMPLATES)
    assert records == [] and skipped == 1


def test_detect_dataset_parallel_matches_serial():
    sample = scripted_sample()
    serial, _ = detect_dataset([sample], CFG, MockProvider(chat_fn=scripted_chat), TEMPLATES, jobs=1)
    parallel, _ = detect_dataset([sample], CFG, MockProvider(chat_fn=scripted_chat), TEMPLATES, jobs=4)
    assert serial == parallel


def test_gate_consistency_recompute():
    rng = random.Random(3)
    for _ in range(50):
        sim = rng.uniform(-1, 1)
        v = verdict(sim=sim, gated=sim < CFG.tau_emb, adjudication="skipped" if sim >= CFG.tau_emb else "benign")
        assert v.gated == (v.embed_similarity < CFG.tau_emb)
