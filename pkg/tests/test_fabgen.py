"""Generation pipeline tests: rewrite, fabricate, judge, and the QC loop."""

from __future__ import annotations

import pytest

from wordfab.data import QcMeta, RunConfig, Sample
from wordfab.fabgen import (
    GenerationResult,
    JudgeFormatError,
    QcOutcome,
    changed_token_count,
    fabricate,
    generate_dataset,
    qc_loop,
    recheck_accepted,
    rewrite,
    sppo_judge,
)
from wordfab.metrics import rouge_l_recall
from wordfab.prompts import PromptLibrary
from wordfab.providers import ChatRequest, MockProvider, ProviderError

TEMPLATES = PromptLibrary()
CFG = RunConfig()

GT = "metformin lowers fasting glucose in adults with type 2 diabetes"  # 10 tokens


def base_sample(sid="s1", **kwargs):
    fields = dict(
        id=sid,
        question="How does metformin affect glucose?",
        knowledge=("Metformin lowers fasting glucose in adults with type 2 diabetes.",),
        topic="endocrine",
        gt_human="Metformin lowers fasting glucose in adults who have type 2 diabetes.",
        gt_llm=GT,
    )
    fields.update(kwargs)
    return Sample(**fields)


def candidate_with_changes(n: int) -> str:
    """Replace the first n tokens with novel ones: ROUGE-L recall = (10-n)/10."""
    words = GT.split()
    return " ".join([f"alt{i}" for i in range(n)] + words[n:])


class GenScript:
    """Stateful chat scripting for the generation pipeline.

    ``candidates`` are popped per fabricate call; ``verdicts`` per judge call
    ("gt" or "candidate"). The judge answer targets whichever slot holds the
    scripted winner, so presentation order never changes the outcome.
    """

    def __init__(self, candidates: list[str], verdicts: list[str], rewrite_out: str = GT):
        self.candidates = list(candidates)
        self.verdicts = list(verdicts)
        self.rewrite_out = rewrite_out
        self.last_candidate = ""

    def __call__(self, req: ChatRequest) -> str:
        prompt = req.messages[0]["content"]
        if prompt.startswith("TASK: rewrite-answer"):
            return self.rewrite_out
        if prompt.startswith("TASK: fabricate-variant"):
            self.last_candidate = self.candidates.pop(0)
            return self.last_candidate
        if prompt.startswith("TASK: judge-answer-pair"):
            winner = self.verdicts.pop(0)
            answer_a = prompt.split("ANSWER A:")[1].split("ANSWER B:")[0].strip()
            target = GT if winner == "gt" else self.last_candidate
            return "A" if answer_a == target else "B"
        raise AssertionError(f"unexpected prompt: {prompt[:50]!r}")


def test_rewrite_echo_fixture_scores_one():
    provider = MockProvider(responses=[GT])
    out = rewrite("q", "k", GT, provider, TEMPLATES, CFG)
    assert out == GT
    assert rouge_l_recall(GT, out) == 1.0


def test_rewrite_rejects_empty_inputs():
    with pytest.raises(ValueError):
        rewrite("q", "k", "  ", MockProvider(), TEMPLATES, CFG)


def test_rewrite_empty_generations_error_after_retries():
    provider = MockProvider(responses=["", "  ", ""])
    with pytest.raises(ProviderError):
        rewrite("q", "k", "text", provider, TEMPLATES, CFG)
    assert provider.counters["chat"] == 3


def test_fabricate_single_word_swap_passes_rouge():
    swapped = GT.replace("lowers", "raises")
    provider = MockProvider(responses=[swapped])
    out = fabricate("q", "evidence", GT, provider, TEMPLATES, CFG)
    assert out == swapped
    assert rouge_l_recall(GT, out) >= 0.7
    assert changed_token_count(GT, out) == 1


def test_fabricate_full_rewrite_fails_rouge_downstream():
    rewritten = candidate_with_changes(6)
    provider = MockProvider(responses=[rewritten])
    out = fabricate("q", "evidence", GT, provider, TEMPLATES, CFG)
    assert rouge_l_recall(GT, out) == pytest.approx(0.4)


def test_fabricate_requires_gt():
    with pytest.raises(ValueError):
        fabricate("q", "e", "", MockProvider(), TEMPLATES, CFG)


def test_judge_maps_slots_back_to_verdicts():
    candidate = candidate_with_changes(1)

    def pick_gt(req):
        prompt = req.messages[0]["content"]
        answer_a = prompt.split("ANSWER A:")[1].split("ANSWER B:")[0].strip()
        return "A" if answer_a == GT else "B"

    for seed in range(6):  # both presentation orders occur across seeds
        verdict = sppo_judge("q", "k", GT, candidate, seed, MockProvider(chat_fn=pick_gt), TEMPLATES, CFG)
        assert verdict == "prefers_gt"

    def pick_candidate(req):
        prompt = req.messages[0]["content"]
        answer_a = prompt.split("ANSWER A:")[1].split("ANSWER B:")[0].strip()
        return "B" if answer_a == GT else "A"

    for seed in range(6):
        verdict = sppo_judge("q", "k", GT, candidate, seed, MockProvider(chat_fn=pick_candidate), TEMPLATES, CFG)
        assert verdict == "prefers_candidate"


def test_judge_seed_flips_presentation_order():
    orders = set()

    def record_order(req):
        prompt = req.messages[0]["content"]
        answer_a = prompt.split("ANSWER A:")[1].split("ANSWER B:")[0].strip()
        orders.add("gt_first" if answer_a == GT else "candidate_first")
        return "A"

    for seed in range(12):
        sppo_judge("q", "k", GT, "candidate answer", seed, MockProvider(chat_fn=record_order), TEMPLATES, CFG)
    assert orders == {"gt_first", "candidate_first"}


def test_judge_format_error_after_reasks():
    provider = MockProvider(responses=["the first one", "answer: A is best", "both"])
    with pytest.raises(JudgeFormatError):
        sppo_judge("q", "k", GT, "cand", 0, provider, TEMPLATES, CFG)
    assert provider.counters["chat"] == 3


def test_qc_loop_first_candidate_accepted():
    script = GenScript(candidates=[candidate_with_changes(2)], verdicts=["candidate"])
    trail: list[QcOutcome] = []
    out = qc_loop(base_sample(), CFG, MockProvider(chat_fn=script), TEMPLATES, trail=trail)
    assert out.qc_meta.status == "accepted"
    assert out.qc_meta.sppo_rounds == 1
    assert out.qc_meta.rouge_recall == pytest.approx(0.8)
    assert out.fabrication == candidate_with_changes(2)
    assert [o.reason for o in trail] == ["accepted"]


def test_qc_loop_two_rouge_failures_then_pass():
    script = GenScript(
        candidates=[candidate_with_changes(4), candidate_with_changes(5), candidate_with_changes(1)],
        verdicts=["candidate"],
    )
    provider = MockProvider(chat_fn=script)
    trail: list[QcOutcome] = []
    out = qc_loop(base_sample(), CFG, provider, TEMPLATES, trail=trail)
    assert out.qc_meta.status == "accepted"
    assert out.qc_meta.sppo_rounds == 3
    assert [o.reason for o in trail] == ["structural", "structural", "accepted"]
    # Judge consulted only for the structurally passing candidate.
    assert provider.counters["chat:judge"] == 1
    assert provider.counters["chat:fabricate"] == 3


def test_qc_loop_exhaustion_rejects():
    script = GenScript(candidates=[candidate_with_changes(1)] * 5, verdicts=["gt"] * 5)
    provider = MockProvider(chat_fn=script)
    trail: list[QcOutcome] = []
    out = qc_loop(base_sample(), CFG, provider, TEMPLATES, trail=trail)
    assert out.qc_meta.status == "rejected"
    assert out.fabrication is None
    assert out.qc_meta.sppo_rounds == CFG.max_qc_iters
    assert [o.reason for o in trail] == ["sppo"] * 5
    assert provider.counters["chat:fabricate"] == CFG.max_qc_iters


def test_qc_loop_call_budget_bounded():
    script = GenScript(candidates=[candidate_with_changes(6)] * 5, verdicts=[])
    provider = MockProvider(chat_fn=script)
    out = qc_loop(base_sample(), CFG, provider, TEMPLATES)
    assert out.qc_meta.status == "rejected"
    assert provider.counters["chat:fabricate"] == CFG.max_qc_iters
    assert provider.counters.get("chat:judge", 0) == 0


def test_generate_dataset_empty():
    result = generate_dataset([], CFG, MockProvider(), TEMPLATES)
    assert result.samples == []
    assert result.accepted_fraction == 0.0


def test_generate_dataset_bookkeeping():
    samples = [base_sample(f"s{i}", gt_llm=None) for i in range(5)]
    # Sample s3 exhausts its candidates; the rest accept on round one.
    scripts = {
        f"s{i}": GenScript(candidates=[candidate_with_changes(2)], verdicts=["candidate"])
        for i in range(5)
    }
    scripts["s3"] = GenScript(candidates=[candidate_with_changes(6)] * 5, verdicts=[])

    def route(req: ChatRequest) -> str:
        prompt = req.messages[0]["content"]
        for sid, script in scripts.items():
            marker = f"[{sid}]"
            if marker in prompt:
                return script(req)
        raise AssertionError("sample marker not found in prompt")

    tagged = [
        Sample(
            id=s.id,
            question=f"[{s.id}] {s.question}",
            knowledge=s.knowledge,
            topic=s.topic,
            gt_human=s.gt_human,
        )
        for s in samples
    ]
    result = generate_dataset(tagged, CFG, MockProvider(chat_fn=route), TEMPLATES)
    assert [s.id for s in result.samples] == [f"s{i}" for i in range(5)]
    assert result.accepted == 4
    assert result.rejected == 1
    assert result.failures == []
    assert result.samples[3].qc_meta.status == "rejected"
    assert result.accepted_fraction == pytest.approx(0.8)
    for s in result.samples:
        assert "rewrite_rouge" in s.extra


def test_generate_dataset_fail_soft_records_failures():
    bad = base_sample("s1", gt_human=None, gt_llm=None)
    result = generate_dataset([bad], CFG, MockProvider(), TEMPLATES)
    assert result.failures and result.failures[0][0] == "s1"
    assert result.samples[0].qc_meta.status == "pending"


def test_generate_dataset_deterministic_with_same_script():
    def run():
        script = GenScript(candidates=[candidate_with_changes(2)], verdicts=["candidate"])
        return generate_dataset([base_sample(gt_llm=None)], CFG, MockProvider(chat_fn=script), TEMPLATES)

    first, second = run(), run()
    assert first.samples == second.samples


def test_recheck_accepted_flags_violations():
    good = base_sample(
        "ok",
        fabrication=candidate_with_changes(2),
        qc_meta=QcMeta(rouge_recall=0.8, sppo_rounds=1, status="accepted"),
    )
    drifted = base_sample(
        "drift",
        fabrication=candidate_with_changes(6),
        qc_meta=QcMeta(rouge_recall=0.8, sppo_rounds=1, status="accepted"),
    )
    assert recheck_accepted([good, drifted], 0.7) == ["drift"]
