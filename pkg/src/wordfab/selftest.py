"""Bundled deterministic fixture and the end-to-end selftest.

Twenty two-row samples drive the full detection pipeline offline. A scripted
provider answers every chat role from lookup tables derived from the fixture
specs; its responses are recorded into a digest-keyed replay directory, and
the actual detection runs replay from that directory, exercising the same
provider stack a live run would use.

The expected outcome of every instance was traced by hand from the scripted
fills, gate rule, and adjudications before the pipeline ran (see EXPECTED):

* s01-s14: the fabricated row diverges from its evidence-true fill, gates,
  and adjudicates CONFLICT; truthful instances reconstruct identically.
* s15: row 1's variant A fill is scripted invalid, so both instances carry
  one unverifiable row; the fabricated row still convicts.
* s16, s17: the fabricated row gates but adjudicates BENIGN (missed).
* s18: row 1 fills with a synonym in both instances, gating but BENIGN.
* s19: row 1 fills with a contradicting verb and adjudicates CONFLICT in
  both instances: a false positive on the truthful side.
* s20: the fill resolves the ambiguous slot to the fabricated wording in
  both instances (a masked slot cannot see which instance it serves), so
  the fabricated instance reconstructs identically and is missed, while
  the truthful instance gates and is misjudged BENIGN.

Confusion matrix over the 40 instances: tp=17 fp=1 tn=19 fn=3, with 24
gated pairs requiring exactly 24 adjudication calls.
"""

from __future__ import annotations

import json
import tempfile
import traceback
from importlib import resources
from pathlib import Path
from typing import Callable

from .bench import ConfusionMatrix, score
from .data import LabeledInstance, QcMeta, RunConfig, Sample, load_dataset, save_dataset
from .hybrid_eval import DetectionReport, detect_dataset, save_reports
from .maskfill import complementary_masks
from .metrics import rouge_l_recall
from .prompts import PromptLibrary
from .providers import CachedProvider, ChatRequest, MockProvider, Provider, ReplayProvider
from .text2table import row_sentence

# sid, topic, entity1, desc1, entity2, desc2_true, desc2_fab
FIXTURE_SPECS: tuple[tuple[str, str, str, str, str, str, str], ...] = (
    ("s01", "endocrinology", "Metformin", "lowers fasting glucose substantially",
     "Lisinopril", "reduces systolic blood pressure", "raises systolic blood pressure"),
    ("s02", "oncology", "BRCA1 mutation", "raises lifetime breast cancer risk",
     "Tamoxifen therapy", "blocks estrogen receptor signaling", "boosts estrogen receptor signaling"),
    ("s03", "hematology", "Warfarin", "inhibits vitamin K dependent clotting",
     "Heparin", "activates antithrombin rapidly", "suppresses antithrombin rapidly"),
    ("s04", "cardiology", "Statin treatment", "lowers LDL cholesterol levels",
     "Ezetimibe", "blocks intestinal cholesterol absorption", "enhances intestinal cholesterol absorption"),
    ("s05", "oncology", "VEGFA overexpression", "promotes tumor angiogenesis",
     "Bevacizumab", "neutralizes circulating VEGFA protein", "elevates circulating VEGFA protein"),
    ("s06", "infectious-disease", "Amoxicillin", "disrupts bacterial cell wall synthesis",
     "Azithromycin", "inhibits bacterial protein synthesis", "accelerates bacterial protein synthesis"),
    ("s07", "endocrinology", "Insulin resistance", "precedes type 2 diabetes onset",
     "Exercise training", "improves insulin sensitivity markedly", "worsens insulin sensitivity markedly"),
    ("s08", "cardiology", "ACE inhibitors", "reduce cardiac afterload",
     "Beta blockers", "slow resting heart rate", "quicken resting heart rate"),
    ("s09", "gastroenterology", "Omeprazole", "suppresses gastric acid secretion",
     "Ranitidine", "antagonizes histamine H2 receptors", "stimulates histamine H2 receptors"),
    ("s10", "oncology", "EGFR mutation", "predicts erlotinib response strongly",
     "KRAS mutation", "confers erlotinib resistance", "confers erlotinib sensitivity"),
    ("s11", "endocrinology", "Vitamin D deficiency", "impairs intestinal calcium absorption",
     "Bisphosphonates", "inhibit osteoclast mediated resorption", "amplify osteoclast mediated resorption"),
    ("s12", "endocrinology", "Levothyroxine", "restores circulating thyroid hormone",
     "Methimazole", "decreases thyroid hormone production", "increases thyroid hormone production"),
    ("s13", "pain-management", "Ibuprofen", "inhibits cyclooxygenase enzymes broadly",
     "Acetaminophen", "lacks meaningful antiinflammatory action", "shows meaningful antiinflammatory action"),
    ("s14", "allergy", "Penicillin allergy", "triggers IgE mediated reactions",
     "Cephalosporin use", "carries low cross reactivity", "carries high cross reactivity"),
    ("s15", "respiratory", "Albuterol", "relaxes bronchial smooth muscle",
     "Salmeterol", "provides prolonged bronchodilation coverage", "provides transient bronchodilation coverage"),
    ("s16", "infectious-disease", "Ciprofloxacin", "inhibits bacterial DNA gyrase",
     "Doxycycline", "blocks the 30S ribosomal subunit", "spares the 30S ribosomal subunit"),
    ("s17", "nephrology", "Furosemide", "promotes renal sodium excretion",
     "Spironolactone", "antagonizes aldosterone receptors directly", "mimics aldosterone receptors directly"),
    ("s18", "pain-management", "Morphine", "activates mu opioid receptors",
     "Naloxone", "reverses opioid induced sedation", "deepens opioid induced sedation"),
    ("s19", "hematology", "Clopidogrel", "blocks platelet P2Y12 receptors",
     "Aspirin", "acetylates platelet cyclooxygenase irreversibly", "methylates platelet cyclooxygenase irreversibly"),
    ("s20", "neurology", "Gabapentin", "modulates calcium channel signaling",
     "Pregabalin", "binds the alpha2delta subunit", "avoids the alpha2delta subunit"),
)

# Hand-traced oracle: (sample id, instance label) -> predicted, gated pairs,
# unverifiable rows. Frozen before the pipeline existed; see module docstring.
EXPECTED: dict[tuple[str, str], tuple[str, int, int]] = {}
for _sid, *_ in FIXTURE_SPECS:
    EXPECTED[(_sid, "ground_truth")] = ("ground_truth", 0, 0)
    EXPECTED[(_sid, "fabrication")] = ("fabrication", 1, 0)
EXPECTED[("s15", "ground_truth")] = ("ground_truth", 0, 1)
EXPECTED[("s15", "fabrication")] = ("fabrication", 1, 1)
EXPECTED[("s16", "fabrication")] = ("ground_truth", 1, 0)
EXPECTED[("s17", "fabrication")] = ("ground_truth", 1, 0)
EXPECTED[("s18", "ground_truth")] = ("ground_truth", 1, 0)
EXPECTED[("s18", "fabrication")] = ("fabrication", 2, 0)
EXPECTED[("s19", "ground_truth")] = ("fabrication", 1, 0)
EXPECTED[("s19", "fabrication")] = ("fabrication", 2, 0)
EXPECTED[("s20", "ground_truth")] = ("ground_truth", 1, 0)
EXPECTED[("s20", "fabrication")] = ("ground_truth", 0, 0)

EXPECTED_MATRIX = ConfusionMatrix(tp=17, fp=1, tn=19, fn=3)
EXPECTED_GATED_TOTAL = sum(gated for _, gated, _ in EXPECTED.values())


def _statement(e1: str, d1: str, e2: str, d2: str) -> str:
    return f"{e1} {d1}. {e2} {d2}."


def build_dataset() -> list[Sample]:
    """The bundled 20-sample dataset, derived from FIXTURE_SPECS."""
    samples = []
    for sid, topic, e1, d1, e2, d2_true, d2_fab in FIXTURE_SPECS:
        gt = _statement(e1, d1, e2, d2_true)
        fab = _statement(e1, d1, e2, d2_fab)
        samples.append(
            Sample(
                id=sid,
                question=f"How does {e1} act, and what does {e2} do?",
                knowledge=(_statement(e1, d1, e2, d2_true),),
                topic=topic,
                gt_llm=gt,
                fabrication=fab,
                qc_meta=QcMeta(rouge_recall=rouge_l_recall(gt, fab), sppo_rounds=1, status="accepted"),
            )
        )
    return samples


def _fill_from_truth(masked: str, truth: str) -> str:
    out = []
    for masked_word, true_word in zip(masked.split(), truth.split()):
        out.append(true_word if masked_word.startswith("[MASK_") else masked_word)
    return " ".join(out)


def _build_scripts() -> tuple[dict[str, list[dict]], dict[str, str], dict[str, str]]:
    """Derive the decompose, fill, and adjudication lookup tables."""
    rows_script: dict[str, list[dict]] = {}
    fill_script: dict[str, str] = {}
    adjudications: dict[str, str] = {}

    for sid, _topic, e1, d1, e2, d2_true, d2_fab in FIXTURE_SPECS:
        gt_statement = _statement(e1, d1, e2, d2_true)
        fab_statement = _statement(e1, d1, e2, d2_fab)
        rows_script[gt_statement] = [
            {"entity": e1, "description": d1},
            {"entity": e2, "description": d2_true},
        ]
        rows_script[fab_statement] = [
            {"entity": e1, "description": d1},
            {"entity": e2, "description": d2_fab},
        ]

        row1 = f"{e1} — {d1}"
        row2_true = f"{e2} — {d2_true}"
        row2_fab = f"{e2} — {d2_fab}"

        # Evidence-true fill target per row sentence under test.
        truth_for: dict[str, str] = {row1: row1, row2_true: row2_true, row2_fab: row2_true}
        if sid == "s18":
            # Synonym fill: benign lexical variation on the truthful row.
            truth_for[row1] = row1.replace("activates", "engages")
            adjudications[row1] = "BENIGN"
        if sid == "s19":
            # Contradicting fill on the truthful row: the false-positive path.
            truth_for[row1] = row1.replace("blocks", "activates")
            adjudications[row1] = "CONFLICT"
        if sid == "s20":
            # Ambiguous evidence: both rows fill toward the fabricated wording,
            # and the resulting truthful-side divergence is misjudged benign.
            truth_for[row2_true] = row2_fab
            truth_for[row2_fab] = row2_fab
            adjudications[row2_true] = "BENIGN"

        adjudications.setdefault(row2_fab, "BENIGN" if sid in ("s16", "s17", "s20") else "CONFLICT")

        for sentence, truth in truth_for.items():
            pair = complementary_masks(sentence)
            for variant in ("A", "B"):
                if not pair.mask_map(variant):
                    continue
                masked = pair.masked_text(variant)
                if sid == "s15" and sentence == row1 and variant == "A":
                    # Persistently invalid fill: edits the unmasked verb.
                    fill_script[masked] = row1.replace("relaxes", "calms")
                else:
                    fill_script[masked] = _fill_from_truth(masked, truth)
    return rows_script, fill_script, adjudications


def scripted_provider() -> MockProvider:
    """Deterministic provider answering all three chat roles of the pipeline."""
    rows_script, fill_script, adjudications = _build_scripts()

    def respond(req: ChatRequest) -> str:
        prompt = req.messages[0]["content"]
        if prompt.startswith("TASK: decompose-statement"):
            statement = prompt.split("STATEMENT:")[1].strip()
            return json.dumps(rows_script[statement])
        if prompt.startswith("TASK: fill-masked-sentence"):
            masked = prompt.split("MASKED SENTENCE:")[1].strip()
            return fill_script[masked]
        if prompt.startswith("TASK: adjudicate-reconstruction-pair"):
            original = prompt.split("ORIGINAL ROW:")[1].split("RECONSTRUCTION A:")[0].strip()
            return adjudications[original]
        raise KeyError(f"scripted provider got an unexpected prompt: {prompt[:60]!r}")

    return MockProvider(chat_fn=respond)


def fixture_dataset_path() -> Path:
    return Path(str(resources.files("wordfab") / "fixtures" / "selftest.jsonl"))


def record_fixture(replay_dir: Path, config: RunConfig, templates: PromptLibrary) -> list:
    """Populate a replay directory by running detection through the recorder."""
    recorder = CachedProvider(scripted_provider(), replay_dir)
    records, _ = detect_dataset(build_dataset(), config, recorder, templates)
    return records


def check_reports(records: list) -> list[str]:
    """Compare detection records against the hand-traced oracle; returns problems."""
    problems = []
    reports = [r for r in records if isinstance(r, DetectionReport)]
    if len(reports) != len(EXPECTED):
        problems.append(f"expected {len(EXPECTED)} reports, got {len(reports)}")
        return problems
    for report in reports:
        key = (report.sample_id, report.label)
        predicted, gated, unverifiable = EXPECTED[key]
        actual_gated = sum(1 for v in report.verdicts if v.gated)
        if report.predicted != predicted:
            problems.append(f"{key}: predicted {report.predicted}, oracle says {predicted}")
        if actual_gated != gated:
            problems.append(f"{key}: {actual_gated} gated pairs, oracle says {gated}")
        if report.unverifiable_rows != unverifiable:
            problems.append(
                f"{key}: {report.unverifiable_rows} unverifiable rows, oracle says {unverifiable}"
            )
    return problems


def matrix_from_reports(records: list) -> ConfusionMatrix:
    pairs = [
        (LabeledInstance(r.sample_id, "<fixture>", r.label), r.predicted)
        for r in records
        if isinstance(r, DetectionReport)
    ]
    return score(pairs).matrix


def run_selftest(workdir: Path | None = None, echo: Callable[[str], None] = print) -> bool:
    """Record, replay twice, and verify the bundled fixture end to end."""
    try:
        if workdir is None:
            with tempfile.TemporaryDirectory(prefix="wordfab-selftest-") as tmp:
                return _run_selftest_in(Path(tmp), echo)
        workdir.mkdir(parents=True, exist_ok=True)
        return _run_selftest_in(workdir, echo)
    except Exception:  # selftest is a diagnostic; fail with a message, not a crash
        echo("selftest: FAIL (unexpected error)")
        echo(traceback.format_exc())
        return False


def _run_selftest_in(workdir: Path, echo: Callable[[str], None]) -> bool:
    ok = True
    config = RunConfig()
    templates = PromptLibrary()

    bundled = load_dataset(fixture_dataset_path())
    if bundled == build_dataset():
        echo(f"selftest: dataset integrity: ok ({len(bundled)} samples)")
    else:
        echo("selftest: dataset integrity: FAIL (bundled file drifted from specs)")
        ok = False

    dataset_path = workdir / "selftest.jsonl"
    save_dataset(bundled, dataset_path)
    replay_dir = workdir / "replay"
    record_fixture(replay_dir, config, templates)

    outputs = []
    providers: list[Provider] = []
    for run in (1, 2):
        replay = ReplayProvider(replay_dir, source_id="mock")
        records, _ = detect_dataset(load_dataset(dataset_path), config, replay, templates)
        out_path = workdir / f"reports-{run}.jsonl"
        save_reports(records, out_path)
        outputs.append((records, out_path))
        providers.append(replay)

    bytes1 = outputs[0][1].read_bytes()
    bytes2 = outputs[1][1].read_bytes()
    if bytes1 == bytes2:
        echo("selftest: replay determinism: ok (byte-identical report files)")
    else:
        echo("selftest: replay determinism: FAIL (report files differ)")
        ok = False

    records = outputs[0][0]
    problems = check_reports(records)
    if problems:
        echo(f"selftest: oracle comparison: FAIL ({len(problems)} mismatches)")
        for problem in problems:
            echo(f"  {problem}")
        ok = False
    else:
        echo(f"selftest: oracle comparison: ok ({len(EXPECTED)} instances match)")

    matrix = matrix_from_reports(records)
    if matrix == EXPECTED_MATRIX:
        echo(
            f"selftest: confusion matrix: tp={matrix.tp} fp={matrix.fp} "
            f"tn={matrix.tn} fn={matrix.fn} (matches oracle)"
        )
    else:
        echo(
            f"selftest: confusion matrix: FAIL got tp={matrix.tp} fp={matrix.fp} "
            f"tn={matrix.tn} fn={matrix.fn}, expected tp={EXPECTED_MATRIX.tp} "
            f"fp={EXPECTED_MATRIX.fp} tn={EXPECTED_MATRIX.tn} fn={EXPECTED_MATRIX.fn}"
        )
        ok = False

    gated_total = sum(
        sum(1 for v in r.verdicts if v.gated) for r in records if isinstance(r, DetectionReport)
    )
    adjudicate_calls = providers[0].counters.get("chat:adjudicate", 0)
    if gated_total == adjudicate_calls == EXPECTED_GATED_TOTAL:
        echo(f"selftest: skip discipline: ok ({adjudicate_calls} adjudication calls, {gated_total} gated pairs)")
    else:
        echo(
            f"selftest: skip discipline: FAIL ({adjudicate_calls} adjudication calls, "
            f"{gated_total} gated pairs, expected {EXPECTED_GATED_TOTAL})"
        )
        ok = False

    echo("selftest: PASS" if ok else "selftest: FAIL")
    return ok
