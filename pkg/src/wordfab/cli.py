"""Command-line entry point.

Subcommands: generate, detect, split, score, variance, variant, audit,
selftest. Every run writes a manifest next to its primary output recording
the resolved configuration, provider id, seed, and input digests, so a run
can be reproduced byte-for-byte against the same cache or replay fixtures.

Exit codes: 0 success, 2 configuration error, 3 provider error, 4 data
error, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .bench import (
    EvalReport,
    make_rewritten_variant,
    score,
    similarity_audit,
    split_disjoint,
    variance,
)
from .data import ConfigError, DataError, LabeledInstance, RunConfig, load_dataset, save_dataset
from .fabgen import generate_dataset
from .hybrid_eval import detect_dataset, load_reports, save_reports
from .prompts import library_for
from .providers import Provider, ProviderError, build_provider

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROVIDER = 3
EXIT_DATA = 4


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(
    out_path: Path,
    command: str,
    config: RunConfig,
    provider: Provider | None,
    inputs: list[Path],
    outputs: list[Path],
) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "seed": config.seed,
        "provider_id": provider.provider_id if provider else None,
        "inputs": {str(p): _file_digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    manifest_path = out_path.with_name(out_path.name + ".manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        config = RunConfig.from_file(args.config)
    else:
        config = RunConfig()
    if args.set:
        config = config.with_overrides(args.set)
    return config


def _print_report(report: EvalReport) -> None:
    print(f"{'class':<14} {'precision':>9} {'recall':>9} {'f1':>9}")
    for cls in ("fabrication", "ground_truth", "overall"):
        print(
            f"{cls:<14} "
            f"{report.metric(cls, 'precision'):>9.4f} "
            f"{report.metric(cls, 'recall'):>9.4f} "
            f"{report.metric(cls, 'f1'):>9.4f}"
        )
    m = report.matrix
    print(f"confusion: tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn}")
    if report.excluded_undetectable:
        print(f"excluded undetectable instances: {report.excluded_undetectable}")


def _cmd_generate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    provider = build_provider(config)
    templates = library_for(config.templates_dir)
    samples = load_dataset(args.infile)
    result = generate_dataset(samples, config, provider, templates, jobs=args.jobs)
    out = Path(args.outfile)
    save_dataset(result.samples, out)
    _write_manifest(out, "generate", config, provider, [Path(args.infile)], [out])
    print(
        f"generated {len(result.samples)} samples: "
        f"{result.accepted} accepted, {result.rejected} rejected, "
        f"{len(result.failures)} failed "
        f"(accepted fraction {result.accepted_fraction:.2f})"
    )
    for sample_id, error in result.failures:
        print(f"  failed {sample_id}: {error}")
    return EXIT_OK


def _cmd_detect(args: argparse.Namespace) -> int:
    config = _load_config(args)
    provider = build_provider(config)
    templates = library_for(config.templates_dir)
    samples = load_dataset(args.infile)
    records, skipped = detect_dataset(samples, config, provider, templates, jobs=args.jobs)
    out = Path(args.outfile)
    save_reports(records, out)
    _write_manifest(out, "detect", config, provider, [Path(args.infile)], [out])
    undetectable = sum(1 for r in records if not hasattr(r, "verdicts"))
    print(
        f"detected {len(records) - undetectable} instances "
        f"({undetectable} undetectable, {skipped} samples skipped) -> {out}"
    )
    return EXIT_OK


def _cmd_split(args: argparse.Namespace) -> int:
    config = _load_config(args)
    samples = load_dataset(args.infile)
    train, test = split_disjoint(samples, args.ratio, config.seed)
    train_path, test_path = Path(args.out_train), Path(args.out_test)
    save_dataset(train, train_path)
    save_dataset(test, test_path)
    _write_manifest(train_path, "split", config, None, [Path(args.infile)], [train_path, test_path])
    print(f"split {len(samples)} samples into {len(train)} train / {len(test)} test")
    return EXIT_OK


def _cmd_score(args: argparse.Namespace) -> int:
    config = _load_config(args)
    reports, undetectable = load_reports(args.infile)
    predictions = [
        (LabeledInstance(r.sample_id, "<scored from report>", r.label), r.predicted) for r in reports
    ]
    eval_report = score(predictions, excluded_undetectable=len(undetectable))
    out = Path(args.outfile)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(eval_report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    figure_path = out.with_suffix(".png")
    from .figures import save_metric_bars

    save_metric_bars(eval_report, figure_path)
    _write_manifest(out, "score", config, None, [Path(args.infile)], [out, figure_path])
    _print_report(eval_report)
    print(f"wrote {out} and {figure_path}")
    return EXIT_OK


def _cmd_variance(args: argparse.Namespace) -> int:
    config = _load_config(args)
    reports = []
    for path in args.infiles:
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(EvalReport.from_dict(json.load(fh)))
    var = variance(reports)
    out = Path(args.outfile)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(var.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "variance", config, None, [Path(p) for p in args.infiles], [out])
    print(f"variance across {var.runs} runs (percentage points):")
    print(f"{'class':<14} {'precision':>9} {'recall':>9} {'f1':>9}")
    for cls in ("fabrication", "ground_truth", "overall"):
        print(
            f"{cls:<14} "
            f"{var.value(cls, 'precision'):>9.2f} "
            f"{var.value(cls, 'recall'):>9.2f} "
            f"{var.value(cls, 'f1'):>9.2f}"
        )
    return EXIT_OK


def _cmd_variant(args: argparse.Namespace) -> int:
    config = _load_config(args)
    provider = build_provider(config)
    templates = library_for(config.templates_dir)
    samples = load_dataset(args.infile)
    out = Path(args.outfile)
    save_dataset(make_rewritten_variant(samples, config, provider, templates), out)
    _write_manifest(out, "variant", config, provider, [Path(args.infile)], [out])
    print(f"wrote rewritten variant of {len(samples)} samples -> {out}")
    return EXIT_OK


def _cmd_audit(args: argparse.Namespace) -> int:
    config = _load_config(args)
    provider = build_provider(config)
    samples = load_dataset(args.infile)
    summary = similarity_audit(samples, provider, config)
    out = Path(args.outfile)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    figure_path = out.with_suffix(".png")
    from .figures import save_similarity_histogram

    save_similarity_histogram(summary.values, figure_path)
    _write_manifest(out, "audit", config, provider, [Path(args.infile)], [out, figure_path])
    print(
        f"audited {summary.count} accepted pairs: "
        f"similarity mean {summary.mean:.4f} (std {summary.std:.4f}), "
        f"mean ROUGE-L recall {summary.mean_rouge_recall:.4f}"
    )
    print(f"wrote {out} and {figure_path}")
    return EXIT_OK


def _cmd_selftest(args: argparse.Namespace) -> int:
    from .selftest import run_selftest

    ok = run_selftest(workdir=Path(args.workdir) if args.workdir else None)
    return EXIT_OK if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wordfab", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"wordfab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file mirroring RunConfig fields")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field (repeatable; JSON values for non-string fields)",
    )
    common.add_argument("--jobs", type=int, default=1, help="worker pool size")

    p = sub.add_parser("generate", parents=[common], help="rewrite + fabricate + quality control")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("detect", parents=[common], help="detect fabrications in a dataset")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("split", parents=[common], help="topic/question-disjoint split")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out-train", dest="out_train", required=True)
    p.add_argument("--out-test", dest="out_test", required=True)
    p.add_argument("--ratio", type=float, default=0.7)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("score", parents=[common], help="score a detect report file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("variance", parents=[common], help="cross-run metric variance")
    p.add_argument("--in", dest="infiles", nargs="+", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=_cmd_variance)

    p = sub.add_parser("variant", parents=[common], help="ground-truth-rewritten ablation variant")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=_cmd_variant)

    p = sub.add_parser("audit", parents=[common], help="embedding-similarity audit of accepted pairs")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("selftest", parents=[common], help="run the bundled deterministic fixture")
    p.add_argument("--workdir", help="keep selftest artifacts in this directory")
    p.set_defaults(func=_cmd_selftest)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
