"""Pipeline command line: file-to-file stages over JSONL artifacts.

Every stage reads and writes plain files so partial reruns and diffing work;
output files are written atomically. Errors surface as one JSON line on
stderr with exit code 1; argparse keeps its usual exit code 2 for bad flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import jsonschema
import yaml

from . import analytics, attribution, evaluation, narrator, refmodel, schema
from .augment import (
    AugmentationConfig,
    AugmentError,
    ChatClient,
    HttpChatClient,
    StubChatClient,
    augment_batch,
)
from .util import atomic_write_json, atomic_write_jsonl

DEFAULT_TARGET_RATIO = 2654 / 1779

_CONFIG_DEFAULTS: dict[str, object] = {
    "lexicon": None,
    "templates": None,
    "grouping_rules": None,
    "category_lexicon": None,
    "column_maps": None,
    "L": 100,
    "b": 1,
    "target_ratio": DEFAULT_TARGET_RATIO,
    "temperature": 0.1,
    "endpoint": "",
    "offline": False,
    "seed": 0,
    "jobs": 1,
    "display_divisor": 20.0,
    "threshold_hi": 3.0,
    "top_k": 5,
    "dim": 32,
    # the label is predicted from the final window, so it must be wide
    # enough to keep same-tail narratives with different labels apart
    "window": 48,
    "epochs": 60,
    "lr": 0.05,
    "balance": False,
}


class CliError(Exception):
    pass


def load_config(path: Optional[str]) -> dict[str, object]:
    """Defaults, overlaid with the YAML config; unknown keys are fatal."""
    cfg = dict(_CONFIG_DEFAULTS)
    if path is None:
        return cfg
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must be a mapping")
    for key, value in doc.items():
        if key not in _CONFIG_DEFAULTS:
            raise CliError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def _getter(args: argparse.Namespace, cfg: dict[str, object]) -> Callable[[str], object]:
    # explicitly passed flags win over the config file, which wins over defaults
    def get(key: str) -> object:
        flag = getattr(args, key, None)
        if flag is not None:
            return flag
        return cfg.get(key)

    return get


def _emit(summary: dict) -> None:
    print(json.dumps(summary, ensure_ascii=False))


def _read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def _chat_client(get: Callable[[str], object]) -> ChatClient:
    if get("offline"):
        return StubChatClient()
    endpoint = str(get("endpoint") or "")
    if not endpoint and not os.environ.get("CRASHLENS_CHAT_ENDPOINT"):
        raise CliError("no chat endpoint configured; pass --offline to use the stub client")
    return HttpChatClient(endpoint=endpoint or None)


def cmd_ingest(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    tables = schema.load_tables(
        args.crashes, args.segments, args.vehicles, args.persons, column_maps=get("column_maps")
    )
    result = schema.integrate(tables)
    cases = result.cases
    if get("balance"):
        cases = schema.stratified_downsample(cases, float(get("target_ratio")), int(get("seed")))
    atomic_write_jsonl(args.out, [schema.case_to_dict(c) for c in cases])
    _emit(
        {
            "cases": len(cases),
            "rejected_rows": len(tables.rejects),
            "orphan_vehicles": len(result.report.orphan_vehicles),
            "orphan_persons": len(result.report.orphan_persons),
            "ambiguous_links": len(result.report.ambiguous_links),
            "out": str(args.out),
        }
    )
    return 0


def cmd_narrate(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    cases = schema.deserialize_cases(args.cases)
    lexicon = narrator.load_lexicon(get("lexicon"))
    templates = narrator.load_templates(get("templates"))
    pairs = []
    n_warnings = 0
    for case in cases:
        normalized = narrator.normalize(case, lexicon)
        n_warnings += len(normalized.warnings)
        pairs.append(narrator.render(normalized, templates))
    atomic_write_jsonl(args.out, [narrator.pair_to_dict(p) for p in pairs])
    _emit({"narratives": len(pairs), "warnings": n_warnings, "out": str(args.out)})
    return 0


def cmd_augment(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    pairs = narrator.read_pairs(args.narratives)
    cfg = AugmentationConfig(
        temperature=float(get("temperature")), endpoint=str(get("endpoint") or "")
    )
    client = _chat_client(get)
    results = augment_batch(
        [p.descriptive for p in pairs], client, cfg, jobs=int(get("jobs") or 1)
    )
    records = []
    fallbacks = 0
    for pair, (text, report) in zip(pairs, results):
        ok = report.error is None and report.passed
        if not ok:
            fallbacks += 1
        records.append(
            {
                "caseno": pair.caseno,
                "original": pair.descriptive,
                "augmented": text,
                "passed": ok,
                "failures": [
                    {"constraint": r.kind.value, "offending": r.offending}
                    for r in report.failures
                ],
                "error": report.error,
            }
        )
    atomic_write_jsonl(args.out, records)
    _emit({"narratives": len(records), "fallbacks": fallbacks, "out": str(args.out)})
    return 0


def cmd_train_ref(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    pairs = narrator.read_pairs(args.narratives)
    if not pairs:
        raise CliError("no narratives to train on")
    tokenizer = refmodel.Tokenizer.from_texts([p.descriptive for p in pairs])
    examples = []
    for pair in pairs:
        ids = [refmodel.BOS_ID] + tokenizer.encode(pair.descriptive) + [tokenizer.label_id(pair.label)]
        mask = [False] * (len(ids) - 1) + [True]  # loss on the label only
        examples.append(refmodel.TrainingExample(tokens=tuple(ids), loss_mask=tuple(mask)))
    seed = int(get("seed"))
    model = refmodel.TinyLM.init(
        tokenizer.size, dim=int(get("dim")), window=int(get("window")), seed=seed
    )
    config = refmodel.TrainConfig(lr=float(get("lr")), epochs=int(get("epochs")), seed=seed)
    trained = refmodel.train(model, examples, config)
    trained.save(args.out_model)
    tokenizer.save(args.out_tokenizer)
    _emit(
        {
            "examples": len(examples),
            "vocab": tokenizer.size,
            "final_nll": round(trained.loss_history[-1], 6) if trained.loss_history else None,
            "model": str(args.out_model),
            "tokenizer": str(args.out_tokenizer),
        }
    )
    return 0


def cmd_attribute(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    pairs = narrator.read_pairs(args.narratives)
    if args.caseno:
        pairs = [p for p in pairs if p.caseno == args.caseno]
        if not pairs:
            raise CliError(f"caseno {args.caseno!r} not found in narratives")
    model = refmodel.TinyLM.load(args.model)
    tokenizer = refmodel.Tokenizer.load(args.tokenizer)
    cfg = attribution.NormalizationConfig(L=int(get("L")), b=int(get("b")))
    divisor = float(get("display_divisor"))
    records = []
    for pair in pairs:
        spans = tokenizer.encode_with_spans(pair.descriptive)
        prompt = [refmodel.BOS_ID] + [tid for tid, _, _ in spans]
        prompt_spans: list[Optional[tuple[int, int]]] = [None]
        prompt_spans += [(s, e) for _, s, e in spans]
        label, _ = refmodel.classify(model, tokenizer, pair.descriptive)
        response = [tokenizer.label_id(label)]
        importance_fn = (
            attribution.occlusion_importance
            if args.method == "occlusion"
            else attribution.taylor_importance
        )
        matrix = importance_fn(
            model, prompt, response, tokenizer=tokenizer, prompt_spans=prompt_spans
        )
        scores = attribution.normalize_scores(matrix, cfg)
        words = attribution.aggregate_to_words(scores, pair.descriptive, display_divisor=divisor)
        annotated = attribution.annotate_narrative(
            pair.descriptive, attribution.positive_words(words)
        )
        records.append(attribution.attribution_record(pair.caseno, matrix, scores, words, annotated))
    atomic_write_jsonl(args.out, records)
    _emit({"records": len(records), "method": args.method, "out": str(args.out)})
    return 0


def cmd_analyze(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    records = _read_jsonl(args.attributions)
    rules = analytics.load_grouping_rules(get("grouping_rules"))
    lexicon = analytics.load_category_lexicon(get("category_lexicon"))
    client = None if get("offline") else _chat_client(get)
    out_records = []
    per_case_grouped = []
    for rec in records:
        annotated, caseno = rec["annotated"], rec["caseno"]
        if client is None:
            _, words = attribution.parse_annotated(annotated)
            summary = analytics.rule_based_factors(words, lexicon, caseno=caseno)
        else:
            summary = analytics.summarize_factors(
                annotated, client, caseno=caseno, category_lexicon=lexicon
            )
        top = analytics.extract_top_factors(summary, k=int(get("top_k")))
        grouped = analytics.semantic_group(top, rules)
        per_case_grouped.append(grouped)
        out_records.append(
            {
                "caseno": caseno,
                "source": summary.source,
                "categories": {
                    cat.value: {
                        "summary": summary.categories[cat].summary,
                        "terms": [[t.term, t.score] for t in summary.categories[cat].terms],
                    }
                    for cat in analytics.AspectCategory
                },
                "top_factors": {cat.value: names for cat, names in top.items()},
                "grouped_factors": {cat.value: names for cat, names in grouped.items()},
            }
        )
    graph = analytics.cooccurrence(per_case_grouped)
    atomic_write_jsonl(args.out, out_records)
    if args.graph_out:
        analytics.export_sankey(graph, json_path=args.graph_out)
    _emit(
        {
            "cases": len(out_records),
            "nodes": len(graph.nodes),
            "links": len(graph.links),
            "out": str(args.out),
        }
    )
    return 0


def cmd_export(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    if args.kind == "sankey":
        if not args.graph:
            raise CliError("--graph is required for sankey export")
        doc = json.loads(Path(args.graph).read_text(encoding="utf-8"))
        graph = analytics.graph_from_json(doc)
        analytics.export_sankey(graph, html_path=args.out)
        _emit(
            {
                "kind": "sankey",
                "nodes": len(graph.nodes),
                "links": len(graph.links),
                "out": str(args.out),
            }
        )
        return 0
    if not args.attributions or not args.caseno:
        raise CliError("--attributions and --caseno are required for heatmap export")
    records = _read_jsonl(args.attributions)
    rec = next((r for r in records if r["caseno"] == args.caseno), None)
    if rec is None:
        raise CliError(f"caseno {args.caseno!r} not found in attributions")
    analytics.export_heatmap(
        rec["annotated"], float(get("threshold_hi")), args.out, caseno=args.caseno
    )
    _emit({"kind": "heatmap", "caseno": args.caseno, "out": str(args.out)})
    return 0


def cmd_eval(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    pairs = narrator.read_pairs(args.narratives)
    kind = evaluation.StrategyKind(args.strategy)
    if kind is evaluation.StrategyKind.FEW_SHOT:
        minor = next((p for p in pairs if p.label is schema.Severity.MINOR), None)
        severe = next((p for p in pairs if p.label is schema.Severity.SEVERE), None)
        if minor is None or severe is None:
            raise CliError("few-shot evaluation needs at least one narrative per class")
        strategy = evaluation.PromptStrategy(
            kind,
            (
                evaluation.Exemplar(minor.descriptive, minor.label),
                evaluation.Exemplar(severe.descriptive, severe.label),
            ),
        )
        eval_pairs = [p for p in pairs if p.caseno not in (minor.caseno, severe.caseno)]
    else:
        strategy = evaluation.PromptStrategy(kind)
        eval_pairs = pairs
    if not eval_pairs:
        raise CliError("no narratives left to evaluate")
    client = _chat_client(get)
    predictions, golds = evaluation.run_evaluation(
        eval_pairs, strategy, client, temperature=float(get("temperature"))
    )
    report = evaluation.compute_metrics(predictions, golds)
    atomic_write_jsonl(
        args.out,
        [
            {
                "caseno": p.caseno,
                "raw_output": p.raw_output,
                "label": p.label.value if p.label else None,
                "parse_status": p.parse_status.value,
            }
            for p in predictions
        ],
    )
    if args.metrics_out:
        atomic_write_json(
            args.metrics_out,
            {
                "macro_f1": report.macro_f1,
                "accuracy": report.accuracy,
                "macro_recall": report.macro_recall,
                "macro_precision": report.macro_precision,
                "n_failed_parses": report.n_failed_parses,
                "confusion": {
                    f"{g.value}->{p.value}": report.confusion[(g, p)]
                    for g in schema.Severity
                    for p in schema.Severity
                },
                "formatted": report.format(),
            },
        )
    _emit(
        {
            "cases": len(predictions),
            "accuracy": round(report.accuracy, 4),
            "macro_f1": round(report.macro_f1, 4),
            "out": str(args.out),
        }
    )
    return 0


def cmd_build_sft(args: argparse.Namespace, get: Callable[[str], object]) -> int:
    pairs = narrator.read_pairs(args.narratives)
    records = evaluation.build_sft_dataset(pairs)
    atomic_write_jsonl(args.out, [evaluation.sft_record_to_dict(r) for r in records])
    _emit({"records": len(records), "out": str(args.out)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; explicit flags override it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--offline", action="store_true", default=None, help="use the deterministic stub chat client")
    common.add_argument("--jobs", type=int, default=None)

    parser = argparse.ArgumentParser(prog="crashlens", description="Crash narrative pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="join the four CSV tables into cases.jsonl")
    p.add_argument("--crashes", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--vehicles", required=True)
    p.add_argument("--persons", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--balance", action="store_true", default=None, help="downsample the majority class")
    p.add_argument("--target-ratio", dest="target_ratio", type=float, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("narrate", parents=[common], help="render cases into narrative pairs")
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lexicon", default=None)
    p.add_argument("--templates", default=None)
    p.set_defaults(func=cmd_narrate)

    p = sub.add_parser("augment", parents=[common], help="constrained narrative rewrites")
    p.add_argument("--narratives", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--endpoint", default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-ref", parents=[common], help="train the reference classifier")
    p.add_argument("--narratives", required=True)
    p.add_argument("--out-model", dest="out_model", required=True)
    p.add_argument("--out-tokenizer", dest="out_tokenizer", required=True)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train_ref)

    p = sub.add_parser("attribute", parents=[common], help="token attribution for model decisions")
    p.add_argument("--narratives", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["occlusion", "taylor"], required=True)
    p.add_argument("--caseno", default=None, help="restrict to one case")
    p.add_argument("--L", dest="L", type=int, default=None)
    p.add_argument("--b", dest="b", type=int, default=None)
    p.add_argument("--display-divisor", dest="display_divisor", type=float, default=None)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("analyze", parents=[common], help="factor summaries, grouping, co-occurrence")
    p.add_argument("--attributions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--graph-out", dest="graph_out", default=None)
    p.add_argument("--grouping-rules", dest="grouping_rules", default=None)
    p.add_argument("--category-lexicon", dest="category_lexicon", default=None)
    p.add_argument("--top-k", dest="top_k", type=int, default=None)
    p.add_argument("--endpoint", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export", parents=[common], help="render sankey or heatmap HTML")
    p.add_argument("--kind", choices=["sankey", "heatmap"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--graph", default=None)
    p.add_argument("--attributions", default=None)
    p.add_argument("--caseno", default=None)
    p.add_argument("--threshold-hi", dest="threshold_hi", type=float, default=None)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", parents=[common], help="prompted severity classification")
    p.add_argument("--narratives", required=True)
    p.add_argument("--strategy", choices=[k.value for k in evaluation.StrategyKind], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics-out", dest="metrics_out", default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--endpoint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-sft", parents=[common], help="masked fine-tuning dataset")
    p.add_argument("--narratives", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_sft)

    return parser


_HANDLED = (
    CliError,
    schema.SchemaError,
    narrator.NarratorError,
    AugmentError,
    refmodel.RefModelError,
    analytics.AnalyticsError,
    evaluation.EvaluationError,
    jsonschema.ValidationError,
    yaml.YAMLError,
    json.JSONDecodeError,
    FileNotFoundError,
    NotADirectoryError,
    PermissionError,
    ValueError,
    KeyError,
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, _getter(args, cfg))
    except _HANDLED as exc:
        print(
            json.dumps({"error": type(exc).__name__, "detail": str(exc)}, ensure_ascii=False),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
