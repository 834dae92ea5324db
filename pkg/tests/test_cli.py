from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from conftest import corpus_path, python_cli, run_cli


def _ingest_args(out: Path) -> list[str]:
    return [
        "ingest",
        "--crashes", str(corpus_path("crashes")),
        "--segments", str(corpus_path("segments")),
        "--vehicles", str(corpus_path("vehicles")),
        "--persons", str(corpus_path("persons")),
        "--out", str(out),
    ]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the offline pipeline once; individual tests inspect the artifacts."""
    d = tmp_path_factory.mktemp("pipeline")
    steps = [
        _ingest_args(d / "cases.jsonl"),
        ["narrate", "--cases", str(d / "cases.jsonl"), "--out", str(d / "narratives.jsonl")],
        [
            "train-ref",
            "--narratives", str(d / "narratives.jsonl"),
            "--out-model", str(d / "model.json"),
            "--out-tokenizer", str(d / "tok.json"),
            "--seed", "7",
            "--epochs", "12",
            "--window", "32",
        ],
        [
            "attribute",
            "--narratives", str(d / "narratives.jsonl"),
            "--model", str(d / "model.json"),
            "--tokenizer", str(d / "tok.json"),
            "--method", "occlusion",
            "--out", str(d / "attr_occ.jsonl"),
        ],
        [
            "attribute",
            "--narratives", str(d / "narratives.jsonl"),
            "--model", str(d / "model.json"),
            "--tokenizer", str(d / "tok.json"),
            "--method", "taylor",
            "--out", str(d / "attr_tay.jsonl"),
        ],
        [
            "analyze", "--offline",
            "--attributions", str(d / "attr_occ.jsonl"),
            "--out", str(d / "factors.jsonl"),
            "--graph-out", str(d / "graph.json"),
        ],
        [
            "export", "--kind", "sankey",
            "--graph", str(d / "graph.json"),
            "--out", str(d / "sankey.html"),
        ],
        [
            "export", "--kind", "heatmap",
            "--attributions", str(d / "attr_occ.jsonl"),
            "--caseno", "C0001",
            "--out", str(d / "heat.html"),
        ],
        [
            "eval", "--offline",
            "--narratives", str(d / "narratives.jsonl"),
            "--strategy", "zs",
            "--out", str(d / "pred.jsonl"),
            "--metrics-out", str(d / "metrics.json"),
        ],
        ["build-sft", "--narratives", str(d / "narratives.jsonl"), "--out", str(d / "sft.jsonl")],
        [
            "augment", "--offline",
            "--narratives", str(d / "narratives.jsonl"),
            "--out", str(d / "aug.jsonl"),
        ],
    ]
    summaries = []
    for args in steps:
        code, out = run_cli(args)
        assert code == 0, f"{args[0]} failed: {out}"
        summaries.append(json.loads(out))
    return d, summaries


def test_ingest_summary_counts(pipeline):
    _, summaries = pipeline
    ingest = summaries[0]
    assert ingest["cases"] == 50
    assert ingest["rejected_rows"] == 0
    assert ingest["orphan_vehicles"] == 0
    assert ingest["orphan_persons"] == 0
    assert ingest["ambiguous_links"] >= 1


def test_narrate_produces_jsonl(pipeline):
    d, summaries = pipeline
    assert summaries[1]["narratives"] == 50
    lines = (d / "narratives.jsonl").read_text().splitlines()
    assert len(lines) == 50
    first = json.loads(lines[0])
    assert set(first) == {"caseno", "descriptive", "outcome", "label"}


def test_attribute_both_methods_cover_all_cases(pipeline):
    d, _ = pipeline
    for name, method in [("attr_occ.jsonl", "occlusion"), ("attr_tay.jsonl", "taylor")]:
        records = [json.loads(l) for l in (d / name).read_text().splitlines()]
        assert len(records) == 50
        assert all(r["method"] == method for r in records)
        assert all(r["L"] == 100 and r["b"] == 1 for r in records)


def test_analyze_emits_all_categories(pipeline):
    d, _ = pipeline
    records = [json.loads(l) for l in (d / "factors.jsonl").read_text().splitlines()]
    assert len(records) == 50
    for record in records[:3]:
        assert set(record["categories"]) == {
            "environmental",
            "vehicle_occupant",
            "behavioral",
            "infrastructure",
            "unusual",
        }
        assert record["source"] == "rules"


def test_exports_exist(pipeline):
    d, _ = pipeline
    assert "<svg" in (d / "sankey.html").read_text()
    heat = (d / "heat.html").read_text()
    assert "C0001" in heat and "<span" in heat


def test_eval_outputs_metrics(pipeline):
    d, _ = pipeline
    metrics = json.loads((d / "metrics.json").read_text())
    for key in ("n_failed_parses", "accuracy", "macro_f1", "confusion"):
        assert key in metrics
    assert len(metrics["confusion"]) == 4
    preds = [json.loads(l) for l in (d / "pred.jsonl").read_text().splitlines()]
    assert all(p["parse_status"] in ("exact", "fuzzy", "failed") for p in preds)


def test_sft_and_augment_cover_all_cases(pipeline):
    d, _ = pipeline
    assert len((d / "sft.jsonl").read_text().splitlines()) == 50
    aug = [json.loads(l) for l in (d / "aug.jsonl").read_text().splitlines()]
    assert len(aug) == 50
    assert all(r["passed"] for r in aug)


def test_unknown_flag_exits_2():
    proc = subprocess.run(
        python_cli("ingest", "--nonsense"), capture_output=True, text=True
    )
    assert proc.returncode == 2
    assert "usage" in proc.stderr.lower()


def test_unknown_subcommand_exits_2():
    proc = subprocess.run(python_cli("frobnicate"), capture_output=True, text=True)
    assert proc.returncode == 2


def test_missing_input_file_reports_json_error(tmp_path, capsys):
    from crashlens.cli import main

    code = main(["narrate", "--cases", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError"


def test_unknown_config_key_rejected(tmp_path, capsys):
    from crashlens.cli import main

    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("no_such_option: 1\n")
    code = main(["narrate", "--config", str(cfg), "--cases", "x", "--out", "y"])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert "no_such_option" in err["detail"]


def test_config_supplies_defaults_and_flags_win(tmp_path):
    d = tmp_path
    code, _ = run_cli(_ingest_args(d / "cases.jsonl"))
    assert code == 0
    code, _ = run_cli(
        ["narrate", "--cases", str(d / "cases.jsonl"), "--out", str(d / "narratives.jsonl")]
    )
    assert code == 0
    code, _ = run_cli(
        [
            "train-ref",
            "--narratives", str(d / "narratives.jsonl"),
            "--out-model", str(d / "model.json"),
            "--out-tokenizer", str(d / "tok.json"),
            "--seed", "7", "--epochs", "6",
        ]
    )
    assert code == 0

    base = [
        "attribute",
        "--narratives", str(d / "narratives.jsonl"),
        "--model", str(d / "model.json"),
        "--tokenizer", str(d / "tok.json"),
        "--method", "taylor",
        "--caseno", "C0001",
    ]
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("display_divisor: 10.0\n")

    code, _ = run_cli(base + ["--out", str(d / "default.jsonl")])
    assert code == 0
    code, _ = run_cli(base + ["--config", str(cfg), "--out", str(d / "from_config.jsonl")])
    assert code == 0
    code, _ = run_cli(
        base
        + ["--config", str(cfg), "--display-divisor", "20.0", "--out", str(d / "flag_wins.jsonl")]
    )
    assert code == 0

    def scores(path: Path) -> list[float]:
        record = json.loads(path.read_text().splitlines()[0])
        return [w["score"] for w in record["words"]]

    default = scores(d / "default.jsonl")
    halved_divisor = scores(d / "from_config.jsonl")
    flag_wins = scores(d / "flag_wins.jsonl")
    # default divisor is 20; config 10 doubles every display score
    assert halved_divisor == [s * 2 for s in default]
    # an explicit flag beats the config file
    assert flag_wins == default


def test_ingest_balance_applies_downsampling(tmp_path):
    out = tmp_path / "cases.jsonl"
    code, summary = run_cli(
        _ingest_args(out) + ["--balance", "--target-ratio", "1.0", "--seed", "3"]
    )
    assert code == 0
    doc = json.loads(summary)
    assert doc["cases"] < 50
    labels = [
        json.loads(line)["crash"]["severity"] for line in out.read_text().splitlines()
    ]
    assert labels.count("NoApparentOrMinor") == labels.count("SeriousOrFatal")
