from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

import pytest

from crashlens.narrator import load_lexicon, load_templates, normalize, render
from crashlens.refmodel import BOS_ID, TinyLM, Tokenizer, TrainConfig, TrainingExample, train
from crashlens.schema import integrate, load_tables

FIXTURES = Path(__file__).parent / "fixtures"


def corpus_path(name: str) -> Path:
    return Path(resources.files("crashlens").joinpath(f"data/corpus/{name}.csv"))


@pytest.fixture(scope="session")
def tables():
    return load_tables(
        corpus_path("crashes"),
        corpus_path("segments"),
        corpus_path("vehicles"),
        corpus_path("persons"),
    )


@pytest.fixture(scope="session")
def cases(tables):
    return integrate(tables).cases


@pytest.fixture(scope="session")
def pairs(cases):
    lexicon = load_lexicon()
    templates = load_templates()
    return [render(normalize(case, lexicon), templates) for case in cases]


@pytest.fixture(scope="session")
def corpus_tokenizer(pairs):
    return Tokenizer.from_texts([p.descriptive for p in pairs])


@pytest.fixture(scope="session")
def reference_model(pairs, corpus_tokenizer):
    """Next-token model over the corpus narratives; window covers the longest
    diagnostic sequence used by the attribution tests."""
    examples = []
    for pair in pairs:
        ids = [BOS_ID] + corpus_tokenizer.encode(pair.descriptive)
        examples.append(
            TrainingExample(tokens=tuple(ids), loss_mask=tuple([False] + [True] * (len(ids) - 1)))
        )
    model = TinyLM.init(corpus_tokenizer.size, dim=32, window=32, seed=7)
    return train(model, examples, TrainConfig(lr=0.003, epochs=12, seed=7))


def run_cli(args: list[str]) -> tuple[int, str]:
    """Invoke the CLI in-process; returns (exit code, stdout text)."""
    import contextlib
    import io

    from crashlens.cli import main

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(args)
    return code, buf.getvalue()


def python_cli(*args: str) -> list[str]:
    return [sys.executable, "-m", "crashlens.cli", *args]
