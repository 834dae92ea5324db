"""Train the small reference model to predict severity labels.

The model is a windowed bag-of-embeddings next-token predictor in pure
numpy. Appending one label token per narrative and masking the loss to
that single position turns it into a classifier; the window has to be
wide enough that narratives sharing a tail but not a label stay apart.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

from crashlens.narrator import load_lexicon, load_templates, normalize, render
from crashlens.refmodel import (
    BOS_ID,
    TinyLM,
    Tokenizer,
    TrainConfig,
    TrainingExample,
    classify,
    train,
)
from crashlens.schema import integrate, load_tables


def corpus(name: str) -> Path:
    return Path(resources.files("crashlens").joinpath(f"data/corpus/{name}.csv"))


def main() -> None:
    tables = load_tables(
        corpus("crashes"), corpus("segments"), corpus("vehicles"), corpus("persons")
    )
    lexicon, templates = load_lexicon(), load_templates()
    pairs = [render(normalize(c, lexicon), templates) for c in integrate(tables).cases]

    tokenizer = Tokenizer.from_texts([p.descriptive for p in pairs])
    print(f"vocabulary: {tokenizer.size} tokens")

    examples = []
    for pair in pairs:
        ids = [BOS_ID] + tokenizer.encode(pair.descriptive) + [tokenizer.label_id(pair.label)]
        mask = [False] * (len(ids) - 1) + [True]  # only the label position is scored
        examples.append(TrainingExample(tokens=tuple(ids), loss_mask=tuple(mask)))

    model = TinyLM.init(tokenizer.size, dim=32, window=48, seed=7)
    trained = train(model, examples, TrainConfig(lr=0.05, epochs=60, seed=7))
    history = trained.loss_history
    print(f"label NLL: {history[0]:.4f} (epoch 1) -> {history[-1]:.4f} (epoch {len(history)})")

    hits = 0
    for pair in pairs:
        label, trace = classify(trained, tokenizer, pair.descriptive)
        hits += label is pair.label
        if trace.tie:
            print(f"  tie on {pair.caseno}, defaulted to minor")
    print(f"training-set accuracy: {hits}/{len(pairs)}")

    sample = pairs[0]
    label, trace = classify(trained, tokenizer, sample.descriptive)
    print(f"\n{sample.caseno}: predicted {label.name}, gold {sample.label.name}")
    for sev, score in trace.log_scores.items():
        print(f"  log p({sev.name}) = {score:.3f}")


if __name__ == "__main__":
    main()
