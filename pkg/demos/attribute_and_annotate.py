"""Which words made the model call a crash severe?

Two answers to the same question: occlusion (delete a token, watch the
output probability move) and a first-order Taylor estimate from one
gradient pass. The same TinyLM architecture serves twice here, with the
objective picked by the loss mask: a full next-token mask for measuring
how well the two methods agree, and a label-only mask for the classifier
whose verdicts get annotated.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from crashlens.attribution import (
    aggregate_to_words,
    annotate_narrative,
    normalize_scores,
    occlusion_importance,
    positive_words,
    taylor_importance,
)
from crashlens.narrator import load_lexicon, load_templates, normalize, render
from crashlens.refmodel import BOS_ID, TinyLM, Tokenizer, TrainConfig, TrainingExample, classify, train
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

    # part 1: do the two methods agree where both are live? Measure on a
    # next-token model with sequences short enough to fit its window;
    # outside the window the gradient is exactly zero and any comparison
    # would measure truncation, not agreement.
    print("training next-token model for the agreement check (a few seconds)...")
    lm_examples = []
    for pair in pairs:
        ids = [BOS_ID] + tokenizer.encode(pair.descriptive)
        lm_examples.append(
            TrainingExample(tokens=tuple(ids), loss_mask=tuple([False] + [True] * (len(ids) - 1)))
        )
    lm = train(
        TinyLM.init(tokenizer.size, dim=32, window=32, seed=7),
        lm_examples,
        TrainConfig(lr=0.003, epochs=12, seed=7),
    )
    rng = np.random.default_rng(7)
    rhos = []
    for _ in range(30):
        n = int(rng.integers(11, 24))
        seq = [BOS_ID] + [int(t) for t in rng.integers(5, tokenizer.size, size=n)]
        prompt, response = seq[:-1], [seq[-1]]
        occ = occlusion_importance(lm, prompt, response)
        tay = taylor_importance(lm, prompt, response)
        live = len(prompt)
        rhos.append(float(spearmanr(occ.values[:live, 0], tay.values[:live, 0])[0]))
    print(f"median Spearman over 30 in-window sequences: {float(np.median(rhos)):.3f}")

    # part 2: explain a severity verdict and annotate the narrative
    clf_examples = []
    for pair in pairs:
        ids = [BOS_ID] + tokenizer.encode(pair.descriptive) + [tokenizer.label_id(pair.label)]
        clf_examples.append(
            TrainingExample(tokens=tuple(ids), loss_mask=tuple([False] * (len(ids) - 1) + [True]))
        )
    clf = train(
        TinyLM.init(tokenizer.size, dim=32, window=48, seed=7),
        clf_examples,
        TrainConfig(lr=0.05, epochs=60, seed=7),
    )

    pair = pairs[0]
    spans = tokenizer.encode_with_spans(pair.descriptive)
    prompt = [BOS_ID] + [tid for tid, _, _ in spans]
    prompt_spans = [None] + [(s, e) for _, s, e in spans]
    label, _ = classify(clf, tokenizer, pair.descriptive)
    print(f"\n{pair.caseno}: explaining prediction {label.name} "
          f"(only the final {clf.window} tokens are visible to the classifier)")

    matrix = occlusion_importance(
        clf, prompt, [tokenizer.label_id(label)], tokenizer=tokenizer, prompt_spans=prompt_spans
    )
    words = aggregate_to_words(normalize_scores(matrix), pair.descriptive, display_divisor=20.0)
    annotated = annotate_narrative(pair.descriptive, positive_words(words))
    print("\nannotated narrative (word[score], display scale /20):\n")
    print(annotated)


if __name__ == "__main__":
    main()
