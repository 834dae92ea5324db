from __future__ import annotations

import numpy as np
import pytest

from crashlens.refmodel import (
    BOS_ID,
    DecodeTrace,
    RefModelError,
    TinyLM,
    Tokenizer,
    TrainConfig,
    TrainingDivergedError,
    TrainingExample,
    classify,
    grad_logit_wrt_embeddings,
    grad_prob_wrt_embeddings,
    label_token,
    prob,
    train,
)
from crashlens.schema import Severity


def fd_gradient(model: TinyLM, context: list[int], target: int, step: float = 1e-4):
    """Central finite differences on per-position window embeddings."""
    ids = context if context else [BOS_ID]
    k = min(len(ids), model.window)
    start = len(ids) - k
    base = model.embeddings[ids[start:]].copy()
    grads = [np.zeros(model.dim) for _ in ids]
    for j in range(k):
        for c in range(model.dim):
            hi = base.copy()
            hi[j, c] += step
            lo = base.copy()
            lo[j, c] -= step
            grads[start + j][c] = (
                model.prob_given_window(hi, target) - model.prob_given_window(lo, target)
            ) / (2 * step)
    return grads


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(10):
        v = int(rng.integers(8, 16))
        model = TinyLM.init(v, dim=6, window=8, seed=int(rng.integers(1 << 30)))
        n = int(rng.integers(1, 7))
        context = [BOS_ID] + [int(t) for t in rng.integers(1, v, size=n)]
        target = int(rng.integers(0, v))
        analytic = grad_prob_wrt_embeddings(model, context, target)
        numeric = fd_gradient(model, context, target)
        for a, f in zip(analytic, numeric):
            err = np.linalg.norm(f - a) / max(np.linalg.norm(a), 1e-12)
            worst = max(worst, err)
    assert worst <= 1e-5, worst


def test_gradient_zero_outside_window():
    model = TinyLM.init(10, dim=4, window=3, seed=0)
    context = [1, 2, 3, 4, 5]
    grads = grad_prob_wrt_embeddings(model, context, target=7)
    assert np.array_equal(grads[0], np.zeros(4))
    assert np.array_equal(grads[1], np.zeros(4))
    assert any(np.any(g != 0) for g in grads[2:])


def test_logit_gradient_is_position_scaled_output_row():
    model = TinyLM.init(12, dim=5, window=8, seed=3)
    context = [1, 4, 9]
    grads = grad_logit_wrt_embeddings(model, context, target=2)
    for j, g in enumerate(grads):
        expected = model.position_weights[j] * model.output_weights[:, 2]
        assert np.allclose(g, expected, rtol=0, atol=0)


def test_distribution_is_a_probability():
    model = TinyLM.init(20, dim=8, window=6, seed=1)
    dist = model.distribution([3, 5, 7])
    assert dist.shape == (20,)
    assert np.all(dist > 0)
    assert np.isclose(dist.sum(), 1.0, atol=1e-12)


def test_empty_context_means_bos():
    model = TinyLM.init(9, dim=4, window=5, seed=2)
    assert np.array_equal(model.distribution([]), model.distribution([BOS_ID]))


def test_window_truncates_left():
    model = TinyLM.init(15, dim=4, window=3, seed=4)
    long = [1, 2, 3, 4, 5, 6, 7]
    assert np.array_equal(model.distribution(long), model.distribution(long[-3:]))


def test_batch_probs_matches_loop():
    model = TinyLM.init(18, dim=6, window=4, seed=5)
    contexts = [[1], [2, 3], [4, 5, 6, 7, 8], []]
    batched = model.batch_probs(contexts, target=9)
    singles = [prob(model, c, 9) for c in contexts]
    assert np.allclose(batched, singles, rtol=0, atol=1e-15)


def test_training_memorizes_toy_patterns():
    # two disjoint contexts deterministically followed by different tokens
    examples = [
        TrainingExample(tokens=(0, 5, 6, 10), loss_mask=(False, False, False, True)),
        TrainingExample(tokens=(0, 7, 8, 11), loss_mask=(False, False, False, True)),
    ]
    model = TinyLM.init(12, dim=8, window=4, seed=0)
    trained = train(model, examples, TrainConfig(lr=0.5, epochs=120, seed=0))
    assert len(trained.loss_history) == 120
    assert trained.loss_history[-1] < trained.loss_history[0]
    assert trained.loss_history[-1] < 0.05
    assert int(np.argmax(trained.distribution([0, 5, 6]))) == 10
    assert int(np.argmax(trained.distribution([0, 7, 8]))) == 11
    # the input model is untouched; training returns a copy
    assert not np.array_equal(model.embeddings, trained.embeddings)


def test_all_masked_examples_leave_parameters_untouched():
    examples = [TrainingExample(tokens=(0, 3, 4), loss_mask=(False, False, False))]
    model = TinyLM.init(8, dim=4, window=4, seed=6)
    trained = train(model, examples, TrainConfig(lr=0.5, epochs=3, seed=0))
    assert np.array_equal(model.embeddings, trained.embeddings)
    assert np.array_equal(model.output_weights, trained.output_weights)
    assert np.array_equal(model.position_weights, trained.position_weights)
    assert np.array_equal(model.output_bias, trained.output_bias)


def test_training_is_seed_deterministic():
    examples = [
        TrainingExample(tokens=(0, 2, 3, 4), loss_mask=(False, True, True, True)),
        TrainingExample(tokens=(0, 4, 3, 2), loss_mask=(False, True, True, True)),
    ]
    model = TinyLM.init(6, dim=4, window=4, seed=1)
    a = train(model, examples, TrainConfig(lr=0.1, epochs=5, seed=9))
    b = train(model, examples, TrainConfig(lr=0.1, epochs=5, seed=9))
    assert np.array_equal(a.embeddings, b.embeddings)
    assert a.loss_history == b.loss_history


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_epoch():
    examples = [
        TrainingExample(tokens=tuple([0] + [1, 2, 3] * 6), loss_mask=tuple([False] + [True] * 18))
    ]
    model = TinyLM.init(5, dim=4, window=8, seed=0)
    with pytest.raises(TrainingDivergedError) as err:
        train(model, examples, TrainConfig(lr=1e6, epochs=50, seed=0))
    assert err.value.epoch >= 0


def test_bad_examples_rejected():
    with pytest.raises(ValueError):
        TrainingExample(tokens=(1, 2), loss_mask=(True,))
    model = TinyLM.init(4, dim=2, window=2, seed=0)
    with pytest.raises(ValueError):
        train(
            model,
            [TrainingExample(tokens=(0, 99), loss_mask=(False, True))],
            TrainConfig(epochs=1),
        )


def test_classify_tie_goes_to_minor_and_is_flagged():
    tokenizer = Tokenizer.from_texts(["a b"])
    model = TinyLM.init(tokenizer.size, dim=4, window=4, seed=0)
    model.embeddings[:] = 0.0
    model.position_weights[:] = 0.0
    model.output_weights[:] = 0.0
    model.output_bias[:] = 0.0
    winner, trace = classify(model, tokenizer, "a b")
    assert winner is Severity.MINOR
    assert isinstance(trace, DecodeTrace)
    assert trace.tie is True
    assert trace.log_scores[Severity.MINOR] == trace.log_scores[Severity.SEVERE]


def test_classify_learns_labels_from_training(pairs, corpus_tokenizer):
    examples = []
    for pair in pairs:
        ids = [BOS_ID] + corpus_tokenizer.encode(pair.descriptive) + [
            corpus_tokenizer.label_id(pair.label)
        ]
        mask = [False] * (len(ids) - 1) + [True]
        examples.append(TrainingExample(tokens=tuple(ids), loss_mask=tuple(mask)))
    model = TinyLM.init(corpus_tokenizer.size, dim=32, window=48, seed=7)
    trained = train(model, examples, TrainConfig(lr=0.05, epochs=60, seed=7))
    hits = sum(
        classify(trained, corpus_tokenizer, p.descriptive)[0] is p.label for p in pairs
    )
    assert hits / len(pairs) >= 0.9


def test_tokenizer_word_mode_round_trip():
    tok = Tokenizer.from_texts(["the quick brown fox", "jumps over the lazy dog"])
    text = "the quick dog"
    ids = tok.encode(text)
    assert tok.decode(ids) == text
    spans = tok.encode_with_spans(text)
    for tid, start, end in spans:
        assert text[start:end] in tok.tokens or tok.tokens[tid] == "<unk>"


def test_tokenizer_unknown_word_is_unk():
    tok = Tokenizer.from_texts(["alpha beta"])
    unk = tok.id_of("never-seen")
    assert tok.tokens[unk] == "<unk>"


def test_tokenizer_label_ids_are_special():
    tok = Tokenizer.from_texts(["x"])
    minor = tok.label_id(Severity.MINOR)
    severe = tok.label_id(Severity.SEVERE)
    assert minor != severe
    assert tok.tokens[minor] == label_token(Severity.MINOR)
    assert minor < 5 and severe < 5


def test_subword_tokenizer_spans_and_decode():
    tok = Tokenizer.from_pieces(["ab", "##cd", "##d", "abc", "z"])
    spans = tok.encode_with_spans("abcd z")
    pieces = [(tok.tokens[tid], s, e) for tid, s, e in spans]
    # greedy longest-first: abc + ##d beats ab + ##cd
    assert pieces == [("abc", 0, 3), ("##d", 3, 4), ("z", 5, 6)]
    assert tok.decode([tid for tid, _, _ in spans]) == "abcd z"
    unk_spans = tok.encode_with_spans("qqq")
    assert tok.tokens[unk_spans[0][0]] == "<unk>"
    assert (unk_spans[0][1], unk_spans[0][2]) == (0, 3)


def test_tokenizer_save_load_round_trip(tmp_path):
    tok = Tokenizer.from_texts(["some words here"])
    path = tmp_path / "tok.json"
    tok.save(path)
    back = Tokenizer.load(path)
    assert back.tokens == tok.tokens
    assert back.mode == tok.mode


def test_model_save_load_round_trip(tmp_path):
    model = TinyLM.init(11, dim=5, window=7, seed=8)
    path = tmp_path / "model.json"
    model.save(path)
    back = TinyLM.load(path)
    context = [1, 2, 3]
    assert np.array_equal(model.distribution(context), back.distribution(context))


def test_model_load_rejects_unknown_version(tmp_path):
    path = tmp_path / "model.json"
    path.write_text('{"version": 99}')
    with pytest.raises(RefModelError):
        TinyLM.load(path)
