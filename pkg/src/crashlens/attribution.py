"""Input-token attribution for a next-token model.

Two routes to the same question ("how much did token n matter for output
m"): exact occlusion, which literally deletes the token and re-runs the
model, and a first-order Taylor approximation using one gradient pass per
output position. Raw importances are normalized per output column to
integers in (b, L], then folded up to word level for display.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .refmodel import (
    TinyLM,
    Tokenizer,
    grad_logit_wrt_embeddings,
    grad_prob_wrt_embeddings,
)

_ANNOTATION_RE = re.compile(r"(?<=\S)\[\d+\.\d{2}\]")


@dataclass(frozen=True)
class TokenInfo:
    text: str
    token_id: int
    start: Optional[int] = None  # char span into the source narrative
    end: Optional[int] = None


@dataclass
class ImportanceMatrix:
    values: np.ndarray  # (len(prompt) + len(response)) x len(response)
    input_tokens: list[TokenInfo]
    output_tokens: list[TokenInfo]
    method: str

    def __post_init__(self):
        n, m = self.values.shape
        if n != len(self.input_tokens) or m != len(self.output_tokens):
            raise ValueError("matrix shape does not match token lists")
        if not np.isfinite(self.values).all():
            raise ValueError("importance values must be finite")


@dataclass(frozen=True)
class NormalizationConfig:
    L: int = 100
    b: int = 1

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.b < 0:
            raise ValueError("b must be >= 0")


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # int64, same shape as the importance matrix
    input_tokens: list[TokenInfo]
    output_tokens: list[TokenInfo]
    L: int
    b: int


@dataclass(frozen=True)
class WordAttribution:
    word: str
    char_span: tuple[int, int]
    score: float
    contributing_token_ids: tuple[int, ...] = ()


def _token_infos(
    ids: Sequence[int],
    tokenizer: Optional[Tokenizer],
    spans: Optional[Sequence[Optional[tuple[int, int]]]] = None,
) -> list[TokenInfo]:
    infos = []
    for i, tid in enumerate(ids):
        text = tokenizer.tokens[tid] if tokenizer is not None else str(tid)
        span = spans[i] if spans is not None else None
        infos.append(TokenInfo(text=text, token_id=tid, start=span and span[0], end=span and span[1]))
    return infos


def occlusion_importance(
    model: TinyLM,
    prompt: Sequence[int],
    response: Sequence[int],
    tokenizer: Optional[Tokenizer] = None,
    prompt_spans: Optional[Sequence[Optional[tuple[int, int]]]] = None,
    substitute_id: Optional[int] = None,
) -> ImportanceMatrix:
    """Exact leave-one-out importance.

    Column m scores every token of Z_m = prompt + response[:m] by the drop
    in p(response[m] | Z_m) when that token is removed; the sequence really
    shortens (pass substitute_id to swap in a mask token instead). Rows for
    response tokens at or past position m are 0: they are not in Z_m.
    """
    if not response:
        raise ValueError("response is empty")
    n_prompt, n_out = len(prompt), len(response)
    values = np.zeros((n_prompt + n_out, n_out))
    for m in range(n_out):
        target = response[m]
        context = list(prompt) + list(response[:m])
        variants: list[Sequence[int]] = [context]
        for q in range(len(context)):
            if substitute_id is None:
                variants.append(context[:q] + context[q + 1 :])
            else:
                variants.append(context[:q] + [substitute_id] + context[q + 1 :])
        probs = model.batch_probs(variants, target)
        values[: len(context), m] = probs[0] - probs[1:]
    spans = list(prompt_spans) + [None] * n_out if prompt_spans is not None else None
    infos = _token_infos(list(prompt) + list(response), tokenizer, spans)
    return ImportanceMatrix(
        values=values,
        input_tokens=infos,
        output_tokens=_token_infos(response, tokenizer),
        method="occlusion",
    )


def taylor_importance(
    model: TinyLM,
    prompt: Sequence[int],
    response: Sequence[int],
    tokenizer: Optional[Tokenizer] = None,
    prompt_spans: Optional[Sequence[Optional[tuple[int, int]]]] = None,
    use_logit: bool = False,
) -> ImportanceMatrix:
    """First-order approximation: <d p(y_m|Z_m) / d E[x_n], E[x_n]>.

    One gradient pass per output position, not per (token, output) pair.
    """
    if not response:
        raise ValueError("response is empty")
    grad_fn = grad_logit_wrt_embeddings if use_logit else grad_prob_wrt_embeddings
    n_prompt, n_out = len(prompt), len(response)
    values = np.zeros((n_prompt + n_out, n_out))
    for m in range(n_out):
        context = list(prompt) + list(response[:m])
        grads = grad_fn(model, context, response[m])
        for q, tok in enumerate(context):
            values[q, m] = float(np.dot(grads[q], model.embeddings[tok]))
    spans = list(prompt_spans) + [None] * n_out if prompt_spans is not None else None
    infos = _token_infos(list(prompt) + list(response), tokenizer, spans)
    return ImportanceMatrix(
        values=values,
        input_tokens=infos,
        output_tokens=_token_infos(response, tokenizer),
        method="taylor",
    )


def normalize_scores(
    matrix: ImportanceMatrix, cfg: NormalizationConfig = NormalizationConfig()
) -> ScoreMatrix:
    """Per-column rescale: ceil(L * I / colmax) where that exceeds b, else 0.

    The column max is signed; a column whose max is <= 0 has no positively
    influential token and normalizes to all zeros.
    """
    values = matrix.values
    scores = np.zeros(values.shape, dtype=np.int64)
    for m in range(values.shape[1]):
        column = values[:, m]
        colmax = column.max() if column.size else 0.0
        if colmax <= 0.0:
            continue
        scaled = np.ceil((cfg.L * column) / colmax)
        keep = scaled > cfg.b
        scores[keep, m] = scaled[keep].astype(np.int64)
    return ScoreMatrix(
        scores=scores,
        input_tokens=matrix.input_tokens,
        output_tokens=matrix.output_tokens,
        L=cfg.L,
        b=cfg.b,
    )


def normalize_scores_bruteforce(values, L: int = 100, b: int = 1) -> list[list[int]]:
    """Scalar per-element re-implementation used as a test oracle."""
    n = len(values)
    m = len(values[0]) if n else 0
    out = [[0] * m for _ in range(n)]
    for col in range(m):
        colmax = max(values[row][col] for row in range(n))
        if colmax <= 0.0:
            continue
        for row in range(n):
            scaled = math.ceil((L * values[row][col]) / colmax)
            if scaled > b:
                out[row][col] = scaled
    return out


def aggregate_to_words(
    scores: ScoreMatrix, narrative: str, display_divisor: float = 1.0
) -> list[WordAttribution]:
    """Fold token scores up to whitespace words of the narrative.

    A word's raw score is the max over its sub-tokens of each token's max
    over output positions; the display divisor only rescales for rendering.
    Every word is returned, including score-0 ones (callers filter for
    "high attribution" lists but keep zeros for full annotations).
    """
    if display_divisor <= 0:
        raise ValueError("display_divisor must be positive")
    row_best = scores.scores.max(axis=1) if scores.scores.size else np.zeros(len(scores.input_tokens), dtype=np.int64)
    words: list[WordAttribution] = []
    for m in re.finditer(r"\S+", narrative):
        w_start, w_end = m.span()
        rows = tuple(
            i
            for i, tok in enumerate(scores.input_tokens)
            if tok.start is not None and tok.start >= w_start and tok.end <= w_end
        )
        raw = max((int(row_best[i]) for i in rows), default=0)
        words.append(
            WordAttribution(
                word=m.group(0),
                char_span=(w_start, w_end),
                score=raw / display_divisor,
                contributing_token_ids=rows,
            )
        )
    return words


def positive_words(words: Sequence[WordAttribution]) -> list[WordAttribution]:
    return [w for w in words if w.score > 0]


def annotate_narrative(narrative: str, words: Sequence[WordAttribution]) -> str:
    """Append [score] after each given word; scores render with two decimals."""
    ordered = sorted(words, key=lambda w: w.char_span)
    parts: list[str] = []
    cursor = 0
    for word in ordered:
        _, end = word.char_span
        parts.append(narrative[cursor:end])
        parts.append(f"[{word.score:.2f}]")
        cursor = end
    parts.append(narrative[cursor:])
    return "".join(parts)


def strip_annotations(annotated: str) -> str:
    return _ANNOTATION_RE.sub("", annotated)


def parse_annotated(annotated: str) -> tuple[str, list[WordAttribution]]:
    """Invert annotate_narrative: recover the plain text and word scores."""
    plain = strip_annotations(annotated)
    plain_words = list(re.finditer(r"\S+", plain))
    raw_words = [m.group(0) for m in re.finditer(r"\S+", annotated)]
    if len(plain_words) != len(raw_words):
        raise ValueError("annotation structure does not line up with the text")
    tail = re.compile(r"^(.*)\[(\d+\.\d{2})\]$", re.DOTALL)
    words = []
    for span, raw in zip(plain_words, raw_words):
        m = tail.match(raw)
        score = float(m.group(2)) if m else 0.0
        words.append(WordAttribution(word=span.group(0), char_span=span.span(), score=score))
    return plain, words


def attribution_record(
    caseno: str,
    matrix: ImportanceMatrix,
    scores: ScoreMatrix,
    words: Sequence[WordAttribution],
    annotated: str,
) -> dict:
    """JSON-ready export with a sparse score matrix."""
    sparse = [
        [int(n), int(m), int(scores.scores[n, m])]
        for n, m in zip(*np.nonzero(scores.scores))
    ]
    return {
        "caseno": caseno,
        "method": matrix.method,
        "L": scores.L,
        "b": scores.b,
        "tokens": [
            {"text": t.text, "id": t.token_id, "start": t.start, "end": t.end}
            for t in matrix.input_tokens
        ],
        "output_tokens": [{"text": t.text, "id": t.token_id} for t in matrix.output_tokens],
        "score_matrix": sparse,
        "words": [
            {"word": w.word, "start": w.char_span[0], "end": w.char_span[1], "score": w.score}
            for w in words
        ],
        "annotated": annotated,
    }
