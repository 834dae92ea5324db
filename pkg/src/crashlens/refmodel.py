"""A tiny next-token model small enough to verify by hand.

The model embeds the last `window` context tokens, mixes them with learned
per-slot weights, and maps the pooled vector through a linear-softmax head.
Everything is float64 numpy with closed-form gradients, so attribution math
downstream can be checked against finite differences to tight tolerances.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .schema import Severity
from .util import atomic_write_text

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"

_SPECIALS = (BOS, EOS, UNK) + tuple(f"<label:{sev.value}>" for sev in Severity)

BOS_ID = 0


def label_token(severity: Severity) -> str:
    return f"<label:{severity.value}>"


class RefModelError(Exception):
    pass


class TrainingDivergedError(RefModelError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class Tokenizer:
    """Word or wordpiece-style subword tokenizer with char-span tracking.

    Subword pieces use the ## continuation prefix; a word with no greedy
    decomposition becomes a single UNK covering the whole word.
    """

    mode: str
    tokens: list[str]
    vocab: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("word", "subword"):
            raise ValueError(f"bad tokenizer mode {self.mode!r}")
        if tuple(self.tokens[: len(_SPECIALS)]) != _SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.vocab = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.vocab) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Tokenizer":
        words = sorted({w for text in texts for w in text.split()})
        return cls(mode="word", tokens=list(_SPECIALS) + words)

    @classmethod
    def from_pieces(cls, pieces: Sequence[str]) -> "Tokenizer":
        return cls(mode="subword", tokens=list(_SPECIALS) + list(pieces))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.vocab.get(token, self.vocab[UNK])

    def label_id(self, severity: Severity) -> int:
        return self.vocab[label_token(severity)]

    def _split_word(self, word: str) -> Optional[list[str]]:
        pieces: list[str] = []
        pos = 0
        while pos < len(word):
            prefix = "" if pos == 0 else "##"
            best = None
            for end in range(len(word), pos, -1):
                candidate = prefix + word[pos:end]
                if candidate in self.vocab:
                    best = (candidate, end)
                    break
            if best is None:
                return None
            pieces.append(best[0])
            pos = best[1]
        return pieces

    def encode(self, text: str) -> list[int]:
        return [tid for tid, _, _ in self.encode_with_spans(text)]

    def encode_with_spans(self, text: str) -> list[tuple[int, int, int]]:
        """Token ids with (start, end) character spans into `text`."""
        out: list[tuple[int, int, int]] = []
        for m in re.finditer(r"\S+", text):
            word, start = m.group(0), m.start()
            if self.mode == "word":
                out.append((self.id_of(word), start, m.end()))
                continue
            pieces = self._split_word(word)
            if pieces is None:
                out.append((self.vocab[UNK], start, m.end()))
                continue
            pos = start
            for piece in pieces:
                width = len(piece) - 2 if piece.startswith("##") else len(piece)
                out.append((self.vocab[piece], pos, pos + width))
                pos += width
        return out

    def decode(self, ids: Sequence[int]) -> str:
        words: list[str] = []
        for tid in ids:
            token = self.tokens[tid]
            if token.startswith("##") and words:
                words[-1] += token[2:]
            else:
                words.append(token)
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        doc = {"version": 1, "mode": self.mode, "tokens": self.tokens}
        atomic_write_text(path, json.dumps(doc, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(mode=doc["mode"], tokens=list(doc["tokens"]))


@dataclass(eq=False)
class TinyLM:
    embeddings: np.ndarray  # V x d
    position_weights: np.ndarray  # W, slot j weights the j-th window token
    output_weights: np.ndarray  # d x V
    output_bias: np.ndarray  # V
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, vocab_size: int, dim: int = 32, window: int = 16, seed: int = 0) -> "TinyLM":
        rng = np.random.default_rng(seed)

        def u(*shape: int) -> np.ndarray:
            return rng.uniform(-0.05, 0.05, size=shape)

        # slot weights start near uniform mixing; random-sign slots make the
        # pooled vector alternate direction token-to-token and destabilize
        # early training
        return cls(
            embeddings=u(vocab_size, dim),
            position_weights=1.0 + u(window),
            output_weights=u(dim, vocab_size),
            output_bias=u(vocab_size),
        )

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def window(self) -> int:
        return self.position_weights.shape[0]

    def copy(self) -> "TinyLM":
        return TinyLM(
            embeddings=self.embeddings.copy(),
            position_weights=self.position_weights.copy(),
            output_weights=self.output_weights.copy(),
            output_bias=self.output_bias.copy(),
            loss_history=list(self.loss_history),
        )

    def _window_ids(self, context: Sequence[int]) -> list[int]:
        ids = list(context) if context else [BOS_ID]
        return ids[-self.window :]

    def distribution_given_window(self, window_embs: np.ndarray) -> np.ndarray:
        k = window_embs.shape[0]
        hidden = self.position_weights[:k] @ window_embs
        logits = self.output_weights.T @ hidden + self.output_bias
        logits = logits - logits.max()
        exp = np.exp(logits)
        return exp / exp.sum()

    def distribution(self, context: Sequence[int]) -> np.ndarray:
        return self.distribution_given_window(self.embeddings[self._window_ids(context)])

    def batch_probs(self, contexts: Sequence[Sequence[int]], target: int) -> np.ndarray:
        """p(target | context) for many contexts in one output matmul."""
        hidden = np.empty((len(contexts), self.dim))
        for i, context in enumerate(contexts):
            ids = self._window_ids(context)
            hidden[i] = self.position_weights[: len(ids)] @ self.embeddings[ids]
        logits = hidden @ self.output_weights + self.output_bias
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        return exp[:, target] / exp.sum(axis=1)

    def prob_given_window(self, window_embs: np.ndarray, target: int) -> float:
        return float(self.distribution_given_window(window_embs)[target])

    def save(self, path: str | Path) -> None:
        doc = {
            "version": 1,
            "embeddings": self.embeddings.tolist(),
            "position_weights": self.position_weights.tolist(),
            "output_weights": self.output_weights.tolist(),
            "output_bias": self.output_bias.tolist(),
        }
        atomic_write_text(path, json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "TinyLM":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != 1:
            raise RefModelError(f"unsupported checkpoint version {doc.get('version')!r}")
        return cls(
            embeddings=np.array(doc["embeddings"], dtype=np.float64),
            position_weights=np.array(doc["position_weights"], dtype=np.float64),
            output_weights=np.array(doc["output_weights"], dtype=np.float64),
            output_bias=np.array(doc["output_bias"], dtype=np.float64),
        )


@dataclass(frozen=True)
class TrainingExample:
    tokens: tuple[int, ...]
    loss_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.loss_mask):
            raise ValueError("tokens and loss_mask lengths differ")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 40
    seed: int = 0


def prob(model: TinyLM, context: Sequence[int], target: int) -> float:
    """Softmax probability of `target` after `context` (empty context = BOS)."""
    return float(model.distribution(context)[target])


def grad_prob_wrt_embeddings(
    model: TinyLM, context: Sequence[int], target: int
) -> list[np.ndarray]:
    """Analytic gradient of prob() w.r.t. each context position's embedding.

    With p = softmax(U^T h + c) and h = sum_j a_j e_j over the window:
    dp_t/dh = p_t (U[:, t] - U p) and dp_t/de_j = a_j * dp_t/dh.
    Positions that fell out of the window get exact zero vectors.
    """
    ids = list(context) if context else [BOS_ID]
    k = min(len(ids), model.window)
    start = len(ids) - k
    p = model.distribution(ids)
    g_hidden = p[target] * (model.output_weights[:, target] - model.output_weights @ p)
    grads = [np.zeros(model.dim) for _ in ids]
    for j in range(k):
        grads[start + j] = model.position_weights[j] * g_hidden
    return grads


def grad_logit_wrt_embeddings(
    model: TinyLM, context: Sequence[int], target: int
) -> list[np.ndarray]:
    """Same shape as grad_prob_wrt_embeddings but for the raw logit."""
    ids = list(context) if context else [BOS_ID]
    k = min(len(ids), model.window)
    start = len(ids) - k
    grads = [np.zeros(model.dim) for _ in ids]
    for j in range(k):
        grads[start + j] = model.position_weights[j] * model.output_weights[:, target]
    return grads


def _corpus_nll(model: TinyLM, examples: Sequence[TrainingExample]) -> float:
    total = 0.0
    count = 0
    for ex in examples:
        for j, masked_in in enumerate(ex.loss_mask):
            if not masked_in:
                continue
            p = prob(model, ex.tokens[:j], ex.tokens[j])
            total -= np.log(max(p, 1e-300))
            count += 1
    return total / count if count else 0.0


def train(model: TinyLM, examples: Sequence[TrainingExample], config: TrainConfig) -> TinyLM:
    """SGD on the masked next-token NLL; deterministic for a given seed.

    One parameter update per example, accumulating over its unmasked
    positions. Masked (False) positions contribute nothing, so an
    all-masked example leaves the parameters untouched.
    """
    for ex in examples:
        if any(t < 0 or t >= model.vocab_size for t in ex.tokens):
            raise ValueError("example token id outside model vocabulary")

    m = model.copy()
    m.loss_history = []
    rng = np.random.default_rng(config.seed)
    v, d, w = m.vocab_size, m.dim, m.window

    for epoch in range(config.epochs):
        for idx in rng.permutation(len(examples)):
            ex = examples[idx]
            grad_e = np.zeros((v, d))
            grad_a = np.zeros(w)
            grad_u = np.zeros((d, v))
            grad_c = np.zeros(v)
            touched = False
            for j, masked_in in enumerate(ex.loss_mask):
                if not masked_in:
                    continue
                touched = True
                ids = m._window_ids(ex.tokens[:j])
                k = len(ids)
                embs = m.embeddings[ids]
                hidden = m.position_weights[:k] @ embs
                p = m.distribution_given_window(embs)
                dz = p.copy()
                dz[ex.tokens[j]] -= 1.0  # dNLL/dlogits = p - onehot
                grad_c += dz
                grad_u += np.outer(hidden, dz)
                dh = m.output_weights @ dz
                grad_a[:k] += embs @ dh
                for slot, tok in enumerate(ids):
                    grad_e[tok] += m.position_weights[slot] * dh
            if not touched:
                continue
            m.embeddings -= config.lr * grad_e
            m.position_weights -= config.lr * grad_a
            m.output_weights -= config.lr * grad_u
            m.output_bias -= config.lr * grad_c
        nll = _corpus_nll(m, examples)
        if not np.isfinite(nll):
            raise TrainingDivergedError(epoch)
        m.loss_history.append(nll)
    return m


@dataclass(frozen=True)
class DecodeTrace:
    log_scores: dict[Severity, float]
    tie: bool


def classify(model: TinyLM, tokenizer: Tokenizer, narrative: str) -> tuple[Severity, DecodeTrace]:
    """Greedy constrained decode: pick the label sequence with higher log-prob.

    Ties go to the minor-injury label, flagged in the trace.
    """
    context = [BOS_ID] + tokenizer.encode(narrative)
    scores: dict[Severity, float] = {}
    for sev in Severity:
        seq = [tokenizer.label_id(sev)]
        logp = 0.0
        running = list(context)
        for tok in seq:
            logp += float(np.log(max(prob(model, running, tok), 1e-300)))
            running.append(tok)
        scores[sev] = logp
    tie = scores[Severity.MINOR] == scores[Severity.SEVERE]
    winner = Severity.MINOR if scores[Severity.MINOR] >= scores[Severity.SEVERE] else Severity.SEVERE
    return winner, DecodeTrace(log_scores=scores, tie=tie)
