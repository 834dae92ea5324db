"""Severity-classification evaluation harness.

Builds zero-shot, chain-of-thought, and few-shot prompts, parses free-text
completions back into severity labels, scores predictions, and emits masked
supervised fine-tuning records.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .augment import ChatClient, UnavailableError
from .narrator import NarrativePair
from .schema import Severity

SYSTEM_PROMPT = "You are a professional road safety engineer."

_TASK_LINE = "You are given a detailed description for a traffic crash."
_CLASSIFY_LINE = (
    "Please classify the severity of the crash into one of two categories: "
    "'No apparent or minor injury', 'Serious injury or fatal accident'."
)
_CLASSIFY_LINE_SHORT = (
    "Please classify the severity of the crash into one of two categories: "
    "'No apparent or minor injury', 'Serious injury or fatal'."
)
_OUTPUT_LINE = "You can only output one of the classification result in your answer."
_COT_CLASSIFY_LINE = (
    "Please analyze this traffic crash with careful reasoning first, and then "
    "classify the severity of the crash into one of the two categories: "
    "'No apparent or minor injury', 'Serious injury or fatal accident'."
)
_COT_OUTPUT_LINE = (
    "You can only output one of the classification result at the end of your answer."
)
_FEW_SHOT_HEADER = "Here are two examples of traffic crashes and their severity classification:"

SFT_SYSTEM_PROMPT = (
    "You are a professional road safety engineer. Classify the severity of the "
    "crash into one of two categories: 'No apparent or minor injury', "
    "'Serious injury or fatal'."
)
SFT_QUESTION = "What is the severity of this crash?"


class EvaluationError(Exception):
    pass


class StrategyKind(enum.Enum):
    ZERO_SHOT = "zs"
    CHAIN_OF_THOUGHT = "zs-cot"
    FEW_SHOT = "fs"


class ParseStatus(enum.Enum):
    EXACT = "exact"
    FUZZY = "fuzzy"
    FAILED = "failed"


@dataclass(frozen=True)
class Exemplar:
    narrative: str
    label: Severity


@dataclass(frozen=True)
class PromptStrategy:
    kind: StrategyKind
    exemplars: tuple[Exemplar, ...] = ()

    def __post_init__(self):
        if self.kind is StrategyKind.FEW_SHOT:
            if len(self.exemplars) != 2:
                raise EvaluationError("few-shot strategy needs exactly two exemplars")
            if {e.label for e in self.exemplars} != {Severity.MINOR, Severity.SEVERE}:
                raise EvaluationError("few-shot exemplars must cover both severity classes")
        elif self.exemplars:
            raise EvaluationError(f"{self.kind.value} strategy takes no exemplars")


def build_prompt(
    strategy: PromptStrategy,
    narrative: str,
    exemplars: Optional[Sequence[Exemplar]] = None,
) -> tuple[str, str]:
    """Return (system, user). The narrative is appended after a blank line."""
    if strategy.kind is StrategyKind.ZERO_SHOT:
        blocks = [_TASK_LINE, _CLASSIFY_LINE, _OUTPUT_LINE]
    elif strategy.kind is StrategyKind.CHAIN_OF_THOUGHT:
        blocks = [_TASK_LINE, _COT_CLASSIFY_LINE, _COT_OUTPUT_LINE]
    else:
        pool = tuple(exemplars) if exemplars is not None else strategy.exemplars
        if len(pool) != 2 or {e.label for e in pool} != {Severity.MINOR, Severity.SEVERE}:
            raise EvaluationError("few-shot prompt needs one exemplar per severity class")
        minor = next(e for e in pool if e.label is Severity.MINOR)
        severe = next(e for e in pool if e.label is Severity.SEVERE)
        blocks = [
            _FEW_SHOT_HEADER,
            minor.narrative,
            minor.label.phrase,
            severe.narrative,
            severe.label.phrase,
            _TASK_LINE,
            _CLASSIFY_LINE_SHORT,
            _OUTPUT_LINE,
        ]
    blocks.append(narrative)
    return SYSTEM_PROMPT, "\n\n".join(blocks)


_MINOR_PHRASE = "no apparent or minor injury"
_SEVERE_PHRASE = "serious injury or fatal"
_SEVERE_WORDS = ("serious", "fatal")
_MINOR_WORDS = ("minor",)


def _normalize(text: str) -> str:
    return " ".join(re.sub(r"[^0-9a-z]+", " ", text.lower()).split())


def _phrase_positions(text: str, phrase: str) -> list[int]:
    padded = f" {text} "
    target = f" {phrase} "
    positions = []
    start = 0
    while True:
        i = padded.find(target, start)
        if i < 0:
            return positions
        positions.append(i)
        start = i + 1


def parse_label(
    raw_output: str, kind: StrategyKind = StrategyKind.ZERO_SHOT
) -> tuple[Optional[Severity], ParseStatus]:
    """Two tiers: exact category phrases, then severity keywords.

    Chain-of-thought replies restate the categories while reasoning, so for
    that strategy the last phrase occurrence decides; otherwise the first.
    Ambiguous or absent keyword evidence fails the parse.
    """
    text = _normalize(raw_output)
    hits = [(pos, Severity.MINOR) for pos in _phrase_positions(text, _MINOR_PHRASE)]
    hits += [(pos, Severity.SEVERE) for pos in _phrase_positions(text, _SEVERE_PHRASE)]
    if hits:
        decider = max if kind is StrategyKind.CHAIN_OF_THOUGHT else min
        return decider(hits)[1], ParseStatus.EXACT
    words = set(text.split())
    severe_hit = any(w in words for w in _SEVERE_WORDS)
    minor_hit = any(w in words for w in _MINOR_WORDS) or bool(
        _phrase_positions(text, "no apparent")
    )
    if severe_hit == minor_hit:
        return None, ParseStatus.FAILED
    return (Severity.SEVERE if severe_hit else Severity.MINOR), ParseStatus.FUZZY


@dataclass(frozen=True)
class Prediction:
    caseno: str
    raw_output: str
    label: Optional[Severity]
    parse_status: ParseStatus

    def __post_init__(self):
        if (self.label is None) != (self.parse_status is ParseStatus.FAILED):
            raise EvaluationError("parse_status failed exactly when no label was parsed")


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    total: int
    n_failed_parses: int
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict[Severity, ClassMetrics]
    confusion: dict[tuple[Severity, Severity], int]
    failed_by_gold: dict[Severity, int]

    def format(self) -> str:
        lines = [
            f"cases      {self.total}",
            f"failed     {self.n_failed_parses}",
            f"accuracy   {self.accuracy:.4f}",
            f"macro-P    {self.macro_precision:.4f}",
            f"macro-R    {self.macro_recall:.4f}",
            f"macro-F1   {self.macro_f1:.4f}",
        ]
        for sev in Severity:
            m = self.per_class[sev]
            lines.append(
                f"{sev.value:<22} P {m.precision:.4f}  R {m.recall:.4f}  "
                f"F1 {m.f1:.4f}  n={m.support}"
            )
        return "\n".join(lines)


def compute_metrics(
    predictions: Sequence[Prediction], golds: Sequence[Severity]
) -> MetricsReport:
    """Failed parses count against accuracy and the gold class's recall but
    never enter the confusion matrix."""
    if not predictions:
        raise EvaluationError("no predictions to score")
    if len(predictions) != len(golds):
        raise EvaluationError("predictions and golds differ in length")
    confusion: dict[tuple[Severity, Severity], int] = {
        (g, p): 0 for g in Severity for p in Severity
    }
    failed_by_gold = {sev: 0 for sev in Severity}
    for pred, gold in zip(predictions, golds):
        if pred.label is None:
            failed_by_gold[gold] += 1
        else:
            confusion[(gold, pred.label)] += 1
    per_class = {}
    for sev in Severity:
        tp = confusion[(sev, sev)]
        fp = sum(confusion[(g, sev)] for g in Severity if g is not sev)
        support = sum(confusion[(sev, p)] for p in Severity) + failed_by_gold[sev]
        fn = support - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[sev] = ClassMetrics(precision=precision, recall=recall, f1=f1, support=support)
    total = len(predictions)
    correct = sum(confusion[(sev, sev)] for sev in Severity)
    n_classes = len(Severity)
    return MetricsReport(
        total=total,
        n_failed_parses=sum(failed_by_gold.values()),
        accuracy=correct / total,
        macro_precision=sum(m.precision for m in per_class.values()) / n_classes,
        macro_recall=sum(m.recall for m in per_class.values()) / n_classes,
        macro_f1=sum(m.f1 for m in per_class.values()) / n_classes,
        per_class=per_class,
        confusion=confusion,
        failed_by_gold=failed_by_gold,
    )


def run_evaluation(
    pairs: Sequence[NarrativePair],
    strategy: PromptStrategy,
    client: ChatClient,
    temperature: float = 0.0,
) -> tuple[list[Prediction], list[Severity]]:
    predictions = []
    golds = []
    for pair in pairs:
        system, user = build_prompt(strategy, pair.descriptive)
        try:
            completion = client.send(system, user, temperature)
        except (ConnectionError, TimeoutError, OSError) as exc:
            raise UnavailableError(str(exc)) from exc
        label, status = parse_label(completion, strategy.kind)
        predictions.append(
            Prediction(caseno=pair.caseno, raw_output=completion, label=label, parse_status=status)
        )
        golds.append(pair.label)
    return predictions, golds


@dataclass(frozen=True)
class SftRecord:
    caseno: str
    system: str
    user: str
    response: str
    mask_boundary: int


def render_sft(record: SftRecord) -> str:
    return f"{record.system}\n{record.user}\n{record.response}"


def build_sft_dataset(
    pairs: Sequence[NarrativePair], system_prompt: str = SFT_SYSTEM_PROMPT
) -> list[SftRecord]:
    """Question side stays label-free; the category names live in the system
    prompt so the response is the only place a label string appears."""
    records = []
    for pair in pairs:
        user = f"{pair.descriptive}\n\n{SFT_QUESTION}"
        boundary = len(system_prompt) + 1 + len(user) + 1
        records.append(
            SftRecord(
                caseno=pair.caseno,
                system=system_prompt,
                user=user,
                response=pair.label.phrase,
                mask_boundary=boundary,
            )
        )
    return records


def sft_record_to_dict(record: SftRecord) -> dict:
    return {
        "caseno": record.caseno,
        "system": record.system,
        "user": record.user,
        "response": record.response,
        "mask_boundary": record.mask_boundary,
    }


def sft_record_from_dict(doc: dict) -> SftRecord:
    return SftRecord(
        caseno=str(doc["caseno"]),
        system=str(doc["system"]),
        user=str(doc["user"]),
        response=str(doc["response"]),
        mask_boundary=int(doc["mask_boundary"]),
    )
