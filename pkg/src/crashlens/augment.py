"""Narrative rewriting through a chat-completion endpoint, with verification.

The rewrite itself is untrusted: every completion is checked against
mechanical preservation constraints (numbers, dates/times, proper nouns,
null markers, chronology) and a failing rewrite falls back to the original
text so factual integrity never regresses.
"""

from __future__ import annotations

import enum
import os
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import requests

DEFAULT_SYSTEM_PROMPT = (
    "You are a professional editor specializing in rewriting traffic accident "
    "reports. Rewrite the report you are given as a single fluent narrative, "
    "improving readability without adding, removing, or altering any fact."
)

NULL_MARKER_RE = re.compile(r"\b(nan|unknown)\b|\bn/a\b", re.IGNORECASE)

_MONTHS = (
    "January|February|March|April|May|June|July|August|September|October|November|December"
)
_DATE_RE = re.compile(rf"\b({_MONTHS})\s+(\d{{1,2}}),\s+(\d{{4}})\b")
_ISO_DATE_RE = re.compile(r"\b(\d{4})-(\d{2})-(\d{2})\b")
_CLOCK_AMPM_RE = re.compile(r"\b(\d{1,2}):(\d{2})\s*([APap])\.?[Mm]\.?\b")
_CLOCK_RE = re.compile(r"\b(\d{1,2}):(\d{2})\b")
_HOUR_AMPM_RE = re.compile(r"\b(\d{1,2})\s*([APap])\.?[Mm]\.?\b")
_NUMBER_RE = re.compile(r"\d+(?:,\d{3})*(?:\.\d+)?")
_MONTH_INDEX = {name: i + 1 for i, name in enumerate(_MONTHS.split("|"))}


class ConstraintKind(enum.Enum):
    NUMBERS = "NumbersPreserved"
    DATES_TIMES = "DatesTimesPreserved"
    PROPER_NOUNS = "ProperNounsPreserved"
    NO_NULL_MARKERS = "NoNullMarkers"
    CHRONOLOGY = "ChronologyPreserved"


@dataclass(frozen=True)
class PreservationConstraint:
    kind: ConstraintKind


DEFAULT_CONSTRAINTS = tuple(PreservationConstraint(k) for k in ConstraintKind)

_GUIDELINES = {
    ConstraintKind.NUMBERS: (
        "Keep every numeric value exactly as given (counts, measurements, coordinates, identifiers)."
    ),
    ConstraintKind.DATES_TIMES: (
        "Keep all dates and times; converting between 12-hour and 24-hour clock forms is acceptable."
    ),
    ConstraintKind.PROPER_NOUNS: (
        "Keep all place names, route names, and other proper nouns verbatim."
    ),
    ConstraintKind.NO_NULL_MARKERS: (
        "Never write placeholder values such as 'unknown', 'nan', or 'N/A'."
    ),
    ConstraintKind.CHRONOLOGY: (
        "Relate events in the same chronological order as the original report."
    ),
}


class AugmentError(Exception):
    pass


class UnavailableError(AugmentError):
    pass


class EmptyCompletionError(AugmentError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    temperature: float = 0.1
    constraints: tuple[PreservationConstraint, ...] = DEFAULT_CONSTRAINTS
    batch_size: int = 4
    model_name: str = "gpt-4o"
    endpoint: str = ""
    max_retries: int = 3
    backoff_base: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if not self.constraints:
            raise ValueError("constraints must be non-empty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class ChatClient(Protocol):
    def send(self, system: str, user: str, temperature: float) -> str: ...


class StubChatClient:
    """Deterministic offline client: fixture table first, then a transform.

    With neither configured it echoes the user message, which by construction
    satisfies every preservation constraint.
    """

    def __init__(
        self,
        table: Optional[dict[str, str]] = None,
        transform: Optional[Callable[[str], str]] = None,
    ):
        self.table = dict(table) if table else {}
        self.transform = transform

    def send(self, system: str, user: str, temperature: float) -> str:
        if user in self.table:
            return self.table[user]
        if self.transform is not None:
            return self.transform(user)
        return user


class HttpChatClient:
    """Minimal chat-completion client (system/user roles, temperature)."""

    def __init__(
        self,
        endpoint: Optional[str] = None,
        api_key: Optional[str] = None,
        model_name: str = "gpt-4o",
        timeout: float = 60.0,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint or os.environ.get("CRASHLENS_CHAT_ENDPOINT", "")
        self.api_key = api_key or os.environ.get("CRASHLENS_CHAT_API_KEY", "")
        self.model_name = model_name
        self.timeout = timeout
        self.session = session or requests.Session()
        if not self.endpoint:
            raise ValueError("no chat endpoint configured (CRASHLENS_CHAT_ENDPOINT)")

    def send(self, system: str, user: str, temperature: float) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model_name,
            "temperature": temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        try:
            resp = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ConnectionError(str(exc)) from exc
        if resp.status_code >= 500:
            raise ConnectionError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise UnavailableError(f"request rejected: {resp.status_code} {resp.text[:200]}")
        body = resp.json()
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise UnavailableError(f"malformed completion payload: {exc}") from exc


def build_system_prompt(cfg: AugmentationConfig) -> str:
    lines = [cfg.system_prompt, "", "Requirements:"]
    lines.extend(f"- {_GUIDELINES[c.kind]}" for c in cfg.constraints)
    return "\n".join(lines)


def augment(narrative: str, client: ChatClient, cfg: AugmentationConfig) -> str:
    """One constrained rewrite; retries transient transport failures."""
    if not narrative.strip():
        raise ValueError("narrative is empty")
    system = build_system_prompt(cfg)
    last_exc: Optional[Exception] = None
    for attempt in range(cfg.max_retries + 1):
        try:
            completion = client.send(system, narrative, cfg.temperature)
        except UnavailableError:
            raise
        except (ConnectionError, TimeoutError, OSError) as exc:
            last_exc = exc
            if attempt < cfg.max_retries and cfg.backoff_base > 0:
                time.sleep(cfg.backoff_base * (2**attempt))
            continue
        if not completion or not completion.strip():
            raise EmptyCompletionError("model returned an empty completion")
        return completion
    raise UnavailableError(f"transport failed after {cfg.max_retries + 1} attempts: {last_exc}")


@dataclass
class ConstraintResult:
    kind: ConstraintKind
    passed: bool
    offending: list[str] = field(default_factory=list)


@dataclass
class ConstraintReport:
    results: list[ConstraintResult]
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(r.passed for r in self.results)

    @property
    def failures(self) -> list[ConstraintResult]:
        return [r for r in self.results if not r.passed]


def _canonical_times(text: str) -> tuple[list[str], str]:
    """Extract time expressions in order as canonical 24h tokens.

    Returns (tokens, residual text with times blanked out) so plain-number
    extraction does not double-count clock digits.
    """
    found: list[tuple[int, str]] = []
    out = text

    def grab(pattern: re.Pattern, to_token: Callable[[re.Match], str]) -> None:
        nonlocal out
        for m in pattern.finditer(out):
            found.append((m.start(), to_token(m)))
        # blank with equal length so offsets stay comparable across passes
        out = pattern.sub(lambda m: " " * len(m.group(0)), out)

    def ampm_token(m: re.Match) -> str:
        hour = int(m.group(1)) % 12
        if m.group(3).lower() == "p":
            hour += 12
        return f"T{hour:02d}:{m.group(2)}"

    grab(_CLOCK_AMPM_RE, ampm_token)
    grab(_CLOCK_RE, lambda m: f"T{int(m.group(1)):02d}:{m.group(2)}")

    def hour_token(m: re.Match) -> str:
        hour = int(m.group(1)) % 12
        if m.group(2).lower() == "p":
            hour += 12
        return f"T{hour:02d}:00"

    grab(_HOUR_AMPM_RE, hour_token)
    found.sort(key=lambda pair: pair[0])
    return [token for _, token in found], out


def _canonical_dates(text: str) -> list[str]:
    dates = [
        f"D{m.group(3)}-{_MONTH_INDEX[m.group(1)]:02d}-{int(m.group(2)):02d}"
        for m in _DATE_RE.finditer(text)
    ]
    dates.extend(
        f"D{m.group(1)}-{m.group(2)}-{m.group(3)}" for m in _ISO_DATE_RE.finditer(text)
    )
    return dates


def _number_multiset(text: str) -> Counter:
    times, residual = _canonical_times(text)
    numbers = Counter(m.group(0).replace(",", "") for m in _NUMBER_RE.finditer(residual))
    numbers.update(times)
    return numbers


_MERIDIEMS = frozenset({"AM", "PM"})


def _proper_noun_runs(text: str) -> list[str]:
    """Capitalized runs and standalone capitalized words, skipping sentence
    starts. Meridiems are exempt: the clock-form constraint owns those."""
    runs: list[str] = []
    for sentence in re.split(r"(?<=[.!?])\s+", text):
        tokens = list(re.finditer(r"\S+", sentence))
        current: list[str] = []

        def flush() -> None:
            if len(current) >= 2:
                runs.append(" ".join(current))
            elif len(current) == 1 and current[0] not in _MERIDIEMS:
                runs.append(current[0])
            current.clear()

        prev_end = None
        for i, m in enumerate(tokens):
            word = m.group(0)
            bare = word.strip(".,;:!?()'\"")
            is_cap = bool(bare) and bare[0].isalpha() and bare[0].isupper()
            adjacent = prev_end is not None and m.start() == prev_end + 1
            # the first word of a sentence is capitalized by convention, not meaning
            if is_cap and i > 0:
                if current and not adjacent:
                    flush()
                current.append(bare)
            else:
                flush()
            if bare and not word.endswith(bare):
                # trailing punctuation terminates the entity
                flush()
            prev_end = m.end()
        flush()
    return runs


def verify_preservation(
    original: str,
    augmented: str,
    constraints: Sequence[PreservationConstraint] = DEFAULT_CONSTRAINTS,
) -> ConstraintReport:
    """Mechanically check each constraint; report offending tokens per failure."""
    results: list[ConstraintResult] = []
    for constraint in constraints:
        kind = constraint.kind
        if kind is ConstraintKind.NUMBERS:
            missing = _number_multiset(original) - _number_multiset(augmented)
            offending = sorted(missing.elements())
            results.append(ConstraintResult(kind, not offending, offending))
        elif kind is ConstraintKind.DATES_TIMES:
            orig = Counter(_canonical_dates(original)) + Counter(_canonical_times(original)[0])
            aug = Counter(_canonical_dates(augmented)) + Counter(_canonical_times(augmented)[0])
            offending = sorted((orig - aug).elements())
            results.append(ConstraintResult(kind, not offending, offending))
        elif kind is ConstraintKind.PROPER_NOUNS:
            offending = [run for run in _proper_noun_runs(original) if run not in augmented]
            results.append(ConstraintResult(kind, not offending, offending))
        elif kind is ConstraintKind.NO_NULL_MARKERS:
            offending = [m.group(0) for m in NULL_MARKER_RE.finditer(augmented)]
            results.append(ConstraintResult(kind, not offending, offending))
        elif kind is ConstraintKind.CHRONOLOGY:
            orig_times = _canonical_times(original)[0]
            aug_times = _canonical_times(augmented)[0]
            it = iter(aug_times)
            offending = [t for t in orig_times if not any(t == a for a in it)]
            results.append(ConstraintResult(kind, not offending, offending))
    return ConstraintReport(results)


def augment_batch(
    narratives: Sequence[str],
    client: ChatClient,
    cfg: AugmentationConfig,
    jobs: int = 1,
) -> list[tuple[str, ConstraintReport]]:
    """Rewrite a batch, order-preserving.

    Any record whose rewrite fails verification (or whose request fails
    outright) comes back as the byte-identical original with the report
    flagging why.
    """

    def one(narrative: str) -> tuple[str, ConstraintReport]:
        try:
            completion = augment(narrative, client, cfg)
        except (UnavailableError, EmptyCompletionError) as exc:
            return narrative, ConstraintReport(results=[], error=f"{type(exc).__name__}: {exc}")
        report = verify_preservation(narrative, completion, cfg.constraints)
        return (completion, report) if report.passed else (narrative, report)

    workers = max(1, min(jobs, len(narratives) or 1))
    if workers == 1:
        return [one(n) for n in narratives]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, narratives))
