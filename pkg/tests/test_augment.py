from __future__ import annotations

import pytest

from crashlens.augment import (
    AugmentationConfig,
    ConstraintKind,
    EmptyCompletionError,
    StubChatClient,
    UnavailableError,
    augment,
    augment_batch,
    build_system_prompt,
    verify_preservation,
)

ORIGINAL = (
    "On June 29, 2022, at 8:00 PM, a traffic accident occurred on Alternate "
    "Route 097ARi in Chelan, Washington. The crash site was at milepost 22.4. "
    "The posted speed limit was 60 mph. By 9:15 PM the road had been cleared."
)


def _failures(report):
    return {f.kind for f in report.failures}


def test_identity_rewrite_passes_all_constraints():
    report = verify_preservation(ORIGINAL, ORIGINAL)
    assert report.passed
    assert report.failures == []


def test_faithful_paraphrase_passes():
    paraphrase = (
        "A traffic accident took place on Alternate Route 097ARi in Chelan, "
        "Washington on June 29, 2022, at 8:00 PM. It happened at milepost 22.4, "
        "where the posted limit is 60 mph. The road was cleared by 9:15 PM."
    )
    report = verify_preservation(ORIGINAL, paraphrase)
    assert report.passed, [f"{f.kind}: {f.offending}" for f in report.failures]


def test_dropped_number_is_caught():
    mangled = ORIGINAL.replace("milepost 22.4", "that milepost")
    report = verify_preservation(ORIGINAL, mangled)
    assert ConstraintKind.NUMBERS in _failures(report)
    offending = next(f for f in report.failures if f.kind is ConstraintKind.NUMBERS).offending
    assert "22.4" in offending


def test_changed_date_is_caught():
    mangled = ORIGINAL.replace("June 29, 2022", "June 30, 2022")
    report = verify_preservation(ORIGINAL, mangled)
    assert ConstraintKind.DATES_TIMES in _failures(report)


def test_24_hour_clock_restatement_is_accepted():
    restated = ORIGINAL.replace("8:00 PM", "20:00").replace("9:15 PM", "21:15")
    report = verify_preservation(ORIGINAL, restated)
    assert ConstraintKind.DATES_TIMES not in _failures(report)
    assert ConstraintKind.CHRONOLOGY not in _failures(report)


def test_dropped_proper_noun_is_caught():
    mangled = ORIGINAL.replace("Chelan, Washington", "the county")
    report = verify_preservation(ORIGINAL, mangled)
    assert ConstraintKind.PROPER_NOUNS in _failures(report)
    offending = next(
        f for f in report.failures if f.kind is ConstraintKind.PROPER_NOUNS
    ).offending
    assert any("Chelan" in run for run in offending)


def test_injected_null_marker_is_caught():
    mangled = ORIGINAL + " The driver age is unknown."
    report = verify_preservation(ORIGINAL, mangled)
    assert ConstraintKind.NO_NULL_MARKERS in _failures(report)
    mangled2 = ORIGINAL + " Weather: N/A."
    assert ConstraintKind.NO_NULL_MARKERS in _failures(verify_preservation(ORIGINAL, mangled2))


def test_reordered_times_break_chronology():
    swapped = (
        "By 9:15 PM the road had been cleared after a crash on Alternate Route "
        "097ARi in Chelan, Washington at milepost 22.4 on June 29, 2022, at "
        "8:00 PM, where the posted speed limit was 60 mph."
    )
    report = verify_preservation(ORIGINAL, swapped)
    assert ConstraintKind.CHRONOLOGY in _failures(report)


def test_system_prompt_lists_requirements():
    cfg = AugmentationConfig()
    prompt = build_system_prompt(cfg)
    assert prompt.startswith(cfg.system_prompt)
    assert "Requirements:" in prompt
    for line in (
        "Keep every numeric value",
        "Keep all dates and times",
        "proper nouns verbatim",
        "Never write placeholder values",
        "same chronological order",
    ):
        assert line in prompt


def test_stub_echo_round_trip():
    cfg = AugmentationConfig()
    out = augment(ORIGINAL, StubChatClient(), cfg)
    assert out == ORIGINAL


def test_batch_falls_back_to_byte_identical_original():
    def adversary(user: str) -> str:
        return user.replace("60 mph", "65 mph").replace("22.4", "23")

    cfg = AugmentationConfig()
    results = augment_batch([ORIGINAL], StubChatClient(transform=adversary), cfg)
    text, report = results[0]
    assert text == ORIGINAL
    assert not report.passed
    assert ConstraintKind.NUMBERS in _failures(report)


def test_batch_preserves_order_and_mixes_outcomes():
    good = ORIGINAL
    other = "On July 1, 2022, at 7:00 AM, a crash occurred on Route 002 at milepost 3.0."

    def adversary(user: str) -> str:
        if "July" in user:
            return user.replace("milepost 3.0", "milepost 4.0")
        return user

    cfg = AugmentationConfig()
    results = augment_batch([good, other], StubChatClient(transform=adversary), cfg)
    assert results[0][0] == good and results[0][1].passed
    assert results[1][0] == other and not results[1][1].passed


def test_batch_parallel_matches_serial(pairs):
    texts = [p.descriptive for p in pairs[:8]]
    cfg = AugmentationConfig()
    serial = augment_batch(texts, StubChatClient(), cfg, jobs=1)
    parallel = augment_batch(texts, StubChatClient(), cfg, jobs=4)
    assert [t for t, _ in serial] == [t for t, _ in parallel]


class FlakyClient:
    """Fails with a transport error n times, then echoes."""

    def __init__(self, failures: int):
        self.failures = failures
        self.calls = 0

    def send(self, system: str, user: str, temperature: float) -> str:
        self.calls += 1
        if self.calls <= self.failures:
            raise ConnectionError("boom")
        return user


def test_transport_retry_then_success():
    cfg = AugmentationConfig(max_retries=3, backoff_base=0.0)
    client = FlakyClient(failures=2)
    assert augment(ORIGINAL, client, cfg) == ORIGINAL
    assert client.calls == 3


def test_transport_exhaustion_is_flagged_not_raised_in_batch():
    cfg = AugmentationConfig(max_retries=1, backoff_base=0.0)
    results = augment_batch([ORIGINAL], FlakyClient(failures=10), cfg)
    text, report = results[0]
    assert text == ORIGINAL
    assert report.error is not None
    assert "UnavailableError" in report.error


def test_transport_exhaustion_raises_for_single_call():
    cfg = AugmentationConfig(max_retries=1, backoff_base=0.0)
    with pytest.raises(UnavailableError):
        augment(ORIGINAL, FlakyClient(failures=10), cfg)


def test_empty_completion_rejected():
    cfg = AugmentationConfig()
    with pytest.raises(EmptyCompletionError):
        augment(ORIGINAL, StubChatClient(transform=lambda _: "   "), cfg)
