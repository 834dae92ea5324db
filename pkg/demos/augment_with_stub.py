"""Constraint-checked narrative rewriting, demonstrated without a live API.

The stub client echoes (or deliberately mangles) the narrative so the
fact-preservation checks can be watched doing their job: a rewrite that
drops a number, a date, or a place name is rejected and the original
text is kept byte for byte.
"""
from __future__ import annotations

from crashlens.augment import (
    AugmentationConfig,
    StubChatClient,
    augment_batch,
    build_system_prompt,
)

NARRATIVE = (
    "On June 29, 2022, at 8:00 PM, a traffic accident occurred on Alternate "
    "Route 097ARi in Chelan, Washington. The crash site was at milepost 22.4. "
    "The posted speed limit was 60 mph. By 9:15 PM the road had been cleared."
)


def main() -> None:
    cfg = AugmentationConfig()
    print("system prompt sent to the rewriter:")
    print(build_system_prompt(cfg))
    print()

    # a well-behaved rewriter: everything passes
    _, report = augment_batch([NARRATIVE], StubChatClient(), cfg)[0]
    print(f"identity rewrite: passed={report.passed}")

    # a sloppy rewriter: numbers and places go missing
    def sloppy(user: str) -> str:
        return user.replace("milepost 22.4", "the milepost").replace(
            " in Chelan, Washington", ""
        )

    text, report = augment_batch([NARRATIVE], StubChatClient(transform=sloppy), cfg)[0]
    print(f"sloppy rewrite:   passed={report.passed}, fell back to original={text == NARRATIVE}")
    for failure in report.failures:
        print(f"  {failure.kind.name}: {failure.offending}")

    # restating a time in 24-hour form is a legal paraphrase, not a violation
    def military(user: str) -> str:
        return user.replace("8:00 PM", "20:00").replace("9:15 PM", "21:15")

    text, report = augment_batch([NARRATIVE], StubChatClient(transform=military), cfg)[0]
    print(f"24h restatement:  passed={report.passed}")


if __name__ == "__main__":
    main()
