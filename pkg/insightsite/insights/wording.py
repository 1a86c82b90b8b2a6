"""Canonical report sentences.

Every generated line follows one grammar so numbers can be read back with a
regular scan::

    [2024-03-01] sessions (account=Acme Corp): spiked to 300 from a typical 100 (3x) and recovered quickly
    [2024-02-01 to 2024-02-28] cost (all): changed to 120 from 100, diverging from the overall trend by 0.3

The sentence part carries exactly three numbers: value, baseline, score.
"""

from __future__ import annotations

import re
from datetime import date
from typing import Iterable, Mapping

from .datamodel import AtomicInsight, InsightKind
from .exceptions import DatasetError

SECTION_TITLES: dict[InsightKind, str] = {
    InsightKind.ANOMALOUS_SHIFT: "Anomalous shifts",
    InsightKind.DIMENSION_ANOMALY: "Dimension anomalies",
    InsightKind.SPIKE: "Spikes",
    InsightKind.ALL_TIME_HIGH: "All-time highs",
    InsightKind.TOP_DIMENSION: "Top dimensions",
    InsightKind.DIMENSION_COMPARISON: "Dimension comparisons",
}
KIND_BY_TITLE = {title.lower(): kind for kind, title in SECTION_TITLES.items()}
# Section restating the precalculated overall figures; never holds claims.
TOTALS_TITLE = "Period totals"

_SENTENCES: dict[InsightKind, str] = {
    InsightKind.ANOMALOUS_SHIFT: "moved to {value} against a typical {baseline} (robust z {score})",
    InsightKind.DIMENSION_ANOMALY: "moved to {value} against a typical {baseline} (robust z {score})",
    InsightKind.SPIKE: "spiked to {value} from a typical {baseline} ({score}x) and recovered quickly",
    InsightKind.ALL_TIME_HIGH: (
        "reached an all-time high of {value}, above the previous best of {baseline} "
        "(relative gain {score})"
    ),
    InsightKind.TOP_DIMENSION: (
        "ranked among the top performers with {value} against an overall {baseline} (score {score})"
    ),
    InsightKind.DIMENSION_COMPARISON: (
        "changed to {value} from {baseline}, diverging from the overall trend by {score}"
    ),
}

NUMBER = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?(?!\.?\d)")
LINE = re.compile(
    r"^(?:[-*+]\s+)?\[(?P<start>\d{4}-\d{2}-\d{2})(?: to (?P<end>\d{4}-\d{2}-\d{2}))?\]\s+"
    r"(?P<metric>[^\s()]+)\s+\((?P<dims>[^()]*)\):\s+(?P<sentence>.+?)\s*$"
)
HEADING = re.compile(r"^#{1,6}\s+(?P<title>.+?)\s*#*\s*$")
ISO_DATE = re.compile(r"\d{4}-\d{2}-\d{2}")


def format_number(x: float) -> str:
    """At most two decimals, no separators, no trailing zeros."""
    text = f"{x:.2f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return "0" if text == "-0" else text


def format_dims(dims: Mapping[str, str]) -> str:
    if not dims:
        return "all"
    return "; ".join(f"{key}={value}" for key, value in sorted(dims.items()))


def parse_dims(text: str) -> dict[str, str]:
    text = text.strip()
    if not text or text == "all":
        return {}
    dims: dict[str, str] = {}
    for part in text.split(";"):
        key, sep, value = part.partition("=")
        if sep:
            dims[key.strip()] = value.strip()
    return dims


def format_period(start: date, end: date) -> str:
    if start == end:
        return f"[{start.isoformat()}]"
    return f"[{start.isoformat()} to {end.isoformat()}]"


def sentence_from(kind: InsightKind, value: str, baseline: str, score: str) -> str:
    return _SENTENCES[InsightKind(kind)].format(value=value, baseline=baseline, score=score)


def sentence(kind: InsightKind, value: float, baseline: float, score: float) -> str:
    return sentence_from(kind, format_number(value), format_number(baseline), format_number(score))


def describe(insight: AtomicInsight) -> str:
    return sentence(insight.kind, insight.value, insight.baseline, insight.score)


def claim_line(
    insight: AtomicInsight,
    *,
    numbers: tuple[str, str, str] | None = None,
    dims: Mapping[str, str] | None = None,
) -> str:
    """One canonical line; ``numbers`` replaces the formatted value/baseline/score."""
    value, baseline, score = numbers or (
        format_number(insight.value),
        format_number(insight.baseline),
        format_number(insight.score),
    )
    text = sentence_from(insight.kind, value, baseline, score)
    shown = insight.dims if dims is None else dims
    return f"{format_period(insight.period_start, insight.period_end)} {insight.metric} ({format_dims(shown)}): {text}"


def totals_line(metric: str, start: date, end: date, average: str, total: str | None = None) -> str:
    """Overall figure for a metric; ratio metrics carry no total."""
    text = f"weighted average {average}" if total is None else f"total {total}, average {average} per row"
    return f"{format_period(start, end)} {metric} (all): {text}"


def section_title(kind: InsightKind) -> str:
    return SECTION_TITLES[InsightKind(kind)]


def kind_for_title(title: str) -> InsightKind | None:
    return KIND_BY_TITLE.get(title.strip().lower())


def _guess_kind(text: str, dims: Mapping[str, str]) -> InsightKind:
    if "spiked to" in text:
        return InsightKind.SPIKE
    if "all-time high" in text:
        return InsightKind.ALL_TIME_HIGH
    if "top performers" in text:
        return InsightKind.TOP_DIMENSION
    if "diverging from the overall trend" in text:
        return InsightKind.DIMENSION_COMPARISON
    return InsightKind.DIMENSION_ANOMALY if dims else InsightKind.ANOMALOUS_SHIFT


def sentence_numbers(text: str) -> list[float]:
    return [float(match) for match in NUMBER.findall(text)]


def line_numbers(line: str) -> list[float]:
    """Figures stated on a report line: the claim sentence, or the whole prose line without dates."""
    match = LINE.match(line.strip())
    if match is not None:
        return sentence_numbers(match["sentence"])
    return sentence_numbers(ISO_DATE.sub(" ", line))


def parse_line(line: str, kind: InsightKind | None = None) -> AtomicInsight | None:
    match = LINE.match(line.strip())
    if match is None:
        return None
    numbers = sentence_numbers(match["sentence"])
    if len(numbers) != 3:
        return None
    dims = parse_dims(match["dims"])
    try:
        start = date.fromisoformat(match["start"])
        end = date.fromisoformat(match["end"]) if match["end"] else start
    except ValueError:
        return None
    if end < start:
        return None
    try:
        return AtomicInsight(
            kind=kind or _guess_kind(match["sentence"], dims),
            metric=match["metric"],
            dims=dims,
            period_start=start,
            period_end=end,
            value=numbers[0],
            baseline=numbers[1],
            score=numbers[2],
            description=match["sentence"],
        )
    except DatasetError:
        return None


def iter_claim_lines(text: str) -> Iterable[tuple[InsightKind | None, str]]:
    """Lines that look like claims, with the kind of the section they sit in."""
    kind: InsightKind | None = None
    totals = False
    for raw in text.splitlines():
        heading = HEADING.match(raw.strip())
        if heading:
            kind = kind_for_title(heading["title"])
            totals = heading["title"].strip() == TOTALS_TITLE
            continue
        if not totals and LINE.match(raw.strip()):
            yield kind, raw.strip()


def parse_claims(text: str) -> list[AtomicInsight]:
    claims = []
    for kind, line in iter_claim_lines(text):
        claim = parse_line(line, kind)
        if claim is not None:
            claims.append(claim)
    return claims
