from __future__ import annotations

import json
import logging
import textwrap
from dataclasses import dataclass, field, replace
from datetime import date
from html import escape
from pathlib import Path
from typing import Any, Mapping, Sequence

from markdown_it import MarkdownIt

from .anonymize import NameVault, decode, encode
from .chunking import estimate_tokens
from .datamodel import KIND_ORDER, AtomicInsight, InsightKind, sort_insights
from .exceptions import NarrativeError
from .llm import LlmHandle, LlmRequest, complete, data_block, fact_lines
from .preprocess import PrecalcTable
from .wording import (
    LINE,
    TOTALS_TITLE,
    claim_line,
    kind_for_title,
    line_numbers,
    parse_dims,
    parse_line,
    section_title,
)

logger = logging.getLogger(__name__)

markdown_engine = MarkdownIt("commonmark", {"html": False, "typographer": False})

TEMPLATE = "template"
LLM_SUMMARIZED = "llm_summarized"
EMPTY_HEADING = "No notable insights"
PREFACE_HEADING = "Summary"
RELATIVE_TOLERANCE = 0.005
# Two-decimal rounding in generated text moves a number by at most 0.005.
ABSOLUTE_TOLERANCE = 0.005 + 1e-9


@dataclass(frozen=True)
class ReportSettings:
    title: str = "Business insight report"
    empty_text: str = "No notable insights for this period."
    accent_color: str = "#2563eb"
    text_color: str = "#111827"
    base_font_size: int = 15


@dataclass(frozen=True)
class Feedback:
    likes: int = 0
    dislikes: int = 0

    @property
    def ratio(self) -> float | None:
        """Likes-to-dislikes ratio; None until someone dislikes the report."""
        return self.likes / self.dislikes if self.dislikes else None


Section = tuple[str, tuple[str, ...]]


@dataclass(frozen=True)
class ReportDoc:
    title: str
    period: tuple[date, date] | None
    sections: tuple[Section, ...]
    source_insights: tuple[str, ...] = ()
    generator: str = TEMPLATE
    feedback: Feedback = field(default_factory=Feedback)

    def with_feedback(self, likes: int, dislikes: int) -> ReportDoc:
        return replace(self, feedback=Feedback(likes=likes, dislikes=dislikes))


@dataclass(frozen=True)
class FidelityReport:
    claims_checked: int
    claims_correct: int
    precision: float | None


def _period(insights: Sequence[AtomicInsight]) -> tuple[date, date] | None:
    if not insights:
        return None
    return min(i.period_start for i in insights), max(i.period_end for i in insights)


def render_template(insights: Sequence[AtomicInsight], settings: ReportSettings | None = None) -> ReportDoc:
    settings = settings or ReportSettings()
    if not insights:
        return ReportDoc(
            title=settings.title,
            period=None,
            sections=((EMPTY_HEADING, (settings.empty_text,)),),
        )
    ordered = sort_insights(insights)
    sections = []
    for kind in KIND_ORDER:
        lines = tuple(claim_line(item) for item in ordered if item.kind is kind)
        if lines:
            sections.append((section_title(kind), lines))
    return ReportDoc(
        title=settings.title,
        period=_period(ordered),
        sections=tuple(sections),
        source_insights=tuple(item.id for item in ordered),
        generator=TEMPLATE,
    )


def sections_from_markdown(text: str) -> tuple[str | None, tuple[Section, ...]]:
    """(h1 title, sections) from a Markdown narrative; list items become paragraphs."""
    tokens = markdown_engine.parse(text or "")
    title: str | None = None
    sections: list[tuple[str, list[str]]] = []
    heading_level: str | None = None
    for token in tokens:
        if token.type == "heading_open":
            heading_level = token.tag
            continue
        if token.type == "heading_close":
            heading_level = None
            continue
        if token.type != "inline":
            continue
        content = token.content.strip()
        if heading_level == "h1" and title is None:
            title = content
        elif heading_level is not None:
            sections.append((content, []))
        elif content:
            if not sections:
                sections.append((PREFACE_HEADING, []))
            sections[-1][1].append(content)
    return title, tuple((heading, tuple(paragraphs)) for heading, paragraphs in sections)


SUMMARY_SYSTEM = (
    "You are a business analyst writing a short insight report for account managers. "
    "Use only the facts supplied. Keep every number exactly as given."
)

SUMMARY_INSTRUCTIONS = """Write a Markdown report from the facts in the data block.
Start with a level-one title. Group the findings under level-two headings, one per kind:
Anomalous shifts, Dimension anomalies, Spikes, All-time highs, Top dimensions, Dimension comparisons.
Write each finding as one bullet in the form
- [start] metric (dimension=value): sentence
and keep value, baseline and score in that order inside the sentence.
When the header carries a precalc table, end with a "Period totals" section giving
the overall total and average of each metric."""

PRECOMPUTED_NOTE = "Every number below was computed by the rule engine. Copy it as given."
DERIVE_NOTE = "Check each baseline and score against the value before you restate it."


def summary_prompt(
    insights: Sequence[AtomicInsight],
    *,
    title: str,
    precomputed: bool = True,
    precalc: PrecalcTable | None = None,
    overrides: Mapping[str, str] | None = None,
) -> str:
    header: dict[str, Any] = {"type": "facts", "precomputed": precomputed, "title": title}
    if precalc is not None and len(precalc):
        header["precalc"] = precalc.to_payload()
    parts = [SUMMARY_INSTRUCTIONS, PRECOMPUTED_NOTE if precomputed else DERIVE_NOTE]
    kinds = {str(item.kind) for item in insights}
    for kind, note in sorted((overrides or {}).items()):
        if kind in kinds or kind == "*":
            parts.append(f"Expert guidance for {kind}: {note}")
    parts.append(data_block(header, fact_lines(sort_insights(insights))))
    return "\n\n".join(parts)


def summarize(
    insights: Sequence[AtomicInsight],
    h: LlmHandle,
    vault: NameVault,
    *,
    precomputed: bool = True,
    precalc: PrecalcTable | None = None,
    overrides: Mapping[str, str] | None = None,
    budget_tokens: int | None = None,
    settings: ReportSettings | None = None,
    max_tokens: int = 2048,
) -> tuple[ReportDoc, int]:
    """Encode names, ask the model for a report, decode, parse it back into sections."""
    settings = settings or ReportSettings()
    if not insights:
        return render_template([], settings), 0

    user_text = summary_prompt(
        insights,
        title=settings.title,
        precomputed=precomputed,
        precalc=precalc,
        overrides=overrides,
    )
    user_text, sent = encode(user_text, vault.names, vault)
    needed = estimate_tokens(SUMMARY_SYSTEM + user_text)
    if budget_tokens is not None and needed > budget_tokens:
        raise NarrativeError(
            f"요약 프롬프트({needed} 토큰)가 예산 {budget_tokens} 토큰을 넘습니다.",
            code="budget_exceeded",
        )

    response = complete(
        h,
        LlmRequest(system_text=SUMMARY_SYSTEM, user_text=user_text, max_tokens=max_tokens, task="summarize"),
    )
    text, leaks = decode(response.text, sent)
    title, sections = sections_from_markdown(text)
    if not sections:
        logger.warning("summary response had no sections; keeping it as one paragraph")
        sections = ((PREFACE_HEADING, (text.strip(),)),) if text.strip() else ()
    report = ReportDoc(
        title=title or settings.title,
        period=_period(insights),
        sections=sections,
        source_insights=tuple(item.id for item in sort_insights(insights)),
        generator=LLM_SUMMARIZED,
    )
    return report, leaks


def report_lines(report: ReportDoc) -> list[tuple[InsightKind | None, str]]:
    """Every claim-bearing line, paired with the kind its section heading names."""
    return [(kind, line) for heading, kind, line in _section_lines(report) if heading != TOTALS_TITLE]


def _section_lines(report: ReportDoc) -> list[tuple[str, InsightKind | None, str]]:
    lines = []
    for heading, paragraphs in report.sections:
        kind = kind_for_title(heading)
        for paragraph in paragraphs:
            lines.extend((heading, kind, line.strip()) for line in paragraph.splitlines() if line.strip())
    return lines


def report_claims(report: ReportDoc) -> list[AtomicInsight]:
    claims = []
    for kind, line in report_lines(report):
        claim = parse_line(line, kind)
        if claim is not None:
            claims.append(claim)
    return claims


def _within(claimed: float, target: float) -> bool:
    return abs(claimed - target) <= max(RELATIVE_TOLERANCE * abs(target), ABSOLUTE_TOLERANCE)


def _candidates(claim: AtomicInsight, insights: Sequence[AtomicInsight]) -> list[AtomicInsight]:
    exact = [item for item in insights if item.identity == claim.identity]
    if exact:
        return exact
    same_kind = [item for item in insights if item.kind is claim.kind]
    return same_kind or list(insights)


def _of_kind(kind: InsightKind | None, insights: Sequence[AtomicInsight]) -> list[AtomicInsight]:
    if kind is None:
        return list(insights)
    return [item for item in insights if item.kind is kind] or list(insights)


def _targets(
    heading: str,
    kind: InsightKind | None,
    line: str,
    insights: Sequence[AtomicInsight],
    precalc: PrecalcTable | None,
) -> list[float]:
    match = LINE.match(line)
    if heading == TOTALS_TITLE:
        entries = precalc.entries if precalc is not None else ()
        if match is not None:
            dims = parse_dims(match["dims"])
            entries = [entry for entry in entries if entry.metric == match["metric"] and entry.dims == dims]
        return [
            number
            for entry in entries
            for number in (entry.total, entry.average)
            if number is not None
        ]
    claim = parse_line(line, kind) if match is not None else None
    pool = _candidates(claim, insights) if claim is not None else _of_kind(kind, insights)
    return [number for item in pool for number in (item.value, item.baseline, item.score)]


def check_fidelity(
    report: ReportDoc,
    insights: Sequence[AtomicInsight],
    precalc: PrecalcTable | None = None,
) -> FidelityReport:
    """Share of stated numbers that match a field of what they describe.

    Claim lines are held to the insight they name. Prose lines are held to the
    insights of their section's kind, and the totals section to ``precalc``.
    Dates are not counted as numbers.
    """
    checked = correct = 0
    for heading, kind, line in _section_lines(report):
        numbers = line_numbers(line)
        if not numbers:
            continue
        targets = _targets(heading, kind, line, insights, precalc)
        for number in numbers:
            checked += 1
            if any(_within(number, target) for target in targets):
                correct += 1
    precision = correct / checked if checked else None
    return FidelityReport(claims_checked=checked, claims_correct=correct, precision=precision)


def to_markdown(report: ReportDoc) -> str:
    lines = [f"# {report.title}", ""]
    if report.period is not None:
        start, end = report.period
        lines += [f"_Period: {start.isoformat()} to {end.isoformat()}_", ""]
    for heading, paragraphs in report.sections:
        lines += [f"## {heading}", ""]
        in_list = False
        for paragraph in paragraphs:
            if LINE.match(paragraph):
                lines.append(f"- {paragraph}")
                in_list = True
                continue
            if in_list:
                lines.append("")
            lines += [paragraph, ""]
            in_list = False
        if in_list:
            lines.append("")
    if report.feedback.likes or report.feedback.dislikes:
        ratio = report.feedback.ratio
        shown = f"{ratio:.2f}" if ratio is not None else "n/a"
        lines += [
            f"_Feedback: {report.feedback.likes} likes, {report.feedback.dislikes} dislikes (ratio {shown})_",
            "",
        ]
    return "\n".join(lines).rstrip() + "\n"


def report_payload(report: ReportDoc) -> dict[str, Any]:
    return {
        "title": report.title,
        "period": [d.isoformat() for d in report.period] if report.period else None,
        "generator": report.generator,
        "sections": [
            {"heading": heading, "paragraphs": list(paragraphs)} for heading, paragraphs in report.sections
        ],
        "source_insights": list(report.source_insights),
        "feedback": {
            "likes": report.feedback.likes,
            "dislikes": report.feedback.dislikes,
            "ratio": report.feedback.ratio,
        },
    }


def to_json(report: ReportDoc) -> str:
    return json.dumps(report_payload(report), ensure_ascii=False, indent=2, sort_keys=True)


def report_css(settings: ReportSettings) -> str:
    return textwrap.dedent(
        f"""
        body {{
            margin: 0;
            color: {settings.text_color};
            font-family: 'Noto Sans KR', 'Apple SD Gothic Neo', 'Malgun Gothic', sans-serif;
            font-size: {int(settings.base_font_size)}px;
            line-height: 1.6;
        }}
        .document {{
            padding: 40px;
        }}
        .document h1, .document h2 {{
            color: {settings.accent_color};
        }}
        .document li {{
            margin: 0.3em 0;
        }}
        @page {{
            size: A4;
            margin: 18mm;
        }}
        """
    ).strip()


def to_html(report: ReportDoc, settings: ReportSettings | None = None) -> str:
    settings = settings or ReportSettings()
    body = markdown_engine.render(to_markdown(report))
    return f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="utf-8" />
    <title>{escape(report.title)}</title>
    <style>{report_css(settings)}</style>
</head>
<body>
    <div class="document">{body}</div>
</body>
</html>
"""


def to_pdf(report: ReportDoc, path: str | Path, settings: ReportSettings | None = None) -> Path:
    from weasyprint import HTML

    target = Path(path)
    HTML(string=to_html(report, settings)).write_pdf(target)
    return target
