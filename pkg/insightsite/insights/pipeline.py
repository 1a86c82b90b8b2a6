from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Iterator, Mapping, Sequence

from .anonymize import NameVault, decode, encode, register
from .chunking import ChunkConfig, estimate_tokens, plan_from_config, row_line
from .datamodel import (
    AtomicInsight,
    Dataset,
    Record,
    registry_payload,
    sort_insights,
)
from .detectors import (
    DetectorConfig,
    aggregate_rows,
    detect_all,
    detect_fragment,
    detect_top_dimensions,
)
from .exceptions import ConfigError, DatasetError, InsightEngineError, PipelineError
from .llm import LlmHandle, LlmRequest, complete, data_block
from .narrative import (
    LLM_SUMMARIZED,
    ReportDoc,
    ReportSettings,
    render_template,
    report_claims,
    sections_from_markdown,
    summarize,
)
from .preprocess import PrecalcTable, precalculate

logger = logging.getLogger(__name__)

RULE_ONLY = "rule_only"
LLM_ONLY = "llm_only"
LLM_CHUNKED = "llm_chunked"
SEQUENTIAL = "sequential"
HYBRID = "hybrid"
MODES = (RULE_ONLY, LLM_ONLY, LLM_CHUNKED, SEQUENTIAL, HYBRID)


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = RULE_ONLY
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    chunk: ChunkConfig = field(default_factory=ChunkConfig)
    llm: LlmHandle | None = None
    # "auto" anonymizes the hybrid pipeline only.
    anonymize: bool | str = "auto"
    precalc: bool = True
    prompt_overrides: Mapping[str, str] = field(default_factory=dict)
    jobs: int = 1
    protected_names: tuple[str, ...] = ()
    summary_budget_tokens: int | None = 100_000
    salt: str = "insightdesk"
    report: ReportSettings = field(default_factory=ReportSettings)
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"알 수 없는 파이프라인 모드: {self.mode}")
        if self.mode != RULE_ONLY and self.llm is None:
            raise ConfigError(f"'{self.mode}' 모드에는 LLM 설정이 필요합니다 (--simulate 또는 LLM_API_URL).")
        if self.anonymize not in ("auto", True, False):
            raise ConfigError("anonymize는 auto, true, false 중 하나여야 합니다.")
        if self.jobs < 0:
            raise ConfigError("jobs는 0 이상이어야 합니다.")
        object.__setattr__(self, "protected_names", tuple(self.protected_names))

    @property
    def anonymize_enabled(self) -> bool:
        if self.anonymize == "auto":
            return self.mode == HYBRID
        return bool(self.anonymize)

    @property
    def workers(self) -> int:
        return self.jobs or os.cpu_count() or 1


@dataclass(frozen=True)
class RunResult:
    mode: str
    report: ReportDoc
    # Claims read back from the final report (rule_only: the rule insights).
    insights: tuple[AtomicInsight, ...]
    leak_count: int
    facts_sent: int
    rows_processed: int
    rows_total: int
    # Rule reading of exactly the material shown to the model.
    reference_insights: tuple[AtomicInsight, ...] = ()
    analysis_insights: tuple[AtomicInsight, ...] = ()
    vault: NameVault | None = None
    # Figures handed to the summary next to the insights (hybrid with precalc only).
    precalc: PrecalcTable | None = None
    timings: dict[str, float] = field(default_factory=dict, compare=False)


@contextmanager
def _stage(name: str, timings: dict[str, float], chunk: int | None = None) -> Iterator[None]:
    started = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except InsightEngineError as exc:
        raise PipelineError(exc.args[0] if exc.args else str(exc), code=exc.code, stage=name, chunk=chunk) from exc
    finally:
        key = name if chunk is None else f"{name}[{chunk}]"
        timings[key] = timings.get(key, 0.0) + time.perf_counter() - started


def merge_chunk_results(parts: Sequence[Sequence[AtomicInsight]]) -> list[AtomicInsight]:
    """Concatenate in chunk order, sort canonically, keep the first of each identity."""
    merged: list[AtomicInsight] = []
    seen: set[tuple[Any, ...]] = set()
    for insight in sort_insights(item for part in parts for item in part):
        if insight.identity in seen:
            continue
        seen.add(insight.identity)
        merged.append(insight)
    return merged


def protected_names(d: Dataset, extra: Sequence[str] = ()) -> list[str]:
    """Configured names plus every dimension value that reads like a name."""
    names = dict.fromkeys(name for name in extra if name)
    for dimension in d.dimensions:
        for value in d.dimension_values(dimension):
            if any(ch.isalpha() for ch in value):
                names.setdefault(value)
    return list(names)


ANALYST_SYSTEM = (
    "You are a marketing data analyst. Read the rows in the data block and find "
    "anomalous shifts, dimension anomalies, spikes, all-time highs, top dimensions "
    "and dimension comparisons."
)

ANALYSIS_INSTRUCTIONS = """Answer with a JSON array only. Each element is an object with the fields
kind, metric, dims, period_start, period_end, value, baseline, score, description.
Compute every number from the rows yourself."""

REPORT_INSTRUCTIONS = """Analyse the rows and write a Markdown report.
Start with a level-one title. Group the findings under level-two headings, one per kind.
Write each finding as one bullet in the form
- [start] metric (dimension=value): sentence"""


def _rows_header(d: Dataset, cfg: PipelineConfig, **extra: Any) -> dict[str, Any]:
    header = {
        "type": "rows",
        "metrics": registry_payload(d.metrics),
        "dimensions": list(d.dimensions),
        "detector": asdict(cfg.detector),
        "title": cfg.report.title,
    }
    header.update(extra)
    return header


def _prompt(instructions: str, cfg: PipelineConfig, block: str) -> str:
    parts = [instructions]
    for kind, note in sorted(cfg.prompt_overrides.items()):
        parts.append(f"Expert guidance for {kind}: {note}")
    parts.append(block)
    return "\n\n".join(parts)


_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$")


def _json_array(text: str) -> Any:
    """The whole answer as JSON, else the first array embedded in surrounding prose."""
    cleaned = _FENCE.sub("", text.strip())
    try:
        return json.loads(cleaned)
    except ValueError:
        pass
    decoder = json.JSONDecoder()
    for opening in re.finditer(r"\[", cleaned):
        try:
            payload, _ = decoder.raw_decode(cleaned, opening.start())
        except ValueError:
            continue
        if isinstance(payload, list):
            return payload
    raise ValueError("no JSON array in the answer")


def parse_analysis(text: str, chunk: int | None = None) -> list[AtomicInsight]:
    """JSON insight array from a model answer; anything unreadable counts as no insights."""
    try:
        payload = _json_array(text)
    except ValueError:
        logger.warning("chunk %s: analysis response is not JSON, counted as zero insights", chunk)
        return []
    if not isinstance(payload, list):
        logger.warning("chunk %s: analysis response is not an array, counted as zero insights", chunk)
        return []
    found = []
    for item in payload:
        try:
            found.append(AtomicInsight.from_dict(item))
        except (DatasetError, AttributeError) as exc:
            logger.warning("chunk %s: skipped malformed insight (%s)", chunk, exc)
    return found


@dataclass(frozen=True)
class _Fragment:
    dataset: Dataset
    header: dict[str, Any]


@dataclass(frozen=True)
class _FragmentResult:
    insights: list[AtomicInsight]
    reference: list[AtomicInsight]
    leaks: int
    items: int


def _analyse(index: int, fragment: _Fragment, cfg: PipelineConfig, vault: NameVault, timings: dict[str, float]) -> _FragmentResult:
    with _stage("analysis", timings, chunk=index):
        lines = [row_line(fragment.dataset, record) for record in fragment.dataset.rows]
        user_text = _prompt(ANALYSIS_INSTRUCTIONS, cfg, data_block(fragment.header, lines))
        user_text, sent = encode(user_text, vault.names, vault)
        response = complete(
            cfg.llm,
            LlmRequest(system_text=ANALYST_SYSTEM, user_text=user_text, max_tokens=cfg.max_tokens, task="analysis"),
        )
        text, leaks = decode(response.text, sent)
        reference = detect_fragment(fragment.dataset, cfg.detector, fragment.header.get("slice") or None)
        context = [AtomicInsight.from_dict(item) for item in fragment.header.get("context") or []]
    return _FragmentResult(
        insights=parse_analysis(text, index),
        reference=[*context, *reference],
        leaks=leaks,
        items=len(lines) + len(context),
    )


def _fan_out(fragments: Sequence[_Fragment], cfg: PipelineConfig, vault: NameVault, timings: dict[str, float]) -> list[_FragmentResult]:
    """Results come back in fragment order whatever the worker count."""
    if cfg.workers <= 1 or len(fragments) <= 1:
        return [_analyse(i, fragment, cfg, vault, timings) for i, fragment in enumerate(fragments)]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(_analyse, i, fragment, cfg, vault, timings) for i, fragment in enumerate(fragments)]
        return [future.result() for future in futures]


def _vault(d: Dataset, cfg: PipelineConfig) -> NameVault:
    vault = NameVault(salt=cfg.salt)
    if cfg.anonymize_enabled:
        vault = register(vault, protected_names(d, cfg.protected_names))
    return vault


def _summarize(
    insights: Sequence[AtomicInsight],
    cfg: PipelineConfig,
    vault: NameVault,
    timings: dict[str, float],
    *,
    precomputed: bool,
    precalc: PrecalcTable | None = None,
) -> tuple[ReportDoc, int]:
    with _stage("summarize", timings):
        return summarize(
            insights,
            cfg.llm,
            vault,
            precomputed=precomputed,
            precalc=precalc,
            overrides=cfg.prompt_overrides,
            budget_tokens=cfg.summary_budget_tokens,
            settings=cfg.report,
            max_tokens=cfg.max_tokens,
        )


def _run_rule_only(d: Dataset, cfg: PipelineConfig, timings: dict[str, float]) -> RunResult:
    with _stage("detect", timings):
        insights = tuple(detect_all(d, cfg.detector))
    with _stage("render", timings):
        report = render_template(insights, cfg.report)
    return RunResult(
        mode=RULE_ONLY,
        report=report,
        insights=insights,
        leak_count=0,
        facts_sent=0,
        rows_processed=len(d),
        rows_total=len(d),
        reference_insights=insights,
        analysis_insights=insights,
    )


def _precalc_table(d: Dataset) -> PrecalcTable:
    dates = d.dates
    slices: list[dict[str, str]] = [{}]
    for dimension in d.dimensions:
        slices.extend({dimension: value} for value in d.dimension_values(dimension))
    return precalculate(d, [(dates[0], dates[-1])], slices)


def _run_hybrid(d: Dataset, cfg: PipelineConfig, timings: dict[str, float]) -> RunResult:
    precalc = None
    if cfg.precalc and d.rows:
        with _stage("precalculate", timings):
            precalc = _precalc_table(d)
    with _stage("detect", timings):
        insights = tuple(detect_all(d, cfg.detector))
    with _stage("anonymize", timings):
        vault = _vault(d, cfg)
    report, leaks = _summarize(insights, cfg, vault, timings, precomputed=cfg.precalc, precalc=precalc)
    return RunResult(
        mode=HYBRID,
        report=report,
        insights=tuple(report_claims(report)),
        leak_count=leaks,
        facts_sent=len(insights),
        rows_processed=len(d),
        rows_total=len(d),
        reference_insights=insights,
        analysis_insights=insights,
        vault=vault if len(vault) else None,
        precalc=precalc,
    )


def truncate_to_budget(d: Dataset, budget_tokens: int) -> Dataset:
    """Leading rows whose serialized lines fit the budget."""
    kept: list[Record] = []
    used = 0
    for record in d.rows:
        cost = estimate_tokens(row_line(d, record) + "\n")
        if used + cost > budget_tokens:
            break
        kept.append(record)
        used += cost
    return Dataset(rows=tuple(kept), metrics=dict(d.metrics), dimensions=d.dimensions)


def _run_llm_only(d: Dataset, cfg: PipelineConfig, timings: dict[str, float]) -> RunResult:
    with _stage("truncate", timings):
        visible = truncate_to_budget(d, cfg.chunk.budget_tokens)
    if len(visible) < len(d):
        logger.info("llm_only: %d of %d rows fit the %d-token budget", len(visible), len(d), cfg.chunk.budget_tokens)
    vault = _vault(d, cfg)
    with _stage("report", timings):
        lines = [row_line(visible, record) for record in visible.rows]
        user_text = _prompt(REPORT_INSTRUCTIONS, cfg, data_block(_rows_header(visible, cfg), lines))
        user_text, sent = encode(user_text, vault.names, vault)
        response = complete(
            cfg.llm,
            LlmRequest(system_text=ANALYST_SYSTEM, user_text=user_text, max_tokens=cfg.max_tokens, task="report"),
        )
        text, leaks = decode(response.text, sent)
        title, sections = sections_from_markdown(text)
        report = ReportDoc(
            title=title or cfg.report.title,
            period=(visible.dates[0], visible.dates[-1]) if visible.rows else None,
            sections=sections,
            generator=LLM_SUMMARIZED,
        )
    with _stage("reference", timings):
        reference = tuple(detect_all(visible, cfg.detector))
    claims = tuple(report_claims(report))
    return RunResult(
        mode=LLM_ONLY,
        report=report,
        insights=claims,
        leak_count=leaks,
        facts_sent=len(visible),
        rows_processed=len(visible),
        rows_total=len(d),
        reference_insights=reference,
        analysis_insights=claims,
        vault=vault if len(vault) else None,
    )


def _finish_fragments(
    mode: str,
    d: Dataset,
    cfg: PipelineConfig,
    fragments: Sequence[_Fragment],
    timings: dict[str, float],
) -> RunResult:
    vault = _vault(d, cfg)
    results = _fan_out(fragments, cfg, vault, timings)
    merged = merge_chunk_results([r.insights for r in results])
    reference = merge_chunk_results([r.reference for r in results])
    # The summary copies numbers the analysis step already produced.
    report, leaks = _summarize(merged, cfg, vault, timings, precomputed=True)
    return RunResult(
        mode=mode,
        report=report,
        insights=tuple(report_claims(report)),
        leak_count=leaks + sum(r.leaks for r in results),
        facts_sent=sum(r.items for r in results) + len(merged),
        rows_processed=len(d),
        rows_total=len(d),
        reference_insights=tuple(reference),
        analysis_insights=tuple(merged),
        vault=vault if len(vault) else None,
    )


def _run_chunked(d: Dataset, cfg: PipelineConfig, timings: dict[str, float]) -> RunResult:
    with _stage("chunk", timings):
        plan = plan_from_config(d, cfg.chunk)
    logger.info("llm_chunked: %d chunks (%s)", len(plan), plan.strategy)
    fragments = [
        _Fragment(dataset=part, header=_rows_header(part, cfg, chunk=index))
        for index, part in enumerate(plan.datasets(d))
    ]
    return _finish_fragments(LLM_CHUNKED, d, cfg, fragments, timings)


def _metric_columns(d: Dataset, metric: str) -> dict:
    spec = d.metrics[metric]
    names = [name for name in (spec.numerator, spec.denominator) if name] + [metric]
    return {name: d.metrics[name] for name in d.metrics if name in names}


def metric_fragment(d: Dataset, metric: str, dims: Mapping[str, str] | None = None) -> Dataset:
    """Rows of one slice carrying only the metric (and its ratio inputs)."""
    registry = _metric_columns(d, metric)
    source = d.select(dims) if dims else d
    rows = [
        Record(date=r.date, dims=dict(r.dims), values={name: r.values.get(name) for name in registry})
        for r in source.rows
    ]
    return Dataset(rows=tuple(rows), metrics=registry, dimensions=d.dimensions)


def daily_fragment(d: Dataset, metric: str) -> Dataset:
    """One row per date: the metric (and its ratio inputs) aggregated over every slice."""
    registry = _metric_columns(d, metric)
    groups: dict[Any, list[Record]] = {}
    for record in d.rows:
        groups.setdefault(record.date, []).append(record)
    rows = [
        Record(date=day, dims={}, values={name: aggregate_rows(d, members, name) for name in registry})
        for day, members in sorted(groups.items())
    ]
    return Dataset(rows=tuple(rows), metrics=registry, dimensions=())


def _run_sequential(d: Dataset, cfg: PipelineConfig, timings: dict[str, float]) -> RunResult:
    fragments: list[_Fragment] = []
    if d.rows:
        dates = d.dates
        with _stage("fragments", timings):
            for metric in d.metrics:
                narrow = metric_fragment(d, metric)
                top = [
                    item
                    for item in detect_top_dimensions(narrow, cfg.detector, (dates[0], dates[-1]))
                    if item.metric == metric
                ]
                daily = daily_fragment(d, metric)
                fragments.append(
                    _Fragment(daily, _rows_header(daily, cfg, context=[item.to_dict() for item in top]))
                )
                for item in top:
                    piece = metric_fragment(d, metric, item.dims)
                    fragments.append(_Fragment(piece, _rows_header(piece, cfg, slice=dict(item.dims))))
        logger.info("sequential: %d fragments", len(fragments))
    return _finish_fragments(SEQUENTIAL, d, cfg, fragments, timings)


_RUNNERS: dict[str, Callable[[Dataset, PipelineConfig, dict[str, float]], RunResult]] = {
    RULE_ONLY: _run_rule_only,
    LLM_ONLY: _run_llm_only,
    LLM_CHUNKED: _run_chunked,
    SEQUENTIAL: _run_sequential,
    HYBRID: _run_hybrid,
}


def run(d: Dataset, cfg: PipelineConfig) -> RunResult:
    timings: dict[str, float] = {}
    result = _RUNNERS[cfg.mode](d, cfg, timings)
    for stage, seconds in sorted(timings.items()):
        logger.info("%s %s: %.3fs", cfg.mode, stage, seconds)
    return replace(result, timings=timings)

