"""Synthetic fixtures and the pipeline benchmark.

Every number here comes from the simulated model, so reports are labelled
"simulated": they reproduce orderings between pipeline modes, not the
absolute figures of a production model.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from typing import Any, Mapping, Sequence

import numpy as np

from .anonymize import DEFAULT_SALT
from .chunking import BUDGET, ChunkConfig, estimate_tokens, serialize_rows
from .datamodel import (
    AtomicInsight,
    Dataset,
    Direction,
    InsightKind,
    MetricKind,
    MetricSpec,
    Record,
)
from .detectors import DetectorConfig, detect_all
from .exceptions import FixtureError, InsightEngineError
from .llm import LlmHandle, SimConfig
from .narrative import check_fidelity
from .pipeline import MODES, RULE_ONLY, PipelineConfig, run

logger = logging.getLogger(__name__)

SPIKE_FACTOR = 3.0
DIP_FACTOR = 0.4
HIGH_FACTOR = 1.25
SIMULATED_LABEL = "simulated"

FIXTURE_METRICS: dict[str, MetricSpec] = {
    "sessions": MetricSpec("sessions", unit="count", direction=Direction.HIGHER_IS_BETTER),
    "clicks": MetricSpec("clicks", unit="count", direction=Direction.HIGHER_IS_BETTER),
    "cost": MetricSpec("cost", unit="USD"),
    "cpc": MetricSpec(
        "cpc",
        kind=MetricKind.RATIO,
        numerator="cost",
        denominator="clicks",
        unit="USD",
        direction=Direction.LOWER_IS_BETTER,
    ),
}
# Level of each additive metric relative to sessions.
METRIC_SCALE = {"sessions": 1.0, "clicks": 0.12, "cost": 0.042}
# Cost keeps cents, the counters are whole numbers.
METRIC_DECIMALS = {"sessions": 0, "clicks": 0, "cost": 2}


@dataclass(frozen=True)
class FixtureSpec:
    days: int = 730
    start: date = date(2022, 1, 1)
    dimensions: Mapping[str, tuple[str, ...]] = field(
        default_factory=lambda: {"account": ("Acme Corp", "Globex", "Initech")}
    )
    spikes: int = 2
    shifts: int = 1
    highs: int = 1
    noise: float = 0.02
    weekly_amplitude: float = 0.1
    base_level: float = 1000.0

    @property
    def events(self) -> int:
        return self.spikes + self.shifts + self.highs


@dataclass(frozen=True)
class PlantedEvent:
    kind: InsightKind
    metric: str
    dims: dict[str, str]
    day: date

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": str(self.kind),
            "metric": self.metric,
            "dims": dict(self.dims),
            "day": self.day.isoformat(),
        }


@dataclass(frozen=True)
class Fixture:
    dataset: Dataset
    oracle: tuple[AtomicInsight, ...]
    names: tuple[str, ...]
    seed: int
    spec: FixtureSpec = field(default_factory=FixtureSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    planted: tuple[PlantedEvent, ...] = ()


def _slices(dimensions: Mapping[str, Sequence[str]]) -> list[dict[str, str]]:
    names = sorted(dimensions)
    return [dict(zip(names, combo)) for combo in itertools.product(*(dimensions[n] for n in names))]


def _event_kinds(spec: FixtureSpec) -> list[InsightKind]:
    """Kinds interleaved so each kind is spread over the whole period."""
    remaining = {
        InsightKind.SPIKE: spec.spikes,
        InsightKind.DIMENSION_ANOMALY: spec.shifts,
        InsightKind.ALL_TIME_HIGH: spec.highs,
    }
    kinds: list[InsightKind] = []
    while any(remaining.values()):
        for kind in list(remaining):
            if remaining[kind]:
                kinds.append(kind)
                remaining[kind] -= 1
    return kinds


def _event_positions(spec: FixtureSpec, cfg: DetectorConfig) -> list[int]:
    first = cfg.min_history + cfg.window
    if spec.days < first:
        raise FixtureError(
            f"{spec.days}일은 최소 이력 {cfg.min_history}일과 창 {cfg.window}일을 합친 것보다 짧습니다.",
            code="unplantable",
        )
    count = spec.events
    if count == 0:
        return []
    last = spec.days - cfg.spike_recovery_span - 2
    if last < first:
        raise FixtureError("이벤트를 심을 날짜 범위가 없습니다.", code="unplantable")
    if count == 1:
        return [first]
    spacing = (last - first) // (count - 1)
    needed = cfg.window + cfg.spike_recovery_span + 1
    if spacing < needed:
        raise FixtureError(
            f"이벤트 {count}개는 간격 {spacing}일로 겹칩니다 (최소 {needed}일 필요).",
            code="unplantable",
        )
    return [first + k * spacing for k in range(count)]


def _baseline(spec: FixtureSpec, slices: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    t = np.arange(spec.days)
    weekly = 1.0 + spec.weekly_amplitude * np.sin(2 * np.pi * (t % 7) / 7)
    levels = spec.base_level / (np.arange(slices) + 1.0)
    series = {}
    for metric, scale in METRIC_SCALE.items():
        noise = 1.0 + spec.noise * rng.standard_normal((slices, spec.days))
        series[metric] = levels[:, None] * scale * weekly[None, :] * noise
    return series


def _plant(series: np.ndarray, kind: InsightKind, day: int, slice_index: int) -> None:
    if kind is InsightKind.SPIKE:
        series[:, day] *= SPIKE_FACTOR
    elif kind is InsightKind.DIMENSION_ANOMALY:
        series[slice_index, day] *= DIP_FACTOR
    else:
        series[:, day] = HIGH_FACTOR * series[:, :day].max(axis=1)


def _planted_found(event: PlantedEvent, oracle: Sequence[AtomicInsight]) -> bool:
    return any(
        item.kind is event.kind
        and item.metric == event.metric
        and item.dims == event.dims
        and item.period_start == event.day
        for item in oracle
    )


def generate_fixture(
    spec: FixtureSpec | None = None,
    seed: int = 0,
    detector: DetectorConfig | None = None,
) -> Fixture:
    """Baseline series with planted spikes, single-slice dips and all-time highs.

    The oracle is the rule engine's reading of the generated data; every
    planted event is checked to be part of it.
    """
    spec = spec or FixtureSpec()
    cfg = detector or DetectorConfig()
    if spec.noise < 0 or spec.base_level <= 0:
        raise FixtureError("noise와 base_level 값이 잘못되었습니다.", code="unplantable")
    slices = _slices(spec.dimensions)
    if not slices:
        raise FixtureError("차원 값이 비어 있습니다.", code="unplantable")
    positions = _event_positions(spec, cfg)

    rng = np.random.default_rng(seed)
    series = _baseline(spec, len(slices), rng)
    additive = list(METRIC_SCALE)
    planted = []
    dips = 0
    for k, (kind, position) in enumerate(zip(_event_kinds(spec), positions)):
        # Offset by k // n so kind and metric do not cycle in lockstep.
        metric = additive[(k + k // len(additive)) % len(additive)]
        slice_index = dips % len(slices)
        if kind is InsightKind.DIMENSION_ANOMALY:
            dips += 1
        _plant(series[metric], kind, position, slice_index)
        dims = dict(slices[slice_index]) if kind is InsightKind.DIMENSION_ANOMALY else {}
        planted.append(PlantedEvent(kind, metric, dims, spec.start + timedelta(days=position)))

    for metric, decimals in METRIC_DECIMALS.items():
        series[metric] = np.round(series[metric], decimals)

    records = []
    for t in range(spec.days):
        day = spec.start + timedelta(days=t)
        for s, dims in enumerate(slices):
            values = {metric: float(series[metric][s, t]) for metric in METRIC_SCALE}
            values["cpc"] = values["cost"] / values["clicks"] if values["clicks"] else None
            records.append(Record(date=day, dims=dict(dims), values=values))
    dataset = Dataset.build(records, FIXTURE_METRICS, sorted(spec.dimensions))

    oracle = tuple(detect_all(dataset, cfg))
    missing = [event for event in planted if not _planted_found(event, oracle)]
    if missing:
        first = missing[0]
        raise FixtureError(
            f"심은 이벤트 {first.kind} ({first.metric}, {first.day})가 탐지되지 않습니다.",
            code="unplantable",
        )
    names = tuple(sorted({value for dims in slices for value in dims.values()}))
    logger.info("fixture seed=%d: %d rows, %d planted, %d oracle insights", seed, len(dataset), len(planted), len(oracle))
    return Fixture(
        dataset=dataset,
        oracle=oracle,
        names=names,
        seed=seed,
        spec=spec,
        detector=cfg,
        planted=tuple(planted),
    )


def _overlaps(found: AtomicInsight, expected: AtomicInsight) -> bool:
    return found.period_start <= expected.period_end and expected.period_start <= found.period_end


def measure_recall(detected: Sequence[AtomicInsight], oracle: Sequence[AtomicInsight]) -> float:
    """Share of oracle insights matched on kind, metric and dims with overlapping periods."""
    if not oracle:
        return 1.0
    by_key: dict[tuple[Any, ...], list[AtomicInsight]] = {}
    for item in detected:
        by_key.setdefault((str(item.kind), item.metric, item.dims_items), []).append(item)
    matched = sum(
        1
        for expected in oracle
        if any(_overlaps(found, expected) for found in by_key.get((str(expected.kind), expected.metric, expected.dims_items), ()))
    )
    return matched / len(oracle)


def scan_hallucinations(claims: Sequence[AtomicInsight], names: Sequence[str]) -> int:
    """Dimension values in report claims that are not among the known names."""
    known = set(names)
    return sum(1 for claim in claims for value in claim.dims.values() if value not in known)


@dataclass(frozen=True)
class BenchRow:
    mode: str
    status: str = "ok"
    math_precision: float | None = None
    claims_checked: int = 0
    claims_correct: int = 0
    hallucinations: int = 0
    recall: float | None = None
    rows_fraction: float | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def hallucinated(self) -> bool:
        """Per-report reading: did the report carry at least one invented name."""
        return self.hallucinations > 0


@dataclass(frozen=True)
class BenchReport:
    seed: int
    days: int
    rows: int
    planted: int
    oracle_size: int
    budget_tokens: int
    sim: dict[str, Any]
    results: tuple[BenchRow, ...]

    def row(self, mode: str) -> BenchRow:
        for item in self.results:
            if item.mode == mode:
                return item
        raise KeyError(mode)


def dataset_tokens(d: Dataset) -> int:
    return estimate_tokens(serialize_rows(d))


def _bench_config(fixture: Fixture, mode: str, sim: SimConfig, budget: int, jobs: int, salt: str) -> PipelineConfig:
    return PipelineConfig(
        mode=mode,
        detector=fixture.detector,
        chunk=ChunkConfig(strategy=BUDGET, budget_tokens=budget),
        llm=None if mode == RULE_ONLY else LlmHandle.simulated(sim),
        protected_names=fixture.names,
        jobs=jobs,
        summary_budget_tokens=None,
        salt=salt,
    )


def _bench_row(fixture: Fixture, mode: str, cfg: PipelineConfig) -> BenchRow:
    try:
        result = run(fixture.dataset, cfg)
    except InsightEngineError as exc:
        logger.error("bench mode %s failed: %s", mode, exc)
        return BenchRow(mode=mode, status="failed", error=f"{exc.code}: {exc}")
    fidelity = check_fidelity(result.report, result.reference_insights, result.precalc)
    if result.vault is not None:
        hallucinations = result.leak_count
    else:
        hallucinations = scan_hallucinations(result.insights, fixture.names)
    return BenchRow(
        mode=mode,
        math_precision=fidelity.precision,
        claims_checked=fidelity.claims_checked,
        claims_correct=fidelity.claims_correct,
        hallucinations=hallucinations,
        recall=measure_recall(result.insights, fixture.oracle),
        rows_fraction=result.rows_processed / result.rows_total if result.rows_total else 1.0,
    )


def run_bench(
    fixture: Fixture,
    modes: Sequence[str] = MODES,
    sim: SimConfig | None = None,
    *,
    budget_fraction: float = 0.4,
    jobs: int = 1,
    salt: str = DEFAULT_SALT,
) -> BenchReport:
    """Run every mode on the fixture with the simulated model; a failing mode is marked, not fatal."""
    sim = sim or SimConfig(seed=fixture.seed)
    if not 0 < budget_fraction <= 1:
        raise FixtureError("budget_fraction은 0보다 크고 1 이하여야 합니다.", code="config")
    budget = max(1, int(dataset_tokens(fixture.dataset) * budget_fraction))
    results = []
    for mode in modes:
        cfg = _bench_config(fixture, mode, sim, budget, jobs, salt)
        results.append(_bench_row(fixture, mode, cfg))
    sim_payload = asdict(sim)
    sim_payload.pop("scripted_responses", None)
    return BenchReport(
        seed=fixture.seed,
        days=fixture.spec.days,
        rows=len(fixture.dataset),
        planted=len(fixture.planted),
        oracle_size=len(fixture.oracle),
        budget_tokens=budget,
        sim=sim_payload,
        results=tuple(results),
    )


@dataclass(frozen=True)
class AggregateRow:
    mode: str
    runs: int
    failures: int
    pooled_precision: float | None
    precision_mean: float | None
    precision_std: float | None
    hallucinations_mean: float | None
    hallucinations_std: float | None
    hallucinated_share: float | None
    recall_mean: float | None
    recall_std: float | None


def _mean_std(values: Sequence[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    array = np.asarray(values, dtype=float)
    return float(array.mean()), float(array.std())


def aggregate_reports(reports: Sequence[BenchReport]) -> list[AggregateRow]:
    """Per-mode mean and standard deviation across seeds."""
    modes: list[str] = []
    for report in reports:
        modes.extend(item.mode for item in report.results if item.mode not in modes)
    rows = []
    for mode in modes:
        members = [item for report in reports for item in report.results if item.mode == mode]
        ok = [item for item in members if item.ok]
        checked = sum(item.claims_checked for item in ok)
        precision_mean, precision_std = _mean_std([i.math_precision for i in ok if i.math_precision is not None])
        hall_mean, hall_std = _mean_std([float(i.hallucinations) for i in ok])
        recall_mean, recall_std = _mean_std([i.recall for i in ok if i.recall is not None])
        rows.append(
            AggregateRow(
                mode=mode,
                runs=len(members),
                failures=len(members) - len(ok),
                pooled_precision=sum(i.claims_correct for i in ok) / checked if checked else None,
                precision_mean=precision_mean,
                precision_std=precision_std,
                hallucinations_mean=hall_mean,
                hallucinations_std=hall_std,
                hallucinated_share=sum(i.hallucinated for i in ok) / len(ok) if ok else None,
                recall_mean=recall_mean,
                recall_std=recall_std,
            )
        )
    return rows


# --- output ---------------------------------------------------------------------------

FOOTER = (
    "Processing efficiency is read two ways: math precision is the share of numbers in a "
    "report that match the rule engine's reading of the data the model saw, and recall is "
    "the share of oracle insights the report mentions. Reader satisfaction (likes to "
    "dislikes) needs human readers and is not measured here."
)


def _rounded(value: float | None) -> float | None:
    return None if value is None else round(value, 6)


def bench_payload(reports: Sequence[BenchReport]) -> dict[str, Any]:
    return {
        "label": SIMULATED_LABEL,
        "runs": [
            {
                "seed": report.seed,
                "days": report.days,
                "rows": report.rows,
                "planted": report.planted,
                "oracle_size": report.oracle_size,
                "budget_tokens": report.budget_tokens,
                "sim": {key: _rounded(value) if isinstance(value, float) else value for key, value in report.sim.items()},
                "results": [
                    {
                        "mode": item.mode,
                        "status": item.status,
                        "math_precision": _rounded(item.math_precision),
                        "claims_checked": item.claims_checked,
                        "claims_correct": item.claims_correct,
                        "hallucinations": item.hallucinations,
                        "hallucinated_report": item.hallucinated,
                        "recall": _rounded(item.recall),
                        "rows_fraction": _rounded(item.rows_fraction),
                        "error": item.error,
                    }
                    for item in report.results
                ],
            }
            for report in reports
        ],
        "aggregate": [
            {key: _rounded(value) if isinstance(value, float) else value for key, value in asdict(row).items()}
            for row in aggregate_reports(reports)
        ],
    }


def bench_json(reports: Sequence[BenchReport]) -> str:
    return json.dumps(bench_payload(reports), ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _percent(value: float | None) -> str:
    return "n/a" if value is None or math.isnan(value) else f"{value * 100:.1f}%"


def _cell(item: BenchRow, text: str) -> str:
    return text if item.ok else "failed"


def _run_markdown(report: BenchReport) -> list[str]:
    sim = report.sim
    lines = [
        f"## Seed {report.seed} ({SIMULATED_LABEL})",
        "",
        f"{report.days} days, {report.rows} rows, {report.planted} planted events, "
        f"{report.oracle_size} oracle insights, token budget {report.budget_tokens}. "
        f"Simulated model: p_math_error={sim.get('p_math_error')}, "
        f"p_hallucination={sim.get('p_hallucination')}, miss_rate={sim.get('miss_rate')}.",
        "",
        "| Processing pipeline type | Math precision | Claims checked | Hallucinations | Recall | Rows processed |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for item in report.results:
        lines.append(
            "| {mode} | {precision} | {checked} | {hall} | {recall} | {rows} |".format(
                mode=item.mode,
                precision=_cell(item, _percent(item.math_precision)),
                checked=_cell(item, str(item.claims_checked)),
                hall=_cell(item, str(item.hallucinations)),
                recall=_cell(item, _percent(item.recall)),
                rows=_cell(item, _percent(item.rows_fraction)),
            )
        )
    failures = [item for item in report.results if not item.ok]
    if failures:
        lines.append("")
        lines += [f"- {item.mode} failed: {item.error}" for item in failures]
    lines.append("")
    return lines


def _std(mean: float | None, std: float | None, percent: bool = True) -> str:
    if mean is None:
        return "n/a"
    if percent:
        return f"{mean * 100:.1f}% ± {(std or 0) * 100:.1f}"
    return f"{mean:.2f} ± {std or 0:.2f}"


def bench_markdown(reports: Sequence[BenchReport]) -> str:
    lines = [f"# Pipeline benchmark ({SIMULATED_LABEL})", ""]
    for report in reports:
        lines += _run_markdown(report)
    if len(reports) > 1:
        lines += [
            f"## Across {len(reports)} seeds",
            "",
            "| Processing pipeline type | Pooled precision | Precision | Hallucinations per report "
            "| Reports with hallucinations | Recall | Failed runs |",
            "| --- | --- | --- | --- | --- | --- | --- |",
        ]
        for row in aggregate_reports(reports):
            lines.append(
                f"| {row.mode} | {_percent(row.pooled_precision)} | {_std(row.precision_mean, row.precision_std)} "
                f"| {_std(row.hallucinations_mean, row.hallucinations_std, percent=False)} "
                f"| {_percent(row.hallucinated_share)} "
                f"| {_std(row.recall_mean, row.recall_std)} | {row.failures} |"
            )
        lines.append("")
    lines += [f"_{FOOTER}_", ""]
    return "\n".join(lines)
