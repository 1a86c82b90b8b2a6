from __future__ import annotations

from datetime import date, timedelta
from typing import Mapping, Sequence

from insights.datamodel import (
    AtomicInsight,
    Dataset,
    Direction,
    InsightKind,
    MetricKind,
    MetricSpec,
    Record,
)
from insights.wording import sentence

START = date(2024, 1, 1)


def day(offset: int) -> date:
    return START + timedelta(days=offset)


def ad_registry() -> dict[str, MetricSpec]:
    return {
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


def series_dataset(values: Sequence[float | None], metric: str = "sessions") -> Dataset:
    rows = [
        Record(day(i), {}, {metric: None if value is None else float(value)})
        for i, value in enumerate(values)
    ]
    return Dataset.build(rows, {metric: MetricSpec(metric)})


def sliced_dataset(
    series: Mapping[str, Sequence[float | None]],
    metric: str = "sessions",
    dimension: str = "account",
) -> Dataset:
    rows = [
        Record(day(i), {dimension: name}, {metric: None if value is None else float(value)})
        for name, values in series.items()
        for i, value in enumerate(values)
    ]
    return Dataset.build(rows, {metric: MetricSpec(metric)}, (dimension,))


def ad_dataset(rows: Sequence[tuple[int, str, float | None, float | None]]) -> Dataset:
    """(day offset, account, clicks, cost) tuples; cpc is derived."""
    records = []
    for offset, account, clicks, cost in rows:
        cpc = cost / clicks if clicks and cost is not None else None
        records.append(
            Record(day(offset), {"account": account}, {"clicks": clicks, "cost": cost, "cpc": cpc})
        )
    return Dataset.build(records, ad_registry(), ("account",))


def make_insight(
    kind: InsightKind = InsightKind.SPIKE,
    metric: str = "sessions",
    dims: Mapping[str, str] | None = None,
    start: int = 40,
    end: int | None = None,
    value: float = 300.0,
    baseline: float = 100.0,
    score: float = 3.0,
) -> AtomicInsight:
    return AtomicInsight(
        kind=kind,
        metric=metric,
        dims=dict(dims or {}),
        period_start=day(start),
        period_end=day(start if end is None else end),
        value=value,
        baseline=baseline,
        score=score,
        description=sentence(kind, value, baseline, score),
    )
