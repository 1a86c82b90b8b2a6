from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datamodel import AtomicInsight, Dataset, Direction, InsightKind, Record, sort_insights
from .exceptions import ConfigError, InsightError
from .wording import sentence

logger = logging.getLogger(__name__)

SCALE_MAD = 1.4826
# Relative floor for a zero MAD: constant windows still flag any deviation.
MAD_EPSILON = 1e-9

Period = tuple[date, date]


@dataclass(frozen=True)
class DetectorConfig:
    window: int = 28
    z_threshold: float = 3.0
    spike_ratio: float = 2.0
    spike_recovery_ratio: float = 1.5
    spike_recovery_span: int = 3
    min_history: int = 30
    top_n: int = 3
    comparison_delta: float = 0.25

    def __post_init__(self) -> None:
        if self.window < 3:
            raise ConfigError("window는 3 이상이어야 합니다.")
        if self.spike_ratio <= 1 or self.spike_recovery_ratio <= 1:
            raise ConfigError("spike 비율은 1보다 커야 합니다.")
        if self.z_threshold <= 0 or self.comparison_delta <= 0:
            raise ConfigError("임계값은 0보다 커야 합니다.")
        if self.spike_recovery_span < 1 or self.min_history < 0:
            raise ConfigError("spike_recovery_span/min_history 값이 잘못되었습니다.")
        if self.top_n < 1:
            raise ConfigError("top_n은 1 이상이어야 합니다.")


@dataclass(frozen=True)
class SeriesPoint:
    index: int
    value: float
    baseline: float
    score: float


def _ratio(numerator: float, denominator: float) -> float | None:
    return numerator / denominator if denominator != 0 else None


def aggregate_rows(d: Dataset, rows: Sequence[Record], metric: str) -> float | None:
    """Additive: plain sum. Ratio: sum(numerator)/sum(denominator)."""
    spec = d.metrics[metric]
    if spec.is_ratio:
        pairs = [
            (r.values.get(spec.numerator), r.values.get(spec.denominator))
            for r in rows
        ]
        pairs = [(n, m) for n, m in pairs if n is not None and m is not None]
        if not pairs:
            return None
        return _ratio(sum(n for n, _ in pairs), sum(m for _, m in pairs))
    values = [r.values.get(metric) for r in rows]
    values = [v for v in values if v is not None]
    return sum(values) if values else None


def metric_series(
    d: Dataset, metric: str, dims: Mapping[str, str] | None = None
) -> tuple[list[date], np.ndarray]:
    """Per-date aggregate of one metric; dates without a defined value are skipped."""
    source = d.select(dims) if dims else d
    groups: dict[date, list[Record]] = {}
    for record in source.rows:
        groups.setdefault(record.date, []).append(record)
    dates: list[date] = []
    values: list[float] = []
    for day in sorted(groups):
        aggregate = aggregate_rows(d, groups[day], metric)
        if aggregate is not None:
            dates.append(day)
            values.append(aggregate)
    return dates, np.asarray(values, dtype=float)


def robust_baseline(window: np.ndarray) -> tuple[float, float]:
    """(median, scale) with scale = 1.4826·MAD and a relative floor when MAD is 0."""
    median = float(np.median(window))
    scale = SCALE_MAD * float(np.median(np.abs(window - median)))
    if scale == 0:
        scale = MAD_EPSILON * abs(median) or MAD_EPSILON
    return median, scale


def shift_points(x: np.ndarray, cfg: DetectorConfig) -> list[SeriesPoint]:
    w = cfg.window
    if len(x) < w + 1:
        return []
    windows = sliding_window_view(x, w)
    points = []
    for t in range(w, len(x)):
        median, scale = robust_baseline(windows[t - w])
        z = (float(x[t]) - median) / scale
        if abs(z) >= cfg.z_threshold:
            points.append(SeriesPoint(t, float(x[t]), median, z))
    return points


def spike_points(x: np.ndarray, cfg: DetectorConfig) -> list[SeriesPoint]:
    w, span = cfg.window, cfg.spike_recovery_span
    if len(x) < w + 1:
        return []
    windows = sliding_window_view(x, w)
    points = []
    for t in range(w, len(x)):
        median = float(np.median(windows[t - w]))
        if median <= 0 or x[t] < cfg.spike_ratio * median:
            continue
        recovery = x[t + 1 : t + span + 1]
        if recovery.size and bool(np.any(recovery <= cfg.spike_recovery_ratio * median)):
            points.append(SeriesPoint(t, float(x[t]), median, float(x[t]) / median))
    return points


def high_points(x: np.ndarray, cfg: DetectorConfig) -> list[SeriesPoint]:
    points = []
    if len(x) == 0:
        return points
    best = float(x[0])
    for t in range(1, len(x)):
        value = float(x[t])
        if t >= cfg.min_history and value > best:
            score = (value - best) / abs(best) if best != 0 else 1.0
            points.append(SeriesPoint(t, value, best, score))
        best = max(best, value)
    return points


def _insight(
    kind: InsightKind,
    metric: str,
    dims: Mapping[str, str],
    period: Period,
    value: float,
    baseline: float,
    score: float,
) -> AtomicInsight:
    return AtomicInsight(
        kind=kind,
        metric=metric,
        dims=dict(dims),
        period_start=period[0],
        period_end=period[1],
        value=value,
        baseline=baseline,
        score=score,
        description=sentence(kind, value, baseline, score),
    )


def _point_insights(
    d: Dataset,
    kind: InsightKind,
    finder,
    cfg: DetectorConfig,
    dims: Mapping[str, str] | None = None,
) -> list[AtomicInsight]:
    found = []
    for metric in d.metrics:
        dates, x = metric_series(d, metric, dims)
        for point in finder(x, cfg):
            day = dates[point.index]
            found.append(
                _insight(kind, metric, dims or {}, (day, day), point.value, point.baseline, point.score)
            )
    return found


def detect_anomalous_shifts(d: Dataset, cfg: DetectorConfig) -> list[AtomicInsight]:
    return _point_insights(d, InsightKind.ANOMALOUS_SHIFT, shift_points, cfg)


def detect_dimension_anomalies(d: Dataset, cfg: DetectorConfig) -> list[AtomicInsight]:
    found = []
    for dimension in d.dimensions:
        for value in d.dimension_values(dimension):
            found.extend(
                _point_insights(d, InsightKind.DIMENSION_ANOMALY, shift_points, cfg, {dimension: value})
            )
    return found


def detect_spikes(d: Dataset, cfg: DetectorConfig) -> list[AtomicInsight]:
    return _point_insights(d, InsightKind.SPIKE, spike_points, cfg)


def detect_all_time_highs(d: Dataset, cfg: DetectorConfig) -> list[AtomicInsight]:
    return _point_insights(d, InsightKind.ALL_TIME_HIGH, high_points, cfg)


def _period_rows(d: Dataset, period: Period) -> Dataset:
    rows = d.select(None, period[0], period[1])
    if not rows.rows:
        raise InsightError(f"{period[0]}~{period[1]} 기간에 데이터가 없습니다.", code="empty_period")
    return rows


def _slice_aggregates(d: Dataset, rows: Dataset, metric: str, dimension: str) -> dict[str, float]:
    groups: dict[str, list[Record]] = {}
    for record in rows.rows:
        groups.setdefault(record.dims.get(dimension, ""), []).append(record)
    aggregates = {}
    for value, members in groups.items():
        aggregate = aggregate_rows(d, members, metric)
        if aggregate is not None:
            aggregates[value] = aggregate
    return aggregates


def detect_top_dimensions(d: Dataset, cfg: DetectorConfig, period: Period) -> list[AtomicInsight]:
    rows = _period_rows(d, period)
    found = []
    for metric, spec in d.metrics.items():
        overall = aggregate_rows(d, rows.rows, metric)
        for dimension in d.dimensions:
            aggregates = _slice_aggregates(d, rows, metric, dimension)
            if spec.direction is Direction.LOWER_IS_BETTER:
                ranking = sorted(aggregates.items(), key=lambda item: (item[1], item[0]))
            else:
                ranking = sorted(aggregates.items(), key=lambda item: (-item[1], item[0]))
            for rank, (value, aggregate) in enumerate(ranking[: cfg.top_n], start=1):
                if spec.is_ratio:
                    score, baseline = 1.0 / rank, overall if overall is not None else 0.0
                else:
                    total = sum(aggregates.values())
                    score, baseline = (aggregate / total if total else 0.0), total
                found.append(
                    _insight(
                        InsightKind.TOP_DIMENSION,
                        metric,
                        {dimension: value},
                        period,
                        aggregate,
                        baseline,
                        score,
                    )
                )
    return found


def _growth(before: float | None, after: float | None) -> float | None:
    if before is None or after is None or before == 0:
        return None
    return (after - before) / before


def detect_dimension_comparison(
    d: Dataset, cfg: DetectorConfig, period_a: Period, period_b: Period
) -> tuple[list[AtomicInsight], int]:
    """Slices whose growth from period_a to period_b departs from the overall growth.

    Returns (insights, skipped) where skipped counts slices with a zero
    baseline aggregate.
    """
    if not (period_a[1] < period_b[0] or period_b[1] < period_a[0]):
        raise InsightError("비교 기간이 서로 겹칩니다.", code="overlapping_periods")
    rows_a = _period_rows(d, period_a)
    rows_b = _period_rows(d, period_b)

    found = []
    skipped = 0
    for metric in d.metrics:
        overall = _growth(aggregate_rows(d, rows_a.rows, metric), aggregate_rows(d, rows_b.rows, metric))
        if overall is None:
            skipped += 1
            continue
        for dimension in d.dimensions:
            before = _slice_aggregates(d, rows_a, metric, dimension)
            after = _slice_aggregates(d, rows_b, metric, dimension)
            for value in sorted(set(before) | set(after)):
                growth = _growth(before.get(value), after.get(value))
                if growth is None:
                    skipped += 1
                    continue
                if abs(growth - overall) >= cfg.comparison_delta:
                    found.append(
                        _insight(
                            InsightKind.DIMENSION_COMPARISON,
                            metric,
                            {dimension: value},
                            period_b,
                            after[value],
                            before[value],
                            growth - overall,
                        )
                    )
    if skipped:
        logger.debug("dimension comparison skipped %d slices with a zero baseline", skipped)
    return found, skipped


def comparison_periods(dates: Sequence[date], window: int) -> tuple[Period, Period] | None:
    """Last ``window`` dates against the ``window`` dates before them."""
    if len(dates) < 2 * window:
        return None
    return (dates[-2 * window], dates[-window - 1]), (dates[-window], dates[-1])


def detect_all(d: Dataset, cfg: DetectorConfig) -> list[AtomicInsight]:
    if not d.rows:
        return []
    found = [
        *detect_anomalous_shifts(d, cfg),
        *detect_dimension_anomalies(d, cfg),
        *detect_spikes(d, cfg),
        *detect_all_time_highs(d, cfg),
    ]
    dates = d.dates
    found.extend(detect_top_dimensions(d, cfg, (dates[0], dates[-1])))
    periods = comparison_periods(dates, cfg.window)
    if periods is not None:
        compared, _ = detect_dimension_comparison(d, cfg, *periods)
        found.extend(compared)
    return sort_insights(found)


def detect_fragment(d: Dataset, cfg: DetectorConfig, dims: Mapping[str, str] | None = None) -> list[AtomicInsight]:
    """Rule reading of one data fragment: everything for the whole fragment,
    shifts of the slice (as dimension anomalies) when ``dims`` names one."""
    if not dims:
        return detect_all(d, cfg)
    found = _point_insights(d, InsightKind.DIMENSION_ANOMALY, shift_points, cfg, dims)
    return sort_insights(found)
