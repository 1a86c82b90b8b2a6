from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import date
from enum import StrEnum
from typing import Any, Iterable, Mapping, Sequence

from .exceptions import DatasetError

# Missing cells are stored as None, never as a sentinel number.
Value = float | None


class MetricKind(StrEnum):
    ADDITIVE = "additive"
    RATIO = "ratio"


class Direction(StrEnum):
    HIGHER_IS_BETTER = "higher_is_better"
    LOWER_IS_BETTER = "lower_is_better"
    NEUTRAL = "neutral"


class InsightKind(StrEnum):
    ANOMALOUS_SHIFT = "anomalous_shift"
    DIMENSION_ANOMALY = "dimension_anomaly"
    SPIKE = "spike"
    ALL_TIME_HIGH = "all_time_high"
    TOP_DIMENSION = "top_dimension"
    DIMENSION_COMPARISON = "dimension_comparison"


KIND_ORDER: tuple[InsightKind, ...] = tuple(InsightKind)

METRIC_FIELDS = ("name", "kind", "numerator", "denominator", "unit", "direction")


@dataclass(frozen=True)
class MetricSpec:
    name: str
    kind: MetricKind = MetricKind.ADDITIVE
    numerator: str | None = None
    denominator: str | None = None
    unit: str = ""
    direction: Direction = Direction.NEUTRAL

    @property
    def is_ratio(self) -> bool:
        return self.kind is MetricKind.RATIO

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": str(self.kind),
            "numerator": self.numerator,
            "denominator": self.denominator,
            "unit": self.unit,
            "direction": str(self.direction),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> MetricSpec:
        if not isinstance(payload, Mapping):
            raise DatasetError("지표 정의는 JSON 객체여야 합니다.", code="schema")
        unknown = set(payload) - set(METRIC_FIELDS)
        if unknown:
            raise DatasetError(
                f"알 수 없는 지표 필드: {', '.join(sorted(unknown))}", code="schema"
            )
        name = str(payload.get("name") or "").strip()
        if not name:
            raise DatasetError("지표 이름이 비어 있습니다.", code="schema")
        try:
            kind = MetricKind(payload.get("kind") or MetricKind.ADDITIVE)
            direction = Direction(payload.get("direction") or Direction.NEUTRAL)
        except ValueError as exc:
            raise DatasetError(f"지표 '{name}' 정의가 잘못되었습니다: {exc}", code="schema") from exc
        return cls(
            name=name,
            kind=kind,
            numerator=payload.get("numerator") or None,
            denominator=payload.get("denominator") or None,
            unit=str(payload.get("unit") or ""),
            direction=direction,
        )


Registry = dict[str, MetricSpec]


def parse_registry(payload: Any) -> Registry:
    if not isinstance(payload, list):
        raise DatasetError("지표 레지스트리는 JSON 배열이어야 합니다.", code="schema")
    registry: Registry = {}
    for item in payload:
        spec = MetricSpec.from_dict(item)
        if spec.name in registry:
            raise DatasetError(f"지표 '{spec.name}'가 중복 정의되었습니다.", code="schema")
        registry[spec.name] = spec
    return registry


def registry_payload(metrics: Mapping[str, MetricSpec]) -> list[dict[str, Any]]:
    return [spec.to_dict() for spec in metrics.values()]


@dataclass(frozen=True)
class Record:
    date: date
    dims: dict[str, str] = field(default_factory=dict)
    values: dict[str, Value] = field(default_factory=dict)

    def key(self, dimensions: Sequence[str]) -> tuple[date, tuple[str, ...]]:
        return self.date, tuple(self.dims.get(name, "") for name in dimensions)

    def value(self, metric: str) -> Value:
        return self.values.get(metric)

    def with_values(self, values: Mapping[str, Value]) -> Record:
        return Record(date=self.date, dims=dict(self.dims), values=dict(values))


@dataclass(frozen=True)
class Dataset:
    rows: tuple[Record, ...] = ()
    metrics: Registry = field(default_factory=dict)
    dimensions: tuple[str, ...] = ()

    @classmethod
    def build(
        cls,
        rows: Iterable[Record],
        metrics: Mapping[str, MetricSpec],
        dimensions: Sequence[str] = (),
    ) -> Dataset:
        """Canonical constructor: rows sorted by (date, dimension tuple)."""
        dims = tuple(dimensions)
        ordered = sorted(rows, key=lambda record: record.key(dims))
        return cls(rows=tuple(ordered), metrics=dict(metrics), dimensions=dims)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def metric_names(self) -> tuple[str, ...]:
        return tuple(self.metrics)

    @property
    def dates(self) -> tuple[date, ...]:
        return tuple(sorted({record.date for record in self.rows}))

    def row_key(self, record: Record) -> tuple[date, tuple[str, ...]]:
        return record.key(self.dimensions)

    def with_rows(self, rows: Iterable[Record]) -> Dataset:
        return Dataset.build(rows, self.metrics, self.dimensions)

    def subset(self, indices: Iterable[int]) -> Dataset:
        return Dataset(
            rows=tuple(self.rows[index] for index in sorted(indices)),
            metrics=dict(self.metrics),
            dimensions=self.dimensions,
        )

    def select(
        self,
        dims: Mapping[str, str] | None = None,
        start: date | None = None,
        end: date | None = None,
    ) -> Dataset:
        wanted = dict(dims or {})
        picked = [
            record
            for record in self.rows
            if (start is None or record.date >= start)
            and (end is None or record.date <= end)
            and all(record.dims.get(name) == value for name, value in wanted.items())
        ]
        return Dataset(rows=tuple(picked), metrics=dict(self.metrics), dimensions=self.dimensions)

    def dimension_values(self, dimension: str) -> tuple[str, ...]:
        return tuple(sorted({record.dims.get(dimension, "") for record in self.rows}))

    def dependents(self, metric: str) -> tuple[str, ...]:
        """Ratio metrics that reference ``metric``."""
        return tuple(
            spec.name
            for spec in self.metrics.values()
            if spec.is_ratio and metric in (spec.numerator, spec.denominator)
        )


def row_payload(dataset: Dataset, record: Record) -> dict[str, Any]:
    payload: dict[str, Any] = {"date": record.date.isoformat()}
    for name in dataset.dimensions:
        payload[name] = record.dims.get(name, "")
    for name in dataset.metrics:
        payload[name] = record.values.get(name)
    return payload


@dataclass(frozen=True)
class AtomicInsight:
    kind: InsightKind
    metric: str
    dims: dict[str, str]
    period_start: date
    period_end: date
    value: float
    baseline: float
    score: float
    description: str = ""

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", InsightKind(self.kind))
        except ValueError as exc:
            raise DatasetError(f"알 수 없는 인사이트 종류: {self.kind}", code="bad_insight") from exc
        if self.period_start > self.period_end:
            raise DatasetError("인사이트 기간의 시작이 끝보다 늦습니다.", code="bad_insight")
        for name in ("value", "baseline", "score"):
            number = getattr(self, name)
            if isinstance(number, bool) or not isinstance(number, (int, float)):
                raise DatasetError(f"인사이트 {name} 값이 숫자가 아닙니다.", code="bad_insight")
            if not math.isfinite(number):
                raise DatasetError(f"인사이트 {name} 값이 유한하지 않습니다.", code="bad_insight")

    @property
    def dims_items(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted(self.dims.items()))

    @property
    def identity(self) -> tuple[Any, ...]:
        return (str(self.kind), self.metric, self.dims_items, self.period_start, self.period_end)

    @property
    def id(self) -> str:
        raw = json.dumps(
            [str(self.kind), self.metric, self.dims_items, self.period_start.isoformat(), self.period_end.isoformat()]
        )
        return "ins_" + hashlib.sha1(raw.encode("utf-8")).hexdigest()[:12]

    def sort_key(self) -> tuple[Any, ...]:
        return (
            self.period_start,
            KIND_ORDER.index(self.kind),
            self.metric,
            self.dims_items,
            self.period_end,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": str(self.kind),
            "metric": self.metric,
            "dims": dict(sorted(self.dims.items())),
            "period_start": self.period_start.isoformat(),
            "period_end": self.period_end.isoformat(),
            "value": self.value,
            "baseline": self.baseline,
            "score": self.score,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> AtomicInsight:
        try:
            dims = payload.get("dims") or {}
            if not isinstance(dims, Mapping):
                raise TypeError("dims")
            return cls(
                kind=payload["kind"],
                metric=str(payload["metric"]),
                dims={str(k): str(v) for k, v in dims.items()},
                period_start=date.fromisoformat(str(payload["period_start"])),
                period_end=date.fromisoformat(str(payload["period_end"])),
                value=float(payload["value"]),
                baseline=float(payload["baseline"]),
                score=float(payload["score"]),
                description=str(payload.get("description") or ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"인사이트 형식이 잘못되었습니다: {exc}", code="bad_insight") from exc


def sort_insights(insights: Iterable[AtomicInsight]) -> list[AtomicInsight]:
    return sorted(insights, key=AtomicInsight.sort_key)


def insights_to_json(insights: Iterable[AtomicInsight]) -> str:
    return json.dumps([item.to_dict() for item in insights], ensure_ascii=False, indent=2)


def insights_from_json(text: str) -> list[AtomicInsight]:
    payload = json.loads(text)
    if not isinstance(payload, list):
        raise DatasetError("인사이트 목록은 JSON 배열이어야 합니다.", code="bad_insight")
    return [AtomicInsight.from_dict(item) for item in payload]


PLAN_OPS: dict[str, tuple[str, ...]] = {
    "dedup": (),
    "fill_missing": ("strategy",),
    "cap_outliers": ("k",),
    "rename": ("map",),
    "scale": ("metric", "factor"),
    "drop_column": ("name",),
}


@dataclass(frozen=True)
class PlanStep:
    op: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"op": self.op, "args": dict(self.args)}


@dataclass(frozen=True)
class TransformPlan:
    steps: tuple[PlanStep, ...] = ()

    def __len__(self) -> int:
        return len(self.steps)

    def to_json(self) -> str:
        return json.dumps([step.to_dict() for step in self.steps], ensure_ascii=False)


@dataclass(frozen=True)
class Violation:
    row: int | None
    column: str | None
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        where = "registry" if self.row is None else f"row {self.row}"
        column = f" [{self.column}]" if self.column else ""
        detail = f": {self.detail}" if self.detail else ""
        return f"{where}{column} {self.rule}{detail}"


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _registry_violations(d: Dataset) -> list[Violation]:
    found: list[Violation] = []
    for name, spec in d.metrics.items():
        if spec.name != name:
            found.append(Violation(None, name, "registry_name_mismatch", spec.name))
        if spec.is_ratio:
            for ref in (spec.numerator, spec.denominator):
                if ref is None:
                    found.append(Violation(None, name, "incomplete_ratio"))
                elif ref not in d.metrics:
                    found.append(Violation(None, name, "dangling_ratio_ref", ref))
                elif d.metrics[ref].is_ratio:
                    found.append(Violation(None, name, "ratio_ref_not_additive", ref))
        elif spec.numerator is not None or spec.denominator is not None:
            found.append(Violation(None, name, "additive_has_refs"))
    for dimension in d.dimensions:
        if dimension in d.metrics:
            found.append(Violation(None, dimension, "dimension_metric_clash"))
    return found


def validate_dataset(d: Dataset) -> list[Violation]:
    """Structural check of every Dataset/Record/MetricSpec invariant."""
    found = _registry_violations(d)
    registered = set(d.metrics)
    dimensions = set(d.dimensions)
    seen: set[tuple[date, tuple[str, ...]]] = set()
    previous: tuple[date, tuple[str, ...]] | None = None

    for index, record in enumerate(d.rows):
        columns = set(record.values)
        for name in sorted(columns - registered):
            found.append(Violation(index, name, "unknown_metric"))
        for name in sorted(registered - columns):
            found.append(Violation(index, name, "missing_metric_column"))
        if set(record.dims) != dimensions:
            found.append(Violation(index, None, "dimension_mismatch"))
        for name, value in record.values.items():
            if value is None:
                continue
            if not _is_number(value) or not math.isfinite(value):
                found.append(Violation(index, name, "non_finite", repr(value)))

        key = d.row_key(record)
        if key in seen:
            found.append(Violation(index, None, "duplicate_key", key[0].isoformat()))
        elif previous is not None and key < previous:
            found.append(Violation(index, None, "unsorted"))
        seen.add(key)
        previous = key
    return found
