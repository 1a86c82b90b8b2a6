from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, replace
from datetime import date
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .datamodel import (
    PLAN_OPS,
    Dataset,
    PlanStep,
    Record,
    Registry,
    TransformPlan,
    Value,
    row_payload,
)
from .exceptions import ConfigError, PreprocessError
from .llm import LlmHandle, LlmRequest, complete

logger = logging.getLogger(__name__)

FILL_STRATEGIES = ("drop", "median", "zero")
DEFAULT_PLAN_RETRIES = 3


@dataclass(frozen=True)
class CleanConfig:
    strategy: str = "median"
    cap_k: float = 3.0
    # Off by default: capping flattens the spikes and highs the detectors look for.
    cap_outliers: bool = False

    def __post_init__(self) -> None:
        if self.strategy not in FILL_STRATEGIES:
            raise ConfigError(f"알 수 없는 결측치 처리 방식: {self.strategy}")
        if not self.cap_k > 0:
            raise ConfigError("cap_k는 0보다 커야 합니다.")


@dataclass(frozen=True)
class CleanReport:
    duplicates_removed: int = 0
    values_imputed: int = 0
    outliers_capped: int = 0
    rows_dropped: int = 0


def dedup_rows(d: Dataset) -> tuple[Dataset, int]:
    """Keep the first row of every (date, dims) key."""
    seen: set[tuple[date, tuple[str, ...]]] = set()
    kept: list[Record] = []
    for record in d.rows:
        key = d.row_key(record)
        if key in seen:
            continue
        seen.add(key)
        kept.append(record)
    return d.with_rows(kept), len(d.rows) - len(kept)


def _present(d: Dataset, metric: str) -> list[float]:
    return [record.values[metric] for record in d.rows if record.values.get(metric) is not None]


def _base_metrics(d: Dataset) -> list[str]:
    return [name for name, spec in d.metrics.items() if not spec.is_ratio]


def _derive_ratios(
    d: Dataset,
    original: Mapping[str, Value],
    values: dict[str, Value],
    fallback: Mapping[str, float] | None,
) -> int:
    """Recompute ratio columns from their cleaned inputs; returns how many empty ratios got a value.

    A ratio is rewritten when an input changed, or when it is empty and a
    ``fallback`` is given. An empty ratio over a zero denominator takes the
    fallback fill instead.
    """
    filled = 0
    for name, spec in d.metrics.items():
        if not spec.is_ratio:
            continue
        numerator = values.get(spec.numerator)
        denominator = values.get(spec.denominator)
        missing = values.get(name) is None
        changed = numerator != original.get(spec.numerator) or denominator != original.get(spec.denominator)
        if not changed and (fallback is None or not missing):
            continue
        if numerator is not None and denominator:
            values[name] = numerator / denominator
        elif missing and fallback is not None:
            if name not in fallback:
                raise PreprocessError(f"비율 지표 '{name}'을 다시 계산할 수 없습니다.", code="empty_metric")
            values[name] = fallback[name]
        if missing and values.get(name) is not None:
            filled += 1
    return filled


def fill_missing(d: Dataset, strategy: str) -> tuple[Dataset, int, int]:
    """Returns (dataset, values_imputed, rows_dropped).

    Ratio columns are recomputed from their filled numerator and denominator,
    so a filled row keeps ratio = numerator / denominator.
    """
    if strategy not in FILL_STRATEGIES:
        raise PreprocessError(f"알 수 없는 결측치 처리 방식: {strategy}", code="bad_strategy")

    if strategy == "drop":
        kept = [r for r in d.rows if all(r.values.get(m) is not None for m in d.metrics)]
        return d.with_rows(kept), 0, len(d.rows) - len(kept)

    base = _base_metrics(d)
    fills: dict[str, float] = {}
    for metric, spec in d.metrics.items():
        if strategy == "zero":
            fills[metric] = 0.0
            continue
        present = _present(d, metric)
        if not present:
            if d.rows and not spec.is_ratio:
                raise PreprocessError(f"지표 '{metric}'의 값이 모두 비어 있습니다.", code="empty_metric")
            continue
        fills[metric] = float(np.median(present))

    imputed = 0
    rows: list[Record] = []
    for record in d.rows:
        values = dict(record.values)
        for metric in base:
            if values.get(metric) is None:
                values[metric] = fills[metric]
                imputed += 1
        imputed += _derive_ratios(d, record.values, values, fills)
        rows.append(record.with_values(values))
    return d.with_rows(rows), imputed, 0


def cap_bounds(values: Sequence[float], k: float) -> tuple[float, float]:
    """median ± k·MAD; MAD=0 collapses both bounds onto the median."""
    array = np.asarray(values, dtype=float)
    median = float(np.median(array))
    mad = float(np.median(np.abs(array - median)))
    return median - k * mad, median + k * mad


def cap_outliers(d: Dataset, k: float) -> tuple[Dataset, int]:
    """Clip additive columns to median ± k·MAD; ratio columns follow their clipped inputs."""
    if not k > 0:
        raise PreprocessError("cap_k는 0보다 커야 합니다.", code="bad_strategy")
    bounds: dict[str, tuple[float, float]] = {}
    for metric in _base_metrics(d):
        present = _present(d, metric)
        if present:
            bounds[metric] = cap_bounds(present, k)

    capped = 0
    rows: list[Record] = []
    for record in d.rows:
        values = dict(record.values)
        for metric, (low, high) in bounds.items():
            value = values.get(metric)
            if value is None:
                continue
            clipped = min(max(value, low), high)
            if clipped != value:
                values[metric] = clipped
                capped += 1
        _derive_ratios(d, record.values, values, None)
        rows.append(record.with_values(values))
    return d.with_rows(rows), capped


def clean(d: Dataset, strategy: str = "median", cap_k: float = 3.0) -> tuple[Dataset, CleanReport]:
    if not cap_k > 0:
        raise PreprocessError("cap_k는 0보다 커야 합니다.", code="bad_strategy")
    deduped, duplicates = dedup_rows(d)
    filled, imputed, dropped = fill_missing(deduped, strategy)
    capped_dataset, capped = cap_outliers(filled, cap_k)
    report = CleanReport(
        duplicates_removed=duplicates,
        values_imputed=imputed,
        outliers_capped=capped,
        rows_dropped=dropped,
    )
    logger.info("clean(%s, k=%s): %s", strategy, cap_k, report)
    return capped_dataset, report


def prepare(d: Dataset, cfg: CleanConfig) -> tuple[Dataset, CleanReport]:
    """Dedup and fill, plus outlier capping when the config asks for it."""
    if cfg.cap_outliers:
        return clean(d, cfg.strategy, cfg.cap_k)
    deduped, duplicates = dedup_rows(d)
    filled, imputed, dropped = fill_missing(deduped, cfg.strategy)
    report = CleanReport(duplicates_removed=duplicates, values_imputed=imputed, rows_dropped=dropped)
    logger.info("prepare(%s): %s", cfg.strategy, report)
    return filled, report


def _without_metrics(d: Dataset, dropped: set[str]) -> Dataset:
    registry = {name: spec for name, spec in d.metrics.items() if name not in dropped}
    rows = [
        Record(
            date=r.date,
            dims=dict(r.dims),
            values={k: v for k, v in r.values.items() if k not in dropped},
        )
        for r in d.rows
    ]
    return Dataset(rows=tuple(rows), metrics=registry, dimensions=d.dimensions)


def _cascade(d: Dataset, dropped: set[str]) -> set[str]:
    result = set(dropped)
    for name in dropped:
        result.update(d.dependents(name))
    return result


def reduce(d: Dataset, min_variance: float) -> Dataset:
    """Feature selection: drop metric columns whose sample variance is below the floor."""
    if min_variance < 0:
        raise PreprocessError("min_variance는 0 이상이어야 합니다.", code="bad_strategy")
    dropped: set[str] = set()
    for metric in d.metrics:
        present = _present(d, metric)
        variance = float(np.var(present, ddof=1)) if len(present) >= 2 else 0.0
        if variance < min_variance:
            dropped.add(metric)
    dropped = _cascade(d, dropped)
    if dropped:
        logger.info("reduce: dropped %s", ", ".join(sorted(dropped)))
    return _without_metrics(d, dropped) if dropped else d


def normalize(d: Dataset, metrics: Sequence[str] | None = None, method: str = "minmax") -> Dataset:
    if method not in ("minmax", "zscore"):
        raise PreprocessError(f"알 수 없는 정규화 방식: {method}", code="bad_strategy")
    targets = list(metrics) if metrics is not None else [
        name for name, spec in d.metrics.items() if not spec.is_ratio and not d.dependents(name)
    ]
    for name in targets:
        if name not in d.metrics:
            raise PreprocessError(f"지표 '{name}'이 없습니다.", code="bad_strategy")
        if d.metrics[name].is_ratio or d.dependents(name):
            raise PreprocessError(
                f"비율 지표와 그 분자/분모 '{name}'는 정규화할 수 없습니다.", code="bad_strategy"
            )

    transforms: dict[str, tuple[float, float]] = {}
    for name in targets:
        present = np.asarray(_present(d, name), dtype=float)
        if present.size == 0:
            continue
        if method == "minmax":
            low, spread = float(present.min()), float(present.max() - present.min())
        else:
            low, spread = float(present.mean()), float(present.std())
        transforms[name] = (low, spread)

    rows = []
    for record in d.rows:
        values = dict(record.values)
        for name, (low, spread) in transforms.items():
            value = values.get(name)
            if value is not None:
                values[name] = (value - low) / spread if spread else 0.0
        rows.append(record.with_values(values))
    return Dataset(rows=tuple(rows), metrics=dict(d.metrics), dimensions=d.dimensions)


def integrate(datasets: Sequence[Dataset]) -> Dataset:
    """Merge sources that share dimension columns into one dataset."""
    if not datasets:
        return Dataset()
    dimensions = datasets[0].dimensions
    registry: Registry = {}
    for source in datasets:
        if source.dimensions != dimensions:
            raise PreprocessError("차원 컬럼이 다른 데이터셋은 통합할 수 없습니다.", code="integration_conflict")
        for name, spec in source.metrics.items():
            if name in registry and registry[name] != spec:
                raise PreprocessError(f"지표 '{name}' 정의가 서로 다릅니다.", code="integration_conflict")
            registry.setdefault(name, spec)

    merged: dict[tuple[date, tuple[str, ...]], tuple[dict[str, str], dict[str, Value]]] = {}
    for source in datasets:
        for record in source.rows:
            key = source.row_key(record)
            dims, values = merged.setdefault(key, (dict(record.dims), {}))
            for name in source.metrics:
                incoming = record.values.get(name)
                current = values.get(name)
                if current is not None and incoming is not None and current != incoming:
                    raise PreprocessError(
                        f"{key[0].isoformat()} {name} 값이 출처마다 다릅니다.",
                        code="integration_conflict",
                    )
                if current is None:
                    values[name] = incoming

    rows = [
        Record(
            date=key[0],
            dims=dims,
            values={name: values.get(name) for name in registry},
        )
        for key, (dims, values) in merged.items()
    ]
    return Dataset.build(rows, registry, dimensions)


@dataclass(frozen=True)
class PrecalcEntry:
    metric: str
    dims: dict[str, str]
    period_start: date
    period_end: date
    total: float | None
    average: float
    count: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "dims": dict(sorted(self.dims.items())),
            "period_start": self.period_start.isoformat(),
            "period_end": self.period_end.isoformat(),
            "total": self.total,
            "average": self.average,
            "count": self.count,
        }


@dataclass(frozen=True)
class PrecalcTable:
    entries: tuple[PrecalcEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def get(
        self,
        metric: str,
        dims: Mapping[str, str] | None = None,
        period: tuple[date, date] | None = None,
    ) -> PrecalcEntry:
        wanted = dict(dims or {})
        for entry in self.entries:
            if entry.metric != metric or entry.dims != wanted:
                continue
            if period is not None and (entry.period_start, entry.period_end) != tuple(period):
                continue
            return entry
        raise KeyError((metric, tuple(sorted(wanted.items())), period))

    def to_payload(self) -> list[dict[str, Any]]:
        return [entry.to_dict() for entry in self.entries]


def _column(rows: Sequence[Record], metric: str) -> list[float]:
    values = []
    for record in rows:
        value = record.values.get(metric)
        if value is None:
            raise PreprocessError(
                f"사전 계산 전에 결측치를 정리해야 합니다 ({metric}).", code="not_clean"
            )
        values.append(value)
    return values


def precalculate(
    d: Dataset,
    periods: Sequence[tuple[date, date]],
    slices: Sequence[Mapping[str, str]] = (),
) -> PrecalcTable:
    """Totals and averages per (metric, slice, period); ratios use sum(numerator)/sum(denominator)."""
    entries: list[PrecalcEntry] = []
    for dims in list(slices) or [{}]:
        for start, end in periods:
            rows = d.select(dims, start, end).rows
            if not rows:
                raise PreprocessError(
                    f"{start}~{end} 기간에 {dict(dims) or '전체'} 조건의 행이 없습니다.",
                    code="empty_period",
                )
            for name, spec in d.metrics.items():
                if spec.is_ratio:
                    numerator = sum(_column(rows, spec.numerator))
                    denominator = sum(_column(rows, spec.denominator))
                    if denominator == 0:
                        raise PreprocessError(f"'{name}'의 분모 합계가 0입니다.", code="zero_denominator")
                    total, average = None, numerator / denominator
                else:
                    total = sum(_column(rows, name))
                    average = total / len(rows)
                entries.append(
                    PrecalcEntry(
                        metric=name,
                        dims=dict(dims),
                        period_start=start,
                        period_end=end,
                        total=total,
                        average=average,
                        count=len(rows),
                    )
                )
    return PrecalcTable(entries=tuple(entries))


_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$")


def _check_args(op: str, args: Mapping[str, Any]) -> None:
    expected = set(PLAN_OPS[op])
    if set(args) != expected:
        raise ValueError(f"{op} 인자는 {sorted(expected)} 이어야 합니다")
    if op == "fill_missing" and args["strategy"] not in FILL_STRATEGIES:
        raise ValueError(f"fill_missing 방식 '{args['strategy']}'")
    if op == "cap_outliers":
        k = args["k"]
        if isinstance(k, bool) or not isinstance(k, (int, float)) or not k > 0:
            raise ValueError("cap_outliers k는 양수여야 합니다")
    if op == "rename":
        mapping = args["map"]
        if not isinstance(mapping, dict) or not mapping:
            raise ValueError("rename map이 비어 있습니다")
        if not all(isinstance(k, str) and isinstance(v, str) and v for k, v in mapping.items()):
            raise ValueError("rename map은 문자열이어야 합니다")
    if op == "scale":
        factor = args["factor"]
        if not isinstance(args["metric"], str):
            raise ValueError("scale metric은 문자열이어야 합니다")
        if isinstance(factor, bool) or not isinstance(factor, (int, float)) or not math.isfinite(factor):
            raise ValueError("scale factor는 유한한 숫자여야 합니다")
    if op == "drop_column" and not isinstance(args["name"], str):
        raise ValueError("drop_column name은 문자열이어야 합니다")


def parse_plan(payload: str | Sequence[Any]) -> TransformPlan:
    """JSON array of {op, args} objects -> TransformPlan (plan_invalid otherwise)."""
    try:
        items = json.loads(_FENCE.sub("", payload.strip())) if isinstance(payload, str) else payload
        if not isinstance(items, list):
            raise ValueError("최상위 값이 배열이 아닙니다")
        steps = []
        for item in items:
            if not isinstance(item, dict) or item.get("op") not in PLAN_OPS:
                raise ValueError(f"알 수 없는 단계: {item!r}")
            args = item.get("args") or {}
            if not isinstance(args, dict):
                raise ValueError("args는 객체여야 합니다")
            _check_args(item["op"], args)
            steps.append(PlanStep(op=item["op"], args=dict(args)))
    except (ValueError, TypeError, AttributeError) as exc:
        raise PreprocessError(f"변환 계획을 해석할 수 없습니다: {exc}", code="plan_invalid") from exc
    return TransformPlan(steps=tuple(steps))


def _bad_step(index: int, message: str) -> PreprocessError:
    return PreprocessError(f"{index}번째 단계: {message}", code="bad_step", step=index)


def _rename(d: Dataset, mapping: Mapping[str, str], index: int) -> Dataset:
    columns = set(d.metrics) | set(d.dimensions)
    for old, new in mapping.items():
        if old not in columns:
            raise _bad_step(index, f"컬럼 '{old}'이 없습니다.")
    renamed = [mapping.get(name, name) for name in [*d.dimensions, *d.metrics]]
    if len(set(renamed)) != len(renamed) or "date" in renamed:
        raise _bad_step(index, "이름 변경 결과 컬럼 이름이 겹칩니다.")

    def rn(name: str | None) -> str | None:
        return mapping.get(name, name) if name is not None else None

    registry = {
        rn(name): replace(spec, name=rn(name), numerator=rn(spec.numerator), denominator=rn(spec.denominator))
        for name, spec in d.metrics.items()
    }
    dimensions = tuple(rn(name) for name in d.dimensions)
    rows = [
        Record(
            date=r.date,
            dims={rn(k): v for k, v in r.dims.items()},
            values={rn(k): v for k, v in r.values.items()},
        )
        for r in d.rows
    ]
    return Dataset.build(rows, registry, dimensions)


def _scale(d: Dataset, metric: str, factor: float, index: int) -> Dataset:
    if metric not in d.metrics:
        raise _bad_step(index, f"지표 '{metric}'이 없습니다.")
    rows = []
    for record in d.rows:
        values = dict(record.values)
        if values.get(metric) is not None:
            values[metric] = values[metric] * factor
        rows.append(record.with_values(values))
    return Dataset(rows=tuple(rows), metrics=dict(d.metrics), dimensions=d.dimensions)


def _drop_column(d: Dataset, name: str, index: int) -> Dataset:
    if name in d.metrics:
        return _without_metrics(d, _cascade(d, {name}))
    if name in d.dimensions:
        dimensions = tuple(n for n in d.dimensions if n != name)
        rows = [
            Record(date=r.date, dims={k: v for k, v in r.dims.items() if k != name}, values=dict(r.values))
            for r in d.rows
        ]
        return Dataset.build(rows, d.metrics, dimensions)
    raise _bad_step(index, f"컬럼 '{name}'이 없습니다.")


def apply_plan(d: Dataset, plan: TransformPlan) -> Dataset:
    result = d
    for index, step in enumerate(plan.steps):
        args = step.args
        try:
            if step.op == "dedup":
                result, _ = dedup_rows(result)
            elif step.op == "fill_missing":
                result, _, _ = fill_missing(result, args["strategy"])
            elif step.op == "cap_outliers":
                result, _ = cap_outliers(result, float(args["k"]))
            elif step.op == "rename":
                result = _rename(result, args["map"], index)
            elif step.op == "scale":
                result = _scale(result, args["metric"], float(args["factor"]), index)
            elif step.op == "drop_column":
                result = _drop_column(result, args["name"], index)
            else:
                raise _bad_step(index, f"알 수 없는 연산 '{step.op}'")
        except PreprocessError as exc:
            if exc.step is None:
                exc.step = index
            raise
    return result


def _columns(d: Dataset) -> set[str]:
    return set(d.metrics) | set(d.dimensions)


def _sample_block(d: Dataset) -> str:
    header = {"dimensions": list(d.dimensions), "metrics": [spec.to_dict() for spec in d.metrics.values()]}
    lines = [json.dumps(header, ensure_ascii=False)]
    lines.extend(json.dumps(row_payload(d, r), ensure_ascii=False) for r in d.rows)
    return "\n".join(lines)


PLAN_SYSTEM = (
    "You design data preprocessing plans. Answer with a JSON array of steps only, "
    'each step shaped as {"op": ..., "args": {...}}.'
)

PLAN_PRIMITIVES = """Available steps:
- {"op": "dedup", "args": {}}: remove rows repeating a (date, dimensions) key, keeping the first.
- {"op": "fill_missing", "args": {"strategy": "drop" | "median" | "zero"}}
- {"op": "cap_outliers", "args": {"k": number}}: clip values to median +/- k * MAD per metric.
- {"op": "rename", "args": {"map": {"old": "new"}}}
- {"op": "scale", "args": {"metric": name, "factor": number}}
- {"op": "drop_column", "args": {"name": column}}"""


def _plan_prompt(input_sample: Dataset, output_sample: Dataset, feedback: Sequence[str]) -> str:
    parts = [
        "Find the preprocessing steps that turn the INPUT dataset into the OUTPUT dataset.",
        PLAN_PRIMITIVES,
        "INPUT:\n" + _sample_block(input_sample),
        "OUTPUT:\n" + _sample_block(output_sample),
    ]
    for attempt, note in enumerate(feedback, start=1):
        parts.append(f"Attempt {attempt} was rejected: {note}")
    return "\n\n".join(parts)


def _difference(produced: Dataset, expected: Dataset) -> str:
    if _columns(produced) != _columns(expected):
        return (
            f"columns {sorted(_columns(produced))} do not match expected {sorted(_columns(expected))}"
        )
    if len(produced) != len(expected):
        return f"plan produced {len(produced)} rows, expected {len(expected)}"
    for index, (left, right) in enumerate(zip(produced.rows, expected.rows)):
        if left != right:
            return f"row {index} differs: got {row_payload(produced, left)}, expected {row_payload(expected, right)}"
    return "registry definitions differ"


def infer_transform_plan(
    input_sample: Dataset,
    output_sample: Dataset,
    llm: LlmHandle,
    *,
    retries: int = DEFAULT_PLAN_RETRIES,
) -> TransformPlan:
    """Ask the model for a plan, verify it with apply_plan, feed back failures."""
    if not _columns(input_sample) & _columns(output_sample):
        raise PreprocessError("입력/출력 샘플에 공통 컬럼이 없습니다.", code="no_shared_columns")

    feedback: list[str] = []
    for attempt in range(1, retries + 1):
        request = LlmRequest(
            system_text=PLAN_SYSTEM,
            user_text=_plan_prompt(input_sample, output_sample, feedback),
            max_tokens=512,
            task="transform_plan",
            attempt=attempt,
        )
        response = complete(llm, request)
        try:
            plan = parse_plan(response.text)
            produced = apply_plan(input_sample, plan)
        except PreprocessError as exc:
            logger.info("plan attempt %d rejected: %s", attempt, exc)
            feedback.append(f"{exc.code}: {exc}")
            continue
        if produced == output_sample:
            logger.info("plan accepted on attempt %d: %s", attempt, plan.to_json())
            return plan
        note = _difference(produced, output_sample)
        logger.info("plan attempt %d mismatched: %s", attempt, note)
        feedback.append(note)

    raise PreprocessError(
        f"{retries}번 시도했지만 출력 샘플을 재현하는 계획을 찾지 못했습니다.",
        code="plan_rejected",
    )


def save_plan(plan: TransformPlan, path: str | Path) -> Path:
    target = Path(path)
    target.write_text(plan.to_json(), encoding="utf-8")
    return target


def load_plan(path: str | Path) -> TransformPlan:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PreprocessError(f"계획 파일을 읽을 수 없습니다: {path}", code="plan_invalid") from exc
    return parse_plan(text)


def ensure_clean(d: Dataset) -> None:
    for record in d.rows:
        if any(value is None for value in record.values.values()):
            raise PreprocessError("결측치가 남아 있습니다.", code="not_clean")


__all__ = [
    "CleanConfig",
    "CleanReport",
    "PrecalcEntry",
    "PrecalcTable",
    "apply_plan",
    "cap_outliers",
    "clean",
    "dedup_rows",
    "ensure_clean",
    "fill_missing",
    "infer_transform_plan",
    "integrate",
    "load_plan",
    "normalize",
    "parse_plan",
    "precalculate",
    "prepare",
    "reduce",
    "save_plan",
]

