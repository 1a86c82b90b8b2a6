from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Any, Sequence

import pandas as pd

from .datamodel import Dataset, Record, Registry, Value, parse_registry, row_payload, validate_dataset
from .exceptions import ConfigError, DatasetError, IngestError

logger = logging.getLogger(__name__)

_ISO_DATE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


@dataclass(frozen=True)
class IngestConfig:
    date_column: str = "date"
    # None: every column that is neither the date nor a registered metric.
    dimension_columns: tuple[str, ...] | None = None
    registry_path: Path | None = None
    delimiter: str = ","

    def __post_init__(self) -> None:
        if self.dimension_columns is not None:
            object.__setattr__(self, "dimension_columns", tuple(self.dimension_columns))
            if self.date_column in self.dimension_columns:
                raise ConfigError("날짜 컬럼은 차원 컬럼으로 지정할 수 없습니다.")
        if len(self.delimiter) != 1:
            raise ConfigError("구분자는 한 글자여야 합니다.")


@dataclass(frozen=True)
class IngestSummary:
    source: str
    rows: int
    missing_count: int
    derived_metrics: tuple[str, ...] = ()


@dataclass(frozen=True)
class IngestResult:
    dataset: Dataset
    summary: IngestSummary


def load_registry(path: str | Path) -> Registry:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"지표 레지스트리를 읽을 수 없습니다: {path}", code="io") from exc
    try:
        return parse_registry(json.loads(text))
    except json.JSONDecodeError as exc:
        raise IngestError(f"지표 레지스트리가 JSON 형식이 아닙니다: {path}", code="schema") from exc
    except DatasetError as exc:
        raise IngestError(str(exc), code="schema") from exc


def _cell_text(cell: Any) -> str:
    if cell is None:
        return ""
    if isinstance(cell, float) and math.isnan(cell):
        return ""
    return str(cell).strip()


def _parse_number(cell: Any) -> Value:
    if isinstance(cell, bool):
        return None
    if isinstance(cell, (int, float)):
        number = float(cell)
    else:
        text = _cell_text(cell)
        if not text:
            return None
        try:
            number = float(text)
        except ValueError:
            return None
    return number if math.isfinite(number) else None


def _derive_ratio(numerator: Value, denominator: Value) -> Value:
    if numerator is None or denominator is None or denominator == 0:
        return None
    return numerator / denominator


def _resolve_columns(
    columns: Sequence[str], cfg: IngestConfig, registry: Registry
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    present = set(columns)
    if cfg.date_column not in present:
        raise IngestError(f"날짜 컬럼 '{cfg.date_column}'이 없습니다.", code="schema")

    derived: list[str] = []
    for name, spec in registry.items():
        if name in present:
            continue
        if spec.is_ratio and spec.numerator in present and spec.denominator in present:
            derived.append(name)
            continue
        raise IngestError(f"레지스트리의 지표 '{name}' 컬럼이 파일에 없습니다.", code="schema")

    if cfg.dimension_columns is None:
        dimensions = tuple(c for c in columns if c != cfg.date_column and c not in registry)
    else:
        dimensions = cfg.dimension_columns
        for name in dimensions:
            if name not in present:
                raise IngestError(f"차원 컬럼 '{name}'이 없습니다.", code="schema")
            if name in registry:
                raise IngestError(f"'{name}'은 지표와 차원에 동시에 쓰였습니다.", code="schema")
        extra = present - {cfg.date_column} - set(dimensions) - set(registry)
        if extra:
            raise IngestError(
                f"레지스트리에 없는 컬럼: {', '.join(sorted(extra))}", code="schema"
            )
    return dimensions, tuple(derived)


def _build_dataset(
    raw_rows: list[dict[str, Any]],
    columns: Sequence[str],
    cfg: IngestConfig,
    registry: Registry,
    source: str,
    *,
    strict: bool,
    first_line: int,
) -> IngestResult:
    if raw_rows or columns:
        dimensions, derived = _resolve_columns(columns, cfg, registry)
    else:
        dimensions, derived = tuple(cfg.dimension_columns or ()), ()

    missing_count = 0
    records: list[Record] = []
    for offset, raw in enumerate(raw_rows):
        line = first_line + offset
        if cfg.date_column not in raw:
            raise IngestError(f"{line}행에 날짜 값이 없습니다.", code="schema")
        date_text = _cell_text(raw[cfg.date_column])
        if not _ISO_DATE.match(date_text):
            raise IngestError(f"{line}행의 날짜 '{date_text}'가 YYYY-MM-DD 형식이 아닙니다.", code="parse")
        try:
            day = date.fromisoformat(date_text)
        except ValueError as exc:
            raise IngestError(f"{line}행의 날짜 '{date_text}'가 잘못되었습니다.", code="parse") from exc

        values: dict[str, Value] = {}
        for name in registry:
            if name in derived:
                continue
            value = _parse_number(raw.get(name))
            if value is None:
                missing_count += 1
            values[name] = value
        for name in derived:
            spec = registry[name]
            values[name] = _derive_ratio(values.get(spec.numerator), values.get(spec.denominator))
        ordered = {name: values[name] for name in registry}

        dims = {name: _cell_text(raw.get(name)) for name in dimensions}
        records.append(Record(date=day, dims=dims, values=ordered))

    dataset = Dataset.build(records, registry, dimensions)
    if strict:
        violations = validate_dataset(dataset)
        if violations:
            listed = "; ".join(str(v) for v in violations[:5])
            raise IngestError(f"데이터셋 검증 실패 ({len(violations)}건): {listed}", code="schema")

    summary = IngestSummary(
        source=source,
        rows=len(dataset),
        missing_count=missing_count,
        derived_metrics=derived,
    )
    logger.info(
        "ingested %s: %d rows, %d missing cells, derived=%s",
        source,
        summary.rows,
        summary.missing_count,
        ",".join(derived) or "-",
    )
    return IngestResult(dataset=dataset, summary=summary)


def _registry_for(cfg: IngestConfig, registry: Registry | None) -> Registry:
    if registry is not None:
        return registry
    if cfg.registry_path is None:
        raise IngestError("지표 레지스트리 경로가 지정되지 않았습니다.", code="schema")
    return load_registry(cfg.registry_path)


def read_csv(
    path: str | Path,
    cfg: IngestConfig,
    *,
    registry: Registry | None = None,
    strict: bool = True,
) -> IngestResult:
    metrics = _registry_for(cfg, registry)
    try:
        frame = pd.read_csv(
            path,
            sep=cfg.delimiter,
            dtype=str,
            keep_default_na=False,
            index_col=False,
            encoding="utf-8",
        )
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        raise IngestError(f"파일을 읽을 수 없습니다: {path}", code="io") from exc
    except UnicodeDecodeError as exc:
        raise IngestError(f"UTF-8 파일이 아닙니다: {path}", code="parse") from exc
    except pd.errors.EmptyDataError as exc:
        raise IngestError(f"헤더 행이 없습니다: {path}", code="parse") from exc
    except (pd.errors.ParserError, ValueError) as exc:
        raise IngestError(f"CSV 구조가 잘못되었습니다: {exc}", code="parse") from exc
    except OSError as exc:
        raise IngestError(f"파일을 읽을 수 없습니다: {path}", code="io") from exc

    columns = [str(column) for column in frame.columns]
    raw_rows = frame.to_dict(orient="records")
    return _build_dataset(
        raw_rows, columns, cfg, metrics, str(path), strict=strict, first_line=2
    )


def read_json(
    path: str | Path,
    cfg: IngestConfig,
    *,
    registry: Registry | None = None,
    strict: bool = True,
) -> IngestResult:
    metrics = _registry_for(cfg, registry)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise IngestError(f"UTF-8 파일이 아닙니다: {path}", code="parse") from exc
    except OSError as exc:
        raise IngestError(f"파일을 읽을 수 없습니다: {path}", code="io") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IngestError(f"JSON 형식이 아닙니다: {exc}", code="parse") from exc
    if not isinstance(payload, list):
        raise IngestError("JSON 입력은 객체 배열이어야 합니다.", code="parse")

    columns: list[str] = []
    for index, item in enumerate(payload):
        if not isinstance(item, dict):
            raise IngestError(f"{index}번째 항목이 객체가 아닙니다.", code="parse")
        for key, value in item.items():
            if isinstance(value, (dict, list)):
                raise IngestError(f"{index}번째 항목의 '{key}' 값이 평탄하지 않습니다.", code="parse")
            if key not in columns:
                columns.append(key)
    return _build_dataset(
        payload, columns, cfg, metrics, str(path), strict=strict, first_line=0
    )


def load_csv(path: str | Path, cfg: IngestConfig, *, registry: Registry | None = None) -> Dataset:
    return read_csv(path, cfg, registry=registry).dataset


def load_json(path: str | Path, cfg: IngestConfig, *, registry: Registry | None = None) -> Dataset:
    return read_json(path, cfg, registry=registry).dataset


def read_any(
    path: str | Path,
    cfg: IngestConfig,
    *,
    registry: Registry | None = None,
    strict: bool = True,
) -> IngestResult:
    reader = read_json if Path(path).suffix.lower() == ".json" else read_csv
    return reader(path, cfg, registry=registry, strict=strict)


def _frame(d: Dataset) -> pd.DataFrame:
    columns = ["date", *d.dimensions, *d.metrics]
    return pd.DataFrame([row_payload(d, record) for record in d.rows], columns=columns)


def write_csv(d: Dataset, path: str | Path, *, delimiter: str = ",") -> Path:
    target = Path(path)
    _frame(d).to_csv(target, index=False, sep=delimiter, na_rep="", encoding="utf-8")
    return target


def write_json(d: Dataset, path: str | Path) -> Path:
    target = Path(path)
    rows = [row_payload(d, record) for record in d.rows]
    target.write_text(json.dumps(rows, ensure_ascii=False, indent=2), encoding="utf-8")
    return target


def write_registry(d: Dataset, path: str | Path) -> Path:
    target = Path(path)
    payload = [spec.to_dict() for spec in d.metrics.values()]
    target.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
    return target
