from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .datamodel import Dataset, Record, row_payload
from .exceptions import ChunkError, ConfigError

logger = logging.getLogger(__name__)

TEMPORAL = "temporal"
CATEGORICAL = "categorical"
BUDGET = "budget"
STRATEGIES = (TEMPORAL, CATEGORICAL, BUDGET)

TokenEstimator = Callable[[str], int]


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass(frozen=True)
class ChunkConfig:
    strategy: str = BUDGET
    # categorical only; empty means the first dimension column
    dimension: str = ""
    budget_tokens: int = 8000

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"알 수 없는 청크 전략: {self.strategy}")
        if self.budget_tokens <= 0:
            raise ConfigError("budget_tokens는 0보다 커야 합니다.")


@dataclass(frozen=True)
class ChunkPlan:
    strategy: str
    chunks: tuple[tuple[int, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.chunks)

    def datasets(self, d: Dataset) -> list[Dataset]:
        return [d.subset(indices) for indices in self.chunks]


def row_line(d: Dataset, record: Record) -> str:
    """Compact JSON line of one row, the unit every prompt data block is built from."""
    return json.dumps(row_payload(d, record), ensure_ascii=False, separators=(",", ":"))


def serialize_rows(d: Dataset, rows: Sequence[Record] | None = None) -> str:
    return "".join(row_line(d, record) + "\n" for record in (d.rows if rows is None else rows))


def _groups(d: Dataset, strategy: str, dimension: str | None) -> list[list[int]]:
    if strategy == BUDGET:
        return [list(range(len(d.rows)))]
    if strategy == TEMPORAL:
        months: dict[tuple[int, int], list[int]] = {}
        for index, record in enumerate(d.rows):
            months.setdefault((record.date.year, record.date.month), []).append(index)
        return [months[key] for key in sorted(months)]
    if strategy == CATEGORICAL:
        column = dimension or (d.dimensions[0] if d.dimensions else None)
        if column is None or column not in d.dimensions:
            raise ConfigError(f"범주형 청크에 쓸 차원 컬럼 '{column}'이 없습니다.")
        values: dict[str, list[int]] = {}
        for index, record in enumerate(d.rows):
            values.setdefault(record.dims.get(column, ""), []).append(index)
        return [values[key] for key in sorted(values)]
    raise ConfigError(f"알 수 없는 청크 전략: {strategy}")


def plan_chunks(
    d: Dataset,
    strategy: str = BUDGET,
    budget_tokens: int = 8000,
    tokenizer: TokenEstimator = estimate_tokens,
    *,
    dimension: str | None = None,
) -> ChunkPlan:
    """Group rows by strategy, then split any group whose serialized rows exceed the budget.

    A chunk's cost is the sum of its row lines' estimates, newline included,
    which bounds the estimate of the joined text for subadditive estimators.
    """
    if budget_tokens <= 0:
        raise ConfigError("budget_tokens는 0보다 커야 합니다.")
    costs = [tokenizer(row_line(d, record) + "\n") for record in d.rows]
    for index, cost in enumerate(costs):
        if cost > budget_tokens:
            raise ChunkError(
                f"{index}번째 행({cost} 토큰)이 예산 {budget_tokens} 토큰보다 큽니다.",
                code="row_too_large",
            )

    chunks: list[tuple[int, ...]] = []
    for group in _groups(d, strategy, dimension):
        current: list[int] = []
        used = 0
        for index in group:
            if current and used + costs[index] > budget_tokens:
                chunks.append(tuple(current))
                current, used = [], 0
            current.append(index)
            used += costs[index]
        if current:
            chunks.append(tuple(current))

    logger.debug("plan_chunks(%s, %d tokens): %d chunks", strategy, budget_tokens, len(chunks))
    return ChunkPlan(strategy=strategy, chunks=tuple(chunks))


def plan_from_config(d: Dataset, cfg: ChunkConfig, tokenizer: TokenEstimator = estimate_tokens) -> ChunkPlan:
    return plan_chunks(d, cfg.strategy, cfg.budget_tokens, tokenizer, dimension=cfg.dimension or None)
