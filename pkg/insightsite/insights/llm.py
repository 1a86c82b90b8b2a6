from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import date
from typing import Any, Iterable, Sequence

import numpy as np
import requests

from .anonymize import TOKEN_PATTERN
from .chunking import estimate_tokens
from .datamodel import (
    KIND_ORDER,
    AtomicInsight,
    Dataset,
    Record,
    parse_registry,
)
from .detectors import DetectorConfig, detect_fragment
from .exceptions import ConfigError, DatasetError, InsightEngineError, LlmError
from .wording import TOTALS_TITLE, claim_line, format_number, section_title, sentence_from, totals_line

logger = logging.getLogger(__name__)

HTTP = "http"
SIMULATED = "simulated"
TASKS = ("analysis", "report", "summarize", "transform_plan")

DATA_OPEN = "<<<DATA"
DATA_CLOSE = "DATA>>>"

# Plausible entities the simulated model invents when it sees real names.
FABRICATED_NAMES = (
    "Umbrella Corp",
    "Vandelay Industries",
    "Hooli",
    "Soylent Co",
    "Wayne Enterprises",
    "Stark Industries",
)
NAME_SUFFIXES = ("Holdings", "Group", "International", "Labs")


@dataclass(frozen=True)
class HttpParams:
    base_url: str = ""
    api_key: str = ""
    model: str = "gpt-4"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.max_retries < 1:
            raise ConfigError("max_retries는 1 이상이어야 합니다.")

    @property
    def configured(self) -> bool:
        return bool(self.base_url and self.api_key)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    p_math_error: float = 0.0
    math_error_scale: float = 0.2
    p_hallucination: float = 0.0
    miss_rate: float = 0.0
    copy_error_factor: float = 1 / 3
    name_corruption_factor: float = 0.25
    # Answers to transform_plan requests, indexed by attempt number.
    scripted_responses: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("p_math_error", "p_hallucination", "miss_rate", "copy_error_factor", "name_corruption_factor"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"{name}은 0과 1 사이여야 합니다.")
        if not self.math_error_scale > 0:
            raise ConfigError("math_error_scale은 0보다 커야 합니다.")
        object.__setattr__(self, "scripted_responses", tuple(self.scripted_responses))


@dataclass(frozen=True)
class LlmHandle:
    provider: str
    params: HttpParams | SimConfig

    def __post_init__(self) -> None:
        expected = {HTTP: HttpParams, SIMULATED: SimConfig}.get(self.provider)
        if expected is None or not isinstance(self.params, expected):
            raise ConfigError(f"LLM 제공자 '{self.provider}' 설정이 잘못되었습니다.")

    @classmethod
    def http(cls, params: HttpParams) -> LlmHandle:
        return cls(HTTP, params)

    @classmethod
    def simulated(cls, cfg: SimConfig | None = None) -> LlmHandle:
        return cls(SIMULATED, cfg or SimConfig())


@dataclass(frozen=True)
class LlmRequest:
    system_text: str
    user_text: str
    max_tokens: int = 2048
    task: str = "report"
    attempt: int = 1


@dataclass(frozen=True)
class LlmResponse:
    text: str
    finish_reason: str = "stop"
    usage: dict[str, int] = field(default_factory=dict)


def complete(h: LlmHandle, req: LlmRequest) -> LlmResponse:
    if not req.user_text.strip():
        raise LlmError("요청 본문이 비어 있습니다.", code="empty_request")
    if req.task not in TASKS:
        raise LlmError(f"알 수 없는 작업: {req.task}", code="empty_request")
    if h.provider == HTTP:
        return _complete_http(h.params, req)
    return _complete_simulated(h.params, req)


# --- HTTP chat-completion provider -------------------------------------------------


def _parse_chat(response: requests.Response) -> LlmResponse:
    try:
        payload = response.json()
        choice = payload["choices"][0]
        text = choice["message"]["content"]
        if not isinstance(text, str):
            raise TypeError("content")
        usage = {
            key: int(value)
            for key, value in (payload.get("usage") or {}).items()
            if key in ("prompt_tokens", "completion_tokens", "total_tokens")
        }
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise LlmError("LLM 응답 형식을 해석할 수 없습니다.", code="malformed_response") from exc
    return LlmResponse(text=text, finish_reason=str(choice.get("finish_reason") or "stop"), usage=usage)


def _retry_after(response: requests.Response, default: float) -> float:
    try:
        return max(default, float(response.headers.get("Retry-After", "")))
    except ValueError:
        return default


def _complete_http(params: HttpParams, req: LlmRequest) -> LlmResponse:
    if not params.configured:
        raise LlmError("LLM_API_URL과 LLM_API_KEY가 설정되지 않았습니다.", code="not_configured")

    url = f"{params.base_url.rstrip('/')}/chat/completions"
    headers = {
        "Content-Type": "application/json",
        "Authorization": f"Bearer {params.api_key}",
    }
    body = {
        "model": params.model,
        "messages": [
            {"role": "system", "content": req.system_text},
            {"role": "user", "content": req.user_text},
        ],
        "max_tokens": req.max_tokens,
        "temperature": params.temperature,
    }

    last_error: LlmError | None = None
    for attempt in range(1, params.max_retries + 1):
        wait = params.backoff * 2 ** (attempt - 1)
        try:
            response = requests.post(url, json=body, headers=headers, timeout=params.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_error = LlmError(f"LLM 서버에 연결할 수 없습니다: {exc}", code="transport")
        except requests.RequestException as exc:
            raise LlmError(f"LLM 요청을 보낼 수 없습니다: {exc}", code="transport") from exc
        else:
            status = response.status_code
            if status in (401, 403):
                raise LlmError(f"LLM 인증에 실패했습니다 (HTTP {status}).", code="auth")
            if status == 429:
                last_error = LlmError("LLM 요청 한도를 초과했습니다 (HTTP 429).", code="rate_limited")
                wait = _retry_after(response, wait)
            elif status >= 500:
                last_error = LlmError(f"LLM 서버 오류 (HTTP {status}).", code="transport")
            elif status >= 400:
                raise LlmError(f"LLM 요청이 거부되었습니다 (HTTP {status}): {response.text[:300]}", code="transport")
            else:
                return _parse_chat(response)

        if attempt < params.max_retries:
            logger.warning("LLM attempt %d/%d failed (%s), retrying in %.1fs", attempt, params.max_retries, last_error.code, wait)
            time.sleep(wait)

    raise last_error


# --- prompt data blocks ------------------------------------------------------------


def data_block(header: dict[str, Any], lines: Iterable[str]) -> str:
    """JSON header line plus one JSON item per line, fenced for the model."""
    head = json.dumps(header, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    body = [line.rstrip("\n") for line in lines]
    return "\n".join([DATA_OPEN, head, *body, DATA_CLOSE])


def fact_lines(insights: Iterable[AtomicInsight]) -> list[str]:
    return [json.dumps(item.to_dict(), ensure_ascii=False, separators=(",", ":")) for item in insights]


def read_data_block(text: str) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    start = text.find(DATA_OPEN)
    end = text.find(DATA_CLOSE, start + 1)
    if start < 0 or end < 0:
        raise LlmError("프롬프트에 데이터 블록이 없습니다.", code="bad_facts")
    lines = [line for line in text[start + len(DATA_OPEN) : end].splitlines() if line.strip()]
    try:
        header = json.loads(lines[0])
        items = [json.loads(line) for line in lines[1:]]
    except (IndexError, ValueError) as exc:
        raise LlmError("데이터 블록을 해석할 수 없습니다.", code="bad_facts") from exc
    if not isinstance(header, dict) or not all(isinstance(item, dict) for item in items):
        raise LlmError("데이터 블록 항목은 JSON 객체여야 합니다.", code="bad_facts")
    return header, items


# --- simulated provider ------------------------------------------------------------


def request_rng(seed: int, *parts: str) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()
    return np.random.default_rng([int(seed), int(digest[:16], 16)])


@dataclass(frozen=True)
class Fact:
    insight: AtomicInsight
    precomputed: bool = False


def _facts(items: Sequence[dict[str, Any]], precomputed: bool) -> list[Fact]:
    if not all(isinstance(item, dict) for item in items):
        raise LlmError("사실 항목은 JSON 객체여야 합니다.", code="bad_facts")
    try:
        return [Fact(AtomicInsight.from_dict(item), precomputed) for item in items]
    except DatasetError as exc:
        raise LlmError(f"사실 목록 형식이 잘못되었습니다: {exc}", code="bad_facts") from exc


def _rows_dataset(header: dict[str, Any], items: Sequence[dict[str, Any]]) -> Dataset:
    registry = parse_registry(header.get("metrics") or [])
    dimensions = [str(name) for name in header.get("dimensions") or []]
    records = []
    for item in items:
        values = {}
        for name in registry:
            raw = item.get(name)
            values[name] = None if raw is None else float(raw)
        records.append(
            Record(
                date=date.fromisoformat(str(item["date"])),
                dims={name: str(item.get(name, "")) for name in dimensions},
                values=values,
            )
        )
    return Dataset.build(records, registry, dimensions)


def perceive(header: dict[str, Any], items: Sequence[dict[str, Any]]) -> list[Fact]:
    """What the simulated model reads out of a data block."""
    kind = header.get("type")
    if kind == "facts":
        return _facts(items, bool(header.get("precomputed")))
    if kind == "rows":
        try:
            dataset = _rows_dataset(header, items)
            cfg = DetectorConfig(**(header.get("detector") or {}))
            found = detect_fragment(dataset, cfg, header.get("slice") or None)
        except (InsightEngineError, KeyError, TypeError, ValueError) as exc:
            raise LlmError(f"행 데이터 블록을 읽을 수 없습니다: {exc}", code="bad_facts") from exc
        context = _facts(header.get("context") or [], True)
        return [*context, *(Fact(item) for item in found)]
    raise LlmError(f"알 수 없는 데이터 블록 종류: {kind}", code="bad_facts")


@dataclass(frozen=True)
class Restated:
    insight: AtomicInsight
    numbers: tuple[str, str, str]
    dims: dict[str, str]


@dataclass(frozen=True)
class Restatement:
    items: list[Restated]
    # Invented entity with no kept fact to attach it to; the answer mentions it in passing.
    stray: str | None = None


def _perturb(rng: np.random.Generator, cfg: SimConfig, value: float, probability: float) -> str:
    original = format_number(value)
    if rng.random() >= probability:
        return original
    magnitude = rng.uniform(0.0, cfg.math_error_scale)
    sign = 1.0 if rng.integers(0, 2) else -1.0
    perturbed = format_number(value * (1.0 + sign * magnitude))
    if perturbed == original:
        perturbed = format_number(value + sign * 0.01)
    return perturbed


def _names_in(facts: Sequence[Fact]) -> tuple[set[str], bool]:
    names: set[str] = set()
    tokens = False
    for fact in facts:
        for value in fact.insight.dims.values():
            if TOKEN_PATTERN.fullmatch(value):
                tokens = True
            elif value:
                names.add(value)
    return names, tokens


def _fabricated_entity(rng: np.random.Generator, names: set[str], tokens: bool) -> str:
    if tokens or not names:
        return "ENT_" + "".join(f"{int(b):02x}" for b in rng.integers(0, 256, size=4))
    candidates = [name for name in FABRICATED_NAMES if name not in names]
    return candidates[int(rng.integers(0, len(candidates)))]


def restate(rng: np.random.Generator, cfg: SimConfig, facts: Sequence[Fact]) -> Restatement:
    """Drop, perturb, corrupt and fabricate according to the configured rates."""
    names, tokens = _names_in(facts)
    raw_names = bool(names) and not tokens
    corruption = cfg.p_hallucination * cfg.name_corruption_factor if raw_names else 0.0

    kept: list[Restated] = []
    for fact in facts:
        if rng.random() < cfg.miss_rate:
            continue
        insight = fact.insight
        probability = cfg.p_math_error * (cfg.copy_error_factor if fact.precomputed else 1.0)
        numbers = tuple(
            _perturb(rng, cfg, number, probability)
            for number in (insight.value, insight.baseline, insight.score)
        )
        dims = dict(insight.dims)
        for key in sorted(dims):
            if corruption and dims[key] in names and rng.random() < corruption:
                suffix = NAME_SUFFIXES[int(rng.integers(0, len(NAME_SUFFIXES)))]
                dims[key] = f"{dims[key]} {suffix}"
        kept.append(Restated(insight, numbers, dims))

    if rng.random() >= cfg.p_hallucination:
        return Restatement(kept)
    if not kept:
        return Restatement(kept, stray=_fabricated_entity(rng, names, tokens))
    target = int(rng.integers(0, len(kept)))
    chosen = kept[target]
    dims = dict(chosen.dims)
    key = sorted(dims)[0] if dims else "entity"
    dims[key] = _fabricated_entity(rng, names, tokens)
    kept[target] = Restated(chosen.insight, chosen.numbers, dims)
    return Restatement(kept)


def restate_totals(
    rng: np.random.Generator,
    cfg: SimConfig,
    entries: Sequence[dict[str, Any]],
    precomputed: bool,
) -> list[str]:
    """Overall rows of a precalculated table, copied with the configured error rate."""
    probability = cfg.p_math_error * (cfg.copy_error_factor if precomputed else 1.0)
    lines = []
    for entry in entries:
        if not isinstance(entry, dict):
            raise LlmError("사전 계산표 항목은 JSON 객체여야 합니다.", code="bad_facts")
        if entry.get("dims"):
            continue
        try:
            metric = str(entry["metric"])
            start = date.fromisoformat(str(entry["period_start"]))
            end = date.fromisoformat(str(entry["period_end"]))
            average = float(entry["average"])
            total = None if entry.get("total") is None else float(entry["total"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LlmError(f"사전 계산표 형식이 잘못되었습니다: {exc}", code="bad_facts") from exc
        if rng.random() < cfg.miss_rate:
            continue
        shown_total = None if total is None else _perturb(rng, cfg, total, probability)
        shown_average = _perturb(rng, cfg, average, probability)
        lines.append(totals_line(metric, start, end, shown_average, shown_total))
    return lines


def restated_json(restatement: Restatement) -> str:
    payload = []
    for item in restatement.items:
        record = item.insight.to_dict()
        record["dims"] = dict(sorted(item.dims.items()))
        record["value"], record["baseline"], record["score"] = (float(n) for n in item.numbers)
        record["description"] = sentence_from(item.insight.kind, *item.numbers)
        payload.append(record)
    text = json.dumps(payload, ensure_ascii=False)
    if restatement.stray is not None:
        return f"Nothing stood out apart from activity around {restatement.stray}.\n{text}"
    return text


def restated_markdown(restatement: Restatement, title: str, totals: Sequence[str] = ()) -> str:
    lines = [f"# {title}", ""]
    if restatement.stray is not None:
        lines += [f"Activity around {restatement.stray} also drew attention this period.", ""]
    if not restatement.items:
        lines += ["## No notable insights", "", "Nothing in the supplied data stands out.", ""]
    else:
        lines += ["The findings below restate what the analysis surfaced.", ""]
        for kind in KIND_ORDER:
            members = [item for item in restatement.items if item.insight.kind is kind]
            if not members:
                continue
            lines += [f"## {section_title(kind)}", ""]
            lines += [f"- {claim_line(item.insight, numbers=item.numbers, dims=item.dims)}" for item in members]
            lines.append("")
    if totals:
        lines += [f"## {TOTALS_TITLE}", ""]
        lines += [f"- {line}" for line in totals]
        lines.append("")
    return "\n".join(lines)


def simulate_analysis(
    cfg: SimConfig,
    facts: str | Sequence[dict[str, Any]] | Sequence[AtomicInsight],
    *,
    precomputed: bool = False,
    title: str = "Insight report",
    rng: np.random.Generator | None = None,
) -> str:
    """Markdown narrative restating each fact, with injected errors."""
    if isinstance(facts, str):
        try:
            facts = json.loads(facts)
        except ValueError as exc:
            raise LlmError("사실 목록이 JSON 형식이 아닙니다.", code="bad_facts") from exc
    if not isinstance(facts, (list, tuple)):
        raise LlmError("사실 목록은 배열이어야 합니다.", code="bad_facts")
    resolved: list[Fact] = []
    for item in facts:
        if isinstance(item, AtomicInsight):
            resolved.append(Fact(item, precomputed))
        else:
            resolved.extend(_facts([item], precomputed))
    if rng is None:
        rng = request_rng(cfg.seed, "simulate_analysis", "\n".join(fact_lines(f.insight for f in resolved)))
    ordered = sorted(resolved, key=lambda fact: fact.insight.sort_key())
    return restated_markdown(restate(rng, cfg, ordered), title)


def _complete_simulated(cfg: SimConfig, req: LlmRequest) -> LlmResponse:
    rng = request_rng(cfg.seed, req.task, req.system_text, req.user_text)
    if req.task == "transform_plan":
        if cfg.scripted_responses:
            text = cfg.scripted_responses[min(req.attempt, len(cfg.scripted_responses)) - 1]
        else:
            text = "[]"
    else:
        header, items = read_data_block(req.user_text)
        facts = perceive(header, items)
        facts = sorted(facts, key=lambda fact: fact.insight.sort_key())
        restated = restate(rng, cfg, facts)
        if req.task == "analysis":
            text = restated_json(restated)
        else:
            totals = restate_totals(rng, cfg, header.get("precalc") or [], bool(header.get("precomputed")))
            text = restated_markdown(restated, str(header.get("title") or "Insight report"), totals)
    return LlmResponse(
        text=text,
        finish_reason="stop",
        usage={
            "prompt_tokens": estimate_tokens(req.system_text + req.user_text),
            "completion_tokens": estimate_tokens(text),
        },
    )


__all__ = [
    "Fact",
    "HttpParams",
    "LlmHandle",
    "LlmRequest",
    "LlmResponse",
    "SimConfig",
    "complete",
    "data_block",
    "fact_lines",
    "perceive",
    "read_data_block",
    "simulate_analysis",
]
