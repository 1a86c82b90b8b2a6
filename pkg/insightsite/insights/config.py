"""Layered configuration.

Precedence, lowest first: ``settings.INSIGHTS`` defaults, a JSON ``--config``
file, the ``LLM_*`` environment variables, command flags. Every value is
coerced to the type of its default; keys the defaults do not know are errors.
"""

from __future__ import annotations

import json
import logging
import os
from copy import deepcopy
from pathlib import Path
from typing import Any, Mapping

from django.conf import settings

from .chunking import ChunkConfig
from .detectors import DetectorConfig
from .exceptions import ConfigError
from .ingest import IngestConfig
from .llm import HttpParams, LlmHandle, SimConfig
from .narrative import ReportSettings
from .pipeline import RULE_ONLY, PipelineConfig
from .preprocess import CleanConfig

logger = logging.getLogger(__name__)

ENVIRONMENT = {
    "LLM_API_URL": ("llm", "api_url"),
    "LLM_API_KEY": ("llm", "api_key"),
    "LLM_MODEL": ("llm", "model"),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _dotted(path: tuple[str, ...]) -> str:
    return ".".join(path)


def _boolean_value(value: Any, path: tuple[str, ...]) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
    if isinstance(value, (int, float)) and value in (0, 1):
        return bool(value)
    raise ConfigError(f"'{_dotted(path)}'에는 true/false 값이 필요합니다: {value!r}")


def _coerce_int(value: Any, path: tuple[str, ...]) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"'{_dotted(path)}'에는 정수가 필요합니다: {value!r}")
    try:
        number = float(value)
    except (ValueError, TypeError):
        raise ConfigError(f"'{_dotted(path)}'에는 정수가 필요합니다: {value!r}") from None
    if not number.is_integer():
        raise ConfigError(f"'{_dotted(path)}'에는 정수가 필요합니다: {value!r}")
    return int(number)


def _coerce_float(value: Any, path: tuple[str, ...]) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"'{_dotted(path)}'에는 숫자가 필요합니다: {value!r}")
    try:
        return float(value)
    except (ValueError, TypeError):
        raise ConfigError(f"'{_dotted(path)}'에는 숫자가 필요합니다: {value!r}") from None


def _coerce_list(value: Any, path: tuple[str, ...]) -> list[str]:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, (list, tuple)):
        return [str(item) for item in value if str(item)]
    raise ConfigError(f"'{_dotted(path)}'에는 목록이 필요합니다: {value!r}")


def _coerce(default: Any, value: Any, path: tuple[str, ...]) -> Any:
    # bool before int: bool is an int subclass.
    if isinstance(default, bool):
        return _boolean_value(value, path)
    if isinstance(default, int):
        return _coerce_int(value, path)
    if isinstance(default, float):
        return _coerce_float(value, path)
    if isinstance(default, list):
        return _coerce_list(value, path)
    if isinstance(default, dict):
        if not default:
            # Open tables such as prompt_overrides take any string keys.
            if not isinstance(value, Mapping):
                raise ConfigError(f"'{_dotted(path)}'에는 객체가 필요합니다.")
            return {str(key): str(item) for key, item in value.items()}
        return merge(default, value, path)
    return str(value)


def merge(base: Mapping[str, Any], overlay: Mapping[str, Any] | None, path: tuple[str, ...] = ()) -> dict[str, Any]:
    """Copy of ``base`` with ``overlay`` coerced onto it; None values keep the base."""
    result = deepcopy(dict(base))
    if overlay is None:
        return result
    if not isinstance(overlay, Mapping):
        raise ConfigError(f"'{_dotted(path) or '설정'}'은 JSON 객체여야 합니다.")
    for key, value in overlay.items():
        if key not in base:
            raise ConfigError(f"알 수 없는 설정 키: {_dotted((*path, str(key)))}")
        if value is None:
            continue
        result[key] = _coerce(base[key], value, (*path, key))
    return result


def defaults() -> dict[str, Any]:
    return deepcopy(settings.INSIGHTS)


def read_config_file(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"설정 파일을 읽을 수 없습니다: {path}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"설정 파일이 올바른 JSON이 아닙니다: {path} ({exc.msg})") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"설정 파일 최상위는 JSON 객체여야 합니다: {path}")
    return payload


def nested(flat: Mapping[str, Any]) -> dict[str, Any]:
    """``{"sim.seed": 3}`` → ``{"sim": {"seed": 3}}``; None values are skipped."""
    result: dict[str, Any] = {}
    for dotted, value in flat.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        target = result
        for part in parents:
            target = target.setdefault(part, {})
        target[leaf] = value
    return result


def environment_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    return nested(
        {_dotted(path): environ[name] for name, path in ENVIRONMENT.items() if environ.get(name)}
    )


def load_config(
    path: str | Path | None = None,
    *,
    environ: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    merged = defaults()
    if path is not None:
        merged = merge(merged, read_config_file(path))
        logger.debug("config file %s merged", path)
    merged = merge(merged, environment_overrides(environ))
    return merge(merged, overrides)


# --- typed views ---------------------------------------------------------------------


def detector_config(cfg: Mapping[str, Any]) -> DetectorConfig:
    return DetectorConfig(**cfg["detector"])


def clean_config(cfg: Mapping[str, Any]) -> CleanConfig:
    return CleanConfig(**cfg["clean"])


def chunk_config(cfg: Mapping[str, Any]) -> ChunkConfig:
    return ChunkConfig(**cfg["chunk"])


def sim_config(cfg: Mapping[str, Any]) -> SimConfig:
    return SimConfig(**cfg["sim"])


def http_params(cfg: Mapping[str, Any]) -> HttpParams:
    llm = cfg["llm"]
    return HttpParams(
        base_url=llm["api_url"],
        api_key=llm["api_key"],
        model=llm["model"],
        timeout=llm["timeout"],
        max_retries=llm["max_retries"],
        backoff=llm["backoff"],
        temperature=llm["temperature"],
    )


def ingest_config(cfg: Mapping[str, Any], registry_path: str | Path | None = None) -> IngestConfig:
    ingest = cfg["ingest"]
    return IngestConfig(
        date_column=ingest["date_column"],
        dimension_columns=tuple(ingest["dimension_columns"]) or None,
        registry_path=Path(registry_path) if registry_path else None,
        delimiter=ingest["delimiter"],
    )


def report_settings(cfg: Mapping[str, Any]) -> ReportSettings:
    return ReportSettings(**cfg["report"])


def llm_handle(cfg: Mapping[str, Any], *, simulate: bool = False) -> LlmHandle | None:
    """Simulator when asked for, else the HTTP endpoint when it is configured."""
    if simulate:
        return LlmHandle.simulated(sim_config(cfg))
    params = http_params(cfg)
    return LlmHandle.http(params) if params.configured else None


def _anonymize(value: str) -> bool | str:
    if value.strip().lower() == "auto":
        return "auto"
    return _boolean_value(value, ("pipeline", "anonymize"))


def pipeline_config(cfg: Mapping[str, Any], mode: str, *, simulate: bool = False) -> PipelineConfig:
    pipeline = cfg["pipeline"]
    budget = pipeline["summary_budget_tokens"]
    return PipelineConfig(
        mode=mode,
        detector=detector_config(cfg),
        chunk=chunk_config(cfg),
        llm=None if mode == RULE_ONLY else llm_handle(cfg, simulate=simulate),
        anonymize=_anonymize(pipeline["anonymize"]),
        precalc=pipeline["precalc"],
        prompt_overrides=dict(pipeline["prompt_overrides"]),
        jobs=pipeline["jobs"],
        protected_names=tuple(pipeline["protected_names"]),
        summary_budget_tokens=budget or None,
        salt=pipeline["salt"],
        report=report_settings(cfg),
        max_tokens=cfg["llm"]["max_tokens"],
    )
