"""Helpers shared by the insight management commands.

Exit codes: 2 for usage and configuration problems, 1 for data and stage
errors. Django's ``CommandError(returncode=...)`` carries them out.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Mapping

from django.core.management.base import BaseCommand, CommandError, CommandParser
from django.core.management.color import no_style

from insights.config import ingest_config, load_config
from insights.datamodel import Dataset
from insights.exceptions import ConfigError, InsightEngineError
from insights.ingest import IngestResult, load_registry, read_any

USAGE = 2
FAILURE = 1

VERBOSITY_LEVELS = {
    0: logging.ERROR,
    1: logging.WARNING,
    2: logging.INFO,
    3: logging.DEBUG,
}


def configure_logging(verbosity: int) -> None:
    logging.getLogger("insights").setLevel(VERBOSITY_LEVELS.get(int(verbosity), logging.DEBUG))


def colour_disabled(options: Mapping[str, Any]) -> bool:
    return bool(options.get("no_color")) or "NO_COLOR" in os.environ


def setup(command: BaseCommand, options: Mapping[str, Any]) -> None:
    configure_logging(options["verbosity"])
    if colour_disabled(options):
        command.style = no_style()


def usage_error(message: str) -> CommandError:
    return CommandError(message, returncode=USAGE)


def failure(exc: InsightEngineError | str) -> CommandError:
    if isinstance(exc, InsightEngineError):
        return CommandError(f"[{exc.code}] {exc}", returncode=FAILURE)
    return CommandError(exc, returncode=FAILURE)


def add_config_argument(parser: CommandParser) -> None:
    parser.add_argument("--config", help="JSON 설정 파일 (settings.INSIGHTS 위에 병합)")


def add_input_arguments(parser: CommandParser) -> None:
    parser.add_argument("--input", required=True, help="CSV 또는 JSON 데이터 파일")
    parser.add_argument("--registry", required=True, help="지표 레지스트리 JSON")


def settings_from(options: Mapping[str, Any], flags: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Merged configuration; any problem with it is a usage error."""
    try:
        return load_config(options.get("config"), overrides=flags)
    except ConfigError as exc:
        raise usage_error(str(exc)) from exc


def read_input(options: Mapping[str, Any], cfg: Mapping[str, Any], *, strict: bool = True) -> IngestResult:
    try:
        ingest = ingest_config(cfg, options["registry"])
        registry = load_registry(options["registry"])
        return read_any(options["input"], ingest, registry=registry, strict=strict)
    except ConfigError as exc:
        raise usage_error(str(exc)) from exc
    except InsightEngineError as exc:
        raise failure(exc) from exc


def load_input(options: Mapping[str, Any], cfg: Mapping[str, Any]) -> Dataset:
    return read_input(options, cfg).dataset


def output_dir(path: str | None) -> Path:
    target = Path(path or ".")
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise failure(f"출력 폴더를 만들 수 없습니다: {target} ({exc})") from exc
    return target


def write_text(path: Path, text: str) -> Path:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise failure(f"파일을 쓸 수 없습니다: {path} ({exc})") from exc
    return path
