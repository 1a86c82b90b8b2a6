import json
from pathlib import Path

from django.core.management.base import BaseCommand

from insights.config import ingest_config, llm_handle
from insights.exceptions import ConfigError, InsightEngineError
from insights.ingest import load_registry, read_any
from insights.llm import LlmHandle, SimConfig
from insights.management.common import (
    add_config_argument,
    failure,
    settings_from,
    setup,
    usage_error,
)
from insights.preprocess import DEFAULT_PLAN_RETRIES, infer_transform_plan, save_plan


class Command(BaseCommand):
    help = "입력/출력 샘플 쌍에서 변환 계획을 추론해 JSON으로 저장합니다."

    def add_arguments(self, parser):
        parser.add_argument("--input-sample", required=True)
        parser.add_argument("--output-sample", required=True)
        parser.add_argument("--registry", required=True, help="입력 샘플의 지표 레지스트리")
        parser.add_argument("--output-registry", help="출력 샘플의 지표 레지스트리 (기본: --registry)")
        parser.add_argument("--out", default="plan.json", help="저장할 계획 파일")
        parser.add_argument("--retries", type=int, default=DEFAULT_PLAN_RETRIES)
        parser.add_argument("--simulate", action="store_true")
        parser.add_argument(
            "--script",
            help="시뮬레이션 모델이 시도 순서대로 돌려줄 응답 목록 (JSON 배열 파일)",
        )
        add_config_argument(parser)

    def _samples(self, options, cfg):
        try:
            source = load_registry(options["registry"])
            target = load_registry(options["output_registry"]) if options["output_registry"] else source
            ingest = ingest_config(cfg)
            input_sample = read_any(options["input_sample"], ingest, registry=source).dataset
            output_sample = read_any(options["output_sample"], ingest, registry=target).dataset
        except ConfigError as exc:
            raise usage_error(str(exc)) from exc
        except InsightEngineError as exc:
            raise failure(exc) from exc
        return input_sample, output_sample

    def _llm(self, options, cfg):
        if options["simulate"]:
            scripted = ()
            if options["script"]:
                try:
                    payload = json.loads(Path(options["script"]).read_text(encoding="utf-8"))
                except (OSError, ValueError) as exc:
                    raise usage_error(f"스크립트 파일을 읽을 수 없습니다: {exc}") from exc
                if not isinstance(payload, list):
                    raise usage_error("스크립트 파일은 JSON 배열이어야 합니다.")
                scripted = tuple(item if isinstance(item, str) else json.dumps(item) for item in payload)
            return LlmHandle.simulated(SimConfig(**{**cfg["sim"], "scripted_responses": scripted}))
        handle = llm_handle(cfg)
        if handle is None:
            raise usage_error("LLM 설정이 없습니다. LLM_API_URL/LLM_API_KEY를 지정하거나 --simulate를 쓰세요.")
        return handle

    def handle(self, *args, **options):
        setup(self, options)
        cfg = settings_from(options)
        if options["retries"] < 1:
            raise usage_error("--retries는 1 이상이어야 합니다.")
        try:
            llm = self._llm(options, cfg)
        except ConfigError as exc:
            raise usage_error(str(exc)) from exc
        input_sample, output_sample = self._samples(options, cfg)
        try:
            plan = infer_transform_plan(input_sample, output_sample, llm, retries=options["retries"])
        except InsightEngineError as exc:
            raise failure(exc) from exc
        target = save_plan(plan, options["out"])
        self.stdout.write(self.style.SUCCESS(f"단계 {len(plan)}개 계획 → {target}"))
