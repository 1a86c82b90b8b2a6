import json

from django.core.management.base import BaseCommand

from insights.config import clean_config, pipeline_config, report_settings
from insights.datamodel import insights_to_json, validate_dataset
from insights.exceptions import ConfigError, InsightEngineError
from insights.management.common import (
    add_config_argument,
    add_input_arguments,
    failure,
    output_dir,
    read_input,
    settings_from,
    setup,
    usage_error,
    write_text,
)
from insights.narrative import check_fidelity, report_payload, to_html, to_markdown, to_pdf
from insights.pipeline import MODES, RULE_ONLY, run
from insights.preprocess import prepare


class Command(BaseCommand):
    help = "데이터 파일을 분석해 report.md, insights.json, run.json을 만듭니다."

    def add_arguments(self, parser):
        add_input_arguments(parser)
        parser.add_argument("--pipeline", choices=MODES, default=RULE_ONLY)
        add_config_argument(parser)
        parser.add_argument("--out", default=".", help="출력 폴더")
        parser.add_argument(
            "--simulate",
            action="store_true",
            help="환경 변수에 자격 증명이 있어도 시뮬레이션 모델을 사용합니다.",
        )
        parser.add_argument("--seed", type=int, help="시뮬레이션 모델 시드")
        parser.add_argument("--jobs", type=int, help="청크 병렬 작업 수 (0: 사용 가능한 코어 수)")
        parser.add_argument("--anonymize", choices=("auto", "on", "off"))
        parser.add_argument("--chunk-strategy", choices=("temporal", "categorical", "budget"))
        parser.add_argument("--budget-tokens", type=int)
        parser.add_argument("--cap-outliers", action="store_true", help="median ± k·MAD 밖의 값을 잘라냅니다.")
        parser.add_argument("--html", action="store_true", help="report.html도 만듭니다.")
        parser.add_argument("--pdf", action="store_true", help="report.pdf도 만듭니다 (WeasyPrint).")

    def handle(self, *args, **options):
        setup(self, options)
        anonymize = {"on": "true", "off": "false"}.get(options["anonymize"], options["anonymize"])
        cfg = settings_from(
            options,
            {
                "sim": {"seed": options["seed"]},
                "pipeline": {"jobs": options["jobs"], "anonymize": anonymize},
                "chunk": {"strategy": options["chunk_strategy"], "budget_tokens": options["budget_tokens"]},
                "clean": {"cap_outliers": options["cap_outliers"] or None},
            },
        )
        mode = options["pipeline"]
        try:
            pipeline = pipeline_config(cfg, mode, simulate=options["simulate"])
            cleaning = clean_config(cfg)
        except ConfigError as exc:
            raise usage_error(str(exc)) from exc

        # Duplicates are let through here and removed by prepare.
        dataset = read_input(options, cfg, strict=False).dataset
        try:
            dataset, clean_report = prepare(dataset, cleaning)
        except InsightEngineError as exc:
            raise failure(exc) from exc
        violations = validate_dataset(dataset)
        if violations:
            raise failure(f"데이터 검증 실패 ({len(violations)}건): {violations[0]}")
        try:
            result = run(dataset, pipeline)
        except InsightEngineError as exc:
            raise failure(exc) from exc

        out = output_dir(options["out"])
        fidelity = check_fidelity(result.report, result.reference_insights, result.precalc)
        write_text(out / "report.md", to_markdown(result.report))
        write_text(out / "insights.json", insights_to_json(result.insights) + "\n")
        run_info = {
            "mode": result.mode,
            "input": str(options["input"]),
            "leak_count": result.leak_count,
            "facts_sent": result.facts_sent,
            "rows_processed": result.rows_processed,
            "rows_total": result.rows_total,
            "insights": len(result.insights),
            "reference_insights": len(result.reference_insights),
            "math_precision": fidelity.precision,
            "clean": {
                "duplicates_removed": clean_report.duplicates_removed,
                "values_imputed": clean_report.values_imputed,
                "outliers_capped": clean_report.outliers_capped,
                "rows_dropped": clean_report.rows_dropped,
            },
            "report": report_payload(result.report),
        }
        write_text(out / "run.json", json.dumps(run_info, ensure_ascii=False, indent=2, sort_keys=True) + "\n")

        settings = report_settings(cfg)
        if options["html"]:
            write_text(out / "report.html", to_html(result.report, settings))
        if options["pdf"]:
            try:
                to_pdf(result.report, out / "report.pdf", settings)
            except (ImportError, OSError) as exc:
                raise failure(f"PDF를 만들 수 없습니다: {exc}") from exc

        self.stdout.write(
            self.style.SUCCESS(
                f"{result.mode}: 인사이트 {len(result.insights)}개, "
                f"행 {result.rows_processed}/{result.rows_total} → {out}"
            )
        )
