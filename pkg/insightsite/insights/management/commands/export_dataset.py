from pathlib import Path

from django.core.management.base import BaseCommand

from insights.config import clean_config
from insights.exceptions import ConfigError, InsightEngineError
from insights.ingest import write_csv, write_json
from insights.management.common import (
    add_config_argument,
    add_input_arguments,
    failure,
    load_input,
    settings_from,
    setup,
    usage_error,
)
from insights.preprocess import prepare


class Command(BaseCommand):
    help = "데이터셋을 정규 형식의 CSV 또는 JSON으로 내보냅니다."

    def add_arguments(self, parser):
        add_input_arguments(parser)
        parser.add_argument("--output", required=True, help="내보낼 파일 (.csv 또는 .json)")
        parser.add_argument("--format", choices=("csv", "json"), help="생략하면 확장자로 정합니다.")
        parser.add_argument("--clean", action="store_true", help="중복 제거와 결측치 처리를 먼저 합니다.")
        add_config_argument(parser)

    def handle(self, *args, **options):
        setup(self, options)
        cfg = settings_from(options)
        target = Path(options["output"])
        fmt = options["format"] or ("json" if target.suffix.lower() == ".json" else "csv")

        dataset = load_input(options, cfg)
        if options["clean"]:
            try:
                dataset, _ = prepare(dataset, clean_config(cfg))
            except ConfigError as exc:
                raise usage_error(str(exc)) from exc
            except InsightEngineError as exc:
                raise failure(exc) from exc
        try:
            if fmt == "json":
                write_json(dataset, target)
            else:
                write_csv(dataset, target, delimiter=cfg["ingest"]["delimiter"])
        except OSError as exc:
            raise failure(f"파일을 쓸 수 없습니다: {target} ({exc})") from exc
        self.stdout.write(self.style.SUCCESS(f"행 {len(dataset)}개 → {target}"))
