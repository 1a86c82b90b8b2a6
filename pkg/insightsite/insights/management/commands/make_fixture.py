import json

from django.core.management.base import BaseCommand

from insights.bench import FixtureSpec, generate_fixture
from insights.config import detector_config
from insights.datamodel import insights_to_json
from insights.exceptions import ConfigError, InsightEngineError
from insights.ingest import write_csv, write_registry
from insights.management.common import (
    add_config_argument,
    failure,
    output_dir,
    settings_from,
    setup,
    usage_error,
    write_text,
)


class Command(BaseCommand):
    help = "이벤트를 심은 합성 데이터셋과 정답(oracle) 인사이트를 만듭니다."

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--days", type=int)
        parser.add_argument("--spikes", type=int)
        parser.add_argument("--shifts", type=int)
        parser.add_argument("--highs", type=int)
        parser.add_argument("--noise", type=float)
        parser.add_argument("--out", default=".", help="출력 폴더")
        add_config_argument(parser)

    def handle(self, *args, **options):
        setup(self, options)
        cfg = settings_from(
            options,
            {
                "bench": {
                    "days": options["days"],
                    "spikes": options["spikes"],
                    "shifts": options["shifts"],
                    "highs": options["highs"],
                    "noise": options["noise"],
                }
            },
        )
        bench = cfg["bench"]
        try:
            detector = detector_config(cfg)
        except ConfigError as exc:
            raise usage_error(str(exc)) from exc
        spec = FixtureSpec(
            days=bench["days"],
            spikes=bench["spikes"],
            shifts=bench["shifts"],
            highs=bench["highs"],
            noise=bench["noise"],
        )
        try:
            fixture = generate_fixture(spec, options["seed"], detector)
        except InsightEngineError as exc:
            raise failure(exc) from exc

        out = output_dir(options["out"])
        write_csv(fixture.dataset, out / "dataset.csv")
        write_registry(fixture.dataset, out / "registry.json")
        write_text(out / "oracle.json", insights_to_json(fixture.oracle) + "\n")
        write_text(out / "names.json", json.dumps(list(fixture.names), ensure_ascii=False, indent=2) + "\n")
        write_text(
            out / "planted.json",
            json.dumps([event.to_dict() for event in fixture.planted], ensure_ascii=False, indent=2) + "\n",
        )
        self.stdout.write(
            self.style.SUCCESS(
                f"행 {len(fixture.dataset)}개, 심은 이벤트 {len(fixture.planted)}개, "
                f"정답 인사이트 {len(fixture.oracle)}개 → {out}"
            )
        )
