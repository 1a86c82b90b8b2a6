from django.core.management.base import BaseCommand

from insights.datamodel import validate_dataset
from insights.management.common import (
    add_config_argument,
    add_input_arguments,
    failure,
    read_input,
    settings_from,
    setup,
)


class Command(BaseCommand):
    help = "데이터 파일을 읽어 불변 조건 위반을 나열합니다. 위반이 없으면 0으로 끝납니다."

    def add_arguments(self, parser):
        add_input_arguments(parser)
        add_config_argument(parser)

    def handle(self, *args, **options):
        setup(self, options)
        cfg = settings_from(options)
        result = read_input(options, cfg, strict=False)
        violations = validate_dataset(result.dataset)
        for violation in violations:
            self.stdout.write(str(violation))
        summary = f"{len(violations)} violations"
        if violations:
            self.stdout.write(summary)
            raise failure(summary)
        self.stdout.write(self.style.SUCCESS(summary))
