from django.core.management.base import BaseCommand

from insights.bench import FixtureSpec, bench_json, bench_markdown, generate_fixture, run_bench
from insights.config import detector_config
from insights.exceptions import ConfigError, InsightEngineError
from insights.llm import SimConfig
from insights.management.common import (
    add_config_argument,
    failure,
    output_dir,
    settings_from,
    setup,
    usage_error,
    write_text,
)
from insights.pipeline import MODES


class Command(BaseCommand):
    help = "합성 데이터로 다섯 파이프라인을 비교해 bench_report.md/json을 만듭니다."

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=42)
        parser.add_argument("--runs", type=int, default=1, help="seed부터 연속된 시드 개수")
        parser.add_argument("--days", type=int)
        parser.add_argument("--modes", help="쉼표로 구분한 모드 목록")
        parser.add_argument("--sim-math-error", type=float)
        parser.add_argument("--sim-hallucination", type=float)
        parser.add_argument("--sim-miss-rate", type=float)
        parser.add_argument("--spikes", type=int)
        parser.add_argument("--shifts", type=int)
        parser.add_argument("--highs", type=int)
        parser.add_argument("--budget-fraction", type=float)
        parser.add_argument("--jobs", type=int, help="청크 병렬 작업 수 (0: 사용 가능한 코어 수)")
        parser.add_argument(
            "--simulate",
            action="store_true",
            help="벤치마크는 항상 시뮬레이션 모델을 씁니다. 호환용 플래그입니다.",
        )
        parser.add_argument("--out", default=".", help="출력 폴더")
        add_config_argument(parser)

    def handle(self, *args, **options):
        setup(self, options)
        cfg = settings_from(
            options,
            {
                "bench": {
                    "days": options["days"],
                    "modes": options["modes"],
                    "p_math_error": options["sim_math_error"],
                    "p_hallucination": options["sim_hallucination"],
                    "miss_rate": options["sim_miss_rate"],
                    "spikes": options["spikes"],
                    "shifts": options["shifts"],
                    "highs": options["highs"],
                    "budget_fraction": options["budget_fraction"],
                },
                "pipeline": {"jobs": options["jobs"]},
            },
        )
        bench = cfg["bench"]
        modes = bench["modes"]
        unknown = [mode for mode in modes if mode not in MODES]
        if unknown or not modes:
            raise usage_error(f"알 수 없는 모드: {', '.join(unknown) or '(비어 있음)'}")
        if options["runs"] < 1:
            raise usage_error("--runs는 1 이상이어야 합니다.")

        try:
            detector = detector_config(cfg)
            spec = FixtureSpec(
                days=bench["days"],
                spikes=bench["spikes"],
                shifts=bench["shifts"],
                highs=bench["highs"],
                noise=bench["noise"],
            )
            sims = [
                SimConfig(
                    **{
                        **cfg["sim"],
                        "seed": seed,
                        "p_math_error": bench["p_math_error"],
                        "p_hallucination": bench["p_hallucination"],
                        "miss_rate": bench["miss_rate"],
                    }
                )
                for seed in range(options["seed"], options["seed"] + options["runs"])
            ]
        except ConfigError as exc:
            raise usage_error(str(exc)) from exc

        reports = []
        for sim in sims:
            try:
                fixture = generate_fixture(spec, sim.seed, detector)
                reports.append(
                    run_bench(
                        fixture,
                        modes,
                        sim,
                        budget_fraction=bench["budget_fraction"],
                        jobs=cfg["pipeline"]["jobs"],
                        salt=cfg["pipeline"]["salt"],
                    )
                )
            except InsightEngineError as exc:
                raise failure(exc) from exc

        out = output_dir(options["out"])
        write_text(out / "bench_report.md", bench_markdown(reports))
        write_text(out / "bench_report.json", bench_json(reports))
        self.stdout.write(self.style.SUCCESS(f"벤치마크 {len(reports)}회, 모드 {len(modes)}개 → {out}"))
