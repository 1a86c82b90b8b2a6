from __future__ import annotations

import io
import json
import os
import tempfile
from contextlib import redirect_stderr
from pathlib import Path
from unittest import mock

from django.core.management import CommandError, call_command, execute_from_command_line
from django.test import SimpleTestCase

NO_CREDENTIALS = {"LLM_API_URL": "", "LLM_API_KEY": ""}


def run_command(*args: str) -> str:
    out = io.StringIO()
    call_command(*args, stdout=out, stderr=io.StringIO())
    return out.getvalue()


@mock.patch.dict(os.environ, NO_CREDENTIALS)
class FixtureCommandTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls) -> None:
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls._tmp.name)
        cls.data = cls.root / "fixture"
        with mock.patch.dict(os.environ, NO_CREDENTIALS):
            run_command(
                "make_fixture",
                "--seed", "3",
                "--days", "200",
                "--spikes", "1",
                "--shifts", "1",
                "--highs", "1",
                "--out", str(cls.data),
            )

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()
        super().tearDownClass()

    def input_args(self) -> list[str]:
        return ["--input", str(self.data / "dataset.csv"), "--registry", str(self.data / "registry.json")]

    def test_fixture_files(self) -> None:
        for name in ("dataset.csv", "registry.json", "oracle.json", "names.json", "planted.json"):
            self.assertTrue((self.data / name).exists(), name)
        self.assertEqual(json.loads((self.data / "names.json").read_text(encoding="utf-8")), ["Acme Corp", "Globex", "Initech"])
        self.assertEqual(len(json.loads((self.data / "planted.json").read_text(encoding="utf-8"))), 3)

    def test_fixture_validates(self) -> None:
        self.assertIn("0 violations", run_command("validate", *self.input_args()))

    def test_rule_only_analysis(self) -> None:
        out = self.root / "rule"
        run_command("analyze", *self.input_args(), "--out", str(out), "--html")
        run_info = json.loads((out / "run.json").read_text(encoding="utf-8"))
        self.assertEqual(run_info["mode"], "rule_only")
        self.assertEqual(run_info["math_precision"], 1.0)
        self.assertEqual(run_info["rows_processed"], 600)
        oracle = json.loads((self.data / "oracle.json").read_text(encoding="utf-8"))
        self.assertEqual(json.loads((out / "insights.json").read_text(encoding="utf-8")), oracle)
        self.assertTrue((out / "report.md").read_text(encoding="utf-8").startswith("# Business insight report"))
        self.assertIn("<h1>", (out / "report.html").read_text(encoding="utf-8"))

    def test_simulated_hybrid_analysis(self) -> None:
        out = self.root / "hybrid"
        run_command("analyze", *self.input_args(), "--pipeline", "hybrid", "--simulate", "--out", str(out))
        run_info = json.loads((out / "run.json").read_text(encoding="utf-8"))
        self.assertEqual((run_info["mode"], run_info["leak_count"]), ("hybrid", 0))
        self.assertEqual(run_info["report"]["generator"], "llm_summarized")

    def test_model_modes_need_a_model(self) -> None:
        with self.assertRaises(CommandError) as ctx:
            run_command("analyze", *self.input_args(), "--pipeline", "hybrid", "--out", str(self.root / "none"))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_export_json(self) -> None:
        target = self.root / "export.json"
        run_command("export_dataset", *self.input_args(), "--output", str(target))
        rows = json.loads(target.read_text(encoding="utf-8"))
        self.assertEqual(len(rows), 600)
        self.assertEqual(rows[0]["date"], "2022-01-01")


@mock.patch.dict(os.environ, NO_CREDENTIALS)
class ValidateCommandTests(SimpleTestCase):
    def test_duplicates_fail(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            data = Path(tmp) / "data.csv"
            data.write_text("date,account,sessions\n2024-01-01,Globex,1\n2024-01-01,Globex,2\n", encoding="utf-8")
            registry = Path(tmp) / "registry.json"
            registry.write_text('[{"name": "sessions"}]', encoding="utf-8")
            out = io.StringIO()
            with self.assertRaises(CommandError) as ctx:
                call_command("validate", "--input", str(data), "--registry", str(registry), stdout=out)
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn("duplicate_key", out.getvalue())

    def test_missing_argument_exits_with_usage_code(self) -> None:
        with redirect_stderr(io.StringIO()), self.assertRaises(SystemExit) as ctx:
            execute_from_command_line(["manage.py", "validate", "--registry", "registry.json"])
        self.assertEqual(ctx.exception.code, 2)


@mock.patch.dict(os.environ, NO_CREDENTIALS)
class BenchCommandTests(SimpleTestCase):
    def test_bench_writes_both_reports(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            run_command(
                "bench",
                "--days", "240",
                "--spikes", "1",
                "--shifts", "1",
                "--highs", "1",
                "--modes", "rule_only,hybrid",
                "--out", tmp,
            )
            markdown = (Path(tmp) / "bench_report.md").read_text(encoding="utf-8")
            payload = json.loads((Path(tmp) / "bench_report.json").read_text(encoding="utf-8"))
        self.assertIn("| hybrid |", markdown)
        self.assertEqual([row["mode"] for row in payload["runs"][0]["results"]], ["rule_only", "hybrid"])
        self.assertEqual(payload["label"], "simulated")

    def test_same_seed_gives_identical_json(self) -> None:
        args = ["--seed", "42", "--days", "240", "--spikes", "1", "--shifts", "1", "--highs", "1"]
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            run_command("bench", *args, "--out", first)
            run_command("bench", *args, "--out", second)
            before = (Path(first) / "bench_report.json").read_bytes()
            after = (Path(second) / "bench_report.json").read_bytes()
        self.assertEqual(before, after)
        self.assertEqual(len(json.loads(before)["runs"][0]["results"]), 5)

    def test_unknown_mode(self) -> None:
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(CommandError) as ctx:
            run_command("bench", "--modes", "rule_only,magic", "--out", tmp)
        self.assertEqual(ctx.exception.returncode, 2)


@mock.patch.dict(os.environ, NO_CREDENTIALS)
class InferPlanCommandTests(SimpleTestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.root = Path(self._tmp.name)
        (self.root / "in.csv").write_text("date,account,clicks\n2024-01-01,Globex,5\n2024-01-02,Globex,7\n", encoding="utf-8")
        (self.root / "out.csv").write_text("date,account,visits\n2024-01-01,Globex,5\n2024-01-02,Globex,7\n", encoding="utf-8")
        (self.root / "in.json").write_text('[{"name": "clicks"}]', encoding="utf-8")
        (self.root / "out.json").write_text('[{"name": "visits"}]', encoding="utf-8")

    def args(self) -> list[str]:
        return [
            "infer_plan",
            "--input-sample", str(self.root / "in.csv"),
            "--output-sample", str(self.root / "out.csv"),
            "--registry", str(self.root / "in.json"),
            "--output-registry", str(self.root / "out.json"),
            "--out", str(self.root / "plan.json"),
        ]

    def test_scripted_plan_is_verified_and_saved(self) -> None:
        script = self.root / "script.json"
        script.write_text(
            json.dumps(["not a plan", [{"op": "rename", "args": {"map": {"clicks": "visits"}}}]]),
            encoding="utf-8",
        )
        run_command(*self.args(), "--simulate", "--script", str(script))
        plan = json.loads((self.root / "plan.json").read_text(encoding="utf-8"))
        self.assertEqual(plan, [{"op": "rename", "args": {"map": {"clicks": "visits"}}}])

    def test_rejected_plans(self) -> None:
        with self.assertRaises(CommandError) as ctx:
            run_command(*self.args(), "--simulate")
        self.assertEqual(ctx.exception.returncode, 1)

    def test_needs_a_model(self) -> None:
        with self.assertRaises(CommandError) as ctx:
            run_command(*self.args())
        self.assertEqual(ctx.exception.returncode, 2)
