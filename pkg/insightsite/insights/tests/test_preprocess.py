from __future__ import annotations

import json
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from insights.datamodel import Dataset, MetricSpec, PlanStep, Record, TransformPlan
from insights.exceptions import ConfigError, PreprocessError
from insights.llm import LlmHandle, SimConfig, complete
from insights.preprocess import (
    CleanConfig,
    apply_plan,
    cap_bounds,
    cap_outliers,
    clean,
    dedup_rows,
    ensure_clean,
    fill_missing,
    infer_transform_plan,
    integrate,
    load_plan,
    normalize,
    parse_plan,
    precalculate,
    prepare,
    reduce,
    save_plan,
)

from .helpers import ad_dataset, day, series_dataset, sliced_dataset


def column(dataset: Dataset, metric: str) -> list[float | None]:
    return [record.values[metric] for record in dataset.rows]


class CleaningTests(SimpleTestCase):
    def test_dedup_keeps_first_row(self) -> None:
        dataset = ad_dataset([(0, "Globex", 10, 4.0), (0, "Globex", 99, 9.0), (1, "Globex", 5, 1.0)])
        deduped, removed = dedup_rows(dataset)
        self.assertEqual(removed, 1)
        self.assertEqual(column(deduped, "clicks"), [10, 5])

    def test_fill_median(self) -> None:
        filled, imputed, dropped = fill_missing(series_dataset([1, None, 3]), "median")
        self.assertEqual(column(filled, "sessions"), [1.0, 2.0, 3.0])
        self.assertEqual((imputed, dropped), (1, 0))

    def test_fill_zero_and_drop(self) -> None:
        dataset = series_dataset([1, None, 3])
        zeroed, _, _ = fill_missing(dataset, "zero")
        self.assertEqual(column(zeroed, "sessions"), [1.0, 0.0, 3.0])
        kept, imputed, dropped = fill_missing(dataset, "drop")
        self.assertEqual(len(kept), 2)
        self.assertEqual((imputed, dropped), (0, 1))

    def test_fill_unknown_strategy(self) -> None:
        with self.assertRaises(PreprocessError) as ctx:
            fill_missing(series_dataset([1]), "mean")
        self.assertEqual(ctx.exception.code, "bad_strategy")

    def test_fill_all_missing_metric(self) -> None:
        with self.assertRaises(PreprocessError) as ctx:
            fill_missing(series_dataset([None, None]), "median")
        self.assertEqual(ctx.exception.code, "empty_metric")

    def test_cap_bounds(self) -> None:
        self.assertEqual(cap_bounds([1, 2, 3, 4, 100], 3), (0.0, 6.0))

    def test_cap_bounds_with_zero_mad(self) -> None:
        self.assertEqual(cap_bounds([5, 5, 5, 5, 9], 3), (5.0, 5.0))

    def test_cap_outliers(self) -> None:
        capped, count = cap_outliers(series_dataset([1, 2, 3, 4, 100]), 3)
        self.assertEqual(column(capped, "sessions"), [1.0, 2.0, 3.0, 4.0, 6.0])
        self.assertEqual(count, 1)

    def test_cap_k_must_be_positive(self) -> None:
        with self.assertRaises(PreprocessError) as ctx:
            clean(series_dataset([1, 2]), cap_k=0)
        self.assertEqual(ctx.exception.code, "bad_strategy")
        with self.assertRaises(ConfigError):
            CleanConfig(cap_k=-1)
        with self.assertRaises(ConfigError):
            CleanConfig(strategy="interpolate")

    def test_clean_report(self) -> None:
        dataset = ad_dataset(
            [(0, "Globex", 10, 4.0), (0, "Globex", 11, 4.0), (1, "Globex", None, 4.0), (2, "Globex", 12, 4.0)]
        )
        cleaned, report = clean(dataset)
        self.assertEqual(report.duplicates_removed, 1)
        # clicks and the derived cpc were both empty on day 1
        self.assertEqual(report.values_imputed, 2)
        self.assertEqual(len(cleaned), 3)
        ensure_clean(cleaned)

    def test_clean_is_idempotent(self) -> None:
        dataset = series_dataset([10, 12, 11, 300, 9, None, 10, 13, 0])
        once, _ = clean(dataset)
        twice, report = clean(once)
        self.assertEqual(twice, once)
        self.assertEqual(report.outliers_capped, 0)

    def test_prepare_leaves_outliers_unless_asked(self) -> None:
        dataset = series_dataset([1, 2, 3, 4, 100, None])
        prepared, report = prepare(dataset, CleanConfig())
        self.assertEqual(column(prepared, "sessions")[4], 100.0)
        self.assertEqual(report.outliers_capped, 0)
        capped, report = prepare(dataset, CleanConfig(cap_outliers=True))
        self.assertEqual(report.outliers_capped, 1)
        self.assertLess(column(capped, "sessions")[4], 100.0)

    def test_filled_inputs_rederive_the_ratio(self) -> None:
        dataset = ad_dataset([(0, "Globex", 10, 4.0), (1, "Globex", None, 6.0), (2, "Globex", 30, 9.0)])
        filled, imputed, _ = fill_missing(dataset, "median")
        self.assertEqual(column(filled, "clicks"), [10.0, 20.0, 30.0])
        self.assertEqual(column(filled, "cpc")[1], 6.0 / 20.0)
        self.assertEqual(imputed, 2)

    def test_zero_fill_keeps_a_value_for_empty_ratios(self) -> None:
        filled, imputed, _ = fill_missing(ad_dataset([(0, "Globex", None, 6.0)]), "zero")
        self.assertEqual(filled.rows[0].values, {"clicks": 0.0, "cost": 6.0, "cpc": 0.0})
        self.assertEqual(imputed, 2)

    def test_capped_inputs_rederive_the_ratio(self) -> None:
        rows = [(i, "Globex", 10, cost) for i, cost in enumerate([1.0, 2.0, 3.0, 4.0, 100.0])]
        capped, count = cap_outliers(ad_dataset(rows), 3)
        self.assertEqual(column(capped, "cost")[4], 6.0)
        self.assertEqual(column(capped, "cpc"), [0.1, 0.2, 0.3, 0.4, 0.6])
        self.assertEqual(count, 1)

    def test_ensure_clean_rejects_missing(self) -> None:
        with self.assertRaises(PreprocessError) as ctx:
            ensure_clean(series_dataset([1, None]))
        self.assertEqual(ctx.exception.code, "not_clean")


class ReduceNormalizeIntegrateTests(SimpleTestCase):
    def test_reduce_drops_ratio_with_its_input(self) -> None:
        dataset = ad_dataset([(0, "Globex", 10, 4.0), (1, "Globex", 10, 9.0), (2, "Globex", 10, 1.0)])
        reduced = reduce(dataset, min_variance=0.5)
        self.assertEqual(tuple(reduced.metrics), ("cost",))
        self.assertEqual(set(reduced.rows[0].values), {"cost"})

    def test_reduce_keeps_varying_metrics(self) -> None:
        dataset = series_dataset([1, 5, 9])
        self.assertIs(reduce(dataset, min_variance=1.0), dataset)

    def test_normalize_minmax(self) -> None:
        normalized = normalize(series_dataset([0, 5, 10]))
        self.assertEqual(column(normalized, "sessions"), [0.0, 0.5, 1.0])

    def test_normalize_constant_column(self) -> None:
        normalized = normalize(series_dataset([4, 4]), method="zscore")
        self.assertEqual(column(normalized, "sessions"), [0.0, 0.0])

    def test_normalize_skips_ratio_inputs_by_default(self) -> None:
        dataset = ad_dataset([(0, "Globex", 10, 4.0), (1, "Globex", 20, 9.0)])
        self.assertEqual(normalize(dataset), dataset)
        with self.assertRaises(PreprocessError):
            normalize(dataset, ["clicks"])
        with self.assertRaises(PreprocessError):
            normalize(dataset, ["cpc"])

    def test_integrate_merges_metrics(self) -> None:
        visits = sliced_dataset({"Globex": [1, 2]}, metric="sessions")
        orders = sliced_dataset({"Globex": [5, None], "Initech": [7, 8]}, metric="orders")
        merged = integrate([visits, orders])
        self.assertEqual(tuple(merged.metrics), ("sessions", "orders"))
        self.assertEqual(len(merged), 4)
        globex = merged.select({"account": "Globex"}, day(0), day(0)).rows[0]
        self.assertEqual(globex.values, {"sessions": 1.0, "orders": 5.0})
        initech = merged.select({"account": "Initech"}, day(1), day(1)).rows[0]
        self.assertIsNone(initech.values["sessions"])

    def test_integrate_conflicting_values(self) -> None:
        left = sliced_dataset({"Globex": [1, 2]})
        right = sliced_dataset({"Globex": [1, 3]})
        with self.assertRaises(PreprocessError) as ctx:
            integrate([left, right])
        self.assertEqual(ctx.exception.code, "integration_conflict")

    def test_integrate_different_dimensions(self) -> None:
        with self.assertRaises(PreprocessError) as ctx:
            integrate([series_dataset([1]), sliced_dataset({"Globex": [1]})])
        self.assertEqual(ctx.exception.code, "integration_conflict")


class PrecalculateTests(SimpleTestCase):
    def setUp(self) -> None:
        self.dataset = ad_dataset(
            [(0, "Globex", 10, 5.0), (1, "Globex", 30, 10.0), (0, "Acme Corp", 40, 4.0)]
        )

    def test_ratio_is_sum_over_sum(self) -> None:
        table = precalculate(self.dataset, [(day(0), day(1))], [{"account": "Globex"}])
        entry = table.get("cpc", {"account": "Globex"})
        self.assertEqual(entry.average, 15.0 / 40.0)
        self.assertIsNone(entry.total)
        self.assertEqual(entry.count, 2)

    def test_additive_totals(self) -> None:
        table = precalculate(self.dataset, [(day(0), day(1))])
        entry = table.get("clicks", period=(day(0), day(1)))
        self.assertEqual((entry.total, entry.average), (80.0, 80.0 / 3))
        with self.assertRaises(KeyError):
            table.get("clicks", {"account": "Globex"})

    def test_empty_period(self) -> None:
        with self.assertRaises(PreprocessError) as ctx:
            precalculate(self.dataset, [(day(5), day(6))])
        self.assertEqual(ctx.exception.code, "empty_period")

    def test_requires_clean_data(self) -> None:
        dataset = ad_dataset([(0, "Globex", None, 5.0)])
        with self.assertRaises(PreprocessError) as ctx:
            precalculate(dataset, [(day(0), day(0))])
        self.assertEqual(ctx.exception.code, "not_clean")

    def test_zero_denominator(self) -> None:
        dataset = ad_dataset([(0, "Globex", 0, 5.0)])
        with self.assertRaises(PreprocessError) as ctx:
            precalculate(fill_missing(dataset, "zero")[0], [(day(0), day(0))])
        self.assertEqual(ctx.exception.code, "zero_denominator")

    def test_random_datasets_weight_ratios_by_volume(self) -> None:
        rng = np.random.default_rng(7)
        naive_differs = 0
        for _ in range(500):
            days = int(rng.integers(2, 11))
            accounts = ["Acme Corp", "Globex", "Initech"][: int(rng.integers(1, 4))]
            rows = [
                (offset, account, int(rng.integers(1, 101)), float(rng.integers(0, 501)))
                for offset in range(days)
                for account in accounts
            ]
            dataset = ad_dataset(rows)
            table = precalculate(dataset, [(day(0), day(days - 1))])
            cost = sum(row[3] for row in rows)
            clicks = sum(row[2] for row in rows)
            self.assertEqual(table.get("cpc").average, cost / clicks)
            self.assertEqual(table.get("clicks").total, clicks)
            naive = sum(row[3] / row[2] for row in rows) / len(rows)
            if abs(naive - cost / clicks) > 1e-6:
                naive_differs += 1

            middle = int(rng.integers(1, days))
            halves = precalculate(dataset, [(day(0), day(middle - 1)), (day(middle), day(days - 1))])
            for metric in ("clicks", "cost"):
                parts = [entry.total for entry in halves.entries if entry.metric == metric]
                self.assertEqual(sum(parts), table.get(metric).total)
        self.assertGreater(naive_differs, 0)


class TransformPlanTests(SimpleTestCase):
    def setUp(self) -> None:
        self.source = ad_dataset([(0, "Globex", 10, 1.0), (1, "Globex", 20, 2.0)])

    def test_parse_plan_accepts_fenced_json(self) -> None:
        plan = parse_plan('```json\n[{"op": "dedup", "args": {}}, {"op": "fill_missing", "args": {"strategy": "zero"}}]\n```')
        self.assertEqual([step.op for step in plan.steps], ["dedup", "fill_missing"])

    def test_parse_plan_rejects_unknown_op(self) -> None:
        with self.assertRaises(PreprocessError) as ctx:
            parse_plan('[{"op": "pivot", "args": {}}]')
        self.assertEqual(ctx.exception.code, "plan_invalid")

    def test_parse_plan_rejects_bad_args(self) -> None:
        for text in (
            '[{"op": "scale", "args": {"metric": "cost"}}]',
            '[{"op": "cap_outliers", "args": {"k": -1}}]',
            '{"op": "dedup"}',
            "not json",
        ):
            with self.subTest(text=text), self.assertRaises(PreprocessError):
                parse_plan(text)

    def test_apply_rename_and_scale(self) -> None:
        plan = TransformPlan(
            steps=(
                PlanStep("rename", {"map": {"cost": "spend"}}),
                PlanStep("scale", {"metric": "spend", "factor": 100}),
            )
        )
        result = apply_plan(self.source, plan)
        self.assertEqual(result.metrics["cpc"].numerator, "spend")
        self.assertEqual(column(result, "spend"), [100.0, 200.0])

    def test_apply_reports_failing_step(self) -> None:
        plan = parse_plan('[{"op": "dedup", "args": {}}, {"op": "drop_column", "args": {"name": "region"}}]')
        with self.assertRaises(PreprocessError) as ctx:
            apply_plan(self.source, plan)
        self.assertEqual(ctx.exception.code, "bad_step")
        self.assertEqual(ctx.exception.step, 1)

    def test_drop_column_cascades_to_ratio(self) -> None:
        plan = parse_plan('[{"op": "drop_column", "args": {"name": "clicks"}}]')
        self.assertEqual(tuple(apply_plan(self.source, plan).metrics), ("cost",))

    def test_saved_plan_loads(self) -> None:
        plan = parse_plan('[{"op": "cap_outliers", "args": {"k": 2.5}}]')
        with tempfile.TemporaryDirectory() as tmp:
            path = save_plan(plan, Path(tmp) / "plan.json")
            self.assertEqual(load_plan(path), plan)


class InferTransformPlanTests(SimpleTestCase):
    def setUp(self) -> None:
        registry = {"cost": MetricSpec("cost")}
        self.input_sample = Dataset.build(
            [Record(day(0), {}, {"cost": 1.0}), Record(day(1), {}, {"cost": 2.0})], registry
        )
        self.output_sample = Dataset.build(
            [Record(day(0), {}, {"cost": 100.0}), Record(day(1), {}, {"cost": 200.0})], registry
        )

    def scripted(self, *responses: str) -> LlmHandle:
        return LlmHandle.simulated(SimConfig(scripted_responses=responses))

    def test_feedback_loop_recovers(self) -> None:
        scale = json.dumps([{"op": "scale", "args": {"metric": "cost", "factor": 100}}])
        llm = self.scripted("no plan here", '[{"op": "dedup", "args": {}}]', scale)
        plan = infer_transform_plan(self.input_sample, self.output_sample, llm)
        self.assertEqual(plan.steps, (PlanStep("scale", {"metric": "cost", "factor": 100}),))

    def test_gives_up_after_retries(self) -> None:
        with self.assertRaises(PreprocessError) as ctx:
            infer_transform_plan(self.input_sample, self.output_sample, self.scripted("[]"), retries=2)
        self.assertEqual(ctx.exception.code, "plan_rejected")

    def test_scripted_answers_are_found_within_two_attempts(self) -> None:
        rng = np.random.default_rng(11)
        for _ in range(10):
            factor = int(rng.integers(2, 1000))
            output = Dataset.build(
                [Record(day(0), {}, {"cost": 1.0 * factor}), Record(day(1), {}, {"cost": 2.0 * factor})],
                {"cost": MetricSpec("cost")},
            )
            right = json.dumps([{"op": "scale", "args": {"metric": "cost", "factor": factor}}])
            wrong = json.dumps([{"op": "scale", "args": {"metric": "cost", "factor": factor + 1}}])
            answers = (right,) if rng.random() < 0.5 else (wrong, right)
            with self.subTest(factor=factor, attempts=len(answers)):
                with mock.patch("insights.preprocess.complete", wraps=complete) as spy:
                    plan = infer_transform_plan(self.input_sample, output, self.scripted(*answers))
                self.assertEqual(apply_plan(self.input_sample, plan), output)
                self.assertEqual(spy.call_count, len(answers))

    def test_default_retries_make_exactly_three_attempts(self) -> None:
        wrong = json.dumps([{"op": "scale", "args": {"metric": "cost", "factor": 3}}])
        with mock.patch("insights.preprocess.complete", wraps=complete) as spy:
            with self.assertRaises(PreprocessError) as ctx:
                infer_transform_plan(self.input_sample, self.output_sample, self.scripted(wrong))
        self.assertEqual(ctx.exception.code, "plan_rejected")
        self.assertEqual(spy.call_count, 3)
        self.assertEqual([c.args[1].attempt for c in spy.call_args_list], [1, 2, 3])

    def test_requires_shared_columns(self) -> None:
        other = series_dataset([1, 2], metric="visits")
        with self.assertRaises(PreprocessError) as ctx:
            infer_transform_plan(self.input_sample, other, self.scripted("[]"))
        self.assertEqual(ctx.exception.code, "no_shared_columns")
