from __future__ import annotations

import numpy as np
from django.test import SimpleTestCase

from insights.chunking import (
    BUDGET,
    CATEGORICAL,
    TEMPORAL,
    ChunkConfig,
    estimate_tokens,
    plan_chunks,
    plan_from_config,
    row_line,
)
from insights.exceptions import ChunkError, ConfigError

from .helpers import sliced_dataset


class EstimateTokensTests(SimpleTestCase):
    def test_four_bytes_per_token(self) -> None:
        self.assertEqual(estimate_tokens(""), 0)
        self.assertEqual(estimate_tokens("abcd"), 1)
        self.assertEqual(estimate_tokens("abcde"), 2)
        # three UTF-8 bytes
        self.assertEqual(estimate_tokens("가"), 1)


class PlanChunksTests(SimpleTestCase):
    def setUp(self) -> None:
        values = list(range(70))
        self.dataset = sliced_dataset({"Acme Corp": values, "Globex": values, "Initech": values})
        self.line_cost = max(estimate_tokens(row_line(self.dataset, r) + "\n") for r in self.dataset.rows)

    def cost(self, indices: tuple[int, ...]) -> int:
        return sum(estimate_tokens(row_line(self.dataset, self.dataset.rows[i]) + "\n") for i in indices)

    def assert_partition(self, chunks: tuple[tuple[int, ...], ...]) -> None:
        flat = [index for chunk in chunks for index in chunk]
        self.assertEqual(flat, list(range(len(self.dataset))))

    def test_budget_chunks_fit_and_keep_order(self) -> None:
        budget = self.line_cost * 25
        plan = plan_chunks(self.dataset, BUDGET, budget)
        self.assertGreater(len(plan), 1)
        self.assert_partition(plan.chunks)
        for chunk in plan.chunks:
            self.assertLessEqual(self.cost(chunk), budget)

    def test_temporal_chunks_stay_in_one_month(self) -> None:
        plan = plan_chunks(self.dataset, TEMPORAL, 100_000)
        self.assertEqual(len(plan), 3)
        for part in plan.datasets(self.dataset):
            self.assertEqual(len({(d.year, d.month) for d in part.dates}), 1)

    def test_categorical_defaults_to_first_dimension(self) -> None:
        plan = plan_chunks(self.dataset, CATEGORICAL, 100_000)
        accounts = [part.dimension_values("account") for part in plan.datasets(self.dataset)]
        self.assertEqual(accounts, [("Acme Corp",), ("Globex",), ("Initech",)])

    def test_categorical_groups_are_split_by_budget(self) -> None:
        plan = plan_chunks(self.dataset, CATEGORICAL, self.line_cost * 30)
        self.assertGreater(len(plan), 3)
        for part in plan.datasets(self.dataset):
            self.assertEqual(len(part.dimension_values("account")), 1)

    def test_unknown_dimension(self) -> None:
        with self.assertRaises(ConfigError):
            plan_chunks(self.dataset, CATEGORICAL, 1000, dimension="region")

    def test_row_larger_than_budget(self) -> None:
        with self.assertRaises(ChunkError) as ctx:
            plan_chunks(self.dataset, BUDGET, 3)
        self.assertEqual(ctx.exception.code, "row_too_large")

    def test_budget_must_be_positive(self) -> None:
        with self.assertRaises(ConfigError):
            plan_chunks(self.dataset, BUDGET, 0)
        with self.assertRaises(ConfigError):
            ChunkConfig(budget_tokens=0)
        with self.assertRaises(ConfigError):
            ChunkConfig(strategy="weekly")

    def test_plan_from_config(self) -> None:
        plan = plan_from_config(self.dataset, ChunkConfig(strategy=CATEGORICAL, dimension="account"))
        self.assertEqual(plan.strategy, CATEGORICAL)
        self.assertEqual(len(plan), 3)


class RandomPlanTests(SimpleTestCase):
    NAMES = ("Acme Corp", "Globex", "Initech", "Umbrella")

    def test_every_strategy_partitions_random_datasets(self) -> None:
        rng = np.random.default_rng(99)
        for _ in range(200):
            days = int(rng.integers(1, 121))
            series = {
                name: [None if rng.random() < 0.05 else int(rng.integers(0, 10_000)) for _ in range(days)]
                for name in self.NAMES[: int(rng.integers(1, 5))]
            }
            dataset = sliced_dataset(series)
            costs = [estimate_tokens(row_line(dataset, record) + "\n") for record in dataset.rows]
            budget = max(costs) * int(rng.integers(1, 41))
            for strategy in (BUDGET, TEMPORAL, CATEGORICAL):
                with self.subTest(days=days, strategy=strategy, budget=budget):
                    plan = plan_chunks(dataset, strategy, budget)
                    flat = [index for chunk in plan.chunks for index in chunk]
                    self.assertEqual(sorted(flat), list(range(len(dataset))))
                    self.assertEqual(len(flat), len(set(flat)))
                    for chunk, part in zip(plan.chunks, plan.datasets(dataset)):
                        self.assertEqual(list(chunk), sorted(chunk))
                        self.assertLessEqual(sum(costs[i] for i in chunk), budget)
                        if strategy == TEMPORAL:
                            self.assertEqual(len({(d.year, d.month) for d in part.dates}), 1)
                        if strategy == CATEGORICAL:
                            self.assertEqual(len(part.dimension_values("account")), 1)
                    if strategy != CATEGORICAL:
                        self.assertEqual(flat, list(range(len(dataset))))
