from __future__ import annotations

import json
from typing import Any
from unittest import mock

import requests
from django.test import SimpleTestCase

from insights.anonymize import TOKEN_PATTERN
from insights.chunking import estimate_tokens
from insights.datamodel import InsightKind, MetricSpec, registry_payload
from insights.exceptions import ConfigError, LlmError
from insights.llm import (
    FABRICATED_NAMES,
    HttpParams,
    LlmHandle,
    LlmRequest,
    SimConfig,
    complete,
    data_block,
    fact_lines,
    perceive,
    read_data_block,
    simulate_analysis,
)
from insights.wording import parse_claims

from .helpers import day, make_insight

PARAMS = HttpParams(base_url="https://llm.example.com/v1/", api_key="secret", max_retries=3, backoff=1.0)
REQUEST = LlmRequest(system_text="system", user_text="hello", task="report")


def chat_response(status: int, payload: Any = None, headers: dict[str, str] | None = None) -> requests.Response:
    response = requests.Response()
    response.status_code = status
    response._content = json.dumps(payload if payload is not None else {}).encode("utf-8")
    response.headers.update(headers or {})
    return response


def answer(text: str) -> dict[str, Any]:
    return {
        "choices": [{"message": {"content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 5, "completion_tokens": 2, "total_tokens": 7},
    }


@mock.patch("insights.llm.time.sleep")
@mock.patch("insights.llm.requests.post")
class HttpProviderTests(SimpleTestCase):
    def test_successful_completion(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.return_value = chat_response(200, answer("fine"))
        response = complete(LlmHandle.http(PARAMS), REQUEST)
        self.assertEqual(response.text, "fine")
        self.assertEqual(response.usage["total_tokens"], 7)
        url = post.call_args.args[0]
        self.assertEqual(url, "https://llm.example.com/v1/chat/completions")
        body = post.call_args.kwargs["json"]
        self.assertEqual(body["messages"][1], {"role": "user", "content": "hello"})
        self.assertEqual(post.call_args.kwargs["headers"]["Authorization"], "Bearer secret")
        sleep.assert_not_called()

    def test_server_error_is_retried_with_backoff(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.side_effect = [chat_response(502), chat_response(500), chat_response(200, answer("ok"))]
        self.assertEqual(complete(LlmHandle.http(PARAMS), REQUEST).text, "ok")
        self.assertEqual([c.args[0] for c in sleep.call_args_list], [1.0, 2.0])

    def test_rate_limit_honours_retry_after(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.side_effect = [chat_response(429, headers={"Retry-After": "5"}), chat_response(200, answer("ok"))]
        complete(LlmHandle.http(PARAMS), REQUEST)
        sleep.assert_called_once_with(5.0)

    def test_gives_up_after_max_retries(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.return_value = chat_response(503)
        with self.assertRaises(LlmError) as ctx:
            complete(LlmHandle.http(PARAMS), REQUEST)
        self.assertEqual(ctx.exception.code, "transport")
        self.assertEqual(post.call_count, 3)
        self.assertEqual(sleep.call_count, 2)

    def test_rate_limit_exhausted(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.return_value = chat_response(429)
        with self.assertRaises(LlmError) as ctx:
            complete(LlmHandle.http(PARAMS), REQUEST)
        self.assertEqual(ctx.exception.code, "rate_limited")

    def test_connection_errors_are_retried(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.side_effect = [requests.ConnectionError("refused"), chat_response(200, answer("ok"))]
        self.assertEqual(complete(LlmHandle.http(PARAMS), REQUEST).text, "ok")

    def test_auth_failure_is_not_retried(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.return_value = chat_response(401)
        with self.assertRaises(LlmError) as ctx:
            complete(LlmHandle.http(PARAMS), REQUEST)
        self.assertEqual(ctx.exception.code, "auth")
        self.assertEqual(post.call_count, 1)

    def test_malformed_body(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.return_value = chat_response(200, {"choices": []})
        with self.assertRaises(LlmError) as ctx:
            complete(LlmHandle.http(PARAMS), REQUEST)
        self.assertEqual(ctx.exception.code, "malformed_response")

    def test_missing_credentials(self, post: mock.Mock, sleep: mock.Mock) -> None:
        with self.assertRaises(LlmError) as ctx:
            complete(LlmHandle.http(HttpParams()), REQUEST)
        self.assertEqual(ctx.exception.code, "not_configured")
        post.assert_not_called()

    def test_empty_request(self, post: mock.Mock, sleep: mock.Mock) -> None:
        with self.assertRaises(LlmError) as ctx:
            complete(LlmHandle.http(PARAMS), LlmRequest(system_text="s", user_text="  "))
        self.assertEqual(ctx.exception.code, "empty_request")

    def test_default_params_try_three_times(self, post: mock.Mock, sleep: mock.Mock) -> None:
        post.return_value = chat_response(503)
        params = HttpParams(base_url="https://llm.example.com/v1", api_key="secret")
        with self.assertRaises(LlmError) as ctx:
            complete(LlmHandle.http(params), REQUEST)
        self.assertEqual(ctx.exception.code, "transport")
        self.assertEqual(post.call_count, 3)
        self.assertEqual([c.args[0] for c in sleep.call_args_list], [1.0, 2.0])


class HandleTests(SimpleTestCase):
    def test_provider_must_match_params(self) -> None:
        with self.assertRaises(ConfigError):
            LlmHandle("http", SimConfig())

    def test_probabilities_are_checked(self) -> None:
        with self.assertRaises(ConfigError):
            SimConfig(p_math_error=1.5)


class DataBlockTests(SimpleTestCase):
    def test_block_reads_back(self) -> None:
        facts = [make_insight()]
        text = "intro\n" + data_block({"type": "facts"}, fact_lines(facts)) + "\noutro"
        header, items = read_data_block(text)
        self.assertEqual(header, {"type": "facts"})
        self.assertEqual(items, [facts[0].to_dict()])

    def test_missing_block(self) -> None:
        with self.assertRaises(LlmError) as ctx:
            read_data_block("no data here")
        self.assertEqual(ctx.exception.code, "bad_facts")

    def test_rows_block_is_read_with_the_detectors(self) -> None:
        header = {
            "type": "rows",
            "metrics": registry_payload({"sessions": MetricSpec("sessions")}),
            "dimensions": [],
            "detector": {"window": 7, "min_history": 3},
        }
        values = [100.0] * 10 + [300.0, 100.0]
        items = [{"date": day(i).isoformat(), "sessions": v} for i, v in enumerate(values)]
        kinds = {(fact.insight.kind, fact.insight.period_start) for fact in perceive(header, items)}
        self.assertIn((InsightKind.SPIKE, day(10)), kinds)

    def test_unknown_block_type(self) -> None:
        with self.assertRaises(LlmError):
            perceive({"type": "charts"}, [])


class SimulatorTests(SimpleTestCase):
    def setUp(self) -> None:
        self.facts = [
            make_insight(dims={"account": "Globex"}, kind=InsightKind.DIMENSION_ANOMALY, value=40.0, baseline=100.0, score=-8.1),
            make_insight(start=41, value=310.5, baseline=101.25, score=3.07),
            make_insight(kind=InsightKind.ALL_TIME_HIGH, start=60, value=500.0, baseline=420.0, score=0.19),
        ]

    def test_perfect_model_restates_facts(self) -> None:
        text = simulate_analysis(SimConfig(), self.facts)
        claims = parse_claims(text)
        self.assertEqual(
            sorted((c.identity, c.value, c.baseline, c.score) for c in claims),
            sorted((f.identity, f.value, f.baseline, f.score) for f in self.facts),
        )

    def test_same_seed_same_text(self) -> None:
        cfg = SimConfig(seed=3, p_math_error=0.5, p_hallucination=0.5)
        self.assertEqual(simulate_analysis(cfg, self.facts), simulate_analysis(cfg, self.facts))

    def test_math_errors_change_numbers(self) -> None:
        claims = parse_claims(simulate_analysis(SimConfig(p_math_error=1.0), self.facts))
        self.assertEqual(len(claims), 3)
        for claim in claims:
            original = next(f for f in self.facts if f.identity == claim.identity)
            self.assertNotEqual(claim.value, original.value)

    def test_copy_errors_are_rarer_for_precomputed_facts(self) -> None:
        cfg = SimConfig(p_math_error=1.0, copy_error_factor=0.0)
        claims = parse_claims(simulate_analysis(cfg, self.facts, precomputed=True))
        self.assertEqual(
            sorted((c.value, c.baseline, c.score) for c in claims),
            sorted((f.value, f.baseline, f.score) for f in self.facts),
        )

    def test_hallucination_invents_a_plausible_name(self) -> None:
        claims = parse_claims(simulate_analysis(SimConfig(p_hallucination=1.0, name_corruption_factor=0.0), self.facts))
        invented = [value for claim in claims for value in claim.dims.values() if value != "Globex"]
        self.assertEqual(len(invented), 1)
        self.assertIn(invented[0], FABRICATED_NAMES)

    def test_hallucination_with_tokens_invents_a_token(self) -> None:
        facts = [make_insight(dims={"account": "ENT_0a1b2c3d"}, kind=InsightKind.DIMENSION_ANOMALY)]
        claims = parse_claims(simulate_analysis(SimConfig(p_hallucination=1.0), facts))
        value = claims[0].dims["account"]
        self.assertRegex(value, r"^ENT_[0-9a-f]{8}$")
        self.assertNotEqual(value, "ENT_0a1b2c3d")

    def test_miss_rate_drops_everything(self) -> None:
        text = simulate_analysis(SimConfig(miss_rate=1.0), self.facts)
        self.assertIn("No notable insights", text)
        self.assertEqual(parse_claims(text), [])

    def test_completion_tasks(self) -> None:
        block = data_block({"type": "facts", "title": "Weekly"}, fact_lines(self.facts))
        handle = LlmHandle.simulated(SimConfig())
        report = complete(handle, LlmRequest(system_text="s", user_text=block, task="summarize"))
        self.assertTrue(report.text.startswith("# Weekly"))
        analysis = complete(handle, LlmRequest(system_text="s", user_text=block, task="analysis"))
        self.assertEqual(len(json.loads(analysis.text)), 3)
        self.assertGreater(analysis.usage["prompt_tokens"], 0)

    def test_scripted_plan_answers(self) -> None:
        handle = LlmHandle.simulated(SimConfig(scripted_responses=("first", "second")))
        texts = [
            complete(handle, LlmRequest(system_text="s", user_text="u", task="transform_plan", attempt=n)).text
            for n in (1, 2, 3)
        ]
        self.assertEqual(texts, ["first", "second", "second"])

    def test_empty_answer_can_still_name_an_invented_entity(self) -> None:
        facts = [make_insight(dims={"account": "ENT_0a1b2c3d"}, kind=InsightKind.DIMENSION_ANOMALY)]
        cfg = SimConfig(miss_rate=1.0, p_hallucination=1.0)
        text = simulate_analysis(cfg, facts)
        self.assertEqual(parse_claims(text), [])
        stray = [token for token in TOKEN_PATTERN.findall(text) if token != "ENT_0a1b2c3d"]
        self.assertEqual(len(stray), 1)
        block = data_block({"type": "facts"}, fact_lines(facts))
        analysis = complete(LlmHandle.simulated(cfg), LlmRequest(system_text="s", user_text=block, task="analysis"))
        self.assertRegex(analysis.text, r"ENT_[0-9a-f]{8}")
        self.assertTrue(analysis.text.endswith("[]"))

    def test_no_facts_can_still_name_an_invented_entity(self) -> None:
        block = data_block({"type": "facts", "title": "Weekly"}, [])
        text = complete(
            LlmHandle.simulated(SimConfig(p_hallucination=1.0)),
            LlmRequest(system_text="s", user_text=block, task="summarize"),
        ).text
        self.assertIn("No notable insights", text)
        self.assertEqual(len(TOKEN_PATTERN.findall(text)), 1)

    def test_precalc_totals_are_restated(self) -> None:
        entry = {
            "metric": "sessions",
            "dims": {},
            "period_start": "2024-01-01",
            "period_end": "2024-01-31",
            "total": 3100.0,
            "average": 100.0,
            "count": 31,
        }
        sliced = dict(entry, dims={"account": "ENT_0a1b2c3d"})
        header = {"type": "facts", "precomputed": True, "precalc": [entry, sliced]}
        block = data_block(header, fact_lines(self.facts))
        text = complete(LlmHandle.simulated(SimConfig()), LlmRequest(system_text="s", user_text=block, task="summarize")).text
        self.assertIn("## Period totals\n\n- [2024-01-01 to 2024-01-31] sessions (all): total 3100, average 100 per row\n", text)
        self.assertEqual(len(parse_claims(text)), 3)

    def test_usage_counts_tokens_like_the_chunker(self) -> None:
        block = data_block({"type": "facts"}, fact_lines(self.facts))
        response = complete(LlmHandle.simulated(SimConfig()), LlmRequest(system_text="s", user_text=block, task="analysis"))
        self.assertEqual(response.usage["prompt_tokens"], estimate_tokens("s" + block))
        self.assertEqual(response.usage["completion_tokens"], estimate_tokens(response.text))
