import json
import os
import sys
import tempfile
import unittest

# Add src to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

from errors import ConfigurationError, RewriteError
from schema import ArgumentSpec, FieldId, Query, StandardizedTool
from services.llm_service import LlmResponse, ResponseCache
from services.retrieval_service import build_sparse_index
from services.rewriter_service import (
    PrfContext, RewriterService, identity_rewrite, load_rewritten, mock_rewrite, parse_rewritten, prf_candidates,
    rewrite, write_rewritten,
)


class FakeProvider:
    def __init__(self, *replies: str, model: str = "fake-model"):
        self.replies = list(replies)
        self.requests = []
        self.cache_tag = f"fake|{model}"

    async def complete(self, request):
        self.requests.append(request)
        return LlmResponse(text=self.replies.pop(0))


def need(intent: str) -> dict:
    return {"user_intent": intent, "tool_description": f"tool that can {intent}", "expected_response": "a result"}


TOOLS = {
    "weather": StandardizedTool("weather", "get the weather forecast for a city"),
    "currency": StandardizedTool("currency", "convert money between currencies"),
    "translate": StandardizedTool("translate", "translate text into another language"),
    "summarize": StandardizedTool("summarize", "summarize a long text"),
}


class TestMockRewrite(unittest.TestCase):
    def test_compound_request_yields_two_needs(self):
        rq = mock_rewrite(Query("q", "analyze the sales trend and generate a summary report"))
        self.assertGreaterEqual(len(rq.tool_needs), 2)
        self.assertEqual(rq.tool_needs[0].user_intent, "analyze the sales trend")
        self.assertEqual(rq.tool_needs[1].user_intent, "generate a summary report")

    def test_and_then_splits(self):
        rq = mock_rewrite(Query("q", "translate this text and then summarize it"))
        self.assertEqual([n.user_intent for n in rq.tool_needs], ["translate this text", "summarize it"])

    def test_and_between_nouns_does_not_split(self):
        rq = mock_rewrite(Query("q", "compare apples and oranges"))
        self.assertEqual(len(rq.tool_needs), 1)

    def test_single_need(self):
        rq = mock_rewrite(Query("q", "get weather"))
        self.assertEqual(len(rq.tool_needs), 1)
        self.assertEqual(rq.tool_needs[0].projection(FieldId.RESPONSE), "result of: get weather")

    def test_currency_arguments(self):
        rq = mock_rewrite(Query("q", "convert 5 USD to EUR"))
        self.assertEqual(
            rq.extracted_arguments,
            (ArgumentSpec("amount", "number"), ArgumentSpec("source currency"), ArgumentSpec("target currency")),
        )

    def test_named_entities_become_roles(self):
        rq = mock_rewrite(Query("q", "Find flights to Paris and book a hotel in Rome"))
        roles = [a.role for a in rq.extracted_arguments]
        self.assertIn("Paris", roles)
        self.assertIn("Rome", roles)
        self.assertNotIn("Find", roles)
        self.assertEqual(len(rq.tool_needs), 2)

    def test_need_count_is_capped(self):
        rq = mock_rewrite(Query("q", "; ".join(f"get item {i}" for i in range(12))), max_needs=3)
        self.assertEqual(len(rq.tool_needs), 3)

    def test_identity_rewrite(self):
        rq = identity_rewrite(Query("q", "book a table"))
        self.assertEqual(len(rq.tool_needs), 1)
        for f in (FieldId.DESCRIPTION, FieldId.RESPONSE, FieldId.EXAMPLES):
            self.assertEqual(rq.tool_needs[0].projection(f), "book a table")
        self.assertEqual(rq.extracted_arguments, (ArgumentSpec("book a table"),))


class TestPrfCandidates(unittest.TestCase):
    def setUp(self):
        self.index = build_sparse_index({t: tool.description for t, tool in TOOLS.items()})

    def test_top_k_and_exemplars(self):
        prf = prf_candidates(Query("q", "translate and summarize text"), self.index, 3, TOOLS, exemplars=2)
        self.assertEqual(len(prf.candidate_descriptions), 3)
        self.assertEqual(len(prf.exemplar_docs), 2)
        self.assertEqual(set(prf.candidate_ids[:2]), {"translate", "summarize"})
        self.assertEqual(list(prf.scores), sorted(prf.scores, reverse=True))

    def test_k_larger_than_corpus(self):
        prf = prf_candidates(Query("q", "weather"), self.index, 50, TOOLS)
        self.assertEqual(len(prf.candidate_ids), len(TOOLS))

    def test_invalid_inputs(self):
        with self.assertRaises(ConfigurationError):
            prf_candidates(Query("q", "x"), None, 5, TOOLS)
        with self.assertRaises(ConfigurationError):
            prf_candidates(Query("q", "x"), self.index, 0, TOOLS)


class TestParseRewritten(unittest.TestCase):
    def test_valid_output(self):
        text = json.dumps({"tool_needs": [need("translate")], "extracted_arguments": [{"role": "text", "type": "string"}]})
        rq = parse_rewritten(text, "q1")
        self.assertEqual(rq.query_id, "q1")
        self.assertEqual(rq.extracted_arguments, (ArgumentSpec("text", "string"),))

    def test_missing_subfield(self):
        bad = {"user_intent": "x", "tool_description": "", "expected_response": "y"}
        with self.assertRaises(ValueError):
            parse_rewritten(json.dumps({"tool_needs": [bad]}), "q1")

    def test_empty_role(self):
        text = json.dumps({"tool_needs": [need("a")], "extracted_arguments": [{"role": " "}]})
        with self.assertRaises(ValueError):
            parse_rewritten(text, "q1")

    def test_too_many_needs_are_truncated(self):
        text = json.dumps({"tool_needs": [need(f"step {i}") for i in range(10)]})
        with self.assertLogs("Toolsift.Rewriter", level="WARNING"):
            rq = parse_rewritten(text, "q1", max_needs=8)
        self.assertEqual(len(rq.tool_needs), 8)


class TestLlmRewrite(unittest.IsolatedAsyncioTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.cache = ResponseCache(self.tmp.name)
        self.prf = PrfContext((("translate", TOOLS["translate"].description),), (TOOLS["translate"],))

    def tearDown(self):
        self.tmp.cleanup()

    async def test_prompt_carries_candidates_and_is_cached(self):
        reply = json.dumps({"tool_needs": [need("translate text")], "extracted_arguments": []})
        provider = FakeProvider(reply)
        query = Query("q1", "please translate this")

        first = await rewrite(query, self.prf, provider, self.cache)
        second = await rewrite(Query("q2", "please translate this"), self.prf, provider, self.cache)

        self.assertEqual(len(provider.requests), 1)
        prompt = provider.requests[0].messages[1]["content"]
        self.assertIn("translate text into another language", prompt)
        self.assertIn("please translate this", prompt)
        self.assertEqual(first.tool_needs, second.tool_needs)
        self.assertEqual(second.query_id, "q2")

    async def test_different_candidates_miss_the_cache(self):
        reply = json.dumps({"tool_needs": [need("x")]})
        provider = FakeProvider(reply, reply)
        other = PrfContext((("summarize", TOOLS["summarize"].description),), ())
        await rewrite(Query("q", "same text"), self.prf, provider, self.cache)
        await rewrite(Query("q", "same text"), other, provider, self.cache)
        self.assertEqual(len(provider.requests), 2)

    async def test_other_model_misses_the_cache(self):
        reply = json.dumps({"tool_needs": [need("x")]})
        first, second = FakeProvider(reply, model="model-a"), FakeProvider(reply, model="model-b")
        await rewrite(Query("q", "same text"), self.prf, first, self.cache)
        await rewrite(Query("q", "same text"), self.prf, second, self.cache)
        self.assertEqual((len(first.requests), len(second.requests)), (1, 1))


    async def test_repair_then_failure(self):
        provider = FakeProvider("garbage", "more garbage")
        with self.assertRaises(RewriteError) as ctx:
            await rewrite(Query("q9", "x"), self.prf, provider, self.cache)
        self.assertEqual(ctx.exception.query_id, "q9")
        self.assertEqual(len(provider.requests), 2)

    async def test_zero_needs_is_an_error(self):
        provider = FakeProvider(json.dumps({"tool_needs": []}))
        with self.assertRaises(RewriteError):
            await rewrite(Query("q", "x"), self.prf, provider, self.cache)

    async def test_service_mock_mode(self):
        service = RewriterService(None, None, mock=True)
        out = await service.rewrite_all([Query("q", "get weather")], TOOLS, None)
        self.assertEqual(out[0].query_id, "q")


class TestPersistence(unittest.TestCase):
    def test_write_then_load(self):
        rewritten = [mock_rewrite(Query("q", "convert 5 USD to EUR"))]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "rewritten.jsonl")
            write_rewritten(rewritten, path)
            self.assertEqual(load_rewritten(path), rewritten)


if __name__ == '__main__':
    unittest.main()
