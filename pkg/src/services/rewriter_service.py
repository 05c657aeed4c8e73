"""
Query rewriting: a user request becomes field-aligned tool needs plus the
argument roles it supplies, conditioned on the tools a lexical pre-retrieval
surfaces for it.
"""

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

from errors import ConfigurationError, RewriteError
from schema import ArgumentSpec, Query, RewrittenQuery, StandardizedTool, ToolNeed
from services.llm_service import ChatProvider, LlmRequest, ResponseCache, gather_bounded
from services.retrieval_service import SparseIndex, sparse_top_n
from services.standardizer_service import _extract_json, load_template, template_fingerprint

logger = logging.getLogger("Toolsift.Rewriter")

TEMPLATE_VERSION = "rewrite_v1"
DEFAULT_PRF_K = 20
DEFAULT_EXEMPLARS = 3
MAX_NEEDS = 8


@dataclass(frozen=True)
class PrfContext:
    candidate_descriptions: tuple[tuple[str, str], ...]
    exemplar_docs: tuple[StandardizedTool, ...]
    scores: tuple[float, ...] = ()

    @property
    def candidate_ids(self) -> list[str]:
        return [tool_id for tool_id, _ in self.candidate_descriptions]


def prf_candidates(query: Query, description_index: Optional[SparseIndex], K: int,
                   tools: Mapping[str, StandardizedTool], exemplars: int = DEFAULT_EXEMPLARS) -> PrfContext:
    """Top-K standardized descriptions for the raw query, plus full docs of the top few."""
    if description_index is None or description_index.doc_count == 0:
        raise ConfigurationError("Pseudo-relevance feedback needs a non-empty description index")
    if K < 1:
        raise ConfigurationError("K must be a positive integer")

    ranked = sparse_top_n(description_index, query.text, K)
    return PrfContext(
        candidate_descriptions=tuple((tool_id, tools[tool_id].description) for tool_id, _ in ranked),
        exemplar_docs=tuple(tools[tool_id] for tool_id, _ in ranked[:exemplars]),
        scores=tuple(score for _, score in ranked),
    )


# ---------------------------------------------------------------------------
# Heuristic rewriting
# ---------------------------------------------------------------------------

ACTION_VERBS = frozenset("""
    add analyze analyse answer book buy calculate cancel check classify compare compute convert count
    create delete describe detect download draw email estimate explain export extract fetch filter find
    generate get give identify import list look make notify open order plot post predict read recommend
    remind remove retrieve save schedule search send set share show sort summarize summarise tell track
    translate update upload write
""".split())

_HARD_SPLIT = re.compile(r"\s*;\s*|,?\s+and then\s+", re.IGNORECASE)
_AND = re.compile(r"\s+and\s+", re.IGNORECASE)
_QUOTED = re.compile(r"[\"“']([^\"”']+)[\"”']")
_NUMBER = re.compile(r"(?<![\w.])\d+(?:[.,]\d+)?(?![\w.])")
_TRANSFER = re.compile(r"\b([A-Z][\w]*)\s+(?:to|into)\s+([A-Z][\w]*)\b")
_CAPITALIZED = re.compile(r"\b[A-Z][\w]*\b")


def _split_clauses(text: str) -> list[str]:
    clauses = []
    for part in _HARD_SPLIT.split(text.strip()):
        pieces = _AND.split(part)
        current = pieces[0]
        for piece in pieces[1:]:
            first_word = piece.split(maxsplit=1)[0].lower() if piece.strip() else ""
            if first_word in ACTION_VERBS:
                clauses.append(current)
                current = piece
            else:
                current = f"{current} and {piece}"
        clauses.append(current)
    return [c.strip(" .,!?") for c in clauses if c.strip(" .,!?")]


def _argument_kind(a: str, b: str) -> str:
    if len(a) == 3 and len(b) == 3 and a.isupper() and b.isupper():
        return "currency"
    return "value"


def _extract_arguments(text: str) -> list[ArgumentSpec]:
    args: list[ArgumentSpec] = []
    consumed: set[str] = set()

    if _NUMBER.search(text):
        args.append(ArgumentSpec("amount", "number"))
    for a, b in _TRANSFER.findall(text):
        kind = _argument_kind(a, b)
        args.append(ArgumentSpec(f"source {kind}", "string"))
        args.append(ArgumentSpec(f"target {kind}", "string"))
        consumed.update((a, b))
    for span in _QUOTED.findall(text):
        args.append(ArgumentSpec(span.strip(), "string"))
    words = text.split()
    sentence_start = words[0] if words else ""
    for token in _CAPITALIZED.findall(text):
        if token in consumed or token == sentence_start.strip("\"'“"):
            continue
        args.append(ArgumentSpec(token, "string"))

    seen, unique = set(), []
    for arg in args:
        if arg.role and arg.role not in seen:
            seen.add(arg.role)
            unique.append(arg)
    return unique


def mock_rewrite(query: Query, max_needs: int = MAX_NEEDS) -> RewrittenQuery:
    """Deterministic clause-splitting rewrite; no network."""
    clauses = _split_clauses(query.text) or [query.text.strip()]
    needs = tuple(
        ToolNeed(user_intent=c, tool_description=c, expected_response=f"result of: {c}")
        for c in clauses[:max_needs]
    )
    return RewrittenQuery(query_id=query.id, tool_needs=needs,
                          extracted_arguments=tuple(_extract_arguments(query.text)))


def identity_rewrite(query: Query) -> RewrittenQuery:
    """The original query in every aligned slot (no-rewriting ablation)."""
    need = ToolNeed(user_intent=query.text, tool_description=query.text, expected_response=query.text)
    return RewrittenQuery(query_id=query.id, tool_needs=(need,),
                          extracted_arguments=(ArgumentSpec(role=query.text),))


# ---------------------------------------------------------------------------
# LLM rewriting
# ---------------------------------------------------------------------------

def parse_rewritten(text: str, query_id: str, max_needs: int = MAX_NEEDS) -> RewrittenQuery:
    """Raises ValueError on malformed output; an empty need list is returned as-is."""
    data = _extract_json(text)
    raw_needs = data.get("tool_needs")
    if not isinstance(raw_needs, list):
        raise ValueError("'tool_needs' must be a list")

    needs = []
    for need in raw_needs:
        if not isinstance(need, dict):
            raise ValueError("every tool need must be an object")
        values = [str(need.get(k) or "").strip() for k in ("user_intent", "tool_description", "expected_response")]
        if not all(values):
            raise ValueError("every tool need needs user_intent, tool_description and expected_response")
        needs.append(ToolNeed(*values))
    if len(needs) > max_needs:
        logger.warning(f"Query {query_id}: {len(needs)} tool needs truncated to {max_needs}")
        needs = needs[:max_needs]

    raw_args = data.get("extracted_arguments") or []
    if not isinstance(raw_args, list):
        raise ValueError("'extracted_arguments' must be a list")
    args = []
    for arg in raw_args:
        if isinstance(arg, dict) and str(arg.get("role") or "").strip():
            args.append(ArgumentSpec(str(arg["role"]).strip(), str(arg.get("type") or "string")))
        else:
            raise ValueError("every extracted argument needs a non-empty 'role'")

    return RewrittenQuery(query_id=query_id, tool_needs=tuple(needs), extracted_arguments=tuple(args))


def _render_prompt(query: Query, prf: PrfContext, max_needs: int, version: str) -> list[dict]:
    system, user_template = load_template(version)
    candidates = "\n".join(f"{i}. {desc}" for i, (_, desc) in enumerate(prf.candidate_descriptions, start=1))
    exemplars = "\n".join(
        json.dumps({k: v for k, v in t.to_dict().items() if k != "tool_id"}, ensure_ascii=False)
        for t in prf.exemplar_docs
    )
    user = user_template.format(candidates=candidates or "(none)", exemplars=exemplars or "(none)",
                                query=query.text, max_needs=max_needs)
    return [{"role": "system", "content": system}, {"role": "user", "content": user}]


def _serialize(rq: RewrittenQuery) -> str:
    data = rq.to_dict()
    data.pop("query_id")
    return json.dumps(data, sort_keys=True, ensure_ascii=False)


def _from_cached(text: str, query_id: str) -> RewrittenQuery:
    data = json.loads(text)
    data["query_id"] = query_id
    return RewrittenQuery.from_dict(data)


async def rewrite(query: Query, prf: PrfContext, provider: ChatProvider, cache: ResponseCache,
                  max_needs: int = MAX_NEEDS, version: str = TEMPLATE_VERSION) -> RewrittenQuery:
    key = ResponseCache.key(
        provider.cache_tag, query.text, ",".join(prf.candidate_ids), template_fingerprint(version)
    )
    cached = cache.get(key)
    if cached is not None:
        return _from_cached(cached, query.id)

    messages = _render_prompt(query, prf, max_needs, version)
    response = await provider.complete(LlmRequest(messages=messages))
    try:
        rq = parse_rewritten(response.text, query.id, max_needs)
    except (ValueError, json.JSONDecodeError) as e:
        logger.warning(f"Repairing unparseable rewrite for query {query.id}: {e}")
        messages = messages + [
            {"role": "assistant", "content": response.text},
            {"role": "user", "content": f"Your reply could not be used: {e}. Return only the corrected JSON object."},
        ]
        response = await provider.complete(LlmRequest(messages=messages))
        try:
            rq = parse_rewritten(response.text, query.id, max_needs)
        except (ValueError, json.JSONDecodeError) as e:
            logger.error(f"Query {query.id} still unparseable after repair: {e}")
            raise RewriteError(query.id, f"unparseable model output after repair ({e})")

    if not rq.tool_needs:
        raise RewriteError(query.id, "model returned no tool needs")

    text = _serialize(rq)
    cache.put(key, text)
    return _from_cached(text, query.id)


class RewriterService:
    def __init__(self, provider: Optional[ChatProvider], cache: Optional[ResponseCache],
                 parallelism: int = 4, mock: bool = False, K: int = DEFAULT_PRF_K,
                 exemplars: int = DEFAULT_EXEMPLARS, max_needs: int = MAX_NEEDS):
        if not mock and (provider is None or cache is None):
            raise ValueError("A chat provider and cache are required unless running with mocks")
        self.provider = provider
        self.cache = cache
        self.parallelism = parallelism
        self.mock = mock
        self.K = K
        self.exemplars = exemplars
        self.max_needs = max_needs

    async def rewrite_all(self, queries: list[Query], tools: Mapping[str, StandardizedTool],
                          description_index: SparseIndex) -> list[RewrittenQuery]:
        if self.mock:
            return [mock_rewrite(q, self.max_needs) for q in queries]

        logger.info(f"Rewriting {len(queries)} queries (K={self.K}, {self.parallelism} calls in flight)")

        async def one(query: Query) -> RewrittenQuery:
            prf = prf_candidates(query, description_index, self.K, tools, self.exemplars)
            return await rewrite(query, prf, self.provider, self.cache, self.max_needs)

        return await gather_bounded([lambda q=q: one(q) for q in queries], self.parallelism)


def write_rewritten(queries: list[RewrittenQuery], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rq in queries:
            f.write(json.dumps(rq.to_dict(), ensure_ascii=False) + "\n")


def load_rewritten(path) -> list[RewrittenQuery]:
    with open(path, "r", encoding="utf-8") as f:
        return [RewrittenQuery.from_dict(json.loads(line)) for line in f if line.strip()]
