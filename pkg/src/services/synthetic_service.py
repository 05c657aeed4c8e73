"""
Planted synthetic corpora for offline runs.

Every query has exactly one relevant tool. The query and the signal field of
that tool share a bigram of two tokens that appear nowhere else in any
signal field. Everything else is seeded noise drawn from a separate vocabulary.

Parameters are uniform across the corpus: every tool takes the same two
common parameters (matched by every query's arguments) plus one parameter
whose name no argument carries. That parameter is optional on every tool
except a decoy: a decoy copies a relevant tool and flips it to required, so
the two differ only through the penalty and no parameter flag marks the
relevant set.
"""

import logging
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import ConfigurationError
from schema import (
    SEMANTIC_FIELDS, ArgumentSpec, Dataset, FieldId, ParamSpec, Qrels, Query, RawTool, RewrittenQuery,
    StandardizedTool, ToolNeed,
)
from services.corpus_service import save_dataset, validate_dataset
from services.rewriter_service import write_rewritten
from services.standardizer_service import write_standardized

logger = logging.getLogger("Toolsift.Synthetic")

COMMON_PARAMS = (("query", "string"), ("limit", "integer"))
DECOY_PREFIX = "decoy-"
TOOL_PREFIX = "tool-"


@dataclass(frozen=True)
class PlantSpec:
    corpus_size: int = 20
    queries: int = 5
    signal_field: str = "description"
    noise_vocab: int = 500
    decoy_fraction: float = 0.0
    seed: int = 7
    # tools that carry a query's bigram in the other two text fields
    confusers_per_query: int = 0
    query_noise_words: int = 3
    name: str = "synthetic"

    def __post_init__(self):
        if self.corpus_size < 10:
            raise ConfigurationError(f"A planted corpus needs at least 10 tools, got {self.corpus_size}")
        if self.queries < 1:
            raise ConfigurationError("A planted corpus needs at least one query")
        if FieldId(self.signal_field) not in SEMANTIC_FIELDS:
            raise ConfigurationError(f"Signal field must be a text field, got '{self.signal_field}'")
        if not 0.0 <= self.decoy_fraction < 1.0:
            raise ConfigurationError("decoy_fraction must be in [0, 1)")
        if self.queries + self.decoys > self.corpus_size:
            raise ConfigurationError(
                f"{self.queries} relevant tools and {self.decoys} decoys do not fit in {self.corpus_size} tools"
            )
        if self.decoys > self.queries:
            raise ConfigurationError(f"{self.decoys} decoys need as many queries, got {self.queries}")

    @property
    def decoys(self) -> int:
        return int(round(self.decoy_fraction * self.corpus_size))


@dataclass
class SyntheticSet:
    dataset: Dataset
    tools: list[StandardizedTool]
    rewritten: list[RewrittenQuery]
    # relevant tool id -> its decoy
    decoys: dict[str, str] = field(default_factory=dict)
    bigrams: dict[str, tuple[str, str]] = field(default_factory=dict)


class _Words:
    """Seeded pools of distinct lowercase tokens."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set()

    def fresh(self, count: int) -> list[str]:
        letters = np.array(list(string.ascii_lowercase))
        words = []
        while len(words) < count:
            word = "".join(self.rng.choice(letters, size=int(self.rng.integers(5, 9))))
            if word not in self.used:
                self.used.add(word)
                words.append(word)
        return words


def _raw_doc(tool: StandardizedTool) -> dict:
    return {
        "name": tool.tool_id,
        "description": tool.description,
        "parameters": [p.to_dict() for p in tool.parameters],
        "response": tool.response,
        "examples": list(tool.examples),
    }


def _with_field(tool: StandardizedTool, field_id: FieldId, extra: str) -> StandardizedTool:
    if field_id == FieldId.DESCRIPTION:
        return StandardizedTool(tool.tool_id, f"{tool.description} {extra}", tool.parameters, tool.response, tool.examples)
    if field_id == FieldId.RESPONSE:
        return StandardizedTool(tool.tool_id, tool.description, tool.parameters, f"{tool.response} {extra}", tool.examples)
    return StandardizedTool(tool.tool_id, tool.description, tool.parameters, tool.response, tool.examples + (extra,))


def generate(spec: PlantSpec) -> SyntheticSet:
    rng = np.random.default_rng(spec.seed)
    words = _Words(rng)
    words.used.update(name for name, _ in COMMON_PARAMS)
    words.used.update(("string", "integer", "required", "optional", "tool", "decoy"))
    vocab = np.array(words.fresh(spec.noise_vocab))
    signal = FieldId(spec.signal_field)
    other_fields = [f for f in SEMANTIC_FIELDS if f != signal]

    def noise(n: int) -> str:
        return " ".join(rng.choice(vocab, size=n))

    def params() -> tuple[ParamSpec, ...]:
        common = tuple(ParamSpec(name, type_hint) for name, type_hint in COMMON_PARAMS)
        return common + (ParamSpec(noise(1), "string", "", False),)

    ids = [f"{TOOL_PREFIX}{i:04d}" for i in rng.permutation(spec.corpus_size - spec.decoys)]
    tools: dict[str, StandardizedTool] = {}
    for tool_id in ids:
        tools[tool_id] = StandardizedTool(
            tool_id=tool_id,
            description=noise(8),
            parameters=params(),
            response=noise(6),
            examples=(noise(6), noise(6)),
        )

    queries, rewritten, entries, bigrams = [], [], [], {}
    args = tuple(ArgumentSpec(name, type_hint) for name, type_hint in COMMON_PARAMS)
    for q in range(spec.queries):
        query_id, target = f"q{q:04d}", ids[q]
        bigram = " ".join(words.fresh(2))
        bigrams[query_id] = tuple(bigram.split())
        tools[target] = _with_field(tools[target], signal, bigram)

        others = [t for t in ids if t != target]
        for confuser in rng.choice(others, size=min(spec.confusers_per_query, len(others)), replace=False):
            for f in other_fields:
                tools[str(confuser)] = _with_field(tools[str(confuser)], f, bigram)

        text = " ".join([bigram] + ([noise(spec.query_noise_words)] if spec.query_noise_words else []))
        projections = {f: noise(4) for f in SEMANTIC_FIELDS}
        projections[signal] = bigram
        need = ToolNeed(
            user_intent=text,
            tool_description=projections[FieldId.DESCRIPTION],
            expected_response=projections[FieldId.RESPONSE],
        )
        queries.append(Query(id=query_id, text=text))
        rewritten.append(RewrittenQuery(query_id=query_id, tool_needs=(need,), extracted_arguments=args))
        entries.append((query_id, target, 1))

    decoys = {}
    for d in range(spec.decoys):
        twin = tools[ids[d]]
        decoy_id = f"{DECOY_PREFIX}{d:04d}"
        flipped = twin.parameters[:-1] + (ParamSpec(twin.parameters[-1].name, "string", "", True),)
        tools[decoy_id] = StandardizedTool(decoy_id, twin.description, flipped, twin.response, twin.examples)
        decoys[twin.tool_id] = decoy_id

    ordered = [tools[t] for t in sorted(tools)]
    dataset = Dataset(
        name=spec.name,
        tools=tuple(RawTool(id=t.tool_id, source_tag=spec.name, doc=_raw_doc(t)) for t in ordered),
        queries=tuple(queries),
        qrels=Qrels(tuple(entries)),
    )
    validate_dataset(dataset)
    logger.info(f"Generated {len(ordered)} tools ({len(decoys)} decoys) and {len(queries)} queries, seed {spec.seed}")
    return SyntheticSet(dataset=dataset, tools=ordered, rewritten=rewritten, decoys=decoys, bigrams=bigrams)


def write_synthetic(synthetic: SyntheticSet, dataset_dir, workdir) -> None:
    """The dataset in its on-disk layout plus ground-truth stage artifacts."""
    save_dataset(synthetic.dataset, dataset_dir)
    workdir = Path(workdir)
    write_standardized(synthetic.tools, workdir / "standardized.jsonl")
    write_rewritten(synthetic.rewritten, workdir / "rewritten.jsonl")
