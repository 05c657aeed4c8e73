"""
Per-field relevance, parameter alignment, the missing-parameter penalty, and
the linear aggregation that turns them into one ranking score per tool.

    S(q, t) = sum_f w_f * S_f(q, t) + b - P(q, t)

S_f of the three text fields is the best match over the query's tool needs;
S_f of the parameters field is the mean best-argument match of the tool's
parameters. P sums a sigmoid-gated cost over parameters whose best match falls
below tau.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from config import PipelineConfig
from errors import ConfigurationError, MissingArtifactError
from schema import (
    FIELDS, FULL_DOC, FULL_DOC_STANDARDIZED, SEMANTIC_FIELDS, FieldId, Query, RewrittenQuery, StandardizedTool,
    render_argument,
)
from services.retrieval_service import RelevanceBackend, corpus_key

logger = logging.getLogger("Toolsift.Scorer")

DEFAULT_ALPHA = 15.0
FIELD_KEYS = tuple(f.value for f in FIELDS)


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass(frozen=True)
class ScoringModel:
    field_weights: Mapping[str, float]
    bias: float = 0.0
    tau: float = 0.5
    w_required: float = 0.5
    w_optional: float = 0.1
    alpha: float = DEFAULT_ALPHA
    dataset: str = ""
    backend: str = ""

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        weights = {corpus_key(k): float(v) for k, v in self.field_weights.items()}
        if len(self.field_weights) != len(FIELD_KEYS) or set(weights) != set(FIELD_KEYS):
            raise ConfigurationError(f"A scoring model needs exactly the weights {FIELD_KEYS}, got {sorted(weights)}")
        object.__setattr__(self, "field_weights", {k: weights[k] for k in FIELD_KEYS})

    @classmethod
    def initial(cls, alpha: float = DEFAULT_ALPHA, dataset: str = "", backend: str = "") -> "ScoringModel":
        return cls(field_weights=dict.fromkeys(FIELD_KEYS, 1.0), bias=0.0, tau=0.5, w_required=0.5,
                   w_optional=0.1, alpha=alpha, dataset=dataset, backend=backend)

    @classmethod
    def uniform(cls, dataset: str = "", backend: str = "") -> "ScoringModel":
        """Plain mean of the four field scores, no penalty."""
        return cls(field_weights=dict.fromkeys(FIELD_KEYS, 1.0 / len(FIELD_KEYS)), w_required=0.0,
                   w_optional=0.0, dataset=dataset, backend=backend)

    def weight(self, field) -> float:
        return self.field_weights[corpus_key(field)]

    def normalized_weights(self) -> dict[str, float]:
        negative = [k for k, w in self.field_weights.items() if w < 0]
        if negative:
            logger.warning(f"Negative learned field weights for {negative}; normalized shares are not percentages")
        total = sum(self.field_weights.values())
        if total == 0:
            logger.warning("Field weights sum to zero; reporting zero shares")
            return dict.fromkeys(FIELD_KEYS, 0.0)
        return {k: w / total for k, w in self.field_weights.items()}

    def to_dict(self) -> dict:
        return {
            "weights": dict(self.field_weights),
            "bias": self.bias,
            "tau": self.tau,
            "w_required": self.w_required,
            "w_optional": self.w_optional,
            "alpha": self.alpha,
            "normalized_weights": self.normalized_weights(),
            "dataset": self.dataset,
            "backend": self.backend,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScoringModel":
        return cls(
            field_weights=data["weights"],
            bias=float(data["bias"]),
            tau=float(data["tau"]),
            w_required=float(data["w_required"]),
            w_optional=float(data["w_optional"]),
            alpha=float(data.get("alpha", DEFAULT_ALPHA)),
            dataset=str(data.get("dataset") or ""),
            backend=str(data.get("backend") or ""),
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, command: str = "train") -> "ScoringModel":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path, command)
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class Components:
    """Model-independent parts of one tool's score for one query."""
    field_scores: Mapping[str, float]
    param_scores: tuple[tuple[float, bool], ...] = ()


@dataclass(frozen=True)
class FieldScores:
    field_scores: Mapping[str, float]
    param_scores: tuple[tuple[float, bool], ...] = ()
    penalty: float = 0.0
    total: float = 0.0


@dataclass(frozen=True)
class ScoredTool:
    tool_id: str
    scores: FieldScores
    rank: int

    @property
    def score(self) -> float:
        return self.scores.total


# ---------------------------------------------------------------------------
# Score parts
# ---------------------------------------------------------------------------

def semantic_field_score(rq: RewrittenQuery, tool_id: str, field, backend: RelevanceBackend) -> float:
    field = FieldId(field)
    if field not in SEMANTIC_FIELDS:
        raise ValueError(f"'{field.value}' is not a text field; parameters are scored by param_match")
    if not rq.tool_needs:
        raise ValueError(f"Query {rq.query_id} has no tool needs")
    return max(backend.score(need.projection(field), field, tool_id) for need in rq.tool_needs)


def _best_matches(tool: StandardizedTool, tables: list[Mapping[tuple[str, int], float]]) -> list[tuple[float, bool]]:
    return [
        (max(table.get((tool.tool_id, j), 0.0) for table in tables) if tables else 0.0, p.required)
        for j, p in enumerate(tool.parameters)
    ]


def param_match(tool: StandardizedTool, args, backend: RelevanceBackend) -> list[tuple[float, bool]]:
    """Best-argument score per parameter of `tool`, the parameter rendering scored against each argument's.

    No arguments means every parameter scores 0.
    """
    tables = backend.param_scores([render_argument(a) for a in args])
    return _best_matches(tool, tables)


def param_base(scores: Sequence[float]) -> float:
    if not scores:
        return 1.0
    return sum(scores) / len(scores)


def param_penalty(scores: Sequence[tuple[float, bool]], model: ScoringModel) -> float:
    return sum(
        (model.w_required if required else model.w_optional) * sigmoid(model.alpha * (model.tau - s))
        for s, required in scores
    )


def aggregate(field_scores: Mapping[str, float], penalty: float, model: ScoringModel) -> float:
    missing = [k for k in FIELD_KEYS if k not in field_scores]
    if missing:
        raise ValueError(f"Missing field scores for {missing}")
    return sum(model.field_weights[k] * field_scores[k] for k in FIELD_KEYS) + model.bias - penalty


def score_components(components: Components, model: ScoringModel) -> FieldScores:
    penalty = param_penalty(components.param_scores, model)
    return FieldScores(
        field_scores=components.field_scores,
        param_scores=components.param_scores,
        penalty=penalty,
        total=aggregate(components.field_scores, penalty, model),
    )


# ---------------------------------------------------------------------------
# Whole-corpus scoring
# ---------------------------------------------------------------------------

def semantic_scores(rq: RewrittenQuery, backend: RelevanceBackend) -> dict[str, dict[str, float]]:
    """S_f for every tool and text field: elementwise max over the tool needs."""
    if not rq.tool_needs:
        raise ValueError(f"Query {rq.query_id} has no tool needs")
    table = {}
    for field in SEMANTIC_FIELDS:
        best: Optional[dict[str, float]] = None
        for need in rq.tool_needs:
            scores = backend.score_all(need.projection(field), field)
            best = dict(scores) if best is None else {t: max(best[t], s) for t, s in scores.items()}
        table[field.value] = best
    return table


def prune_candidates(semantic: Mapping[str, Mapping[str, float]], m: int) -> set[str]:
    """Union of the per-field top-m tools."""
    candidates = set()
    for scores in semantic.values():
        ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        candidates.update(tool_id for tool_id, _ in ranked[:m])
    return candidates


def _min_max(scores: Mapping[str, float]) -> dict[str, float]:
    if not scores:
        return {}
    lo, hi = min(scores.values()), max(scores.values())
    if hi == lo:
        return dict.fromkeys(scores, 0.0)
    return {t: (s - lo) / (hi - lo) for t, s in scores.items()}


def compute_components(rq: RewrittenQuery, tools: Sequence[StandardizedTool], backend: RelevanceBackend,
                       normalize: bool = False, prune_m: Optional[int] = None) -> dict[str, Components]:
    semantic = semantic_scores(rq, backend)
    if prune_m is not None:
        keep = prune_candidates(semantic, prune_m)
        tools = [t for t in tools if t.tool_id in keep]
    if normalize:
        ids = [t.tool_id for t in tools]
        semantic = {f: _min_max({t: scores[t] for t in ids}) for f, scores in semantic.items()}

    tables = backend.param_scores([render_argument(a) for a in rq.extracted_arguments])
    components = {}
    for tool in tools:
        params = _best_matches(tool, tables)
        field_scores = {
            FieldId.DESCRIPTION.value: semantic[FieldId.DESCRIPTION.value][tool.tool_id],
            FieldId.PARAMETERS.value: param_base([s for s, _ in params]),
            FieldId.RESPONSE.value: semantic[FieldId.RESPONSE.value][tool.tool_id],
            FieldId.EXAMPLES.value: semantic[FieldId.EXAMPLES.value][tool.tool_id],
        }
        components[tool.tool_id] = Components(field_scores, tuple(params))
    return components


def rank_scored(scored: Mapping[str, FieldScores]) -> list[ScoredTool]:
    ordered = sorted(scored.items(), key=lambda item: (-item[1].total, item[0]))
    return [ScoredTool(tool_id, scores, rank) for rank, (tool_id, scores) in enumerate(ordered, start=1)]


def rank_tools(rq: RewrittenQuery, tools: Sequence[StandardizedTool], model: Optional[ScoringModel],
               backend: RelevanceBackend, mode: str = "multifield", *, query_text: Optional[str] = None,
               doc_corpus: str = FULL_DOC, normalize: bool = False, prune_m: Optional[int] = None,
               single_field: Optional[str] = None) -> list[ScoredTool]:
    if model is not None and model.backend and model.backend != backend.tag:
        raise ConfigurationError(f"Model was trained on backend '{model.backend}' but the index is '{backend.tag}'")

    if mode == "full_doc":
        if query_text is None:
            raise ValueError("Full-doc ranking needs the query text")
        scores = backend.score_all(query_text, doc_corpus)
        return rank_scored({
            t.tool_id: FieldScores({doc_corpus: scores[t.tool_id]}, total=scores[t.tool_id]) for t in tools
        })
    if mode != "multifield":
        raise ConfigurationError(f"Unknown mode '{mode}'")

    components = compute_components(rq, tools, backend, normalize=normalize, prune_m=prune_m)
    if single_field:
        key = corpus_key(single_field)
        return rank_scored({
            tool_id: FieldScores(c.field_scores, c.param_scores, 0.0, c.field_scores[key])
            for tool_id, c in components.items()
        })
    if model is None:
        raise ValueError("Multi-field ranking needs a scoring model")
    return rank_scored({tool_id: score_components(c, model) for tool_id, c in components.items()})


def query_side_texts(rq: RewrittenQuery, query: Query) -> list[str]:
    """Every query-side text a ranking may score; the dense backend embeds these up front."""
    texts = [need.projection(f) for need in rq.tool_needs for f in SEMANTIC_FIELDS]
    texts.extend(render_argument(a) for a in rq.extracted_arguments)
    texts.extend([query.text, rq.flat_text()])
    return list(dict.fromkeys(texts))


class Retriever:
    """One configured ranking pipeline: corpus, backend, model and variant switches."""

    def __init__(self, tools: Sequence[StandardizedTool], backend: RelevanceBackend,
                 model: Optional[ScoringModel], mode: str = "multifield", doc_corpus: str = FULL_DOC,
                 rewritten_query_text: bool = False, normalize: bool = False,
                 prune_m: Optional[int] = None, single_field: Optional[str] = None):
        self.tools = list(tools)
        self.backend = backend
        self.model = model
        self.mode = mode
        self.doc_corpus = doc_corpus
        self.rewritten_query_text = rewritten_query_text
        self.normalize = normalize
        self.prune_m = prune_m
        self.single_field = single_field

    @classmethod
    def from_config(cls, config: PipelineConfig, tools: Sequence[StandardizedTool], backend: RelevanceBackend,
                    model: Optional[ScoringModel]) -> "Retriever":
        return cls(
            tools, backend, model,
            mode=config.mode,
            doc_corpus=FULL_DOC_STANDARDIZED if config.doc_text == "standardized" else FULL_DOC,
            rewritten_query_text=config.query_text == "rewritten",
            normalize=config.normalize,
            prune_m=config.prune_m if config.prune else None,
            single_field=config.single_field or None,
        )

    def rank(self, rq: RewrittenQuery, query: Query) -> list[ScoredTool]:
        query_text = rq.flat_text() if self.rewritten_query_text else query.text
        return rank_tools(rq, self.tools, self.model, self.backend, self.mode, query_text=query_text,
                          doc_corpus=self.doc_corpus, normalize=self.normalize, prune_m=self.prune_m,
                          single_field=self.single_field)

    def rank_all(self, rewritten: Sequence[RewrittenQuery], queries: Mapping[str, Query]) -> dict[str, list[ScoredTool]]:
        rankings = {}
        for rq in rewritten:
            if rq.query_id not in queries:
                raise ConfigurationError(f"Rewritten query '{rq.query_id}' is not in the dataset")
            rankings[rq.query_id] = self.rank(rq, queries[rq.query_id])
        logger.info(f"Ranked {len(self.tools)} tools for {len(rankings)} queries ({self.mode})")
        return rankings
