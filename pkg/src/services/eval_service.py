"""
Retrieval metrics, run files, reports and the field-masking ablation.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from errors import ConfigurationError, DatasetError, MissingArtifactError
from schema import FIELDS, FULL_DOC, Qrels, Query, StandardizedTool, field_text
from services.retrieval_service import RelevanceBackend, rank_scores

logger = logging.getLogger("Toolsift.Eval")

DEFAULT_KS = (5, 10, 100)
NAME_FIELD = "name"
MASKABLE_FIELDS = (NAME_FIELD,) + tuple(f.value for f in FIELDS)

# query id -> [(tool id, score), ...] in rank order
RunRanking = dict[str, list[tuple[str, float]]]


def ndcg_at_k(ranking: Sequence[str], relevant: set, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    dcg = sum(1.0 / math.log2(rank + 1) for rank, tool_id in enumerate(ranking[:k], start=1) if tool_id in relevant)
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(relevant), k) + 1))
    return dcg / ideal if ideal > 0 else 0.0


def recall_at_k(ranking: Sequence[str], relevant: set, k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not relevant:
        raise ValueError("Recall is undefined without relevant tools")
    return len(set(ranking[:k]) & relevant) / len(relevant)


def metric_names(ks: Sequence[int]) -> list[str]:
    return [name for k in ks for name in (f"ndcg@{k}", f"recall@{k}")]


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    per_query: dict[str, dict[str, float]]
    means: dict[str, float]
    run_tag: str = ""
    dataset: str = ""
    backend: str = ""
    mode: str = ""
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run_tag": self.run_tag,
            "dataset": self.dataset,
            "backend": self.backend,
            "mode": self.mode,
            "ks": list(self.ks),
            "queries": len(self.per_query),
            "means": self.means,
            "per_query": {q: self.per_query[q] for q in sorted(self.per_query)},
            "config": self.config,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, json_path, text_path=None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")
        if text_path is not None:
            with open(text_path, "w", encoding="utf-8") as f:
                f.write(format_table([self]) + "\n")


def _as_ids(ranking) -> list[str]:
    ids = []
    for item in ranking:
        if isinstance(item, str):
            ids.append(item)
        elif hasattr(item, "tool_id"):
            ids.append(item.tool_id)
        else:
            ids.append(item[0])
    return ids


def evaluate_run(run: Mapping[str, Sequence], qrels: Qrels, ks: Sequence[int] = DEFAULT_KS,
                 **labels) -> EvalReport:
    """Per-query metrics plus their unweighted mean. `labels` fill the report's tag fields."""
    ks = tuple(sorted(set(ks)))
    per_query = {}
    for query_id in sorted(run):
        relevant = qrels.relevant(query_id)
        if not relevant:
            raise DatasetError(f"Run query '{query_id}' has no relevance judgments")
        ids = _as_ids(run[query_id])
        if len(set(ids)) != len(ids):
            raise DatasetError(f"Run lists a tool twice for query '{query_id}'")
        row = {}
        for k in ks:
            row[f"ndcg@{k}"] = ndcg_at_k(ids, relevant, k)
            row[f"recall@{k}"] = recall_at_k(ids, relevant, k)
        per_query[query_id] = row

    names = metric_names(ks)
    if per_query:
        means = {m: sum(row[m] for row in per_query.values()) / len(per_query) for m in names}
    else:
        means = dict.fromkeys(names, 0.0)
    return EvalReport(ks=ks, per_query=per_query, means=means, **labels)


def format_table(reports: Sequence[EvalReport]) -> str:
    """Rows are methods, columns are N@K / R@K per dataset."""
    if not reports:
        return ""
    ks = reports[0].ks
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    header = ["method"] + [f"{d} {m}" for d in datasets for k in ks for m in (f"N@{k}", f"R@{k}")]

    rows = {}
    for report in reports:
        row = rows.setdefault(report.mode or report.run_tag, {})
        for k in ks:
            row[(report.dataset, f"N@{k}")] = report.means[f"ndcg@{k}"]
            row[(report.dataset, f"R@{k}")] = report.means[f"recall@{k}"]

    lines = ["\t".join(header)]
    for method, row in rows.items():
        cells = [method]
        for d in datasets:
            for k in ks:
                for m in (f"N@{k}", f"R@{k}"):
                    value = row.get((d, m))
                    cells.append("-" if value is None else f"{value:.4f}")
        lines.append("\t".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# TREC run files
# ---------------------------------------------------------------------------

def run_from_rankings(rankings: Mapping[str, Sequence], top_n: Optional[int] = None) -> RunRanking:
    """Cut scored rankings (ScoredTool lists) down to (id, score) pairs."""
    return {
        query_id: [(s.tool_id, s.score) for s in ranking[:top_n]]
        for query_id, ranking in rankings.items()
    }


def write_run(run: RunRanking, path, run_tag: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for query_id in sorted(run):
            for rank, (tool_id, score) in enumerate(run[query_id], start=1):
                f.write(f"{query_id} Q0 {tool_id} {rank} {score:.6f} {run_tag}\n")


def read_run(path) -> RunRanking:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "retrieve")
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DatasetError(f"{path.name}:{line_no}: expected 6 columns, got {len(parts)}")
            query_id, _, tool_id, rank, score, _ = parts
            try:
                rows.setdefault(query_id, []).append((int(rank), tool_id, float(score)))
            except ValueError:
                raise DatasetError(f"{path.name}:{line_no}: rank and score must be numeric")

    run = {}
    for query_id, entries in rows.items():
        entries.sort()
        ids = [tool_id for _, tool_id, _ in entries]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"{path.name}: query '{query_id}' lists a tool twice")
        run[query_id] = [(tool_id, score) for _, tool_id, score in entries]
    return run


# ---------------------------------------------------------------------------
# Field masking
# ---------------------------------------------------------------------------

def masked_documents(tools: Sequence[StandardizedTool], names: Mapping[str, str],
                     mask: Sequence[str] = ()) -> dict[str, str]:
    """Concatenated name + standardized fields, leaving out the masked ones."""
    masked = set(mask)
    docs = {}
    for tool in tools:
        parts = [] if NAME_FIELD in masked else [names.get(tool.tool_id, tool.tool_id)]
        parts.extend(field_text(tool, f) for f in FIELDS if f.value not in masked)
        docs[tool.tool_id] = "\n".join(p for p in parts if p)
    return docs


@dataclass
class AblationRow:
    mask: tuple[str, ...]
    ndcg: dict[int, float]
    delta: dict[int, Optional[float]]

    @property
    def label(self) -> str:
        return "+".join(self.mask)


@dataclass
class AblationReport:
    ks: tuple[int, ...]
    baseline: dict[int, float]
    rows: list[AblationRow]
    dataset: str = ""
    backend: str = ""
    config: dict = field(default_factory=dict)

    def row(self, *mask: str) -> AblationRow:
        for r in self.rows:
            if r.mask == tuple(mask):
                return r
        raise KeyError(mask)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "backend": self.backend,
            "ks": list(self.ks),
            "baseline": {f"ndcg@{k}": v for k, v in self.baseline.items()},
            "masked": [
                {
                    "mask": list(r.mask),
                    "ndcg": {f"ndcg@{k}": v for k, v in r.ndcg.items()},
                    "delta_percent": {f"ndcg@{k}": v for k, v in r.delta.items()},
                }
                for r in self.rows
            ],
            "config": self.config,
        }

    def to_text(self) -> str:
        lines = ["\t".join(["masked"] + [f"dN@{k} (%)" for k in self.ks])]
        for r in self.rows:
            cells = ["-" if r.delta[k] is None else f"{r.delta[k]:+.2f}" for k in self.ks]
            lines.append("\t".join([r.label] + cells))
        return "\n".join(lines)


def _mean_ndcg(backend: RelevanceBackend, queries: Sequence[Query], qrels: Qrels, ks) -> dict[int, float]:
    run = {q.id: [tool_id for tool_id, _ in rank_scores(backend.score_all(q.text, FULL_DOC))] for q in queries}
    report = evaluate_run(run, qrels, ks)
    return {k: report.means[f"ndcg@{k}"] for k in ks}


def field_mask_ablation(tools: Sequence[StandardizedTool], names: Mapping[str, str], queries: Sequence[Query],
                        qrels: Qrels, make_backend: Callable[[dict[str, str]], RelevanceBackend],
                        masks: Optional[Sequence[Sequence[str]]] = None,
                        ks: Sequence[int] = DEFAULT_KS) -> AblationReport:
    """Full-doc retrieval with each mask group removed from the concatenated doc, versus nothing removed.

    `make_backend` turns an id -> text mapping into a backend scoring the FULL_DOC corpus.
    """
    ks = tuple(sorted(set(ks)))
    masks = [tuple(m) for m in (masks if masks is not None else [(f,) for f in MASKABLE_FIELDS])]
    for mask in masks:
        unknown = set(mask) - set(MASKABLE_FIELDS)
        if unknown:
            raise ConfigurationError(f"Cannot mask unknown fields {sorted(unknown)}; choose from {MASKABLE_FIELDS}")
        if set(mask) >= set(MASKABLE_FIELDS):
            raise ConfigurationError("Masking every field leaves nothing to retrieve")

    baseline = _mean_ndcg(make_backend(masked_documents(tools, names)), queries, qrels, ks)
    rows = []
    for mask in masks:
        ndcg = _mean_ndcg(make_backend(masked_documents(tools, names, mask)), queries, qrels, ks)
        delta = {k: (100.0 * (ndcg[k] - baseline[k]) / baseline[k] if baseline[k] > 0 else None) for k in ks}
        logger.info(f"Masked {'+'.join(mask)}: " + ", ".join(
            f"N@{k} {ndcg[k]:.4f}" for k in ks))
        rows.append(AblationRow(mask=mask, ndcg=ndcg, delta=delta))
    return AblationReport(ks=ks, baseline=baseline, rows=rows)
