"""
Dataset loading, validation, serialization and merging.

On-disk layout of a dataset directory:
    tools.jsonl    {"id": str, "doc": any JSON}
    queries.jsonl  {"id": str, "text": str, "turns": [[role, utterance], ...]?}
    qrels.tsv      query_id <TAB> tool_id <TAB> relevance
"""

import json
import logging
from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional

from errors import DatasetError
from schema import Dataset, Qrels, Query, RawTool

logger = logging.getLogger("Toolsift.CorpusService")

SUPPORTED_FORMATS = ("jsonl",)
TOOLS_FILE = "tools.jsonl"
QUERIES_FILE = "queries.jsonl"
QRELS_FILE = "qrels.tsv"


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path.name}:{line_no}: malformed JSON ({e.msg})")
            if not isinstance(row, dict):
                raise DatasetError(f"{path.name}:{line_no}: expected a JSON object")
            yield line_no, row


def flatten_turns(turns) -> str:
    """Multi-turn dialogues become newline-joined "role: utterance" lines."""
    return "\n".join(f"{role}: {utterance}" for role, utterance in turns)


def _doc_is_empty(doc) -> bool:
    return doc is None or (isinstance(doc, (str, list, dict)) and len(doc) == 0)


def _load_tools(path: Path, source_tag: str) -> list[RawTool]:
    tools = []
    for line_no, row in _iter_jsonl(path):
        tool_id = row.get("id")
        if not isinstance(tool_id, str) or not tool_id:
            raise DatasetError(f"{path.name}:{line_no}: tool id must be a non-empty string")
        if _doc_is_empty(row.get("doc")):
            raise DatasetError(f"{path.name}:{line_no}: tool '{tool_id}' has an empty doc")
        tools.append(RawTool(id=tool_id, source_tag=source_tag, doc=row["doc"]))
    return tools


def _load_queries(path: Path) -> list[Query]:
    queries = []
    for line_no, row in _iter_jsonl(path):
        query_id = row.get("id")
        if not isinstance(query_id, str) or not query_id:
            raise DatasetError(f"{path.name}:{line_no}: query id must be a non-empty string")

        turns = row.get("turns")
        if turns:
            try:
                turns = tuple((str(role), str(utterance)) for role, utterance in turns)
            except (TypeError, ValueError):
                raise DatasetError(f"{path.name}:{line_no}: turns of query '{query_id}' must be [role, utterance] pairs")
            text = flatten_turns(turns)
        else:
            turns = None
            text = str(row.get("text") or "")

        if not text.strip():
            raise DatasetError(f"{path.name}:{line_no}: query '{query_id}' has empty text")
        queries.append(Query(id=query_id, text=text, turns=turns))
    return queries


def _load_qrels(path: Path) -> list[tuple[str, str, int]]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path.name}:{line_no}: expected 3 tab-separated columns, got {len(parts)}")
            query_id, tool_id, relevance = parts
            try:
                grade = int(relevance)
            except ValueError:
                raise DatasetError(f"{path.name}:{line_no}: relevance '{relevance}' is not an integer")
            if grade < 0:
                raise DatasetError(f"{path.name}:{line_no}: relevance must be non-negative")
            # any positive grade counts as relevant
            entries.append((query_id, tool_id, 1 if grade > 0 else 0))
    return entries


def validate_dataset(dataset: Dataset) -> None:
    """Raise DatasetError naming the first offending identifier."""
    seen_tools = set()
    for tool in dataset.tools:
        if tool.id in seen_tools:
            raise DatasetError(f"Duplicate tool id '{tool.id}' in dataset '{dataset.name}'")
        seen_tools.add(tool.id)

    seen_queries = set()
    for query in dataset.queries:
        if query.id in seen_queries:
            raise DatasetError(f"Duplicate query id '{query.id}' in dataset '{dataset.name}'")
        seen_queries.add(query.id)

    for query_id, tool_id, _ in dataset.qrels.entries:
        if query_id not in seen_queries:
            raise DatasetError(f"Dangling qrel: unknown query id '{query_id}'")
        if tool_id not in seen_tools:
            raise DatasetError(f"Dangling qrel: unknown tool id '{tool_id}'")

    for query in dataset.queries:
        if not dataset.qrels.relevant(query.id):
            raise DatasetError(f"Query '{query.id}' has no relevant tool")


def load_dataset(path, format: str = "jsonl", name: Optional[str] = None) -> Dataset:
    if format not in SUPPORTED_FORMATS:
        raise DatasetError(f"Unsupported dataset format '{format}'. Must be one of: {SUPPORTED_FORMATS}")

    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")
    for filename in (TOOLS_FILE, QUERIES_FILE, QRELS_FILE):
        if not (root / filename).exists():
            raise DatasetError(f"Dataset {root} is missing {filename}")

    name = name or root.name
    dataset = Dataset(
        name=name,
        tools=tuple(_load_tools(root / TOOLS_FILE, source_tag=name)),
        queries=tuple(_load_queries(root / QUERIES_FILE)),
        qrels=Qrels(tuple(_load_qrels(root / QRELS_FILE))),
    )
    validate_dataset(dataset)
    logger.info(f"Loaded dataset '{name}': {len(dataset.tools)} tools, {len(dataset.queries)} queries")
    return dataset


def save_dataset(dataset: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    with open(root / TOOLS_FILE, "w", encoding="utf-8") as f:
        for tool in dataset.tools:
            f.write(json.dumps({"id": tool.id, "doc": tool.doc}, ensure_ascii=False) + "\n")

    with open(root / QUERIES_FILE, "w", encoding="utf-8") as f:
        for query in dataset.queries:
            row = {"id": query.id, "text": query.text}
            if query.turns:
                row["turns"] = [list(turn) for turn in query.turns]
            f.write(json.dumps(row, ensure_ascii=False) + "\n")

    with open(root / QRELS_FILE, "w", encoding="utf-8") as f:
        for query_id, tool_id, relevance in dataset.qrels.entries:
            f.write(f"{query_id}\t{tool_id}\t{relevance}\n")


def build_mixed(datasets: list[Dataset], name: str = "mixed") -> Dataset:
    """Merge datasets into one pool, prefixing every id with "<source_tag>/"."""
    if len(datasets) < 2:
        raise DatasetError("A mixed benchmark needs at least two datasets")
    tags = [d.name for d in datasets]
    if len(set(tags)) != len(tags):
        raise DatasetError(f"Dataset names must be distinct to build a mixed benchmark: {tags}")

    tools, queries, entries = [], [], []
    for dataset in datasets:
        tag = dataset.name
        for tool in dataset.tools:
            tools.append(replace(tool, id=f"{tag}/{tool.id}", source_tag=tag))
        for query in dataset.queries:
            queries.append(replace(query, id=f"{tag}/{query.id}"))
        for query_id, tool_id, relevance in dataset.qrels.entries:
            entries.append((f"{tag}/{query_id}", f"{tag}/{tool_id}", relevance))

    mixed = Dataset(name=name, tools=tuple(tools), queries=tuple(queries), qrels=Qrels(tuple(entries)))
    validate_dataset(mixed)
    logger.info(f"Built mixed benchmark from {tags}: {len(tools)} tools, {len(queries)} queries")
    return mixed


def avg_tools_per_query(dataset: Dataset) -> Fraction:
    if not dataset.queries:
        raise DatasetError(f"Dataset '{dataset.name}' has no queries")
    return Fraction(dataset.qrels.relevant_pairs(), len(dataset.queries))


def dedup_queries(dataset: Dataset) -> tuple[Dataset, list[str]]:
    """Drop queries whose text exactly repeats an earlier query; returns the removed ids."""
    seen = set()
    kept, removed = [], []
    for query in dataset.queries:
        if query.text in seen:
            removed.append(query.id)
            continue
        seen.add(query.text)
        kept.append(query)

    if removed:
        logger.warning(f"Removed {len(removed)} duplicate queries from '{dataset.name}': {removed}")
    dropped = set(removed)
    qrels = Qrels(tuple(e for e in dataset.qrels.entries if e[0] not in dropped))
    return replace(dataset, queries=tuple(kept), qrels=qrels), removed


def dataset_stats(dataset: Dataset) -> dict:
    return {
        "name": dataset.name,
        "queries": len(dataset.queries),
        "tools": len(dataset.tools),
        "tools_per_query": float(avg_tools_per_query(dataset)),
    }
