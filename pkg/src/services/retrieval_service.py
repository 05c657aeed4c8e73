"""
Relevance backends: the scoring function shared by every field.

A backend holds one corpus per document representation (the four
standardized fields plus the whole-document texts) and scores arbitrary
query-side text against them. Rendered parameters go the other way: each is
the query against the rendered arguments of one query.
"""

import bisect
import hashlib
import json
import logging
import math
import re
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from errors import ConfigurationError, MissingArtifactError
from schema import (
    FIELDS, FULL_DOC, FULL_DOC_STANDARDIZED, FieldId, StandardizedTool, concatenated_text, field_text, render_param,
)
from services.embedding_service import EmbeddingProvider, EmbeddingStore, embed

logger = logging.getLogger("Toolsift.Retrieval")

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on anything that is not a letter or digit. No stemming, no stopwords."""
    return _TOKEN.findall(text.lower())


def corpus_key(field) -> str:
    return field.value if isinstance(field, FieldId) else str(field)


@dataclass(frozen=True)
class FieldCorpus:
    field: str
    docs: Mapping[str, str]


def build_field_corpora(tools: list[StandardizedTool]) -> dict[str, FieldCorpus]:
    return {
        f.value: FieldCorpus(f.value, MappingProxyType({t.tool_id: field_text(t, f) for t in tools}))
        for f in FIELDS
    }


def build_param_docs(tools: list[StandardizedTool]) -> dict[tuple[str, int], str]:
    return {
        (t.tool_id, j): render_param(p)
        for t in tools
        for j, p in enumerate(t.parameters)
    }


# ---------------------------------------------------------------------------
# Sparse lexical index (Okapi BM25)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SparseIndex:
    postings: Mapping[str, tuple[tuple[str, int], ...]]
    doc_lengths: Mapping[str, int]
    doc_count: int
    avg_doc_length: float
    k1: float = 1.2
    b_len: float = 0.75

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.doc_count - df + 0.5) / (df + 0.5) + 1.0)

    def _term_weight(self, tf: int, doc_length: int, idf: float) -> float:
        norm = 1 - self.b_len + self.b_len * (doc_length / self.avg_doc_length if self.avg_doc_length else 0.0)
        return idf * tf * (self.k1 + 1) / (tf + self.k1 * norm)

    def to_dict(self) -> dict:
        return {
            "k1": self.k1,
            "b_len": self.b_len,
            "doc_count": self.doc_count,
            "avg_doc_length": self.avg_doc_length,
            "doc_lengths": dict(self.doc_lengths),
            "postings": {t: [list(p) for p in plist] for t, plist in self.postings.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SparseIndex":
        return cls(
            postings=MappingProxyType({
                t: tuple((doc_id, int(tf)) for doc_id, tf in plist) for t, plist in data["postings"].items()
            }),
            doc_lengths=MappingProxyType({k: int(v) for k, v in data["doc_lengths"].items()}),
            doc_count=int(data["doc_count"]),
            avg_doc_length=float(data["avg_doc_length"]),
            k1=float(data["k1"]),
            b_len=float(data["b_len"]),
        )


def build_sparse_index(corpus: Mapping[str, str], k1: float = 1.2, b_len: float = 0.75) -> SparseIndex:
    """`corpus` maps doc id -> text (a FieldCorpus.docs or any other id->text mapping)."""
    if isinstance(corpus, FieldCorpus):
        corpus = corpus.docs
    if not corpus:
        raise ConfigurationError("Cannot build a sparse index over an empty corpus")

    postings: dict[str, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    for doc_id in sorted(corpus):
        tokens = tokenize(corpus[doc_id])
        doc_lengths[doc_id] = len(tokens)
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((doc_id, tf))

    doc_count = len(doc_lengths)
    return SparseIndex(
        postings=MappingProxyType({t: tuple(plist) for t, plist in sorted(postings.items())}),
        doc_lengths=MappingProxyType(doc_lengths),
        doc_count=doc_count,
        avg_doc_length=sum(doc_lengths.values()) / doc_count,
        k1=k1,
        b_len=b_len,
    )


def _term_frequency(plist: tuple[tuple[str, int], ...], doc_id: str) -> int:
    i = bisect.bisect_left(plist, (doc_id,))
    if i < len(plist) and plist[i][0] == doc_id:
        return plist[i][1]
    return 0


def sparse_score(index: SparseIndex, query_tokens: list[str], tool_id: str) -> float:
    if tool_id not in index.doc_lengths:
        raise KeyError(f"Unknown tool id '{tool_id}' in sparse index")
    doc_length = index.doc_lengths[tool_id]
    score = 0.0
    for term in query_tokens:
        plist = index.postings.get(term)
        if not plist:
            continue
        tf = _term_frequency(plist, tool_id)
        if tf:
            score += index._term_weight(tf, doc_length, index.idf(term))
    return score


def sparse_score_all(index: SparseIndex, query_tokens: list[str]) -> dict[str, float]:
    """Scores of every indexed doc (zero for docs sharing no term), accumulated over postings."""
    scores = dict.fromkeys(index.doc_lengths, 0.0)
    for term in query_tokens:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            scores[doc_id] += index._term_weight(tf, index.doc_lengths[doc_id], idf)
    return scores


def rank_scores(scores: Mapping[str, float], n: Optional[int] = None) -> list[tuple[str, float]]:
    """Descending score, ascending id on ties."""
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return ranked if n is None else ranked[:n]


def sparse_top_n(index: SparseIndex, query_text: str, n: int) -> list[tuple[str, float]]:
    return rank_scores(sparse_score_all(index, tokenize(query_text)), n)


# ---------------------------------------------------------------------------
# Backend contract
# ---------------------------------------------------------------------------

class RelevanceBackend(ABC):
    tag: str

    def __init__(self, corpora: dict[str, FieldCorpus], param_docs: dict[tuple[str, int], str]):
        self.corpora = corpora
        self.param_docs = param_docs
        first = next(iter(corpora.values()))
        self.tool_ids = tuple(sorted(first.docs))

    def has_corpus(self, field) -> bool:
        return corpus_key(field) in self.corpora

    @abstractmethod
    def score_all(self, text: str, field) -> dict[str, float]:
        """Score of `text` against every tool's document in `field`."""

    @abstractmethod
    def param_scores(self, arg_texts: Sequence[str]) -> list[dict[tuple[str, int], float]]:
        """One table per argument rendering: the score of every rendered parameter (as query) against it."""

    def score(self, text: str, field, tool_id: str) -> float:
        scores = self.score_all(text, field)
        if tool_id not in scores:
            raise KeyError(f"Unknown tool id '{tool_id}'")
        return scores[tool_id]

    def top_n(self, text: str, field, n: int) -> list[tuple[str, float]]:
        return rank_scores(self.score_all(text, field), n)


class SparseBackend(RelevanceBackend):
    tag = "sparse"

    def __init__(self, corpora, param_docs, k1: float = 1.2, b_len: float = 0.75,
                 indexes: Optional[dict[str, SparseIndex]] = None):
        super().__init__(corpora, param_docs)
        self.k1 = k1
        self.b_len = b_len
        # each representation keeps its own IDF and length statistics
        self.indexes = indexes or {key: build_sparse_index(c.docs, k1, b_len) for key, c in corpora.items()}
        self._param_tokens = {k: tokenize(text) for k, text in sorted(param_docs.items())}

    def _index(self, field) -> SparseIndex:
        key = corpus_key(field)
        if key not in self.indexes:
            raise ConfigurationError(f"No sparse index for '{key}'")
        return self.indexes[key]

    def score_all(self, text: str, field) -> dict[str, float]:
        return sparse_score_all(self._index(field), tokenize(text))

    def score(self, text: str, field, tool_id: str) -> float:
        return sparse_score(self._index(field), tokenize(text), tool_id)

    def param_scores(self, arg_texts: Sequence[str]) -> list[dict[tuple[str, int], float]]:
        tables: list[dict[tuple[str, int], float]] = [{} for _ in arg_texts]
        if not arg_texts or not self._param_tokens:
            return tables
        # the query's arguments form the corpus; IDF comes from them
        arg_index = build_sparse_index({f"{i:05d}": text for i, text in enumerate(arg_texts)}, self.k1, self.b_len)
        for key, tokens in self._param_tokens.items():
            for doc_id, s in sparse_score_all(arg_index, tokens).items():
                tables[int(doc_id)][key] = s
        return tables

    def to_dict(self) -> dict:
        return {
            "k1": self.k1,
            "b_len": self.b_len,
            "indexes": {key: index.to_dict() for key, index in self.indexes.items()},
        }

    @classmethod
    def from_dict(cls, data: dict, corpora, param_docs) -> "SparseBackend":
        indexes = {key: SparseIndex.from_dict(d) for key, d in data["indexes"].items()}
        missing = set(corpora) - set(indexes)
        if missing:
            raise ConfigurationError(f"Persisted sparse index lacks corpora {sorted(missing)}; rebuild with `index`")
        return cls(corpora, param_docs, data["k1"], data["b_len"], indexes=indexes)


class DenseBackend(RelevanceBackend):
    """Cosine similarity over unit vectors; every text must be in the store before scoring."""

    def __init__(self, corpora, param_docs, store: EmbeddingStore):
        super().__init__(corpora, param_docs)
        self.store = store
        self.tag = f"dense:{store.provider_tag}"
        self._matrices = {
            key: self._matrix([c.docs[t] for t in self.tool_ids]) for key, c in corpora.items()
        }
        self._param_keys = sorted(param_docs)
        self._param_matrix = self._matrix([param_docs[k] for k in self._param_keys]) if param_docs else None

    @staticmethod
    def all_texts(corpora, param_docs) -> list[str]:
        texts = [text for c in corpora.values() for text in c.docs.values()]
        texts.extend(param_docs.values())
        return list(dict.fromkeys(texts))

    @classmethod
    async def create(cls, corpora, param_docs, provider: EmbeddingProvider, store: EmbeddingStore,
                     parallelism: int = 4) -> "DenseBackend":
        await embed(provider, cls.all_texts(corpora, param_docs), store, parallelism=parallelism)
        return cls(corpora, param_docs, store)

    def _vector(self, text: str) -> np.ndarray:
        vector = self.store.get(text)
        if vector is None:
            raise ConfigurationError(f"Text not embedded yet (call prepare first): {text[:60]!r}")
        return vector

    def _matrix(self, texts: list[str]) -> np.ndarray:
        return np.vstack([self._vector(t) for t in texts])

    async def prepare(self, provider: EmbeddingProvider, texts: list[str], parallelism: int = 4) -> None:
        await embed(provider, texts, self.store, parallelism=parallelism)

    def score_all(self, text: str, field) -> dict[str, float]:
        key = corpus_key(field)
        if key not in self._matrices:
            raise ConfigurationError(f"No dense matrix for '{key}'")
        sims = self._matrices[key] @ self._vector(text)
        return {t: float(s) for t, s in zip(self.tool_ids, sims)}

    def param_scores(self, arg_texts: Sequence[str]) -> list[dict[tuple[str, int], float]]:
        if self._param_matrix is None:
            return [{} for _ in arg_texts]
        tables = []
        for text in arg_texts:
            sims = self._param_matrix @ self._vector(text)
            tables.append({k: float(s) for k, s in zip(self._param_keys, sims)})
        return tables


# ---------------------------------------------------------------------------
# Corpora and index persistence
# ---------------------------------------------------------------------------

INDEX_MANIFEST = "manifest.json"
SPARSE_FILE = "sparse.json"
EMBEDDINGS_FILE = "embeddings.jsonl"


def build_corpora(tools: list[StandardizedTool], raw_texts: Mapping[str, str]) -> dict[str, FieldCorpus]:
    """Four field corpora plus both whole-document corpora."""
    corpora = build_field_corpora(tools)
    corpora[FULL_DOC] = FieldCorpus(FULL_DOC, MappingProxyType({t.tool_id: raw_texts[t.tool_id] for t in tools}))
    corpora[FULL_DOC_STANDARDIZED] = FieldCorpus(
        FULL_DOC_STANDARDIZED, MappingProxyType({t.tool_id: concatenated_text(t) for t in tools})
    )
    return corpora


def index_fingerprint(corpora: Mapping[str, FieldCorpus], param_docs: Mapping[tuple[str, int], str]) -> str:
    """Digest of every indexed text; a rebuilt corpus with other contents never matches."""
    digest = hashlib.sha256()
    for key in sorted(corpora):
        docs = corpora[key].docs
        for tool_id in sorted(docs):
            digest.update(f"{key}\x1f{tool_id}\x1f{docs[tool_id]}\x1e".encode("utf-8"))
    for (tool_id, j), text in sorted(param_docs.items()):
        digest.update(f"param\x1f{tool_id}\x1f{j}\x1f{text}\x1e".encode("utf-8"))
    return digest.hexdigest()


def save_index(backend: RelevanceBackend, root, representation: str) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(backend, SparseBackend):
        kind = "sparse"
        with open(root / SPARSE_FILE, "w", encoding="utf-8") as f:
            json.dump(backend.to_dict(), f, sort_keys=True)
    elif isinstance(backend, DenseBackend):
        kind = "dense"
        backend.store.save(root / EMBEDDINGS_FILE)
    else:
        raise ConfigurationError(f"Cannot persist backend {type(backend).__name__}")

    manifest = {
        "backend": kind,
        "tag": backend.tag,
        "representation": representation,
        "tools": len(backend.tool_ids),
        "corpora": sorted(backend.corpora),
        "parameters": len(backend.param_docs),
        "fingerprint": index_fingerprint(backend.corpora, backend.param_docs),
    }
    with open(root / INDEX_MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved {kind} index over {manifest['tools']} tools to {root}")


def load_manifest(root) -> dict:
    path = Path(root) / INDEX_MANIFEST
    if not path.exists():
        raise MissingArtifactError(path, "index")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_index(root, corpora, param_docs, embedding_tag: Optional[str] = None) -> RelevanceBackend:
    root = Path(root)
    manifest = load_manifest(root)
    if manifest["tools"] != len(next(iter(corpora.values())).docs):
        raise ConfigurationError(f"Index at {root} covers {manifest['tools']} tools; rebuild with `index`")
    stale = manifest.get("parameters") != len(param_docs)
    if stale or manifest.get("fingerprint") != index_fingerprint(corpora, param_docs):
        raise ConfigurationError(f"Index at {root} is stale for the current tool documents; rebuild with `index`")

    if manifest["backend"] == "sparse":
        path = root / SPARSE_FILE
        if not path.exists():
            raise MissingArtifactError(path, "index")
        with open(path, "r", encoding="utf-8") as f:
            return SparseBackend.from_dict(json.load(f), corpora, param_docs)

    path = root / EMBEDDINGS_FILE
    if not path.exists():
        raise MissingArtifactError(path, "index --backend dense")
    if embedding_tag is None:
        raise ConfigurationError("Loading a dense index needs the embedding provider tag")
    store = EmbeddingStore.load(path, embedding_tag)
    if manifest["tag"] != f"dense:{embedding_tag}":
        raise ConfigurationError(f"Index at {root} was built with {manifest['tag']}, not dense:{embedding_tag}")
    return DenseBackend(corpora, param_docs, store)
