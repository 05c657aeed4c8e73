"""
Embedding providers and the on-disk vector store behind the dense backend.
"""

import hashlib
import json
import logging
import re
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional

import numpy as np

from errors import ConfigurationError, ProviderError
from services.llm_service import gather_bounded, post_json_with_retries

logger = logging.getLogger("Toolsift.EmbeddingService")

NORM_TOLERANCE = 1e-6


class EmbeddingProvider(ABC):
    tag: str

    @abstractmethod
    async def embed_batch(self, texts: list[str]) -> list[list[float]]:
        ...


class HttpEmbeddingProvider(EmbeddingProvider):
    """OpenAI-compatible /embeddings endpoint."""

    def __init__(self, base_url: str, api_key: str, model: str):
        self.base_url = base_url.rstrip('/')
        self.api_key = api_key
        self.model = model
        self.tag = f"http:{model}"

    async def embed_batch(self, texts: list[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self.api_key}"}
        body = {"model": self.model, "input": texts}
        data = await post_json_with_retries(f"{self.base_url}/embeddings", headers, body, "Embedding")
        try:
            rows = sorted(data["data"], key=lambda row: row.get("index", 0))
            vectors = [row["embedding"] for row in rows]
        except (KeyError, TypeError):
            raise ProviderError(f"Embedding response malformed: {str(data)[:200]}")
        if len(vectors) != len(texts):
            raise ProviderError(f"Embedding provider returned {len(vectors)} vectors for {len(texts)} texts")
        return vectors


_TOKEN = re.compile(r"[^\W_]+")


class MockEmbeddingProvider(EmbeddingProvider):
    """Deterministic feature-hashing embedder for offline runs."""

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.tag = f"mock-hash-{dim}"

    def _vector(self, text: str) -> list[float]:
        vector = np.zeros(self.dim)
        for token in _TOKEN.findall(text.lower()):
            digest = hashlib.sha1(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "big") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            vector[bucket] += sign
        if not vector.any():
            # provider-defined vector for text without tokens
            vector[0] = 1.0
        return vector.tolist()

    async def embed_batch(self, texts: list[str]) -> list[list[float]]:
        return [self._vector(t) for t in texts]


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class EmbeddingStore:
    """Unit-normalized vectors keyed by (provider tag, text hash), persisted as JSONL."""

    def __init__(self, provider_tag: str, dim: Optional[int] = None):
        self.provider_tag = provider_tag
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}

    def __contains__(self, text: str) -> bool:
        return text_hash(text) in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, text: str) -> Optional[np.ndarray]:
        return self._vectors.get(text_hash(text))

    def put(self, text: str, vector) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64)
        if self.dim is None:
            self.dim = vector.shape[0]
        elif vector.shape[0] != self.dim:
            raise ConfigurationError(
                f"Embedding dimension {vector.shape[0]} does not match store dimension {self.dim} "
                f"(provider {self.provider_tag})"
            )
        norm = np.linalg.norm(vector)
        if norm == 0:
            raise ProviderError("Embedding provider returned a zero vector")
        unit = vector / norm
        self._vectors[text_hash(text)] = unit
        return unit

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for key in sorted(self._vectors):
                row = {"provider": self.provider_tag, "hash": key, "vector": self._vectors[key].tolist()}
                f.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path, provider_tag: str) -> "EmbeddingStore":
        store = cls(provider_tag)
        path = Path(path)
        if not path.exists():
            return store
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                if row["provider"] != provider_tag:
                    continue
                vector = np.asarray(row["vector"], dtype=np.float64)
                if store.dim is None:
                    store.dim = vector.shape[0]
                elif vector.shape[0] != store.dim:
                    raise ConfigurationError(f"Mixed embedding dimensions in {path}")
                store._vectors[row["hash"]] = vector
        logger.info(f"Loaded {len(store)} cached embeddings for {provider_tag}")
        return store


async def embed(provider: EmbeddingProvider, texts: list[str], store: EmbeddingStore,
                batch_size: int = 64, parallelism: int = 4) -> list[np.ndarray]:
    """Embed texts through the store; only cache misses reach the provider. Output keeps input order."""
    if store.provider_tag != provider.tag:
        raise ConfigurationError(f"Store belongs to provider {store.provider_tag}, not {provider.tag}")

    missing = list(dict.fromkeys(t for t in texts if t not in store))
    if missing:
        logger.info(f"Embedding {len(missing)} new texts with {provider.tag}")
        batches = [missing[i:i + batch_size] for i in range(0, len(missing), batch_size)]
        results = await gather_bounded(
            [lambda batch=batch: provider.embed_batch(batch) for batch in batches], parallelism
        )
        for batch, vectors in zip(batches, results):
            for text, vector in zip(batch, vectors):
                store.put(text, vector)

    return [store.get(t) for t in texts]


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"Dimension mismatch: {u.shape} vs {v.shape}")
    denom = np.linalg.norm(u) * np.linalg.norm(v)
    if denom == 0:
        raise ValueError("Cosine is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / denom, -1.0, 1.0))
