import os
from dataclasses import asdict, dataclass, field
from dotenv import load_dotenv

from errors import ConfigurationError
from schema import FIELDS

load_dotenv()


class Config:
    CHAT_API_BASE = os.getenv("CHAT_API_BASE", "https://api.openai.com/v1")
    CHAT_API_KEY = os.getenv("CHAT_API_KEY")
    CHAT_MODEL = os.getenv("CHAT_MODEL", "gpt-4o-mini")

    EMBEDDING_API_BASE = os.getenv("EMBEDDING_API_BASE", "https://api.openai.com/v1")
    EMBEDDING_API_KEY = os.getenv("EMBEDDING_API_KEY")
    EMBEDDING_MODEL = os.getenv("EMBEDDING_MODEL", "text-embedding-3-small")

    # Provider calls in flight at once
    PROVIDER_PARALLELISM = int(os.getenv("PROVIDER_PARALLELISM", "4"))
    CACHE_DIR = os.getenv("CACHE_DIR", ".toolsift_cache")
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    @staticmethod
    def validate(need_chat: bool = False, need_embedding: bool = False):
        missing = []
        if need_chat:
            if not Config.CHAT_API_BASE: missing.append("CHAT_API_BASE")
            if not Config.CHAT_API_KEY: missing.append("CHAT_API_KEY")
        if need_embedding:
            if not Config.EMBEDDING_API_BASE: missing.append("EMBEDDING_API_BASE")
            if not Config.EMBEDDING_API_KEY: missing.append("EMBEDDING_API_KEY")

        if missing:
            raise ConfigurationError(f"Missing required environment variables: {', '.join(missing)}")


MODES = ("multifield", "full_doc")
BACKENDS = ("sparse", "dense")
WEIGHTINGS = ("learned", "mean")
DOC_TEXTS = ("raw", "standardized")
QUERY_TEXTS = ("original", "rewritten")
FIELD_NAMES = tuple(f.value for f in FIELDS)


@dataclass
class PipelineConfig:
    """Resolved settings of one pipeline run."""

    dataset_paths: list[str] = field(default_factory=list)
    dataset_format: str = "jsonl"
    workdir: str = "work"

    # providers
    mock_llm: bool = False
    parallelism: int = 4
    cache_dir: str = ".toolsift_cache"

    # retrieval
    backend: str = "sparse"
    k1: float = 1.2
    b_len: float = 0.75
    normalize: bool = False

    # rewriting
    prf_k: int = 20
    exemplars: int = 3
    max_needs: int = 8

    # scoring
    mode: str = "multifield"
    prune: bool = False
    prune_m: int = 100
    top_n: int = 100
    ks: tuple = (5, 10, 100)

    # ablation switches
    standardized: bool = True
    rewritten: bool = True
    weighting: str = "learned"
    penalty: bool = True
    single_field: str = ""
    # full-doc mode only: which document and query text are compared
    doc_text: str = "raw"
    query_text: str = "original"

    # training
    epochs: int = 5
    batch_size: int = 256
    lr: float = 0.1
    alpha: float = 15.0
    n_negatives: int = 64
    folds: int = 5
    seed: int = 42

    run_tag: str = "toolsift"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"Unknown mode '{self.mode}'. Must be one of: {MODES}")
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"Unknown backend '{self.backend}'. Must be one of: {BACKENDS}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigurationError(f"Unknown weighting '{self.weighting}'. Must be one of: {WEIGHTINGS}")
        if self.doc_text not in DOC_TEXTS:
            raise ConfigurationError(f"Unknown doc text '{self.doc_text}'. Must be one of: {DOC_TEXTS}")
        if self.query_text not in QUERY_TEXTS:
            raise ConfigurationError(f"Unknown query text '{self.query_text}'. Must be one of: {QUERY_TEXTS}")
        if self.single_field and self.single_field not in FIELD_NAMES:
            raise ConfigurationError(f"Unknown field '{self.single_field}'. Must be one of: {FIELD_NAMES}")
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        self.ks = tuple(sorted(set(int(k) for k in self.ks)))
        if not self.ks or self.ks[0] < 1:
            raise ConfigurationError(f"Metric cutoffs must be positive integers, got {list(self.ks)}")

    @property
    def variant(self) -> str:
        """Short label of the ablation variant, used in run tags and report tables."""
        if self.single_field:
            return f"single:{self.single_field}"
        parts = [self.mode]
        if self.mode == "full_doc":
            if self.doc_text == "standardized":
                parts.append("standardized-doc")
            if self.query_text == "rewritten":
                parts.append("rewritten-query")
            return "+".join(parts)
        if not self.standardized:
            parts.append("raw-docs")
        if not self.rewritten:
            parts.append("original-query")
        if self.weighting == "mean":
            parts.append("mean")
        if not self.penalty:
            parts.append("no-penalty")
        return "+".join(parts)

    def to_dict(self) -> dict:
        data = asdict(self)
        # machine-local locations stay out of report provenance
        data.pop("workdir")
        data.pop("cache_dir")
        data["ks"] = list(self.ks)
        data["variant"] = self.variant
        return data
