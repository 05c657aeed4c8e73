"""
Learning the aggregation: hard-negative mining, the pairwise logistic loss,
its analytic gradients, mini-batch Adam, and k-fold cross-validation.

Only the aggregation parameters are learned. Field and parameter match scores
are computed once per (query, tool) and cached on the training triples.
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from config import PipelineConfig
from errors import ConfigurationError, TrainingError
from schema import Qrels, Query, RewrittenQuery, StandardizedTool, concatenated_text
from services.eval_service import EvalReport, evaluate_run, run_from_rankings
from services.retrieval_service import (
    RelevanceBackend, SparseIndex, build_sparse_index, rank_scores, sparse_score_all, tokenize,
)
from services.scorer_service import (
    FIELD_KEYS, Components, Retriever, ScoredTool, ScoringModel, compute_components, rank_scored, score_components,
)

logger = logging.getLogger("Toolsift.Trainer")

PARAM_NAMES = tuple(f"w_{k}" for k in FIELD_KEYS) + ("bias", "tau", "w_required", "w_optional")
BIAS, TAU, W_REQ, W_OPT = 4, 5, 6, 7
PENALTY_PARAMS = ("w_required", "w_optional")


@dataclass(frozen=True)
class TrainTriple:
    query_id: str
    positive: str
    negative: str
    pos: Components
    neg: Components

    @property
    def triple_id(self) -> str:
        return f"{self.query_id}:{self.positive}>{self.negative}"


@dataclass
class TrainResult:
    model: ScoringModel
    losses: list[float]


# ---------------------------------------------------------------------------
# Negatives and triples
# ---------------------------------------------------------------------------

def negative_index(tools: Sequence[StandardizedTool], k1: float = 1.2, b_len: float = 0.75) -> SparseIndex:
    """BM25 over the concatenation of the four standardized fields."""
    return build_sparse_index({t.tool_id: concatenated_text(t) for t in tools}, k1, b_len)


def mine_negatives(query: Query, qrels: Qrels, index: SparseIndex, n: int = 64) -> list[str]:
    relevant = qrels.relevant(query.id)
    ranked = rank_scores(sparse_score_all(index, tokenize(query.text)))
    return [tool_id for tool_id, _ in ranked if tool_id not in relevant][:n]


def build_triples(query_ids: Sequence[str], queries: Mapping[str, Query], qrels: Qrels,
                  components: Mapping[str, Mapping[str, Components]], index: SparseIndex,
                  n_negatives: int = 64) -> list[TrainTriple]:
    """Every positive of a query paired with each of its mined negatives."""
    triples = []
    for query_id in query_ids:
        comps = components[query_id]
        negatives = mine_negatives(queries[query_id], qrels, index, n_negatives)
        for positive in sorted(qrels.relevant(query_id)):
            for negative in negatives:
                triples.append(TrainTriple(query_id, positive, negative, comps[positive], comps[negative]))
    return triples


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def pairwise_loss(s_pos: float, s_neg: float) -> float:
    return float(np.logaddexp(0.0, -(s_pos - s_neg)))


def _expit(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def model_vector(model: ScoringModel) -> np.ndarray:
    return np.array(
        [model.field_weights[k] for k in FIELD_KEYS] + [model.bias, model.tau, model.w_required, model.w_optional],
        dtype=np.float64,
    )


def model_from_vector(theta: np.ndarray, template: ScoringModel) -> ScoringModel:
    return replace(
        template,
        field_weights={k: float(theta[i]) for i, k in enumerate(FIELD_KEYS)},
        bias=float(theta[BIAS]),
        tau=float(theta[TAU]),
        w_required=float(theta[W_REQ]),
        w_optional=float(theta[W_OPT]),
    )


class TripleBatch:
    """Triples packed into arrays; parameter lists are padded and masked."""

    def __init__(self, triples: Sequence[TrainTriple]):
        self.ids = [t.triple_id for t in triples]
        self.f_pos = np.array([[t.pos.field_scores[k] for k in FIELD_KEYS] for t in triples], dtype=np.float64)
        self.f_neg = np.array([[t.neg.field_scores[k] for k in FIELD_KEYS] for t in triples], dtype=np.float64)
        self.pos = self._pack([t.pos.param_scores for t in triples])
        self.neg = self._pack([t.neg.param_scores for t in triples])

    @staticmethod
    def _pack(lists) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        width = max((len(p) for p in lists), default=0)
        scores = np.zeros((len(lists), width))
        required = np.zeros((len(lists), width), dtype=bool)
        mask = np.zeros((len(lists), width), dtype=bool)
        for i, params in enumerate(lists):
            for j, (s, req) in enumerate(params):
                scores[i, j] = s
                required[i, j] = req
                mask[i, j] = True
        return scores, required, mask

    def take(self, index: np.ndarray) -> "TripleBatch":
        batch = object.__new__(TripleBatch)
        batch.ids = [self.ids[i] for i in index]
        batch.f_pos, batch.f_neg = self.f_pos[index], self.f_neg[index]
        batch.pos = tuple(a[index] for a in self.pos)
        batch.neg = tuple(a[index] for a in self.neg)
        return batch


def _penalty_parts(packed, theta: np.ndarray, alpha: float):
    """Per-triple penalty and its partials w.r.t. tau, w_required, w_optional."""
    scores, required, mask = packed
    gate = _expit(alpha * (theta[TAU] - scores)) * mask
    weights = np.where(required, theta[W_REQ], theta[W_OPT])
    penalty = (weights * gate).sum(axis=1)
    d_tau = (weights * alpha * gate * (1.0 - gate)).sum(axis=1)
    d_req = (gate * required).sum(axis=1)
    d_opt = (gate * ~required).sum(axis=1)
    return penalty, d_tau, d_req, d_opt


def batch_loss_and_gradient(batch: TripleBatch, theta: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-triple losses and the gradient of their mean."""
    weights = theta[:len(FIELD_KEYS)]
    diff = batch.f_pos - batch.f_neg
    p_pos, tau_pos, req_pos, opt_pos = _penalty_parts(batch.pos, theta, alpha)
    p_neg, tau_neg, req_neg, opt_neg = _penalty_parts(batch.neg, theta, alpha)

    margin = diff @ weights - (p_pos - p_neg)
    losses = np.logaddexp(0.0, -margin)
    dloss = -_expit(-margin)

    grad = np.zeros_like(theta)
    grad[:len(FIELD_KEYS)] = (dloss[:, None] * diff).mean(axis=0)
    # bias cancels in the margin
    grad[BIAS] = 0.0
    grad[TAU] = (dloss * -(tau_pos - tau_neg)).mean()
    grad[W_REQ] = (dloss * -(req_pos - req_neg)).mean()
    grad[W_OPT] = (dloss * -(opt_pos - opt_neg)).mean()
    return losses, grad


def gradients(triple: TrainTriple, model: ScoringModel) -> dict[str, float]:
    _, grad = batch_loss_and_gradient(TripleBatch([triple]), model_vector(model), model.alpha)
    return dict(zip(PARAM_NAMES, (float(g) for g in grad)))


def triple_loss(triple: TrainTriple, model: ScoringModel) -> float:
    return pairwise_loss(score_components(triple.pos, model).total, score_components(triple.neg, model).total)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def train(model_init: ScoringModel, triples: Sequence[TrainTriple], epochs: int = 5, batch_size: int = 256,
          lr: float = 0.1, seed: int = 42, frozen: Sequence[str] = ()) -> TrainResult:
    """Mini-batch Adam on the analytic gradients. Frozen parameters keep their initial value."""
    if not triples:
        raise TrainingError("No training triples; every training query needs a relevant and a non-relevant tool")
    unknown = set(frozen) - set(PARAM_NAMES)
    if unknown:
        raise ConfigurationError(f"Cannot freeze unknown parameters {sorted(unknown)}")

    data = TripleBatch(triples)
    alpha = model_init.alpha
    free = np.array([name not in frozen for name in PARAM_NAMES], dtype=np.float64)
    param = torch.nn.Parameter(torch.from_numpy(model_vector(model_init)))
    optimizer = torch.optim.Adam([param], lr=lr, betas=(0.9, 0.999), eps=1e-8)

    logger.info(f"Training on {len(triples)} triples: {epochs} epochs, batch {batch_size}, lr {lr}")
    losses = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(triples))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = data.take(order[start:start + batch_size])
            theta = param.detach().numpy().copy()
            batch_losses, grad = batch_loss_and_gradient(batch, theta, alpha)

            bad = np.flatnonzero(~np.isfinite(batch_losses))
            if bad.size or not np.all(np.isfinite(grad)):
                culprit = batch.ids[int(bad[0])] if bad.size else batch.ids[0]
                logger.error(f"Non-finite loss at epoch {epoch + 1}, triple {culprit}, parameters {theta.tolist()}")
                raise TrainingError(f"Non-finite loss at epoch {epoch + 1} on triple {culprit}")

            optimizer.zero_grad()
            param.grad = torch.from_numpy(grad * free)
            optimizer.step()
            total += float(batch_losses.sum())

        losses.append(total / len(triples))
        logger.info(f"Epoch {epoch + 1}/{epochs}: mean loss {losses[-1]:.6f}")

    return TrainResult(model=model_from_vector(param.detach().numpy(), model_init), losses=losses)


def write_loss_csv(losses: Sequence[float], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(losses, start=1):
            writer.writerow([epoch, repr(float(loss))])


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def kfold_split(query_ids: Sequence[str], k: int = 5, seed: int = 42) -> dict[str, int]:
    """Seeded shuffle of the sorted ids, then round-robin fold assignment."""
    if k < 2:
        raise ConfigurationError(f"Cross-validation needs at least 2 folds, got {k}")
    ids = sorted(set(query_ids))
    if len(ids) < k:
        raise ConfigurationError(f"{len(ids)} queries cannot be split into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[i]: position % k for position, i in enumerate(order)}


def initial_model(config: PipelineConfig, dataset: str, backend: RelevanceBackend) -> tuple[ScoringModel, tuple]:
    """Starting model and frozen parameters for the configured variant."""
    model = ScoringModel.initial(alpha=config.alpha, dataset=dataset, backend=backend.tag)
    if not config.penalty:
        return replace(model, w_required=0.0, w_optional=0.0), PENALTY_PARAMS
    return model, ()


def fit(config: PipelineConfig, dataset: str, query_ids: Sequence[str], queries: Mapping[str, Query],
        qrels: Qrels, components: Mapping[str, Mapping[str, Components]], index: SparseIndex,
        backend: RelevanceBackend) -> TrainResult:
    if config.weighting == "mean":
        return TrainResult(model=ScoringModel.uniform(dataset=dataset, backend=backend.tag), losses=[])
    model, frozen = initial_model(config, dataset, backend)
    triples = build_triples(query_ids, queries, qrels, components, index, config.n_negatives)
    return train(model, triples, config.epochs, config.batch_size, config.lr, config.seed, frozen)


def precompute_components(rewritten: Mapping[str, RewrittenQuery], tools: Sequence[StandardizedTool],
                          backend: RelevanceBackend, normalize: bool = False) -> dict[str, dict[str, Components]]:
    return {
        query_id: compute_components(rq, tools, backend, normalize=normalize)
        for query_id, rq in sorted(rewritten.items())
    }


@dataclass
class CrossValidationResult:
    folds: dict[str, int]
    models: list[Optional[ScoringModel]]
    losses: list[list[float]]
    rankings: dict[str, list[ScoredTool]]
    report: EvalReport


def cross_validate(config: PipelineConfig, dataset: str, queries: Mapping[str, Query], qrels: Qrels,
                   rewritten: Mapping[str, RewrittenQuery], tools: Sequence[StandardizedTool],
                   backend: RelevanceBackend) -> CrossValidationResult:
    """Train on k-1 folds, rank the held-out fold; every query is ranked exactly once."""
    missing = sorted(set(queries) - set(rewritten))
    if missing:
        raise ConfigurationError(f"{len(missing)} queries have no rewrite (first: {missing[0]}); run `rewrite`")

    folds = kfold_split(list(queries), config.folds, config.seed)
    learned = config.mode == "multifield" and not config.single_field
    components = precompute_components(rewritten, tools, backend, config.normalize) if learned else {}
    index = negative_index(tools, config.k1, config.b_len) if learned and config.weighting == "learned" else None

    models, losses, rankings = [], [], {}
    for fold in range(config.folds):
        test_ids = sorted(q for q, f in folds.items() if f == fold)
        if not any(qrels.relevant(q) for q in test_ids):
            raise ConfigurationError(f"Fold {fold} has no query with relevance judgments")
        train_ids = sorted(q for q, f in folds.items() if f != fold)

        model = None
        if learned:
            result = fit(config, dataset, train_ids, queries, qrels, components, index, backend)
            model = result.model
            losses.append(result.losses)
        else:
            losses.append([])
        models.append(model)

        if learned and config.prune:
            retriever = Retriever.from_config(config, tools, backend, model)
            for q in test_ids:
                rankings[q] = retriever.rank(rewritten[q], queries[q])
        elif learned:
            for q in test_ids:
                rankings[q] = rank_scored({t: score_components(c, model) for t, c in components[q].items()})
        else:
            retriever = Retriever.from_config(config, tools, backend, None)
            for q in test_ids:
                rankings[q] = retriever.rank(rewritten[q], queries[q])
        logger.info(f"Fold {fold + 1}/{config.folds}: trained on {len(train_ids)} queries, ranked {len(test_ids)}")

    report = evaluate_run(
        run_from_rankings(rankings, config.top_n), qrels, config.ks,
        run_tag=config.run_tag, dataset=dataset, backend=backend.tag, mode=config.variant,
        config=config.to_dict(),
    )
    return CrossValidationResult(folds=folds, models=models, losses=losses, rankings=rankings, report=report)
