import math
import os
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np

# Add src to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

from config import PipelineConfig
from errors import ConfigurationError, TrainingError
from schema import Qrels, Query, StandardizedTool
from services.scorer_service import FIELD_KEYS, Components, ScoringModel
from services.trainer_service import (
    PARAM_NAMES, TrainTriple, cross_validate, gradients, kfold_split, mine_negatives, model_from_vector,
    model_vector, negative_index, pairwise_loss, train, triple_loss, write_loss_csv,
)
from services.synthetic_service import PlantSpec, generate
from services.retrieval_service import SparseBackend, build_corpora, build_param_docs


def random_components(rng) -> Components:
    fields = {k: float(rng.uniform(0, 2)) for k in FIELD_KEYS}
    params = tuple((float(rng.uniform(0, 1)), bool(rng.integers(0, 2))) for _ in range(int(rng.integers(0, 5))))
    return Components(fields, params)


def random_model(rng) -> ScoringModel:
    return ScoringModel(
        field_weights={k: float(rng.normal(0, 1)) for k in FIELD_KEYS},
        bias=float(rng.normal()),
        tau=float(rng.uniform(0, 1)),
        w_required=float(rng.uniform(0, 1)),
        w_optional=float(rng.uniform(0, 1)),
    )


def separable_triples(n=300, seed=0) -> list[TrainTriple]:
    """Positives beat negatives on description; the other fields are noise, response is constant."""
    rng = np.random.default_rng(seed)

    def comps(description):
        return Components({
            "description": description,
            "parameters": float(rng.uniform(0, 1)),
            "response": 0.5,
            "examples": float(rng.uniform(0, 1)),
        })

    return [TrainTriple(f"q{i}", "pos", f"neg{i}", comps(1.0), comps(0.0)) for i in range(n)]


class TestPairwiseLoss(unittest.TestCase):
    def test_known_values(self):
        self.assertAlmostEqual(pairwise_loss(1.0, 1.0), math.log(2), places=6)
        self.assertAlmostEqual(pairwise_loss(2.0, 0.0), 0.126928, places=6)
        self.assertAlmostEqual(pairwise_loss(0.0, 2.0), 2.126928, places=6)

    def test_stable_over_wide_margins(self):
        for margin in np.linspace(-50, 50, 201):
            loss = pairwise_loss(float(margin), 0.0)
            self.assertTrue(math.isfinite(loss))
            self.assertGreaterEqual(loss, 0.0)
            self.assertAlmostEqual(pairwise_loss(-float(margin), 0.0), loss + float(margin), places=9)


class TestGradients(unittest.TestCase):
    def test_matches_central_differences(self):
        rng = np.random.default_rng(42)
        h = 1e-6
        for case in range(100):
            model = random_model(rng)
            triple = TrainTriple("q", "p", "n", random_components(rng), random_components(rng))
            analytic = gradients(triple, model)
            theta = model_vector(model)
            for i, name in enumerate(PARAM_NAMES):
                up, down = theta.copy(), theta.copy()
                up[i] += h
                down[i] -= h
                numeric = (triple_loss(triple, model_from_vector(up, model))
                           - triple_loss(triple, model_from_vector(down, model))) / (2 * h)
                tolerance = 1e-4 * max(abs(numeric), abs(analytic[name])) + 1e-8
                self.assertLessEqual(abs(analytic[name] - numeric), tolerance, f"case {case}, {name}")

    def test_bias_gradient_is_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            triple = TrainTriple("q", "p", "n", random_components(rng), random_components(rng))
            self.assertEqual(gradients(triple, random_model(rng))["bias"], 0.0)

    def test_identical_parameters_leave_penalty_untouched(self):
        params = ((0.3, True), (0.8, False))
        triple = TrainTriple(
            "q", "p", "n",
            Components(dict.fromkeys(FIELD_KEYS, 0.7), params),
            Components(dict.fromkeys(FIELD_KEYS, 0.2), params),
        )
        grad = gradients(triple, ScoringModel.initial())
        self.assertEqual((grad["tau"], grad["w_required"], grad["w_optional"]), (0.0, 0.0, 0.0))


class TestNegativeMining(unittest.TestCase):
    def make_tools(self, n):
        return [StandardizedTool(f"t{i:03d}", f"shared words tool number {i} " + "filler " * (i % 4)) for i in range(n)]

    def test_returns_n_non_relevant(self):
        tools = self.make_tools(70)
        qrels = Qrels((("q", "t000", 1), ("q", "t001", 1), ("q", "t002", 1)))
        negatives = mine_negatives(Query("q", "shared words"), qrels, negative_index(tools), 64)
        self.assertEqual(len(negatives), 64)
        self.assertFalse({"t000", "t001", "t002"} & set(negatives))
        self.assertEqual(len(set(negatives)), 64)

    def test_small_corpus_is_exhausted(self):
        tools = self.make_tools(40)
        qrels = Qrels((("q", "t000", 1), ("q", "t001", 1)))
        self.assertEqual(len(mine_negatives(Query("q", "shared"), qrels, negative_index(tools), 64)), 38)

    def test_top_hit_is_skipped_when_relevant(self):
        tools = [
            StandardizedTool("best", "currency exchange rates converter"),
            StandardizedTool("second", "currency news"),
            StandardizedTool("third", "weather"),
        ]
        qrels = Qrels((("q", "best", 1),))
        negatives = mine_negatives(Query("q", "currency exchange"), qrels, negative_index(tools))
        self.assertEqual(negatives, ["second", "third"])


class TestTrain(unittest.TestCase):
    def test_learns_separable_triples(self):
        result = train(ScoringModel.initial(), separable_triples(), epochs=5, batch_size=256, lr=0.1, seed=3)
        self.assertEqual(len(result.losses), 5)
        self.assertLess(result.losses[-1], math.log(2))
        self.assertLess(result.losses[-1], result.losses[0])
        self.assertGreater(result.model.weight("description"), 1.0)

    def test_constant_feature_keeps_its_weight(self):
        result = train(ScoringModel.initial(), separable_triples(), epochs=3, seed=5)
        self.assertEqual(result.model.weight("response"), 1.0)
        self.assertEqual(result.model.bias, 0.0)

    def test_same_seed_same_model(self):
        a = train(ScoringModel.initial(), separable_triples(), epochs=2, batch_size=64, seed=9)
        b = train(ScoringModel.initial(), separable_triples(), epochs=2, batch_size=64, seed=9)
        self.assertEqual(a.model, b.model)
        self.assertEqual(a.losses, b.losses)

    def test_alpha_is_never_updated(self):
        init = ScoringModel.initial(alpha=7.0)
        self.assertEqual(train(init, separable_triples(50), epochs=1).model.alpha, 7.0)

    def test_frozen_parameters(self):
        init = replace(ScoringModel.initial(), w_required=0.0, w_optional=0.0)
        triples = [
            replace(t, pos=Components(t.pos.field_scores, ((0.9, True),)), neg=Components(t.neg.field_scores, ((0.1, True),)))
            for t in separable_triples(100)
        ]
        result = train(init, triples, epochs=2, frozen=("w_required", "w_optional"))
        self.assertEqual((result.model.w_required, result.model.w_optional), (0.0, 0.0))
        with self.assertRaises(ConfigurationError):
            train(init, triples, frozen=("nope",))

    def test_no_triples(self):
        with self.assertRaises(TrainingError):
            train(ScoringModel.initial(), [])

    def test_non_finite_loss_names_the_triple(self):
        bad = Components({"description": float("nan"), "parameters": 0.0, "response": 0.0, "examples": 0.0})
        triples = separable_triples(10) + [TrainTriple("qbad", "p", "n", bad, bad)]
        with self.assertRaises(TrainingError) as ctx:
            train(ScoringModel.initial(), triples, epochs=1)
        self.assertIn("qbad:p>n", str(ctx.exception))

    def test_loss_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "loss.csv"
            write_loss_csv([0.5, 0.25], path)
            self.assertEqual(path.read_text(), "epoch,mean_loss\n1,0.5\n2,0.25\n")


class TestKFold(unittest.TestCase):
    def sizes(self, folds, k):
        return sorted((sum(1 for f in folds.values() if f == i) for i in range(k)), reverse=True)

    def test_even_split(self):
        folds = kfold_split([f"q{i}" for i in range(10)], 5, seed=1)
        self.assertEqual(self.sizes(folds, 5), [2, 2, 2, 2, 2])

    def test_remainder(self):
        folds = kfold_split([f"q{i}" for i in range(11)], 5, seed=1)
        self.assertEqual(self.sizes(folds, 5), [3, 2, 2, 2, 2])

    def test_partition_ignores_input_order(self):
        ids = [f"q{i}" for i in range(23)]
        folds = kfold_split(ids, 5, seed=4)
        self.assertEqual(set(folds), set(ids))
        self.assertEqual(kfold_split(list(reversed(ids)), 5, seed=4), folds)

    def test_too_few_queries(self):
        with self.assertRaises(ConfigurationError):
            kfold_split(["a", "b"], 5)
        with self.assertRaises(ConfigurationError):
            kfold_split(["a", "b"], 1)


class TestCrossValidate(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.synthetic = generate(PlantSpec(corpus_size=40, queries=15, confusers_per_query=1, seed=21))
        tools = cls.synthetic.tools
        raw = {t.id: str(t.doc) for t in cls.synthetic.dataset.tools}
        cls.backend = SparseBackend(build_corpora(tools, raw), build_param_docs(tools))
        cls.rewritten = {rq.query_id: rq for rq in cls.synthetic.rewritten}
        cls.queries = cls.synthetic.dataset.queries_by_id

    def run_cv(self, queries, **overrides):
        config = PipelineConfig(epochs=2, n_negatives=8, **overrides)
        return cross_validate(config, "synthetic", queries, self.synthetic.dataset.qrels, self.rewritten,
                              self.synthetic.tools, self.backend)

    def test_every_query_is_ranked_once(self):
        result = self.run_cv(self.queries)
        self.assertEqual(set(result.rankings), set(self.queries))
        self.assertEqual(len(result.models), 5)
        self.assertEqual(sorted(set(result.folds.values())), [0, 1, 2, 3, 4])

    def test_pooled_metric_is_mean_of_queries(self):
        report = self.run_cv(self.queries).report
        per_query = [row["ndcg@10"] for row in report.per_query.values()]
        self.assertAlmostEqual(report.means["ndcg@10"], sum(per_query) / len(per_query), places=12)
        self.assertEqual(report.config["variant"], "multifield")

    def test_query_order_does_not_matter(self):
        shuffled = dict(reversed(list(self.queries.items())))
        self.assertEqual(self.run_cv(self.queries).report.means, self.run_cv(shuffled).report.means)

    def test_mean_weighting_trains_nothing(self):
        result = self.run_cv(self.queries, weighting="mean")
        self.assertTrue(all(losses == [] for losses in result.losses))
        self.assertEqual(result.models[0].normalized_weights()["description"], 0.25)

    def test_no_penalty_variant_keeps_penalty_at_zero(self):
        result = self.run_cv(self.queries, penalty=False)
        for model in result.models:
            self.assertEqual((model.w_required, model.w_optional), (0.0, 0.0))

    def test_missing_rewrite(self):
        partial = dict(self.rewritten)
        partial.pop(next(iter(partial)))
        config = PipelineConfig(epochs=1)
        with self.assertRaises(ConfigurationError):
            cross_validate(config, "synthetic", self.queries, self.synthetic.dataset.qrels, partial,
                           self.synthetic.tools, self.backend)


if __name__ == '__main__':
    unittest.main()
