import math
import os
import sys
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

# Add src to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

from config import PipelineConfig
from errors import ConfigurationError
from schema import FULL_DOC
from services.corpus_service import load_dataset
from services.eval_service import field_mask_ablation, ndcg_at_k
from services.retrieval_service import FieldCorpus, SparseBackend, build_corpora, build_param_docs, tokenize
from services.rewriter_service import load_rewritten
from services.scorer_service import FIELD_KEYS, ScoringModel, score_components
from services.standardizer_service import load_standardized, raw_doc_text, tool_name
from services.synthetic_service import PlantSpec, generate, write_synthetic
from services.trainer_service import build_triples, cross_validate, negative_index, precompute_components, train


def sparse_backend(synthetic) -> SparseBackend:
    tools = synthetic.tools
    raw = {t.id: raw_doc_text(t.doc) for t in synthetic.dataset.tools}
    return SparseBackend(build_corpora(tools, raw), build_param_docs(tools))


class TestGenerate(unittest.TestCase):
    def test_same_seed_same_corpus(self):
        a = generate(PlantSpec(corpus_size=20, queries=5, seed=7))
        b = generate(PlantSpec(corpus_size=20, queries=5, seed=7))
        self.assertEqual(a.dataset, b.dataset)
        self.assertEqual(a.tools, b.tools)
        self.assertEqual(a.rewritten, b.rewritten)
        self.assertNotEqual(a.tools, generate(PlantSpec(corpus_size=20, queries=5, seed=8)).tools)

    def test_sizes_and_ids(self):
        synthetic = generate(PlantSpec(corpus_size=30, queries=12))
        self.assertEqual(len(synthetic.dataset.tools), 30)
        self.assertEqual([q.id for q in synthetic.dataset.queries], [f"q{i:04d}" for i in range(12)])
        self.assertEqual([t.tool_id for t in synthetic.tools], sorted(t.tool_id for t in synthetic.tools))
        for q in synthetic.dataset.queries:
            self.assertEqual(len(synthetic.dataset.qrels.relevant(q.id)), 1)

    def test_bigram_is_unique_to_the_planted_tool(self):
        synthetic = generate(PlantSpec(corpus_size=40, queries=10, confusers_per_query=2, seed=3))
        for q in synthetic.dataset.queries:
            bigram = set(synthetic.bigrams[q.id])
            self.assertTrue(bigram <= set(tokenize(q.text)))
            carriers = {t.tool_id for t in synthetic.tools if bigram <= set(tokenize(t.description))}
            self.assertEqual(carriers, synthetic.dataset.qrels.relevant(q.id))

    def test_confusers_carry_the_bigram_elsewhere(self):
        synthetic = generate(PlantSpec(corpus_size=40, queries=10, confusers_per_query=2, seed=3))
        for q in synthetic.dataset.queries:
            bigram = set(synthetic.bigrams[q.id])
            confusers = {t.tool_id for t in synthetic.tools if bigram <= set(tokenize(t.response))}
            self.assertGreaterEqual(len(confusers), 2)
            self.assertFalse(confusers & synthetic.dataset.qrels.relevant(q.id))

    def test_other_signal_field(self):
        synthetic = generate(PlantSpec(corpus_size=20, queries=5, signal_field="response"))
        rq = synthetic.rewritten[0]
        bigram = " ".join(synthetic.bigrams[rq.query_id])
        self.assertEqual(rq.tool_needs[0].expected_response, bigram)
        (target,) = synthetic.dataset.qrels.relevant(rq.query_id)
        self.assertTrue(next(t for t in synthetic.tools if t.tool_id == target).response.endswith(bigram))

    def test_parameter_flags_do_not_mark_relevant_tools(self):
        synthetic = generate(PlantSpec(corpus_size=20, queries=5))
        for tool in synthetic.tools:
            self.assertFalse(tool.parameters[-1].required)
            self.assertEqual([p.name for p in tool.parameters[:2]], ["query", "limit"])
            self.assertEqual([p.required for p in tool.parameters[:2]], [True, True])


    def test_decoy_differs_only_in_one_required_flag(self):
        synthetic = generate(PlantSpec(corpus_size=50, queries=20, decoy_fraction=0.2))
        self.assertEqual(len(synthetic.decoys), 10)
        by_id = {t.tool_id: t for t in synthetic.tools}
        for twin_id, decoy_id in synthetic.decoys.items():
            twin, decoy = by_id[twin_id], by_id[decoy_id]
            self.assertEqual((twin.description, twin.response, twin.examples),
                             (decoy.description, decoy.response, decoy.examples))
            self.assertEqual(twin.parameters[:-1], decoy.parameters[:-1])
            self.assertEqual(twin.parameters[-1].name, decoy.parameters[-1].name)
            self.assertFalse(twin.parameters[-1].required)
            self.assertTrue(decoy.parameters[-1].required)

    def test_invalid_specs(self):
        with self.assertRaises(ConfigurationError):
            PlantSpec(corpus_size=5)
        with self.assertRaises(ConfigurationError):
            PlantSpec(queries=0)
        with self.assertRaises(ConfigurationError):
            PlantSpec(signal_field="parameters")
        with self.assertRaises(ConfigurationError):
            PlantSpec(corpus_size=20, queries=15, decoy_fraction=0.5)
        with self.assertRaises(ConfigurationError):
            PlantSpec(corpus_size=100, queries=5, decoy_fraction=0.1)
        with self.assertRaises(ConfigurationError):
            PlantSpec(decoy_fraction=1.0)

    def test_write_synthetic(self):
        synthetic = generate(PlantSpec(corpus_size=20, queries=5))
        with tempfile.TemporaryDirectory() as tmp:
            write_synthetic(synthetic, Path(tmp) / "data", Path(tmp) / "work")
            loaded = load_dataset(Path(tmp) / "data")
            self.assertEqual([q.id for q in loaded.queries], [q.id for q in synthetic.dataset.queries])
            self.assertEqual(loaded.qrels.relevant("q0000"), synthetic.dataset.qrels.relevant("q0000"))
            self.assertEqual(load_standardized(Path(tmp) / "work" / "standardized.jsonl"), synthetic.tools)
            self.assertEqual(load_rewritten(Path(tmp) / "work" / "rewritten.jsonl"), synthetic.rewritten)


class TestPlantedRecovery(unittest.TestCase):
    """Learned weights recover the signal field and beat the concatenated-doc baseline."""

    @classmethod
    def setUpClass(cls):
        cls.synthetic = generate(PlantSpec(corpus_size=200, queries=100, confusers_per_query=2, seed=11))
        cls.backend = sparse_backend(cls.synthetic)
        cls.rewritten = {rq.query_id: rq for rq in cls.synthetic.rewritten}
        cls.learned = cls.run_cv(PipelineConfig())
        cls.full_doc = cls.run_cv(PipelineConfig(mode="full_doc"))

    @classmethod
    def run_cv(cls, config):
        return cross_validate(config, "synthetic", cls.synthetic.dataset.queries_by_id, cls.synthetic.dataset.qrels,
                              cls.rewritten, cls.synthetic.tools, cls.backend)

    def test_learned_ranking_finds_planted_tools(self):
        self.assertGreaterEqual(self.learned.report.means["ndcg@10"], 0.9)

    def test_beats_full_doc_baseline(self):
        self.assertGreaterEqual(self.learned.report.means["ndcg@10"], self.full_doc.report.means["ndcg@10"] + 0.05)

    def test_signal_field_gets_the_largest_weight(self):
        for model in self.learned.models:
            weights = model.normalized_weights()
            self.assertEqual(max(weights, key=weights.get), "description")
            self.assertAlmostEqual(sum(weights.values()), 1.0, places=9)

    def test_parameter_weight_is_untouched(self):
        # every tool has the same parameter scores, so the field never separates a pair
        for model in self.learned.models:
            self.assertEqual(model.weight("parameters"), 1.0)

    def test_loss_falls_below_chance(self):
        for losses in self.learned.losses:
            self.assertEqual(len(losses), 5)
            self.assertLess(losses[-1], math.log(2))
            self.assertLess(losses[-1], losses[0])

    def test_fold_models_record_their_origin(self):
        self.assertEqual({m.dataset for m in self.learned.models}, {"synthetic"})
        self.assertEqual({m.backend for m in self.learned.models}, {"sparse"})


class TestDecoyPenalty(unittest.TestCase):
    """The penalty is what separates a tool from its decoy."""

    @classmethod
    def setUpClass(cls):
        synthetic = generate(PlantSpec(corpus_size=200, queries=100, decoy_fraction=0.3, confusers_per_query=1,
                                       seed=5))
        backend = sparse_backend(synthetic)
        rewritten = {rq.query_id: rq for rq in synthetic.rewritten}
        cls.components = precompute_components(rewritten, synthetic.tools, backend)
        triples = build_triples(sorted(rewritten), synthetic.dataset.queries_by_id, synthetic.dataset.qrels,
                                cls.components, negative_index(synthetic.tools), 64)
        # the optional weight stays at its initial value so the required weight carries the signal
        cls.model = train(ScoringModel.initial(), triples, frozen=("w_optional",)).model
        cls.pairs = [
            (q, twin, decoy)
            for q in sorted(rewritten)
            for twin in synthetic.dataset.qrels.relevant(q)
            for decoy in [synthetic.decoys.get(twin)]
            if decoy is not None
        ]

    def win_rate(self, model: ScoringModel) -> float:
        wins = sum(
            score_components(self.components[q][twin], model).total
            > score_components(self.components[q][decoy], model).total
            for q, twin, decoy in self.pairs
        )
        return wins / len(self.pairs)

    def test_every_decoy_has_a_query(self):
        self.assertEqual(len(self.pairs), 60)

    def test_trained_penalty_ranks_twin_above_decoy(self):
        self.assertGreater(self.model.w_required, self.model.w_optional)
        self.assertGreaterEqual(self.win_rate(self.model), 0.95)

    def test_zero_required_weight_loses_the_distinction(self):
        self.assertLess(self.win_rate(replace(self.model, w_required=0.0)), 0.8)


class TestPenaltyOnly(unittest.TestCase):
    """With every field weight at zero, parameters alone must not find the planted tools."""

    @classmethod
    def setUpClass(cls):
        cls.synthetic = generate(PlantSpec(corpus_size=200, queries=100, confusers_per_query=2, seed=11))
        rewritten = {rq.query_id: rq for rq in cls.synthetic.rewritten}
        cls.components = precompute_components(rewritten, cls.synthetic.tools, sparse_backend(cls.synthetic))
        cls.model = replace(ScoringModel.initial(), field_weights=dict.fromkeys(FIELD_KEYS, 0.0))

    def test_every_tool_scores_the_same(self):
        for query_id, by_tool in self.components.items():
            totals = {round(score_components(c, self.model).total, 12) for c in by_tool.values()}
            self.assertEqual(len(totals), 1, query_id)

    def test_ranking_is_no_better_than_chance(self):
        qrels = self.synthetic.dataset.qrels
        ndcgs = []
        for query_id, by_tool in self.components.items():
            totals = {t: score_components(c, self.model).total for t, c in by_tool.items()}
            ranking = sorted(totals, key=lambda t: (-totals[t], t))
            ndcgs.append(ndcg_at_k(ranking, qrels.relevant(query_id), 10))
        # ten ids fill the top ten for every query, so at most ten queries score
        self.assertLess(sum(ndcgs) / len(ndcgs), 0.1)



class TestPlantedAblation(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        synthetic = generate(PlantSpec(corpus_size=200, queries=50, query_noise_words=0, seed=13))
        names = {t.id: tool_name(t) for t in synthetic.dataset.tools}

        def make_backend(docs):
            return SparseBackend({FULL_DOC: FieldCorpus(FULL_DOC, docs)}, {})

        cls.report = field_mask_ablation(synthetic.tools, names, list(synthetic.dataset.queries),
                                         synthetic.dataset.qrels, make_backend, ks=(10,))

    def test_baseline_is_perfect(self):
        self.assertEqual(self.report.baseline[10], 1.0)

    def test_noise_fields_do_not_matter(self):
        for name in ("name", "parameters", "response", "examples"):
            self.assertGreaterEqual(self.report.row(name).delta[10], 0.0, name)

    def test_signal_field_carries_the_retrieval(self):
        self.assertLessEqual(self.report.row("description").delta[10], -20.0)


if __name__ == '__main__':
    unittest.main()
