import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from config import Config, PipelineConfig
from clients import clients
from errors import ConfigurationError, MissingArtifactError, ToolsiftError
from schema import FULL_DOC, Dataset, StandardizedTool
from services.corpus_service import build_mixed, dataset_stats, dedup_queries, load_dataset, save_dataset
from services.embedding_service import EmbeddingStore, embed
from services.eval_service import (
    MASKABLE_FIELDS, evaluate_run, field_mask_ablation, format_table, masked_documents, read_run,
    run_from_rankings, write_run,
)
from services.llm_service import ResponseCache
from services.retrieval_service import (
    EMBEDDINGS_FILE, INDEX_MANIFEST, DenseBackend, FieldCorpus, SparseBackend, build_corpora, build_param_docs,
    build_sparse_index, load_index, load_manifest, save_index,
)
from services.rewriter_service import RewriterService, identity_rewrite, load_rewritten, write_rewritten
from services.scorer_service import Retriever, ScoringModel, query_side_texts
from services.standardizer_service import (
    StandardizerService, load_standardized, raw_doc_text, raw_fields, tool_name, write_standardized,
)
from services.synthetic_service import PlantSpec, generate, write_synthetic
from services.trainer_service import cross_validate, fit, precompute_components, negative_index, write_loss_csv

logger = logging.getLogger("Toolsift")

STANDARDIZED_FILE = "standardized.jsonl"
REWRITTEN_FILE = "rewritten.jsonl"
MODEL_FILE = "model.json"
LOSS_FILE = "loss.csv"
RUN_FILE = "run.trec"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"


# ---------------------------------------------------------------------------
# Artifact plumbing
# ---------------------------------------------------------------------------

def load_datasets(config: PipelineConfig, dedup: bool = False) -> Dataset:
    if not config.dataset_paths:
        raise ConfigurationError("No dataset given; pass --dataset DIR (repeat it to mix datasets)")
    datasets = [load_dataset(path, config.dataset_format) for path in config.dataset_paths]
    dataset = datasets[0] if len(datasets) == 1 else build_mixed(datasets)
    if dedup:
        dataset, _ = dedup_queries(dataset)
    return dataset


def require(path: Path, command: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, command)
    return path


def index_dir(config: PipelineConfig) -> Path:
    return Path(config.workdir) / ("index" if config.standardized else "index-raw")


def index_command(config: PipelineConfig) -> str:
    return "index" if config.standardized else "index --raw-docs"


def tool_fields(config: PipelineConfig, dataset: Dataset) -> list[StandardizedTool]:
    if not config.standardized:
        return [raw_fields(t) for t in dataset.tools]
    tools = load_standardized(require(Path(config.workdir) / STANDARDIZED_FILE, "standardize"))
    known = {t.tool_id for t in tools}
    missing = [t.id for t in dataset.tools if t.id not in known]
    if missing:
        raise ConfigurationError(f"{len(missing)} tools are not standardized (first: {missing[0]}); rerun `standardize`")
    by_id = {t.tool_id: t for t in tools}
    return [by_id[t.id] for t in dataset.tools]


def rewrites(config: PipelineConfig, dataset: Dataset) -> dict:
    needs_rewrites = config.rewritten and (config.mode == "multifield" or config.query_text == "rewritten")
    if not needs_rewrites:
        return {q.id: identity_rewrite(q) for q in dataset.queries}
    loaded = {rq.query_id: rq for rq in load_rewritten(require(Path(config.workdir) / REWRITTEN_FILE, "rewrite"))}
    missing = [q.id for q in dataset.queries if q.id not in loaded]
    if missing:
        logger.warning(f"{len(missing)} queries have no rewrite and are skipped (first: {missing[0]})")
    return {q.id: loaded[q.id] for q in dataset.queries if q.id in loaded}


async def open_backend(config: PipelineConfig, dataset: Dataset, tools: list[StandardizedTool], rewritten: dict):
    root = index_dir(config)
    if not (root / INDEX_MANIFEST).exists():
        raise MissingArtifactError(root / INDEX_MANIFEST, index_command(config))
    manifest = load_manifest(root)
    if manifest["backend"] != config.backend:
        raise ConfigurationError(
            f"Index at {root} is {manifest['backend']}; rebuild with `index --backend {config.backend}`"
        )

    corpora = build_corpora(tools, {t.id: raw_doc_text(t.doc) for t in dataset.tools})
    param_docs = build_param_docs(tools)
    if config.backend == "sparse":
        return load_index(root, corpora, param_docs)

    clients.initialize_embedding(config.mock_llm)
    backend = load_index(root, corpora, param_docs, clients.embedding.tag)
    queries = dataset.queries_by_id
    texts = [text for q, rq in rewritten.items() for text in query_side_texts(rq, queries[q])]
    await backend.prepare(clients.embedding, texts, config.parallelism)
    backend.store.save(root / EMBEDDINGS_FILE)
    return backend


def load_model(config: PipelineConfig, dataset: Dataset, backend):
    if config.mode != "multifield" or config.single_field:
        return None
    if config.weighting == "mean":
        return ScoringModel.uniform(dataset=dataset.name, backend=backend.tag)
    return ScoringModel.load(Path(config.workdir) / MODEL_FILE, "train")


def chat_provider(config: PipelineConfig):
    if config.mock_llm:
        return None, None
    clients.initialize_chat()
    return clients.chat, ResponseCache(config.cache_dir)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

async def cmd_standardize(config: PipelineConfig, args):
    dataset = load_datasets(config, args.dedup_queries)
    provider, cache = chat_provider(config)
    service = StandardizerService(provider, cache, config.parallelism, mock=config.mock_llm)
    tools = await service.standardize_all(list(dataset.tools))
    path = Path(config.workdir) / STANDARDIZED_FILE
    write_standardized(tools, path)
    logger.info(f"Wrote {len(tools)} standardized tools to {path}")


async def cmd_rewrite(config: PipelineConfig, args):
    dataset = load_datasets(config, args.dedup_queries)
    tools = tool_fields(config, dataset)
    description_index = build_sparse_index({t.tool_id: t.description for t in tools}, config.k1, config.b_len)
    provider, cache = chat_provider(config)
    service = RewriterService(provider, cache, config.parallelism, mock=config.mock_llm, K=config.prf_k,
                             exemplars=config.exemplars, max_needs=config.max_needs)
    rewritten = await service.rewrite_all(list(dataset.queries), {t.tool_id: t for t in tools}, description_index)
    path = Path(config.workdir) / REWRITTEN_FILE
    write_rewritten(rewritten, path)
    logger.info(f"Wrote {len(rewritten)} rewritten queries to {path}")


async def cmd_index(config: PipelineConfig, args):
    dataset = load_datasets(config, args.dedup_queries)
    tools = tool_fields(config, dataset)
    corpora = build_corpora(tools, {t.id: raw_doc_text(t.doc) for t in dataset.tools})
    param_docs = build_param_docs(tools)
    root = index_dir(config)

    if config.backend == "sparse":
        backend = SparseBackend(corpora, param_docs, config.k1, config.b_len)
    else:
        clients.initialize_embedding(config.mock_llm)
        store = EmbeddingStore.load(root / EMBEDDINGS_FILE, clients.embedding.tag)
        backend = await DenseBackend.create(corpora, param_docs, clients.embedding, store, config.parallelism)
    save_index(backend, root, "standardized" if config.standardized else "raw")


async def cmd_retrieve(config: PipelineConfig, args):
    dataset = load_datasets(config, args.dedup_queries)
    tools = tool_fields(config, dataset)
    rewritten = rewrites(config, dataset)
    backend = await open_backend(config, dataset, tools, rewritten)
    model = load_model(config, dataset, backend)

    retriever = Retriever.from_config(config, tools, backend, model)
    rankings = retriever.rank_all([rewritten[q] for q in sorted(rewritten)], dataset.queries_by_id)
    path = Path(config.workdir) / RUN_FILE
    write_run(run_from_rankings(rankings, config.top_n), path, config.run_tag)
    logger.info(f"Wrote run for {len(rankings)} queries to {path}")


async def cmd_train(config: PipelineConfig, args):
    if config.mode != "multifield" or config.single_field or config.weighting == "mean":
        raise ConfigurationError("Only the learned multi-field variant has parameters to train")
    dataset = load_datasets(config, args.dedup_queries)
    tools = tool_fields(config, dataset)
    rewritten = rewrites(config, dataset)
    backend = await open_backend(config, dataset, tools, rewritten)

    components = precompute_components(rewritten, tools, backend, config.normalize)
    index = negative_index(tools, config.k1, config.b_len)
    result = fit(config, dataset.name, sorted(rewritten), dataset.queries_by_id, dataset.qrels, components,
                 index, backend)
    workdir = Path(config.workdir)
    result.model.save(workdir / MODEL_FILE)
    write_loss_csv(result.losses, workdir / LOSS_FILE)
    shares = ", ".join(f"{k} {v:.2%}" for k, v in result.model.normalized_weights().items())
    logger.info(f"Saved model to {workdir / MODEL_FILE} (weights: {shares})")


async def cmd_cv(config: PipelineConfig, args):
    dataset = load_datasets(config, args.dedup_queries)
    tools = tool_fields(config, dataset)
    rewritten = rewrites(config, dataset)
    backend = await open_backend(config, dataset, tools, rewritten)

    result = cross_validate(config, dataset.name, dataset.queries_by_id, dataset.qrels, rewritten, tools, backend)
    workdir = Path(config.workdir)
    for fold, (model, losses) in enumerate(zip(result.models, result.losses)):
        if model is not None:
            model.save(workdir / "cv" / f"fold{fold}" / MODEL_FILE)
            write_loss_csv(losses, workdir / "cv" / f"fold{fold}" / LOSS_FILE)

    result.report.extra.update({
        "batch_unit": "triples",
        "fold_sizes": [sum(1 for f in result.folds.values() if f == i) for i in range(config.folds)],
        "fold_weights": [m.normalized_weights() if m else None for m in result.models],
    })
    write_run(run_from_rankings(result.rankings, config.top_n), workdir / RUN_FILE, config.run_tag)
    result.report.save(workdir / REPORT_JSON, workdir / REPORT_TEXT)
    print(format_table([result.report]))


async def cmd_eval(config: PipelineConfig, args):
    dataset = load_datasets(config, args.dedup_queries)
    workdir = Path(config.workdir)
    run = read_run(workdir / RUN_FILE)
    report = evaluate_run(run, dataset.qrels, config.ks, run_tag=config.run_tag, dataset=dataset.name,
                          backend=config.backend, mode=config.variant, config=config.to_dict())
    report.save(workdir / REPORT_JSON, workdir / REPORT_TEXT)
    print(format_table([report]))


def parse_masks(values) -> list[tuple[str, ...]]:
    """`--mask name,description` masks both fields together; no flag means every field on its own."""
    if not values:
        return [(f,) for f in MASKABLE_FIELDS]
    return [tuple(part.strip() for part in value.split(",") if part.strip()) for value in values]


async def cmd_ablate(config: PipelineConfig, args):
    dataset = load_datasets(config, args.dedup_queries)
    tools = tool_fields(config, dataset)
    names = {t.id: tool_name(t) for t in dataset.tools}
    masks = parse_masks(args.mask)

    if config.backend == "sparse":
        def make_backend(docs):
            return SparseBackend({FULL_DOC: FieldCorpus(FULL_DOC, docs)}, {}, config.k1, config.b_len)
    else:
        clients.initialize_embedding(config.mock_llm)
        store_path = Path(config.workdir) / "ablation-embeddings.jsonl"
        store = EmbeddingStore.load(store_path, clients.embedding.tag)
        texts = [q.text for q in dataset.queries]
        for mask in [()] + masks:
            texts.extend(masked_documents(tools, names, mask).values())
        await embed(clients.embedding, texts, store, parallelism=config.parallelism)
        store.save(store_path)

        def make_backend(docs):
            return DenseBackend({FULL_DOC: FieldCorpus(FULL_DOC, docs)}, {}, store)

    report = field_mask_ablation(tools, names, list(dataset.queries), dataset.qrels, make_backend, masks, config.ks)
    report.dataset = dataset.name
    report.backend = config.backend
    report.config = config.to_dict()
    workdir = Path(config.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    with open(workdir / "ablation.json", "w", encoding="utf-8") as f:
        f.write(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(workdir / "ablation.txt", "w", encoding="utf-8") as f:
        f.write(report.to_text() + "\n")
    print(report.to_text())


async def cmd_mix(config: PipelineConfig, args):
    if len(config.dataset_paths) < 2:
        raise ConfigurationError("`mix` needs at least two --dataset directories")
    datasets = [load_dataset(path, config.dataset_format) for path in config.dataset_paths]
    mixed = build_mixed(datasets, name=args.name)
    if args.dedup_queries:
        mixed, _ = dedup_queries(mixed)
    save_dataset(mixed, args.out)
    for d in datasets + [mixed]:
        stats = dataset_stats(d)
        print(f"{stats['name']:<16}{stats['queries']:>8}{stats['tools']:>8}{stats['tools_per_query']:>8.2f}")


async def cmd_synth(config: PipelineConfig, args):
    spec = PlantSpec(
        corpus_size=args.tools,
        queries=args.queries,
        signal_field=args.signal,
        noise_vocab=args.noise_vocab,
        decoy_fraction=args.decoys,
        seed=config.seed,
        confusers_per_query=args.confusers,
        query_noise_words=args.query_noise,
        name=args.name,
    )
    write_synthetic(generate(spec), args.out, config.workdir)
    logger.info(f"Wrote planted dataset to {args.out} and its stage artifacts to {config.workdir}")


COMMANDS = {
    "standardize": cmd_standardize,
    "rewrite": cmd_rewrite,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "train": cmd_train,
    "cv": cmd_cv,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "mix": cmd_mix,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    defaults = PipelineConfig()

    common = ArgumentParser(add_help=False)
    common.add_argument("--dataset", action="append", default=[], dest="datasets", help="dataset directory (repeatable)")
    common.add_argument("--format", default=defaults.dataset_format, help="dataset format")
    common.add_argument("--workdir", default=defaults.workdir, help="directory holding stage artifacts")
    common.add_argument("--mock-llm", action="store_true", help="deterministic offline providers")
    common.add_argument("--backend", choices=("sparse", "dense"), default=defaults.backend)
    common.add_argument("--parallelism", type=int, default=Config.PROVIDER_PARALLELISM)
    common.add_argument("--cache-dir", default=Config.CACHE_DIR)
    common.add_argument("--seed", type=int, default=defaults.seed)
    common.add_argument("--run-tag", default=defaults.run_tag)
    common.add_argument("--dedup-queries", action="store_true", help="drop queries whose text repeats exactly")
    common.add_argument("--log-level", default=Config.LOG_LEVEL)
    common.add_argument("--k1", type=float, default=defaults.k1)
    common.add_argument("--b", type=float, default=defaults.b_len, dest="b_len")

    variant = ArgumentParser(add_help=False)
    variant.add_argument("--mode", choices=("multifield", "full_doc"), default=defaults.mode)
    variant.add_argument("--raw-docs", action="store_true", help="fields from raw docs, no standardization")
    variant.add_argument("--original-query", action="store_true", help="no rewriting")
    variant.add_argument("--weighting", choices=("learned", "mean"), default=defaults.weighting)
    variant.add_argument("--no-penalty", action="store_true", help="freeze penalty weights at 0")
    variant.add_argument("--single-field", default="", help="rank by one field's score alone")
    variant.add_argument("--standardized-doc", action="store_true", help="full-doc: concatenated standardized text")
    variant.add_argument("--rewritten-query", action="store_true", help="full-doc: rewritten need text as query")
    variant.add_argument("--normalize", action="store_true", help="min-max field scores per query")
    variant.add_argument("--prune", action="store_true", help="score only the union of per-field top-M")
    variant.add_argument("--prune-m", type=int, default=defaults.prune_m)
    variant.add_argument("--top-n", type=int, default=defaults.top_n)
    variant.add_argument("--ks", type=int, nargs="+", default=list(defaults.ks))

    training = ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int, default=defaults.epochs)
    training.add_argument("--batch-size", type=int, default=defaults.batch_size)
    training.add_argument("--lr", type=float, default=defaults.lr)
    training.add_argument("--alpha", type=float, default=defaults.alpha)
    training.add_argument("--negatives", type=int, default=defaults.n_negatives)
    training.add_argument("--folds", type=int, default=defaults.folds)

    rewriting = ArgumentParser(add_help=False)
    rewriting.add_argument("--prf-k", type=int, default=defaults.prf_k)
    rewriting.add_argument("--exemplars", type=int, default=defaults.exemplars)
    rewriting.add_argument("--max-needs", type=int, default=defaults.max_needs)

    parser = ArgumentParser(prog="toolsift", description="Multi-field tool retrieval")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
    sub.add_parser("standardize", parents=[common], help="map raw docs to the four-field schema")
    sub.add_parser("rewrite", parents=[common, variant, rewriting], help="rewrite queries into tool needs")
    sub.add_parser("index", parents=[common, variant], help="build per-field indexes")
    sub.add_parser("retrieve", parents=[common, variant, training], help="rank tools, write run.trec")
    sub.add_parser("train", parents=[common, variant, training], help="learn the aggregation on all queries")
    sub.add_parser("cv", parents=[common, variant, training], help="k-fold train and evaluate")
    sub.add_parser("eval", parents=[common, variant], help="score run.trec against qrels")

    ablate = sub.add_parser("ablate", parents=[common, variant], help="field-masking ablation")
    ablate.add_argument("--mask", action="append", default=[], help="comma-separated fields masked together")

    mix = sub.add_parser("mix", parents=[common], help="merge datasets into one benchmark")
    mix.add_argument("--out", required=True)
    mix.add_argument("--name", default="mixed")

    synth = sub.add_parser("synth", parents=[common], help="write a planted synthetic dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--name", default="synthetic")
    synth.add_argument("--tools", type=int, default=200)
    synth.add_argument("--queries", type=int, default=100)
    synth.add_argument("--signal", default="description")
    synth.add_argument("--noise-vocab", type=int, default=500)
    synth.add_argument("--decoys", type=float, default=0.0, help="fraction of the corpus that are decoys")
    synth.add_argument("--confusers", type=int, default=2)
    synth.add_argument("--query-noise", type=int, default=3)
    return parser


def config_from_args(args) -> PipelineConfig:
    options = vars(args)
    values = dict(
        dataset_paths=list(args.datasets),
        dataset_format=args.format,
        workdir=args.workdir,
        mock_llm=args.mock_llm,
        parallelism=args.parallelism,
        cache_dir=args.cache_dir,
        backend=args.backend,
        k1=args.k1,
        b_len=args.b_len,
        seed=args.seed,
        run_tag=args.run_tag,
    )
    if "mode" in options:
        values.update(
            mode=args.mode,
            standardized=not args.raw_docs,
            rewritten=not args.original_query,
            weighting=args.weighting,
            penalty=not args.no_penalty,
            single_field=args.single_field,
            doc_text="standardized" if args.standardized_doc else "raw",
            query_text="rewritten" if args.rewritten_query else "original",
            normalize=args.normalize,
            prune=args.prune,
            prune_m=args.prune_m,
            top_n=args.top_n,
            ks=tuple(args.ks),
        )
    for name, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"), ("alpha", "alpha"),
                      ("negatives", "n_negatives"), ("folds", "folds"), ("prf_k", "prf_k"),
                      ("exemplars", "exemplars"), ("max_needs", "max_needs")):
        if name in options:
            values[key] = options[name]
    return PipelineConfig(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        config = config_from_args(args)
        asyncio.run(COMMANDS[args.command](config, args))
    except ToolsiftError as e:
        logger.error(str(e))
        return 1
    except Exception:
        logger.exception(f"Internal error in `{args.command}`")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
