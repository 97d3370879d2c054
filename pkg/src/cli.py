"""
Command-line entry point

Commands: gen-corpus, build-index, search, filter, answer, eval, bench.
Config precedence: command-line flags > --config file > built-in defaults.
Exit status: 0 ok, 1 pipeline error, 2 configuration error.
"""

import argparse
import asyncio
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from .coarse_index import build_centroid_index, stage1_search
from .core_types import PageRecord, Question
from .corpus_ingest import SyntheticCorpusSpec, dedup_pages, generate_synthetic_corpus, save_synthetic
from .errors import ConfigValidationError, IndexFormatError, PipelineError
from .harness import (
    format_bench_table,
    format_eval_report,
    oracle_ranker,
    oracle_reasoner,
    plot_bench,
    plot_round_distribution,
    run_bench,
    run_eval,
    write_timings,
    write_traces,
)
from .index_store import (
    RawCorpus,
    load_corpus,
    load_ground_truth,
    load_index,
    load_queries,
    load_questions,
    save_index,
    write_json,
)
from .llm_filter import FILTER_PROMPT_TEMPLATE, stage2_filter
from .model_gateway import (
    RecordingBackend,
    backend_from_settings,
    load_transcript,
    replay_backend,
    save_transcript,
)
from .pipeline_config import GatewaySettings, PipelineConfig, load_config, validate_config
from .projection import apply_projection, fit_projection
from .reasoner import (
    ChainedQueryEncoder,
    HashQueryEncoder,
    LookupQueryEncoder,
    RetrievalPipeline,
    answer_loop,
    project_query,
)
from .scoring import exact_top_k

logger = logging.getLogger("cli")

BACKENDS = ("oracle", "http", "anthropic", "replay")


# ==============================================================================
# SHARED HELPERS
# ==============================================================================

def _config(args: argparse.Namespace, **overrides: Any) -> PipelineConfig:
    base = load_config(args.config, {"seed": args.seed, "exact_flat": True if args.exact_flat else None})
    update = {k: v for k, v in overrides.items() if v is not None}
    # A smaller N1 from the command line pulls N2 down with it
    if "stage1_cutoff" in update and "stage2_cutoff" not in update:
        update["stage2_cutoff"] = min(base.stage2_cutoff, update["stage1_cutoff"])
    if "stage1_cutoff" in update and "shortlist_r" not in update:
        update["shortlist_r"] = max(base.shortlist_r, update["stage1_cutoff"])
    return validate_config({**base.model_dump(), **update}) if update else base


def _project_corpus(raw: RawCorpus, cfg: PipelineConfig) -> Tuple[List[PageRecord], Optional[Any]]:
    """Fit + apply PCA when the corpus is wider than d; degenerate rows are dropped"""
    if raw.dim == cfg.embed_dim:
        return raw.to_records(), None
    if raw.dim < cfg.embed_dim:
        raise IndexFormatError(f"corpus width {raw.dim} is smaller than embed_dim {cfg.embed_dim}")
    if raw.dim != cfg.source_dim:
        logger.warning(f"Corpus width {raw.dim} differs from configured source_dim {cfg.source_dim}")

    model = fit_projection(raw.vectors, cfg.embed_dim, seed=cfg.seed, max_samples=cfg.pca_fit_samples)
    projected, degenerate = apply_projection(model, raw.vectors)
    records = []
    for i, meta in enumerate(raw.metas):
        rows = slice(raw.row_offsets[i], raw.row_offsets[i + 1])
        keep = ~degenerate[rows]
        if not keep.any():
            logger.warning(f"Page {meta.page_id} has no usable patches after projection; skipped")
            continue
        records.append(PageRecord(
            page_id=meta.page_id,
            article_id=meta.article_id,
            patches=projected[rows][keep],
            summary=meta.summary,
            image_ref=meta.image_ref,
        ))
    return records, model


def _load_records(corpus_dir: Path) -> RawCorpus:
    raw = load_corpus(corpus_dir)
    logger.info(f"Loaded corpus {corpus_dir}: {raw.num_pages} pages, width {raw.dim}")
    return raw


def _select_questions(questions: Sequence[Question], question_id: Optional[str]) -> List[Question]:
    if question_id is None:
        return list(questions)
    chosen = [q for q in questions if q.question_id == question_id]
    if not chosen:
        raise PipelineError(f"question {question_id} not found")
    return chosen


def _backends(args: argparse.Namespace, cfg: PipelineConfig) -> Tuple[Any, Any]:
    """(ranker, reasoner) for the chosen --backend"""
    if args.backend == "oracle":
        return oracle_ranker(), oracle_reasoner()
    if args.backend == "replay":
        if not args.ranker_transcript or not args.reasoner_transcript:
            raise ConfigValidationError("--backend replay needs --ranker-transcript and --reasoner-transcript")
        return (
            replay_backend(load_transcript(args.ranker_transcript), accepts_images=False),
            replay_backend(load_transcript(args.reasoner_transcript)),
        )
    settings = GatewaySettings.from_env()
    image_dir = Path(args.corpus) if getattr(args, "corpus", None) else None
    ranker = backend_from_settings(
        settings, "filter", args.backend, image_base_dir=image_dir, backoff_s=cfg.retry_backoff_s
    )
    reasoner = backend_from_settings(
        settings, "reasoner", args.backend, image_base_dir=image_dir, backoff_s=cfg.retry_backoff_s
    )
    return RecordingBackend(ranker), RecordingBackend(reasoner)


async def _close(*backends: Any) -> None:
    for backend in backends:
        close = getattr(backend, "close", None)
        if close is not None:
            await close()


def _retrieval(args: argparse.Namespace, cfg: PipelineConfig, ranker: Any) -> RetrievalPipeline:
    index = load_index(args.index, cfg)
    queries = load_queries(args.corpus) if (Path(args.corpus) / "queries.jsonl").exists() else []
    width = queries[0].dim if queries else index.dim
    tokens = queries[0].m if queries else 16
    encoder = ChainedQueryEncoder(LookupQueryEncoder(queries), HashQueryEncoder(width, tokens))
    template = Path(args.filter_template).read_text() if args.filter_template else FILTER_PROMPT_TEMPLATE
    return RetrievalPipeline(index, ranker, cfg, encoder, filter_template=template)


def _dump_json(obj: Any, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ==============================================================================
# COMMANDS
# ==============================================================================

def cmd_gen_corpus(args: argparse.Namespace) -> int:
    fields: Dict[str, Any] = json.loads(Path(args.spec).read_text()) if args.spec else {}
    flags = {
        "num_pages": args.pages,
        "mean_patches": args.patches,
        "dim": args.dim,
        "source_dim": args.source_dim,
        "num_queries": args.queries,
        "planted_per_query": args.planted,
        "noise": args.noise,
        "num_topics": args.topics,
        "pages_per_article": args.pages_per_article,
        "datasets": args.datasets.split(",") if args.datasets else None,
    }
    fields.update({k: v for k, v in flags.items() if v is not None})
    spec = SyntheticCorpusSpec(**fields)
    synthetic = generate_synthetic_corpus(spec, seed=_config(args).seed)
    save_synthetic(args.out, synthetic)
    print(f"Wrote {spec.num_pages} pages ({synthetic.corpus.vectors.shape[0]} patches) to {args.out}")
    return 0


def cmd_build_index(args: argparse.Namespace) -> int:
    cfg = _config(args)
    raw = _load_records(Path(args.corpus))
    records, projection = _project_corpus(raw, cfg)

    report = None
    if args.dedup:
        records, drops = dedup_pages(records, cfg.dedup_threshold, mode=args.dedup_mode)
        report = [d.to_dict() for d in drops]

    index = build_centroid_index(records, cfg, seed=cfg.seed, projection=projection)
    save_index(args.out, index, dedup_report=report, seed=cfg.seed)
    print(
        f"Index {args.out}: {index.num_pages} pages, {index.ann.num_entries} centroids"
        + (f", {len(report)} near-duplicates dropped" if report is not None else "")
    )
    return 0


def _timing_lines(timings: Dict[str, float]) -> List[str]:
    labels = {
        "ann_search_ms": "ANN search",
        "coarse_ranking_ms": "Coarse ranking",
        "fine_scoring_ms": "Fine scoring",
        "exact_scoring_ms": "Exact scoring",
        "total_ms": "Total",
    }
    return [f"  {labels[k]:<16}{v:>10.3f} ms" for k, v in timings.items()]


def cmd_search(args: argparse.Namespace) -> int:
    cfg = _config(args, stage1_cutoff=args.n1, shortlist_r=args.r, probe_k=args.probe_k)
    index = load_index(args.index, cfg)
    queries = load_queries(args.queries)
    if args.query_id:
        queries = [q for q in queries if q.query_id == args.query_id]
        if not queries:
            raise PipelineError(f"query {args.query_id} not found in {args.queries}")

    rows = []
    for query in queries:
        query = project_query(index, query)
        if args.exact:
            t0 = time.perf_counter()
            results = exact_top_k(query, index.pages, cfg.stage1_cutoff, workers=cfg.workers)
            elapsed = (time.perf_counter() - t0) * 1000
            timings = {"exact_scoring_ms": round(elapsed, 3), "total_ms": round(elapsed, 3)}
            dot_products = query.m * index.num_patches
        else:
            result = stage1_search(query, index, cfg)
            results, timings, dot_products = result.results, result.timings.to_dict(), result.fine_dot_products
        rows.append({
            "query_id": query.query_id,
            "mode": "exact" if args.exact else "coarse-to-fine",
            "results": [r.to_dict() for r in results],
            "timings": timings,
            "fine_dot_products": dot_products,
        })
        if not args.json:
            print(f"{query.query_id}: top {min(args.show, len(results))} of {len(results)}")
            for r in results[: args.show]:
                print(f"  {r.rank:>5}  {r.page_id:<12} {r.score:.6f}")
            print("\n".join(_timing_lines(timings)))
            print(f"  fine dot products: {dot_products}")

    if args.json or args.out:
        _dump_json(rows, args.out)
    return 0


async def cmd_filter(args: argparse.Namespace) -> int:
    cfg = _config(args)
    ranker, _ = _backends(args, cfg)
    try:
        pipeline = _retrieval(args, cfg, ranker)
        questions = _select_questions(load_questions(Path(args.corpus) / "questions.jsonl"), args.question_id)
        rows = []
        for question in questions:
            query = pipeline.encode(question.stem)
            stage1 = stage1_search(query, pipeline.index, cfg)
            filtered = await stage2_filter(
                question, stage1.results, ranker, cfg, pipeline.summaries, template=pipeline.filter_template
            )
            rows.append({"question_id": question.question_id, **filtered.to_dict()})
        _dump_json(rows, args.out)
        if args.transcript and hasattr(ranker, "transcript"):
            save_transcript(args.transcript, ranker.transcript)
    finally:
        await _close(ranker)
    return 0


async def cmd_answer(args: argparse.Namespace) -> int:
    cfg = _config(args, max_iterations=args.max_iterations, use_memory_bank=False if args.no_memory else None)
    ranker, reasoner = _backends(args, cfg)
    try:
        pipeline = _retrieval(args, cfg, ranker)
        questions = _select_questions(load_questions(Path(args.corpus) / "questions.jsonl"), args.question_id)
        traces = [await answer_loop(q, pipeline, reasoner, cfg) for q in questions]
        _dump_json([t.to_dict() for t in traces], args.out)
    finally:
        await _close(ranker, reasoner)
    return 0


async def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args, max_iterations=args.max_iterations, use_memory_bank=False if args.no_memory else None)
    ranker, reasoner = _backends(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        pipeline = _retrieval(args, cfg, ranker)
        questions = load_questions(args.questions or Path(args.corpus) / "questions.jsonl")
        truth_path = Path(args.ground_truth) if args.ground_truth else Path(args.corpus) / "ground_truth.jsonl"
        relevance = load_ground_truth(truth_path) if truth_path.exists() else None
        report = await run_eval(questions, pipeline, reasoner, cfg, relevance)
    finally:
        await _close(ranker, reasoner)

    write_traces(out / "traces.jsonl", report.traces)
    write_timings(out / "timings.jsonl", report.traces)
    write_json(out / "report.json", report.to_dict(include_latency=False))
    write_json(out / "latency.json", report.latency())
    for name, backend in (("ranker", ranker), ("reasoner", reasoner)):
        if hasattr(backend, "transcript"):
            save_transcript(out / f"transcript_{name}.jsonl", backend.transcript)
    if args.plot:
        plot_round_distribution(report, out / "rounds.png")
    print(format_eval_report(report))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _config(args, shortlist_r=args.r)
    sizes = [int(s) for s in args.sizes.split(",")]
    corpus_spec = {"mean_patches": args.patches, "num_topics": args.topics}
    rows = run_bench(
        sizes,
        cfg,
        seed=cfg.seed,
        num_queries=args.queries,
        corpus_spec={k: v for k, v in corpus_spec.items() if v is not None},
        run_exact=not args.no_exact,
    )
    print(format_bench_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "bench.json", [r.to_dict() for r in rows])
        if args.plot:
            plot_bench(rows, out / "bench.png")
    return 0


# ==============================================================================
# PARSER
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pagerag", description="Page-level multimodal retrieval pipeline")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (default: config, 42)")
    parser.add_argument("--config", default=None, help="JSON config file (default: shipped config.json)")
    parser.add_argument("--log-level", default=os.getenv("LOG_LEVEL", "INFO"))
    parser.add_argument("--exact-flat", action="store_true", help="Exhaustive centroid search")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="Write a seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default=None, help="JSON file with SyntheticCorpusSpec fields")
    p.add_argument("--pages", type=int)
    p.add_argument("--patches", type=float, help="Mean patches per page")
    p.add_argument("--dim", type=int)
    p.add_argument("--source-dim", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--planted", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--topics", type=int)
    p.add_argument("--pages-per-article", type=int)
    p.add_argument("--datasets", default=None, help="Comma-separated dataset tags")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-index", help="Project, cluster and index a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dedup", action="store_true", help="Drop near-duplicate pages first")
    p.add_argument("--dedup-mode", choices=("auto", "exact", "blocked"), default="auto")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("search", help="Stage-1 retrieval for stored queries")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="Directory holding queries.jsonl + queries.bin")
    p.add_argument("--query-id", default=None)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="Exhaustive two-way scoring")
    mode.add_argument("--coarse-to-fine", action="store_true", help="Centroid shortlist + exact rescoring (default)")
    p.add_argument("--n1", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--probe-k", type=int, default=None)
    p.add_argument("--show", type=int, default=10)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_search)

    for name, handler, help_text in (
        ("filter", cmd_filter, "Stage 1 + stage-2 filter for questions"),
        ("answer", cmd_answer, "Full answer loop for questions"),
        ("eval", cmd_eval, "Evaluate a question set"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--index", required=True)
        p.add_argument("--corpus", required=True, help="Directory with queries and questions")
        p.add_argument("--backend", choices=BACKENDS, default="oracle")
        p.add_argument("--ranker-transcript", default=None)
        p.add_argument("--reasoner-transcript", default=None)
        p.add_argument("--filter-template", default=None, help="File overriding the selection prompt")
        if name == "eval":
            p.add_argument("--out", required=True)
            p.add_argument("--questions", default=None)
            p.add_argument("--ground-truth", default=None)
            p.add_argument("--plot", action="store_true")
        else:
            p.add_argument("--question-id", default=None)
            p.add_argument("--out", default=None)
        if name == "filter":
            p.add_argument("--transcript", default=None)
        else:
            p.add_argument("--max-iterations", type=int, default=None)
            p.add_argument("--no-memory", action="store_true", help="Hide the memory bank from the reasoner")
        p.set_defaults(func=lambda a, h=handler: asyncio.run(h(a)))

    p = sub.add_parser("bench", help="Stage-1 latency scaling")
    p.add_argument("--sizes", default="1000,10000")
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--patches", type=float, default=None)
    p.add_argument("--topics", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--no-exact", action="store_true")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigValidationError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except PipelineError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
