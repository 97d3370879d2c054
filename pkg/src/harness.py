"""
Harness - evaluation and benchmarking

Eval: run the answer loop over a question set and report accuracy, the share of
questions answered in each round, per-round accuracy, evidence recall and a
per-stage latency table.
Bench: stage-1 latency of coarse-to-fine vs exhaustive scoring across corpus sizes.

Oracle mock backends keyed to synthetic ground truth live here too, so every
command can run end to end without a model endpoint.
"""

import asyncio
import json
import logging
import re
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")  # Non-interactive backend
import matplotlib.pyplot as plt

from .coarse_index import build_centroid_index, stage1_search
from .core_types import Question
from .corpus_ingest import SyntheticCorpusSpec, generate_synthetic_corpus
from .errors import ReasonerError
from .model_gateway import MockBackend, ModelBackend, PromptRequest
from .pipeline_config import PipelineConfig, validate_config
from .reasoner import AnswerTrace, RetrievalPipeline, answer_loop
from .scoring import exact_top_k

logger = logging.getLogger("harness")

SUMMARY_LINE = re.compile(r"^\[(\d+)\] (.*)$", re.MULTILINE)
TARGET_K = re.compile(r"select the (\d+) most relevant pages")
QUESTION_FIELD = re.compile(r"Question: (.*?)\. (?:Options|Candidate page summaries): ", re.DOTALL)
ITERATION = re.compile(r"This is iteration (\d+)/(\d+)")
HIDDEN_KEY = re.compile(r"\[relevance-key=([0-9.]+)\]")
EVIDENCE_TAG = re.compile(r"\[evidence: (\S+) -> (\S+)\]")

LATENCY_ROWS = (
    ("ann_search_ms", "ANN search"),
    ("coarse_ranking_ms", "Coarse ranking"),
    ("fine_scoring_ms", "Fine scoring"),
    ("filter_ms", "LLM filter (stage 2)"),
    ("reasoner_ms", "Reasoning (per iteration)"),
)


# ==============================================================================
# ORACLE MOCKS
# ==============================================================================

def _question_line(prompt: str) -> str:
    match = QUESTION_FIELD.search(prompt)
    return match.group(1) if match else ""


def _evidence_for(prompt: str) -> Optional[str]:
    """Gold label from an evidence tag whose query id appears in the question line"""
    question = _question_line(prompt)
    for qid, label in EVIDENCE_TAG.findall(prompt):
        if qid in question:
            return label.rstrip("].,")
    return None


def oracle_ranker(boost_evidence: bool = True, **kwargs) -> MockBackend:
    """
    Ranker that orders summaries by their hidden relevance key.

    With boost_evidence, summaries tagged as evidence for the question in the
    prompt rank above everything else.
    """

    def _rank(request: PromptRequest) -> str:
        prompt = request.prompt_text
        target = TARGET_K.search(prompt)
        k = int(target.group(1)) if target else 1
        question = _question_line(prompt)
        scored: List[Tuple[float, int]] = []
        for number, text in SUMMARY_LINE.findall(prompt):
            key = HIDDEN_KEY.search(text)
            score = float(key.group(1)) if key else 0.0
            if boost_evidence and any(qid in question for qid, _ in EVIDENCE_TAG.findall(text)):
                score += 1.0
            scored.append((-score, int(number)))
        picked = [str(number) for _, number in sorted(scored)[:k]]
        return f"<selected_pages>{', '.join(picked)}</selected_pages>"

    return MockBackend([(lambda request: True, _rank)], accepts_images=False, **kwargs)


def oracle_reasoner(refine_rounds: Optional[Mapping[str, int]] = None, **kwargs) -> MockBackend:
    """
    Reasoner that answers from planted evidence tags in the shown summaries.

    refine_rounds maps a question id to the number of rounds in which it must
    refine before answering; without visible evidence it refines as well.
    """
    refine_rounds = dict(refine_rounds or {})

    def _reason(request: PromptRequest) -> str:
        prompt = request.prompt_text
        iteration = ITERATION.search(prompt)
        k = int(iteration.group(1)) if iteration else 1
        question = _question_line(prompt)
        forced = next((n for qid, n in refine_rounds.items() if qid in question), 0)
        label = _evidence_for(prompt)
        if k > forced and label is not None:
            return f"<answer>{label}</answer> supported by the planted evidence page"
        return (
            f"<query_update>{question} (round {k + 1} search)</query_update>"
            f"<notes>Round {k}: no conclusive evidence yet</notes>"
        )

    return MockBackend([(lambda request: True, _reason)], **kwargs)


# ==============================================================================
# EVAL
# ==============================================================================

class EvalReport:
    """Aggregated metrics; to_dict() is the machine-readable report"""

    def __init__(self, traces: Sequence[AnswerTrace], max_iterations: int, relevance: Optional[Mapping[str, Sequence[str]]] = None):
        self.traces = sorted(traces, key=lambda t: t.question_id)
        self.max_iterations = max_iterations
        self.relevance = relevance or {}

    @property
    def total(self) -> int:
        return len(self.traces)

    @property
    def correct(self) -> int:
        return sum(1 for t in self.traces if t.correct)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def backend_failures(self) -> int:
        return sum(1 for t in self.traces if t.error is not None)

    @property
    def unanswered(self) -> int:
        return sum(1 for t in self.traces if t.final_label is None and t.error is None)

    @staticmethod
    def _round_of(trace: AnswerTrace) -> int:
        return max(trace.rounds_used, 1)

    def round_stats(self, traces: Optional[Sequence[AnswerTrace]] = None) -> Dict[str, Any]:
        traces = self.traces if traces is None else traces
        counts = {r: 0 for r in range(1, self.max_iterations + 1)}
        correct = {r: 0 for r in counts}
        for t in traces:
            r = self._round_of(t)
            counts[r] = counts.get(r, 0) + 1
            correct[r] = correct.get(r, 0) + int(t.correct)
        n = len(traces)
        return {
            "questions": n,
            "accuracy": sum(correct.values()) / n if n else 0.0,
            "round_counts": {f"R{r}": c for r, c in counts.items()},
            "round_share": {f"R{r}": (c / n if n else 0.0) for r, c in counts.items()},
            "round_accuracy": {f"R{r}": (correct[r] / c if c else None) for r, c in counts.items()},
            "capped_refines": sum(1 for t in traces if t.capped_refine),
        }

    def per_dataset(self) -> Dict[str, Dict[str, Any]]:
        groups: Dict[str, List[AnswerTrace]] = {}
        for t in self.traces:
            groups.setdefault(t.dataset or "default", []).append(t)
        return {name: self.round_stats(group) for name, group in sorted(groups.items())}

    def evidence(self) -> Dict[str, Any]:
        """Recall@N1, Recall@N2 over the union of all rounds, plus miss attribution"""
        n1_recalls: List[float] = []
        n2_recalls: List[float] = []
        misses = {"retrieval_miss": 0, "filter_miss": 0, "reasoning_miss": 0}
        for t in self.traces:
            relevant = set(self.relevance.get(t.question_id, ()))
            if not relevant:
                continue
            stage1 = {p for r in t.rounds for p in r.stage1_page_ids}
            stage2 = {p for r in t.rounds for p in r.filtered.get("pages", [])}
            n1_recalls.append(len(relevant & stage1) / len(relevant))
            n2_recalls.append(len(relevant & stage2) / len(relevant))
            if t.correct:
                continue
            if not relevant & stage1:
                misses["retrieval_miss"] += 1
            elif not relevant & stage2:
                misses["filter_miss"] += 1
            else:
                misses["reasoning_miss"] += 1
        return {
            "questions_with_ground_truth": len(n1_recalls),
            "recall_at_n1": statistics.fmean(n1_recalls) if n1_recalls else None,
            "recall_at_n2": statistics.fmean(n2_recalls) if n2_recalls else None,
            "misses": misses,
        }

    def latency(self) -> Dict[str, Optional[float]]:
        """Mean ms per stage, per single iteration and per full run"""
        samples: Dict[str, List[float]] = {key: [] for key, _ in LATENCY_ROWS}
        per_run: List[float] = []
        for t in self.traces:
            run_total = 0.0
            for r in t.rounds:
                for key, _ in LATENCY_ROWS:
                    if key in r.timings:
                        samples[key].append(r.timings[key])
                        run_total += r.timings[key]
            if t.rounds:
                per_run.append(run_total)
        table: Dict[str, Optional[float]] = {
            key: (statistics.fmean(values) if values else None) for key, values in samples.items()
        }
        table["single_iteration_ms"] = sum(v for v in table.values() if v is not None)
        table["full_run_ms"] = statistics.fmean(per_run) if per_run else None
        return table

    def to_dict(self, include_latency: bool = True) -> Dict[str, Any]:
        report = {
            "total": self.total,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "unanswered": self.unanswered,
            "backend_failures": self.backend_failures,
            **{k: v for k, v in self.round_stats().items() if k not in ("questions", "accuracy")},
            "per_dataset": self.per_dataset(),
            "evidence": self.evidence(),
        }
        if include_latency:
            report["latency_ms"] = self.latency()
        return report


def format_eval_report(report: EvalReport) -> str:
    lines = [
        f"Accuracy: {report.correct}/{report.total} = {report.accuracy * 100:.1f}%"
        f" (unanswered {report.unanswered}, backend failures {report.backend_failures})",
        "",
        "Per-dataset iteration distribution:",
    ]
    for name, stats in report.per_dataset().items():
        shares = ", ".join(f"{r} {share * 100:.1f}%" for r, share in stats["round_share"].items())
        accs = ", ".join(
            f"{r} {'-' if acc is None else f'{acc * 100:.1f}%'}" for r, acc in stats["round_accuracy"].items()
        )
        lines.append(f"  {name} (n={stats['questions']}): {shares}; accuracy by round: {accs}")

    evidence = report.evidence()
    if evidence["questions_with_ground_truth"]:
        lines += [
            "",
            f"Evidence recall: @N1 {evidence['recall_at_n1']:.3f}, @N2 {evidence['recall_at_n2']:.3f}",
            "Misses: " + ", ".join(f"{k} {v}" for k, v in evidence["misses"].items()),
        ]

    lines += ["", f"{'Stage':<28}{'mean ms':>12}"]
    latency = report.latency()
    for key, label in LATENCY_ROWS:
        value = latency[key]
        lines.append(f"{label:<28}{'-' if value is None else f'{value:.2f}':>12}")
    lines.append(f"{'Total (single iteration)':<28}{latency['single_iteration_ms']:>12.2f}")
    full = latency["full_run_ms"]
    lines.append(f"{'Total (full run)':<28}{'-' if full is None else f'{full:.2f}':>12}")
    return "\n".join(lines)


async def run_eval(
    questions: Sequence[Question],
    retrieval: RetrievalPipeline,
    reasoner: ModelBackend,
    cfg: PipelineConfig,
    relevance: Optional[Mapping[str, Sequence[str]]] = None,
    model_tag: str = "",
) -> EvalReport:
    """
    Answer every question with at most cfg.workers loops in flight.

    Backend or retrieval failures keep their partial trace and are counted as
    failures rather than aborting the run.
    """
    semaphore = asyncio.Semaphore(cfg.workers)

    async def _one(question: Question) -> AnswerTrace:
        async with semaphore:
            try:
                return await answer_loop(question, retrieval, reasoner, cfg, model_tag=model_tag)
            except ReasonerError as e:
                logger.error(f"{question.question_id}: {e}")
                return e.partial

    traces = await asyncio.gather(*(_one(q) for q in questions))
    report = EvalReport(traces, cfg.max_iterations, relevance)
    logger.info(f"Eval: accuracy {report.accuracy * 100:.1f}% over {report.total} questions")
    return report


def write_traces(path: Union[str, Path], traces: Sequence[AnswerTrace]) -> None:
    with open(path, "w") as f:
        for trace in sorted(traces, key=lambda t: t.question_id):
            f.write(json.dumps(trace.to_dict(), sort_keys=True) + "\n")


def write_timings(path: Union[str, Path], traces: Sequence[AnswerTrace]) -> None:
    with open(path, "w") as f:
        for trace in sorted(traces, key=lambda t: t.question_id):
            f.write(json.dumps(trace.timings_dict(), sort_keys=True) + "\n")


def load_traces(path: Union[str, Path]) -> List[AnswerTrace]:
    with open(path) as f:
        return [AnswerTrace.from_dict(json.loads(line)) for line in f if line.strip()]


def plot_round_distribution(report: EvalReport, path: Union[str, Path]) -> Path:
    """Bar chart of round share with per-round accuracy on a second axis"""
    stats = report.round_stats()
    rounds = list(stats["round_share"])
    shares = [stats["round_share"][r] * 100 for r in rounds]
    accs = [(stats["round_accuracy"][r] or 0.0) * 100 for r in rounds]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(rounds, shares, color="steelblue", label="answered in round")
    ax.set_ylabel("share of questions (%)")
    ax.set_ylim(0, 100)
    ax2 = ax.twinx()
    ax2.plot(rounds, accs, color="darkorange", marker="o", label="accuracy")
    ax2.set_ylabel("accuracy (%)")
    ax2.set_ylim(0, 100)
    ax.set_title(f"Rounds used (n={report.total})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# ==============================================================================
# BENCH
# ==============================================================================

@dataclass
class BenchRow:
    num_pages: int
    num_patches: int
    queries: int
    ann_ms: float
    coarse_ms: float
    fine_ms: float
    coarse_to_fine_ms: float
    exact_ms: float
    overlap: float
    fine_dot_products: float
    build_s: float = 0.0

    @property
    def speedup(self) -> float:
        return self.exact_ms / self.coarse_to_fine_ms if self.coarse_to_fine_ms > 0 else float("inf")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_pages": self.num_pages,
            "num_patches": self.num_patches,
            "queries": self.queries,
            "ann_ms": self.ann_ms,
            "coarse_ms": self.coarse_ms,
            "fine_ms": self.fine_ms,
            "coarse_to_fine_ms": self.coarse_to_fine_ms,
            "exact_ms": self.exact_ms,
            "speedup": self.speedup,
            "overlap": self.overlap,
            "fine_dot_products": self.fine_dot_products,
            "build_s": self.build_s,
        }


def scaled_config(cfg: PipelineConfig, num_pages: int) -> PipelineConfig:
    """Clamp N1 and N2 to the corpus size; R stays as configured"""
    n1 = min(cfg.stage1_cutoff, num_pages)
    update = {
        "stage1_cutoff": n1,
        "stage2_cutoff": min(cfg.stage2_cutoff, n1),
        "shortlist_r": max(cfg.shortlist_r, n1),
    }
    return validate_config({**cfg.model_dump(), **update})


def run_bench(
    sizes: Sequence[int],
    cfg: PipelineConfig,
    seed: int = 42,
    num_queries: int = 20,
    corpus_spec: Optional[Mapping[str, Any]] = None,
    run_exact: bool = True,
) -> List[BenchRow]:
    """
    Stage-1 latency per corpus size.

    Args:
        sizes: Corpus sizes N
        cfg: Pipeline config; N1/N2 are clamped per size, R is kept
        seed: Corpus seed
        num_queries: Queries per size (>= 20 for stable means)
        corpus_spec: Extra SyntheticCorpusSpec fields (patch counts, topics)
        run_exact: Also time exhaustive scoring

    Returns:
        One BenchRow per size
    """
    rows = []
    for n in sizes:
        spec = SyntheticCorpusSpec(**{
            "num_pages": n,
            "dim": cfg.embed_dim,
            "num_queries": num_queries,
            "planted_per_query": 0,
            **(corpus_spec or {}),
        })
        synthetic = generate_synthetic_corpus(spec, seed=seed)
        run_cfg = scaled_config(cfg, n)
        t0 = time.perf_counter()
        index = build_centroid_index(synthetic.corpus.to_records(), run_cfg, seed=seed)
        build_s = time.perf_counter() - t0

        ann, coarse, fine, c2f, exact, overlaps, dots = [], [], [], [], [], [], []
        for query in synthetic.queries:
            result = stage1_search(query, index, run_cfg)
            ann.append(result.timings.ann_ms)
            coarse.append(result.timings.coarse_ms)
            fine.append(result.timings.fine_ms)
            c2f.append(result.timings.total_ms)
            dots.append(result.fine_dot_products)
            if run_exact:
                t0 = time.perf_counter()
                oracle = exact_top_k(query, index.pages, run_cfg.stage1_cutoff, workers=run_cfg.workers)
                exact.append((time.perf_counter() - t0) * 1000)
                got = {r.page_id for r in result.results}
                overlaps.append(len(got & {r.page_id for r in oracle}) / len(oracle))

        row = BenchRow(
            num_pages=n,
            num_patches=index.num_patches,
            queries=len(synthetic.queries),
            ann_ms=statistics.fmean(ann),
            coarse_ms=statistics.fmean(coarse),
            fine_ms=statistics.fmean(fine),
            coarse_to_fine_ms=statistics.fmean(c2f),
            exact_ms=statistics.fmean(exact) if exact else float("nan"),
            overlap=statistics.fmean(overlaps) if overlaps else float("nan"),
            fine_dot_products=statistics.fmean(dots),
            build_s=build_s,
        )
        logger.info(
            f"Bench N={n}: coarse-to-fine {row.coarse_to_fine_ms:.2f}ms, exact {row.exact_ms:.2f}ms, "
            f"overlap {row.overlap:.3f}"
        )
        rows.append(row)
    return rows


def format_bench_table(rows: Sequence[BenchRow]) -> str:
    header = (
        f"{'N':>9} {'patches':>10} {'ANN ms':>9} {'coarse ms':>10} {'fine ms':>9} "
        f"{'c2f ms':>9} {'exact ms':>10} {'speedup':>8} {'overlap':>8}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.num_pages:>9} {r.num_patches:>10} {r.ann_ms:>9.2f} {r.coarse_ms:>10.2f} {r.fine_ms:>9.2f} "
            f"{r.coarse_to_fine_ms:>9.2f} {r.exact_ms:>10.2f} {r.speedup:>8.1f} {r.overlap:>8.3f}"
        )
    return "\n".join(lines)


def plot_bench(rows: Sequence[BenchRow], path: Union[str, Path]) -> Path:
    """Log-log scaling curves per stage"""
    sizes = [r.num_pages for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(sizes, [r.ann_ms for r in rows], marker="o", label="ANN search")
    ax.plot(sizes, [r.coarse_ms for r in rows], marker="o", label="coarse ranking")
    ax.plot(sizes, [r.fine_ms for r in rows], marker="o", label="fine scoring")
    ax.plot(sizes, [r.coarse_to_fine_ms for r in rows], marker="s", linewidth=2, label="coarse-to-fine total")
    if all(r.exact_ms == r.exact_ms for r in rows):
        ax.plot(sizes, [r.exact_ms for r in rows], marker="^", linestyle="--", label="exact brute force")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("corpus pages N")
    ax.set_ylabel("mean ms per query")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
