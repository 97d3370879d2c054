"""
Reasoner - iterative answer loop with a memory bank

Each round: retrieve (stage 1 + stage 2), show the reasoner the top page images
and summaries, then either accept an <answer>, or take the <query_update> as the
next retrieval query and fold <notes> into the memory bank. The round cap is
hard: the final round carries a directive demanding an answer and nothing the
model says can extend the loop.
"""

import asyncio
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .coarse_index import PageIndex, Stage1Result, stage1_search
from .core_types import QueryTokens, Question, normalize_rows
from .errors import DegenerateVectorError, PipelineError, ReasonerError
from .llm_filter import FILTER_PROMPT_TEMPLATE, FilteredSet, stage2_filter
from .model_gateway import Message, ModelBackend, PromptRequest
from .pipeline_config import PipelineConfig
from .projection import apply_projection

logger = logging.getLogger("reasoner")

ANSWER_PATTERN = re.compile(r"<answer>\s*([A-Da-d]|yes|no|maybe)\b")
QUERY_UPDATE_SPAN = re.compile(r"<query_update>(.*?)</query_update>", re.DOTALL)
NOTES_SPAN = re.compile(r"<notes>(.*?)</notes>", re.DOTALL)
ROUND_PREFIX = re.compile(r"^\[Round (\d+)\] ")

REASONER_PROMPT_TEMPLATE = (
    "You are a medical QA expert. Answer the multiple-choice question based on the provided document pages. "
    "Question: {question}. Options: {options}. {memory_section}. Retrieved page summaries: {summaries}. "
    "(The actual page images are also provided for your reference.) Instructions: If you have enough "
    "information to answer, output your answer inside <answer> tags with a brief justification. If you need "
    "more information, output a refined search query inside <query_update> tags and summarize your current "
    "findings inside <notes> tags. This is iteration {iteration}/{max_iterations}. {force_msg}."
)
FORCE_DIRECTIVE = (
    "This is the final iteration: you MUST output your answer inside <answer> tags now; "
    "do not request another search"
)
NO_FINDINGS = "Memory bank: (no prior findings)"


def extract_answer(text: Optional[str]) -> Optional[str]:
    """First <answer> label, letters upper-cased; None when there is none"""
    match = ANSWER_PATTERN.search(text or "")
    if match is None:
        return None
    label = match.group(1)
    return label.upper() if len(label) == 1 else label


# ==============================================================================
# MEMORY BANK
# ==============================================================================

@dataclass(frozen=True)
class RoundNote:
    iteration: int
    notes: str


@dataclass(frozen=True)
class MemoryBank:
    """Per-question state carried across rounds; JSON field names are fixed"""

    iteration: int = 1
    key_findings: Tuple[str, ...] = ()
    reasoning_history: Tuple[RoundNote, ...] = ()

    def __post_init__(self):
        for finding in self.key_findings:
            match = ROUND_PREFIX.match(finding)
            if match is None or not 1 <= int(match.group(1)) <= self.iteration:
                raise ValueError(f"memory finding without a valid round prefix: {finding[:60]!r}")

    @property
    def is_empty(self) -> bool:
        return not self.key_findings and not self.reasoning_history

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "key_findings": list(self.key_findings),
            "reasoning_history": [{"iteration": r.iteration, "notes": r.notes} for r in self.reasoning_history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MemoryBank":
        return cls(
            iteration=int(data["iteration"]),
            key_findings=tuple(data["key_findings"]),
            reasoning_history=tuple(RoundNote(int(r["iteration"]), r["notes"]) for r in data["reasoning_history"]),
        )


def update_memory(bank: MemoryBank, round: int, notes: str) -> MemoryBank:
    """
    Fold one round's notes into the bank.

    Every non-empty line becomes a "[Round k] " finding; the raw notes go to
    reasoning_history; the iteration counter advances.

    Raises:
        ValueError: round does not equal bank.iteration
    """
    if round != bank.iteration:
        raise ValueError(f"round mismatch: bank is at iteration {bank.iteration}, got round {round}")
    findings = tuple(f"[Round {round}] {line.strip()}" for line in (notes or "").splitlines() if line.strip())
    return MemoryBank(
        iteration=bank.iteration + 1,
        key_findings=bank.key_findings + findings,
        reasoning_history=bank.reasoning_history + (RoundNote(round, notes or ""),),
    )


# ==============================================================================
# OUTCOMES
# ==============================================================================

@dataclass(frozen=True)
class Answer:
    label: str
    justification: str = ""
    kind: str = field(default="answer", init=False)


@dataclass(frozen=True)
class Refine:
    query: str
    notes: str = ""
    kind: str = field(default="refine", init=False)


@dataclass(frozen=True)
class Unparseable:
    raw: str
    kind: str = field(default="unparseable", init=False)


IterationOutcome = Union[Answer, Refine, Unparseable]


def outcome_to_dict(outcome: IterationOutcome) -> Dict[str, Any]:
    if isinstance(outcome, Answer):
        return {"kind": "answer", "label": outcome.label, "justification": outcome.justification}
    if isinstance(outcome, Refine):
        return {"kind": "refine", "query": outcome.query, "notes": outcome.notes}
    return {"kind": "unparseable", "raw": outcome.raw}


def outcome_from_dict(data: Mapping[str, Any]) -> IterationOutcome:
    kind = data["kind"]
    if kind == "answer":
        return Answer(data["label"], data.get("justification", ""))
    if kind == "refine":
        return Refine(data["query"], data.get("notes", ""))
    return Unparseable(data.get("raw", ""))


def parse_outcome(response: Optional[str]) -> IterationOutcome:
    """Answer beats Refine; anything else is Unparseable"""
    text = response or ""
    match = ANSWER_PATTERN.search(text)
    if match is not None:
        rest = text[match.end():]
        justification = rest.split("</answer>", 1)[0].strip(" \t\n.:-")
        return Answer(label=extract_answer(text), justification=justification)
    update = QUERY_UPDATE_SPAN.search(text)
    if update is not None and update.group(1).strip():
        notes = NOTES_SPAN.search(text)
        return Refine(query=update.group(1).strip(), notes=notes.group(1).strip() if notes else "")
    return Unparseable(raw=text)


# ==============================================================================
# PROMPT
# ==============================================================================

def render_reasoner_prompt(
    question: Question,
    options: Optional[str],
    memory: MemoryBank,
    summaries: Sequence[str],
    image_refs: Sequence[str],
    iteration: int,
    max_iterations: int,
    accepts_images: bool = True,
    cfg: Optional[PipelineConfig] = None,
    model_tag: str = "",
) -> PromptRequest:
    """
    Build the reasoner request for one round.

    Args:
        question: The question
        options: Rendered options (None = question.render_options())
        memory: Bank to show; an empty bank renders the "(no prior findings)" stub
        summaries: Filtered-rank-ordered summaries (cut to summaries_per_round)
        image_refs: Filtered-rank-ordered page images (cut to images_per_round)
        iteration: Current round, 1-based
        max_iterations: Round cap; the final round carries the force directive
        accepts_images: Attach images (otherwise summaries only)
        cfg: Limits and decoding settings
        model_tag: Model tag for the request

    Returns:
        PromptRequest
    """
    cfg = cfg or PipelineConfig()
    if not 1 <= iteration <= max_iterations:
        raise ValueError(f"iteration {iteration} outside [1, {max_iterations}]")

    summaries = list(summaries)[: cfg.summaries_per_round]
    images = list(image_refs)[: cfg.images_per_round] if accepts_images else []
    memory_section = NO_FINDINGS if memory.is_empty else f"Memory bank: {memory.to_json()}"
    numbered = "".join(f"\n[{i}] {s.strip() or '(no summary)'}" for i, s in enumerate(summaries, start=1))

    text = REASONER_PROMPT_TEMPLATE.format(
        question=question.stem,
        options=options if options is not None else question.render_options(),
        memory_section=memory_section,
        summaries=numbered or "(none)",
        iteration=iteration,
        max_iterations=max_iterations,
        force_msg=FORCE_DIRECTIVE if iteration == max_iterations else "",
    )
    return PromptRequest(
        messages=(Message(role="user", text=text, images=tuple(images)),),
        temperature=cfg.reasoner_temperature,
        max_new_tokens=cfg.reasoner_max_new_tokens,
        model_tag=model_tag,
    )


# ==============================================================================
# QUERY ENCODING
# ==============================================================================

class QueryEncoder(Protocol):
    def encode(self, text: str) -> QueryTokens:
        ...


class LookupQueryEncoder:
    """Precomputed embeddings keyed by exact query text"""

    def __init__(self, queries: Sequence[QueryTokens]):
        self.table: Dict[str, QueryTokens] = {}
        for q in queries:
            if q.text:
                self.table[q.text] = q

    def __contains__(self, text: str) -> bool:
        return text in self.table

    def encode(self, text: str) -> QueryTokens:
        try:
            return self.table[text]
        except KeyError:
            raise PipelineError(f"no precomputed embedding for query {text[:80]!r}") from None


class HashQueryEncoder:
    """Deterministic pseudo-embedding: SHA-256 of the text seeds m unit vectors"""

    def __init__(self, dim: int, tokens: int = 16):
        self.dim = dim
        self.tokens = tokens

    def encode(self, text: str) -> QueryTokens:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        matrix = normalize_rows(rng.standard_normal((self.tokens, self.dim), dtype=np.float32))
        return QueryTokens(tokens=matrix, text=text)


class ChainedQueryEncoder:
    """Lookup first, then the fallback encoder"""

    def __init__(self, lookup: LookupQueryEncoder, fallback: QueryEncoder):
        self.lookup = lookup
        self.fallback = fallback

    def encode(self, text: str) -> QueryTokens:
        if text in self.lookup:
            return self.lookup.encode(text)
        return self.fallback.encode(text)


# ==============================================================================
# RETRIEVAL HANDLE
# ==============================================================================

def project_query(index: PageIndex, query: QueryTokens) -> QueryTokens:
    """Bring a source-width query down to the index width; degenerate tokens are dropped"""
    projection = index.projection
    if query.dim == index.dim or projection is None:
        return query
    projected, degenerate = apply_projection(projection, query.tokens)
    if degenerate.all():
        raise DegenerateVectorError(f"every token of query {query.query_id} projects to zero")
    return QueryTokens(tokens=projected[~degenerate], query_id=query.query_id, text=query.text)


@dataclass
class Retrieval:
    stage1: Stage1Result
    filtered: FilteredSet


class RetrievalPipeline:
    """
    Stage 1 + stage 2 behind one call, plus the query encoder.

    Queries wider than the index (source_dim) are projected with the index's
    PCA model first.
    """

    def __init__(
        self,
        index: PageIndex,
        ranker: ModelBackend,
        cfg: PipelineConfig,
        encoder: QueryEncoder,
        filter_template: str = FILTER_PROMPT_TEMPLATE,
        filter_model_tag: str = "",
    ):
        self.index = index
        self.ranker = ranker
        self.cfg = cfg
        self.encoder = encoder
        self.filter_template = filter_template
        self.filter_model_tag = filter_model_tag
        self.summaries = {p.page_id: p.summary for p in index.pages}
        self.image_refs = {p.page_id: p.image_ref for p in index.pages if p.image_ref}
        self.calls = 0

    def encode(self, text: str) -> QueryTokens:
        return self.prepare(self.encoder.encode(text))

    def prepare(self, query: QueryTokens) -> QueryTokens:
        return project_query(self.index, query)

    async def retrieve(self, question: Question, query: QueryTokens, query_text: Optional[str] = None) -> Retrieval:
        self.calls += 1
        query = self.prepare(query)
        stage1 = await asyncio.to_thread(stage1_search, query, self.index, self.cfg)
        if not stage1.results:
            raise PipelineError(f"stage 1 returned no pages for {question.question_id}")
        filtered = await stage2_filter(
            question,
            stage1.results,
            self.ranker,
            self.cfg,
            summaries=self.summaries,
            query_text=query_text,
            template=self.filter_template,
            model_tag=self.filter_model_tag,
        )
        return Retrieval(stage1=stage1, filtered=filtered)


# ==============================================================================
# TRACES
# ==============================================================================

@dataclass
class RoundTrace:
    round: int
    query_text: str
    fresh_retrieval: bool
    stage1_page_ids: List[str]
    filtered: Dict[str, Any]
    image_page_ids: List[str]
    summary_page_ids: List[str]
    response: str
    outcome: IterationOutcome
    memory: MemoryBank
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "query_text": self.query_text,
            "fresh_retrieval": self.fresh_retrieval,
            "stage1_page_ids": list(self.stage1_page_ids),
            "filtered": self.filtered,
            "image_page_ids": list(self.image_page_ids),
            "summary_page_ids": list(self.summary_page_ids),
            "response": self.response,
            "outcome": outcome_to_dict(self.outcome),
            "memory": self.memory.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RoundTrace":
        return cls(
            round=int(data["round"]),
            query_text=data["query_text"],
            fresh_retrieval=bool(data["fresh_retrieval"]),
            stage1_page_ids=list(data["stage1_page_ids"]),
            filtered=dict(data["filtered"]),
            image_page_ids=list(data["image_page_ids"]),
            summary_page_ids=list(data["summary_page_ids"]),
            response=data["response"],
            outcome=outcome_from_dict(data["outcome"]),
            memory=MemoryBank.from_dict(data["memory"]),
        )


@dataclass
class AnswerTrace:
    """Everything one question's run produced; timings live outside to_dict()"""

    question_id: str
    gold_label: Optional[str] = None
    dataset: Optional[str] = None
    final_label: Optional[str] = None
    rounds: List[RoundTrace] = field(default_factory=list)
    retrieval_calls: int = 0
    error: Optional[str] = None

    @property
    def rounds_used(self) -> int:
        return len(self.rounds)

    @property
    def correct(self) -> bool:
        return self.final_label is not None and self.final_label == self.gold_label

    @property
    def refinements(self) -> int:
        """Refine outcomes that triggered a new retrieval"""
        return sum(1 for r in self.rounds[1:] if r.fresh_retrieval)

    @property
    def capped_refine(self) -> bool:
        """The last round asked for another search and the round cap refused it"""
        return self.error is None and bool(self.rounds) and isinstance(self.rounds[-1].outcome, Refine)

    @property
    def refine_requests(self) -> int:
        return sum(1 for r in self.rounds if isinstance(r.outcome, Refine))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "question_id": self.question_id,
            "gold_label": self.gold_label,
            "dataset": self.dataset,
            "final_label": self.final_label,
            "rounds_used": self.rounds_used,
            "retrieval_calls": self.retrieval_calls,
            "refinements": self.refinements,
            "capped_refine": self.capped_refine,
            "error": self.error,
            "rounds": [r.to_dict() for r in self.rounds],
        }

    def timings_dict(self) -> Dict[str, Any]:
        return {"question_id": self.question_id, "rounds": [dict(r.timings, round=r.round) for r in self.rounds]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnswerTrace":
        return cls(
            question_id=data["question_id"],
            gold_label=data.get("gold_label"),
            dataset=data.get("dataset"),
            final_label=data.get("final_label"),
            rounds=[RoundTrace.from_dict(r) for r in data.get("rounds", [])],
            retrieval_calls=int(data.get("retrieval_calls", 0)),
            error=data.get("error"),
        )


# ==============================================================================
# LOOP
# ==============================================================================

async def answer_loop(
    question: Question,
    retrieval: RetrievalPipeline,
    reasoner: ModelBackend,
    cfg: PipelineConfig,
    initial_query: Optional[QueryTokens] = None,
    model_tag: str = "",
) -> AnswerTrace:
    """
    Run the reasoning rounds for one question.

    Args:
        question: The question
        retrieval: Stage-1 + stage-2 handle (also encodes refined queries)
        reasoner: Reasoner backend
        cfg: Round cap, per-round limits, decoding settings
        initial_query: Precomputed question embedding (None = encode the stem)
        model_tag: Reasoner model tag

    Returns:
        AnswerTrace; final_label is None when no round produced an answer

    Raises:
        ReasonerError: retrieval or backend failure, with the partial trace attached
    """
    trace = AnswerTrace(question_id=question.question_id, gold_label=question.gold_label, dataset=question.dataset)
    bank = MemoryBank()
    query_text = question.stem
    current: Optional[Retrieval] = None

    try:
        tokens = initial_query if initial_query is not None else retrieval.encode(query_text)
        for k in range(1, cfg.max_iterations + 1):
            fresh = current is None
            if fresh:
                current = await retrieval.retrieve(question, tokens, query_text if k > 1 else None)
                trace.retrieval_calls += 1

            pages = current.filtered.pages
            image_pages = [p for p in pages if p in retrieval.image_refs][: cfg.images_per_round]
            summary_pages = pages[: cfg.summaries_per_round]
            request = render_reasoner_prompt(
                question,
                None,
                bank if cfg.use_memory_bank else MemoryBank(iteration=k),
                [retrieval.summaries.get(p, "") for p in summary_pages],
                [retrieval.image_refs[p] for p in image_pages],
                k,
                cfg.max_iterations,
                accepts_images=reasoner.accepts_images,
                cfg=cfg,
                model_tag=model_tag,
            )
            if not reasoner.accepts_images:
                image_pages = []

            t0 = time.perf_counter()
            response = await reasoner.complete(request)
            reasoner_ms = (time.perf_counter() - t0) * 1000
            outcome = parse_outcome(response)

            if k < cfg.max_iterations and not isinstance(outcome, Answer):
                notes = outcome.notes if isinstance(outcome, Refine) else ""
                bank = update_memory(bank, k, notes)

            timings = {"reasoner_ms": reasoner_ms}
            if fresh:
                timings.update(current.stage1.timings.to_dict())
                timings["filter_ms"] = current.filtered.elapsed_ms
            trace.rounds.append(RoundTrace(
                round=k,
                query_text=query_text,
                fresh_retrieval=fresh,
                stage1_page_ids=[r.page_id for r in current.stage1.results],
                filtered=current.filtered.to_dict(),
                image_page_ids=image_pages,
                summary_page_ids=summary_pages,
                response=response,
                outcome=outcome,
                memory=bank,
                timings=timings,
            ))
            logger.info(f"{question.question_id} round {k}/{cfg.max_iterations}: {outcome.kind}")

            if isinstance(outcome, Answer):
                trace.final_label = outcome.label
                break
            if isinstance(outcome, Refine) and k < cfg.max_iterations:
                query_text = outcome.query
                tokens = retrieval.encode(query_text)
                current = None
            elif isinstance(outcome, Refine):
                logger.info(f"{question.question_id}: refine request in round {k} ignored at the round cap")
    except PipelineError as e:
        trace.error = str(e)
        raise ReasonerError(f"{question.question_id}: {e}", partial=trace) from e

    return trace

