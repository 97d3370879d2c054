"""
LLM Filter - stage-2 sharded MapReduce relevance selection over page summaries

Map: stage-1 candidates are dealt round-robin into ceil(N1/B) shards; each shard
is one ranker call that keeps map_target_k pages.
Reduce: survivors are pooled in (shard_index, map_rank) order and one ranker
call keeps N2.

Pooling never depends on the order in which map calls complete.
"""

import asyncio
import logging
import math
import re
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .core_types import Question, RankedPage
from .errors import FilterError, ParseFailure, TransportFailure
from .model_gateway import ModelBackend, user_request
from .pipeline_config import PipelineConfig

logger = logging.getLogger("llm-filter")

FILTER_PROMPT_TEMPLATE = (
    "You are a medical document retrieval expert. Given a medical question and candidate page summaries, "
    "select the {target_k} most relevant pages. Question: {question}. Candidate page summaries: {summaries}. "
    "Select the {target_k} most relevant pages by listing their numbers in order of relevance "
    "(most relevant first). Output ONLY the page numbers inside <selected_pages> tags."
)

EMPTY_SUMMARY = "(no summary)"
SELECTED_PAGES_SPAN = re.compile(r"<selected_pages>(.*?)</selected_pages>", re.DOTALL | re.IGNORECASE)
INTEGER = re.compile(r"\d+")


@dataclass(frozen=True)
class ShardMember:
    candidate_rank: int
    page_id: str
    summary: str


@dataclass(frozen=True)
class Shard:
    shard_index: int
    members: Tuple[ShardMember, ...]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Provenance:
    page_id: str
    shard_index: int
    map_rank: int
    reduce_rank: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "page_id": self.page_id,
            "shard_index": self.shard_index,
            "map_rank": self.map_rank,
            "reduce_rank": self.reduce_rank,
        }


@dataclass
class FilteredSet:
    """Stage-2 output: at most N2 page ids plus where each one came from"""

    pages: List[str]
    provenance: List[Provenance]
    map_calls: int = 0
    reduce_calls: int = 0
    map_fallbacks: List[int] = field(default_factory=list)
    reduce_fallback: bool = False
    elapsed_ms: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        # No wall-clock fields
        return {
            "pages": list(self.pages),
            "provenance": [p.to_dict() for p in self.provenance],
            "map_calls": self.map_calls,
            "reduce_calls": self.reduce_calls,
            "map_fallbacks": list(self.map_fallbacks),
            "reduce_fallback": self.reduce_fallback,
        }


# ==============================================================================
# SHARDING
# ==============================================================================

def shard_candidates(
    candidates: Sequence[RankedPage],
    B: int,
    summaries: Optional[Mapping[str, str]] = None,
    interleaved: bool = True,
) -> List[Shard]:
    """
    Split stage-1 candidates into ceil(len/B) shards.

    Args:
        candidates: Stage-1 results in rank order
        B: Maximum shard size
        summaries: page_id -> summary text (missing = empty)
        interleaved: Candidate i goes to shard i mod num_shards; otherwise contiguous blocks

    Returns:
        Shards in shard_index order, members in stage-1 rank order
    """
    if not candidates:
        raise ValueError("shard_candidates: no candidates")
    if B < 1:
        raise ValueError(f"shard size must be >= 1, got {B}")
    summaries = summaries or {}
    num_shards = math.ceil(len(candidates) / B)
    buckets: List[List[ShardMember]] = [[] for _ in range(num_shards)]
    for i, cand in enumerate(candidates):
        target = i % num_shards if interleaved else i // B
        buckets[target].append(ShardMember(cand.rank, cand.page_id, summaries.get(cand.page_id, "")))
    return [Shard(shard_index=s, members=tuple(members)) for s, members in enumerate(buckets)]


# ==============================================================================
# PROMPT + PARSE
# ==============================================================================

def filter_question_text(question: Question, query_text: Optional[str] = None) -> str:
    text = f"{question.stem} Options: {question.render_options()}"
    if query_text and query_text != question.stem:
        text += f" Refined search query: {query_text}"
    return text


def render_filter_prompt(
    question: Union[Question, str],
    pool: Union[Shard, Sequence[ShardMember]],
    target_k: int,
    template: str = FILTER_PROMPT_TEMPLATE,
) -> str:
    """
    Instantiate the selection prompt. Summaries are numbered 1..len(pool) in pool order.

    Raises:
        ValueError: target_k outside [1, pool size]
    """
    members = pool.members if isinstance(pool, Shard) else tuple(pool)
    if not 1 <= target_k <= len(members):
        raise ValueError(f"target_k={target_k} must be within [1, {len(members)}]")
    question_text = filter_question_text(question) if isinstance(question, Question) else question
    # one numbered summary per line
    lines = "".join(
        f"\n[{i}] {(m.summary or '').strip() or EMPTY_SUMMARY}"
        for i, m in enumerate(members, start=1)
    )
    return template.format(target_k=target_k, question=question_text, summaries=lines)


def parse_selected_pages(response: str, pool_size: int, target_k: int) -> List[int]:
    """
    Pool indices (1-based) from the first <selected_pages> span.

    Duplicates and out-of-range numbers are dropped, order is kept and the
    list is cut to target_k.

    Raises:
        ParseFailure: no span, or no valid index inside it
    """
    match = SELECTED_PAGES_SPAN.search(response or "")
    if match is None:
        raise ParseFailure("missing <selected_pages> tags")
    selected: List[int] = []
    seen = set()
    for token in INTEGER.findall(match.group(1)):
        index = int(token)
        if 1 <= index <= pool_size and index not in seen:
            seen.add(index)
            selected.append(index)
            if len(selected) == target_k:
                break
    if not selected:
        raise ParseFailure("no valid page numbers inside <selected_pages>")
    return selected


# ==============================================================================
# MAPREDUCE
# ==============================================================================

async def _select(
    ranker: ModelBackend,
    prompt: str,
    pool_size: int,
    target_k: int,
    cfg: PipelineConfig,
    label: str,
    model_tag: str,
) -> Optional[List[int]]:
    """
    Ranker call, re-asked while the output is unparseable.

    Transport failures are retried inside the backend and propagate from here
    on the first one.

    Returns:
        Selected pool indices, or None when every attempt was unparseable
    """
    request = user_request(prompt, cfg.filter_temperature, cfg.filter_max_new_tokens, model_tag)
    last_error: Optional[ParseFailure] = None
    for attempt in range(cfg.ranker_retries + 1):
        try:
            return parse_selected_pages(await ranker.complete(request), pool_size, target_k)
        except ParseFailure as e:
            last_error = e
            logger.debug(f"{label}: unparseable ranker output (attempt {attempt + 1})")
    logger.warning(f"{label}: {last_error}; using stage-1 order")
    return None


async def stage2_filter(
    question: Question,
    stage1_results: Sequence[RankedPage],
    ranker: ModelBackend,
    cfg: PipelineConfig,
    summaries: Optional[Mapping[str, str]] = None,
    query_text: Optional[str] = None,
    template: str = FILTER_PROMPT_TEMPLATE,
    model_tag: str = "",
) -> FilteredSet:
    """
    Map over shards, reduce survivors to N2.

    Args:
        question: Question being answered
        stage1_results: Stage-1 ranking (non-empty)
        ranker: Ranker backend
        cfg: Pipeline config (B, map_target_k, N2, retries, in-flight cap)
        summaries: page_id -> summary
        query_text: Refined query of the current round, if any
        template: Selection prompt template
        model_tag: Model tag stamped on every request

    Returns:
        FilteredSet with provenance

    Raises:
        FilterError: ranker transport failed after retries
    """
    if not stage1_results:
        raise ValueError("stage2_filter: empty stage-1 results")
    t0 = time.perf_counter()
    shards = shard_candidates(stage1_results, cfg.shard_size, summaries, cfg.interleaved_shards)
    question_text = filter_question_text(question, query_text)
    semaphore = asyncio.Semaphore(cfg.max_inflight_maps)
    fallbacks: List[int] = []

    async def run_map(shard: Shard) -> List[ShardMember]:
        k = min(cfg.map_target_k, len(shard))
        prompt = render_filter_prompt(question_text, shard, k, template)
        async with semaphore:
            picked = await _select(ranker, prompt, len(shard), k, cfg, f"map shard {shard.shard_index}", model_tag)
        if picked is None:
            fallbacks.append(shard.shard_index)
            return list(shard.members[:k])
        return [shard.members[i - 1] for i in picked]

    logger.info(f"Stage-2 map: {len(stage1_results)} candidates in {len(shards)} shards")
    outcomes = await asyncio.gather(*(run_map(s) for s in shards), return_exceptions=True)

    selections: Dict[int, List[ShardMember]] = {}
    failure: Optional[BaseException] = None
    for shard, outcome in zip(shards, outcomes):
        if isinstance(outcome, BaseException):
            failure = failure or outcome
        else:
            selections[shard.shard_index] = outcome
    if failure is not None:
        partial = {s: [m.page_id for m in members] for s, members in selections.items()}
        raise FilterError(f"stage-2 map failed: {failure}", partial={"map_selections": partial}) from failure

    pool: List[ShardMember] = []
    origin: Dict[str, Tuple[int, int]] = {}
    for shard_index in sorted(selections):
        for map_rank, member in enumerate(selections[shard_index], start=1):
            pool.append(member)
            origin[member.page_id] = (shard_index, map_rank)

    k = min(cfg.stage2_cutoff, len(pool))
    prompt = render_filter_prompt(question_text, pool, k, template)
    try:
        picked = await _select(ranker, prompt, len(pool), k, cfg, "reduce", model_tag)
    except TransportFailure as e:
        partial = {s: [m.page_id for m in members] for s, members in selections.items()}
        raise FilterError(f"stage-2 reduce failed: {e}", partial={"map_selections": partial}) from e

    if picked is None:
        final = sorted(pool, key=lambda m: m.candidate_rank)[:k]
    else:
        final = [pool[i - 1] for i in picked]

    provenance = [
        Provenance(m.page_id, origin[m.page_id][0], origin[m.page_id][1], reduce_rank)
        for reduce_rank, m in enumerate(final, start=1)
    ]
    result = FilteredSet(
        pages=[m.page_id for m in final],
        provenance=provenance,
        map_calls=len(shards),
        reduce_calls=1,
        map_fallbacks=sorted(fallbacks),
        reduce_fallback=picked is None,
        elapsed_ms=(time.perf_counter() - t0) * 1000,
    )
    logger.info(
        f"Stage-2 reduce: {len(pool)} survivors -> {len(result.pages)} pages "
        f"({len(result.map_fallbacks)} map fallbacks, reduce fallback={result.reduce_fallback})"
    )
    return result
