"""
Corpus Ingest - pooled page vectors, near-duplicate removal and synthetic corpora

Dedup runs a greedy keep-first scan in page_id order: a page is dropped when its
pooled vector has cosine strictly above the threshold with an already-kept page.
Large corpora use a blocked all-pairs pass followed by the same sequential
commit, which yields exactly the drop set of the pairwise scan.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core_types import LETTER_LABELS, PageRecord, QueryTokens, Question, normalize_rows
from .errors import DegenerateVectorError
from .index_store import PageMeta, RawCorpus, save_corpus, save_ground_truth, save_queries, save_questions

logger = logging.getLogger("corpus-ingest")

DEGENERATE_NORM = 1e-8
DEDUP_STRICT_EPS = 1e-6
DEDUP_EXACT_LIMIT = 50_000
DEDUP_BLOCK_ROWS = 2048

RELEVANCE_KEY_FORMAT = "[relevance-key={:.6f}]"
EVIDENCE_TAG_FORMAT = "[evidence: {} -> {}]"


# ==============================================================================
# POOLING
# ==============================================================================

def pooled_page_vector(patches: np.ndarray) -> np.ndarray:
    """
    L2-normalized mean of a page's patch rows.

    Raises:
        DegenerateVectorError: the mean is (numerically) the zero vector
    """
    matrix = patches.patches if isinstance(patches, PageRecord) else np.asarray(patches, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ValueError(f"expected a non-empty patch matrix, got shape {matrix.shape}")
    mean = matrix.astype(np.float64).mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm <= DEGENERATE_NORM:
        raise DegenerateVectorError(f"pooled vector has norm {norm:.3e}")
    return (mean / norm).astype(np.float32)


def pooled_vectors(pages: Sequence[PageRecord]) -> Tuple[np.ndarray, np.ndarray]:
    """Pooled vector per page plus a mask of degenerate pages (left as zero rows)"""
    pooled = np.zeros((len(pages), pages[0].dim if pages else 0), dtype=np.float32)
    degenerate = np.zeros(len(pages), dtype=bool)
    for i, page in enumerate(pages):
        try:
            pooled[i] = pooled_page_vector(page.patches)
        except DegenerateVectorError:
            degenerate[i] = True
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} pages have a degenerate pooled vector; never deduplicated")
    return pooled, degenerate


# ==============================================================================
# DEDUP
# ==============================================================================

@dataclass(frozen=True)
class DedupDrop:
    dropped_id: str
    kept_id: str
    cosine: float

    def to_dict(self) -> Dict[str, object]:
        return {"dropped_id": self.dropped_id, "kept_id": self.kept_id, "cosine": self.cosine}


def _dedup_exact(vectors: np.ndarray, threshold: float) -> Dict[int, Tuple[int, float]]:
    kept_rows = np.empty_like(vectors)
    kept_index: List[int] = []
    drops: Dict[int, Tuple[int, float]] = {}
    for i in range(vectors.shape[0]):
        if kept_index:
            sims = kept_rows[:len(kept_index)] @ vectors[i]
            best = int(np.argmax(sims))
            if sims[best] - threshold > DEDUP_STRICT_EPS:
                drops[i] = (kept_index[best], float(sims[best]))
                continue
        kept_rows[len(kept_index)] = vectors[i]
        kept_index.append(i)
    return drops


def _dedup_blocked(vectors: np.ndarray, threshold: float, block_rows: int) -> Dict[int, Tuple[int, float]]:
    # Pass 1: every (later, earlier) pair above the threshold, in float32 tiles of block_rows x block_rows
    partners: Dict[int, List[Tuple[int, float]]] = {}
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    n = vectors.shape[0]
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        rows_block = vectors[start:stop]
        for col in range(0, stop, block_rows):
            col_stop = min(col + block_rows, stop)
            sims = rows_block @ vectors[col:col_stop].T
            rows, cols = np.nonzero(sims - np.float32(threshold) > DEDUP_STRICT_EPS)
            for r, c in zip(rows.tolist(), cols.tolist()):
                i, j = start + r, col + c
                if j < i:
                    partners.setdefault(i, []).append((j, float(sims[r, c])))

    # Pass 2: sequential commit in scan order
    kept = np.ones(n, dtype=bool)
    drops: Dict[int, Tuple[int, float]] = {}
    for i in sorted(partners):
        best: Optional[Tuple[int, float]] = None
        for j, cos in partners[i]:
            if kept[j] and (best is None or cos > best[1] or (cos == best[1] and j < best[0])):
                best = (j, cos)
        if best is not None:
            kept[i] = False
            drops[i] = best
    return drops


def dedup_pages(
    pages: Sequence[PageRecord],
    threshold: float = 0.97,
    mode: Literal["auto", "exact", "blocked"] = "auto",
    block_rows: int = DEDUP_BLOCK_ROWS,
) -> Tuple[List[PageRecord], List[DedupDrop]]:
    """
    Greedy keep-first near-duplicate removal.

    Args:
        pages: Corpus pages (any order; scanned in page_id order)
        threshold: Cosine threshold in [0, 1]; drop only when strictly above
        mode: "exact" pairwise scan, "blocked" all-pairs + commit, or "auto"
        block_rows: Rows per similarity block in blocked mode

    Returns:
        (kept pages in their original order, drop report in scan order)
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if not pages:
        return [], []

    order = sorted(range(len(pages)), key=lambda i: pages[i].page_id)
    pooled, _ = pooled_vectors([pages[i] for i in order])
    vectors = pooled.astype(np.float64)

    if mode == "auto":
        mode = "exact" if len(pages) <= DEDUP_EXACT_LIMIT else "blocked"
    if mode == "exact":
        drops = _dedup_exact(vectors, threshold)
    else:
        drops = _dedup_blocked(vectors, threshold, block_rows)

    report = [
        DedupDrop(dropped_id=pages[order[i]].page_id, kept_id=pages[order[j]].page_id, cosine=cos)
        for i, (j, cos) in sorted(drops.items())
    ]
    dropped = {order[i] for i in drops}
    kept = [page for i, page in enumerate(pages) if i not in dropped]
    logger.info(f"Dedup ({mode}, threshold {threshold}): kept {len(kept)}, dropped {len(report)}")
    return kept, report


# ==============================================================================
# SYNTHETIC CORPUS
# ==============================================================================

class SyntheticCorpusSpec(BaseModel):
    """Knobs for a seeded synthetic corpus"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_pages: int = Field(1000, gt=0)
    mean_patches: float = Field(103.0, gt=0)
    min_patches: int = Field(1, gt=0)
    max_patches: Optional[int] = Field(None, gt=0)
    dim: int = Field(128, gt=0)
    source_dim: Optional[int] = Field(None, gt=0)  # generate wider vectors for the PCA path
    num_queries: int = Field(20, ge=0)
    tokens_per_query: int = Field(16, gt=0)
    planted_per_query: int = Field(1, ge=0)
    noise: float = Field(0.1, ge=0.0)
    num_topics: int = Field(16, ge=0)  # 0 = pure Gaussian
    pages_per_article: int = Field(10, gt=0)
    datasets: List[str] = Field(default_factory=lambda: ["synthetic"])

    @model_validator(mode="after")
    def _check_sizes(self) -> "SyntheticCorpusSpec":
        if self.num_queries * self.planted_per_query > self.num_pages:
            raise ValueError("num_queries * planted_per_query exceeds num_pages")
        if self.max_patches is not None and self.max_patches < self.min_patches:
            raise ValueError("max_patches < min_patches")
        if self.source_dim is not None and self.source_dim < self.dim:
            raise ValueError("source_dim < dim")
        if not self.datasets:
            raise ValueError("datasets must not be empty")
        return self

    @property
    def width(self) -> int:
        return self.source_dim or self.dim


@dataclass
class SyntheticCorpus:
    corpus: RawCorpus
    queries: List[QueryTokens]
    questions: List[Question]
    relevance: Dict[str, List[str]]
    spec: SyntheticCorpusSpec


def page_id_for(i: int) -> str:
    return f"p{i:06d}"


def query_id_for(j: int) -> str:
    return f"q{j:04d}"


def synthetic_stem(query_id: str) -> str:
    return f"Synthetic question {query_id}: which option do the retrieved pages support?"


def _noisy_rows(base: np.ndarray, count: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    rows = base[np.arange(count) % base.shape[0]].astype(np.float32)
    if noise > 0:
        rows = rows + noise * rng.standard_normal(rows.shape, dtype=np.float32) / np.sqrt(rows.shape[1])
    return normalize_rows(rows)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, seed: int = 42) -> SyntheticCorpus:
    """
    Build a seeded corpus with planted relevant pages.

    Non-planted pages are drawn around topic centers (or from a plain Gaussian
    when num_topics == 0). Each query plants `planted_per_query` pages whose
    patches are noisy copies of the query tokens; those pages carry the top
    hidden relevance keys and an evidence tag naming the query and its gold label.

    Args:
        spec: Corpus shape
        seed: RNG seed (byte-identical output per seed)

    Returns:
        SyntheticCorpus with queries, questions and ground-truth relevance
    """
    rng = np.random.default_rng(seed)
    width = spec.width
    max_patches = spec.max_patches or max(spec.min_patches, int(4 * spec.mean_patches))

    counts = np.clip(rng.poisson(spec.mean_patches, size=spec.num_pages), spec.min_patches, max_patches)
    topics = normalize_rows(rng.standard_normal((max(spec.num_topics, 1), width), dtype=np.float32))
    num_articles = -(-spec.num_pages // spec.pages_per_article)
    article_topic = rng.integers(0, max(spec.num_topics, 1), size=num_articles)

    # Queries and their planted pages
    planted = rng.permutation(spec.num_pages)[: spec.num_queries * spec.planted_per_query]
    query_tokens: List[np.ndarray] = []
    gold = rng.integers(0, len(LETTER_LABELS), size=spec.num_queries)
    for _ in range(spec.num_queries):
        if spec.num_topics:
            center = topics[rng.integers(0, spec.num_topics)]
            tokens = _noisy_rows(center[None, :], spec.tokens_per_query, 1.5, rng)
        else:
            tokens = normalize_rows(rng.standard_normal((spec.tokens_per_query, width), dtype=np.float32))
        query_tokens.append(tokens)

    planted_owner: Dict[int, int] = {}
    for j in range(spec.num_queries):
        for page in planted[j * spec.planted_per_query:(j + 1) * spec.planted_per_query]:
            planted_owner[int(page)] = j
            counts[page] = max(int(counts[page]), spec.tokens_per_query)

    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    vectors = np.empty((int(offsets[-1]), width), dtype=np.float32)
    keys = rng.uniform(0.0, 0.9, size=spec.num_pages)
    metas: List[PageMeta] = []
    relevance: Dict[str, List[str]] = {query_id_for(j): [] for j in range(spec.num_queries)}

    for i in range(spec.num_pages):
        n = int(counts[i])
        article = i // spec.pages_per_article
        owner = planted_owner.get(i)
        if owner is not None:
            rows = _noisy_rows(query_tokens[owner], n, spec.noise, rng)
            keys[i] = 0.9 + 0.1 * rng.uniform()
        elif spec.num_topics:
            page_center = topics[article_topic[article]] + 0.8 * rng.standard_normal(width, dtype=np.float32) / np.sqrt(width)
            rows = _noisy_rows(page_center[None, :], n, 1.0, rng)
        else:
            rows = normalize_rows(rng.standard_normal((n, width), dtype=np.float32))
        vectors[offsets[i]:offsets[i + 1]] = rows

        summary = f"Article a{article:05d}, page {i % spec.pages_per_article + 1}: findings on topic {int(article_topic[article])}. "
        summary += RELEVANCE_KEY_FORMAT.format(keys[i])
        if owner is not None:
            qid = query_id_for(owner)
            summary += " " + EVIDENCE_TAG_FORMAT.format(qid, LETTER_LABELS[gold[owner]])
            relevance[qid].append(page_id_for(i))
        metas.append(PageMeta(
            page_id=page_id_for(i),
            article_id=f"a{article:05d}",
            n_patches=n,
            summary=summary,
            image_ref=f"pages/{page_id_for(i)}.png",
        ))

    queries = []
    questions = []
    for j, tokens in enumerate(query_tokens):
        qid = query_id_for(j)
        stem = synthetic_stem(qid)
        queries.append(QueryTokens(tokens=tokens, query_id=qid, text=stem))
        questions.append(Question(
            question_id=qid,
            stem=stem,
            options={label: f"Finding {label} for {qid}" for label in LETTER_LABELS},
            gold_label=LETTER_LABELS[gold[j]],
            dataset=spec.datasets[j % len(spec.datasets)],
        ))

    corpus = RawCorpus(
        metas=metas,
        vectors=vectors,
        row_offsets=offsets,
        extra={"generator": spec.model_dump(), "seed": seed},
    )
    logger.info(
        f"Generated synthetic corpus: {spec.num_pages} pages, {vectors.shape[0]} patches, "
        f"{spec.num_queries} queries, width {width}"
    )
    return SyntheticCorpus(corpus=corpus, queries=queries, questions=questions, relevance=relevance, spec=spec)


def save_synthetic(directory, synthetic: SyntheticCorpus) -> Path:
    """Corpus files plus queries, questions and ground truth"""
    directory = Path(directory)
    save_corpus(directory, synthetic.corpus)
    save_queries(directory, synthetic.queries)
    save_questions(directory / "questions.jsonl", synthetic.questions)
    save_ground_truth(directory / "ground_truth.jsonl", synthetic.relevance)
    return directory
