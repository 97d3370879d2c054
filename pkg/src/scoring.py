"""
Two-way late-interaction scoring

S(q, p) = (1/m) Σ_i max_j q_i·v_j  +  (1/n) Σ_j max_i q_i·v_j

Similarities are computed in float32; each term is summed in float64. Every
page goes through the same per-page kernel whether it is scored from a
shortlist or exhaustively, so both paths produce bit-identical scores.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .core_types import PageRecord, QueryTokens, RankedPage, rank_pages

logger = logging.getLogger("scoring")

SCORE_BLOCK_PAGES = 512


@dataclass(frozen=True)
class ScoreBreakdown:
    """Both directions of the late-interaction score"""

    query_to_page: float
    page_to_query: float

    @property
    def total(self) -> float:
        return self.query_to_page + self.page_to_query


def _as_matrix(x: Union[QueryTokens, PageRecord, np.ndarray], name: str) -> np.ndarray:
    if isinstance(x, QueryTokens):
        return x.tokens
    if isinstance(x, PageRecord):
        return x.patches
    matrix = np.asarray(x, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {matrix.shape}")
    return matrix


def _page_terms(tokens: np.ndarray, patches: np.ndarray) -> Tuple[float, float]:
    sim = tokens @ patches.T  # m x n, float32
    q2p = float(np.sum(sim.max(axis=1), dtype=np.float64)) / sim.shape[0]
    p2q = float(np.sum(sim.max(axis=0), dtype=np.float64)) / sim.shape[1]
    return q2p, p2q


def two_way_score(
    q: Union[QueryTokens, np.ndarray],
    p: Union[PageRecord, np.ndarray],
) -> ScoreBreakdown:
    """
    Exact two-way late-interaction score of one page.

    Args:
        q: Query tokens (m x d)
        p: Page patches (n x d)

    Returns:
        ScoreBreakdown with the query->page and page->query averages

    Raises:
        ValueError: empty matrix or dimension mismatch
    """
    tokens = _as_matrix(q, "query")
    patches = _as_matrix(p, "page")
    if tokens.shape[1] != patches.shape[1]:
        raise ValueError(
            f"dimension mismatch: query d={tokens.shape[1]}, page d={patches.shape[1]}"
        )
    q2p, p2q = _page_terms(tokens, patches)
    return ScoreBreakdown(query_to_page=q2p, page_to_query=p2q)


def score_matrices(
    tokens: np.ndarray,
    pages: Sequence[np.ndarray],
    workers: int = 1,
) -> Tuple[np.ndarray, int]:
    """
    Total two-way score for many pages.

    Pages are split into blocks; blocks may be scored on a thread pool and are
    merged by position, so the output never depends on completion order.

    Args:
        tokens: Query tokens (m x d, float32)
        pages: Patch matrices, one per page
        workers: Thread count for block scoring

    Returns:
        (scores as float64 array aligned with pages, number of query-patch dot products)
    """
    tokens = np.asarray(tokens, dtype=np.float32)
    d = tokens.shape[1]
    for i, patches in enumerate(pages):
        if patches.shape[1] != d:
            raise ValueError(f"dimension mismatch at page {i}: d={patches.shape[1]}, query d={d}")

    scores = np.empty(len(pages), dtype=np.float64)

    def _score_block(start: int) -> None:
        for i in range(start, min(start + SCORE_BLOCK_PAGES, len(pages))):
            q2p, p2q = _page_terms(tokens, pages[i])
            scores[i] = q2p + p2q

    starts = range(0, len(pages), SCORE_BLOCK_PAGES)
    if workers > 1 and len(pages) > SCORE_BLOCK_PAGES:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_score_block, starts))
    else:
        for start in starts:
            _score_block(start)

    dot_products = tokens.shape[0] * int(sum(p.shape[0] for p in pages))
    return scores, dot_products


def exact_top_k(
    q: Union[QueryTokens, np.ndarray],
    corpus: Sequence[PageRecord],
    k: int,
    workers: int = 1,
) -> List[RankedPage]:
    """
    Exhaustive top-k by two-way score. The oracle for every approximate path.

    Args:
        q: Query tokens
        corpus: Pages to score
        k: Number of results (>= 1)
        workers: Thread count

    Returns:
        Top-k pages ordered by (score desc, page_id asc)
    """
    if not corpus:
        raise ValueError("exact_top_k: empty corpus")
    if k < 1:
        raise ValueError(f"exact_top_k: k must be >= 1, got {k}")
    tokens = _as_matrix(q, "query")
    scores, _ = score_matrices(tokens, [page.patches for page in corpus], workers=workers)
    return rank_pages([page.page_id for page in corpus], scores, k)
