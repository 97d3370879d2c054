"""
Coarse Index - per-page centroids, a centroid ANN structure, and stage-1 search

Offline: every page's patches are clustered into at most C centroids
(scikit-learn k-means with k-means++ seeding, centers renormalized). All
centroids go into a faiss inverted-file inner-product index with a page
pointer per entry; nprobe is raised at build time until a recall target is met.

Online: each query token probes the centroid index; a page's coarse score is
the sum over tokens of its best centroid similarity. The top-R pages by coarse
score are rescored exactly with all their patches.

Cost: O(m·C·N) for the coarse pass plus O(m·n·R) for the exact pass.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import faiss
import numpy as np
from sklearn.cluster import KMeans, kmeans_plusplus

from .core_types import PageRecord, QueryTokens, RankedPage, normalize_rows, rank_pages
from .pipeline_config import PipelineConfig
from .projection import ProjectionModel
from .scoring import score_matrices

logger = logging.getLogger("coarse-index")

RECALL_PROBES = 100
RECALL_K = 10


# ==============================================================================
# K-MEANS
# ==============================================================================

@dataclass(frozen=True)
class KMeansFit:
    centroids: np.ndarray  # k x d, unit rows
    labels: np.ndarray
    inertia: float  # against the raw (unnormalized) centers


def spherical_kmeans(x: np.ndarray, k: int, random_state: int, max_iter: int = 25) -> KMeansFit:
    """
    Lloyd's k-means with k-means++ seeding, centers projected back to the sphere.

    Args:
        x: n x d unit rows (n >= k)
        k: Number of clusters
        random_state: Seed for the k-means++ draw
        max_iter: Lloyd iteration cap

    Returns:
        KMeansFit with unit centroids and one label per row
    """
    seeds, _ = kmeans_plusplus(x, n_clusters=k, random_state=random_state)
    km = KMeans(n_clusters=k, init=seeds, n_init=1, max_iter=max_iter, tol=0.0, algorithm="lloyd").fit(x)
    labels = km.labels_.astype(np.int64)
    centers = np.asarray(km.cluster_centers_, dtype=np.float32)

    # a center at the origin has no direction; stand in with one of its members
    for c in np.flatnonzero(np.linalg.norm(centers, axis=1) < 1e-12):
        members = np.flatnonzero(labels == c)
        centers[c] = x[members[0] if members.size else c]

    return KMeansFit(centroids=normalize_rows(centers), labels=labels, inertia=float(km.inertia_))


# ==============================================================================
# PER-PAGE CENTROIDS
# ==============================================================================

@dataclass(frozen=True)
class CentroidSet:
    """c = min(C, n) unit centroids summarizing one page"""

    page_id: str
    centroids: np.ndarray  # c x d
    weights: np.ndarray  # member count per centroid

    @property
    def count(self) -> int:
        return int(self.centroids.shape[0])


def page_seed(seed: int, page_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, page_index]))


def build_page_centroids(
    patches: np.ndarray,
    C: int,
    seed: int = 42,
    page_id: str = "",
    max_iter: int = 25,
    rng: Optional[np.random.Generator] = None,
) -> CentroidSet:
    """
    Cluster one page's patches into at most C centroids.

    Args:
        patches: n x d unit patch vectors (n >= 1)
        C: Centroid budget
        seed: Seed used when no generator is given
        page_id: Carried into the result
        max_iter: Lloyd iteration cap
        rng: Explicit generator (index builds derive one per page)

    Returns:
        CentroidSet; when n <= C the centroids are the patches themselves
    """
    x = np.asarray(patches, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"page {page_id}: patches must be a non-empty matrix, got {x.shape}")
    n = x.shape[0]
    if n <= C:
        return CentroidSet(page_id=page_id, centroids=x.copy(), weights=np.ones(n, dtype=np.int64))

    random_state = int(rng.integers(2**31 - 1)) if rng is not None else seed
    fit = spherical_kmeans(x, C, random_state, max_iter=max_iter)
    weights = np.bincount(fit.labels, minlength=C).astype(np.int64)
    return CentroidSet(page_id=page_id, centroids=fit.centroids, weights=weights)


# ==============================================================================
# CENTROID ANN INDEX
# ==============================================================================

class CentroidAnnIndex:
    """
    faiss IVF-Flat inner-product index over every page centroid.

    Entries are grouped into `nlist` lists by a spherical k-means quantizer;
    a search visits the `nprobe` best lists. With exact_flat_mode the search
    is a brute-force scan and results equal exhaustive search.
    """

    def __init__(
        self,
        entries: np.ndarray,
        entry_page: np.ndarray,
        ivf: faiss.IndexIVF,
        nprobe: Optional[int] = None,
        exact_flat_mode: bool = False,
    ):
        if ivf.ntotal != entries.shape[0] or ivf.d != entries.shape[1]:
            raise ValueError(
                f"IVF index holds {ivf.ntotal} x {ivf.d}, entries are {entries.shape[0]} x {entries.shape[1]}"
            )
        self.entries = np.ascontiguousarray(entries, dtype=np.float32)
        self.entry_page = entry_page.astype(np.int64)
        self.ivf = ivf
        self.nprobe = int(nprobe if nprobe is not None else ivf.nprobe)
        self.exact_flat_mode = exact_flat_mode

    @property
    def num_entries(self) -> int:
        return int(self.entries.shape[0])

    @property
    def nlist(self) -> int:
        return int(self.ivf.nlist)

    def with_mode(self, exact_flat_mode: bool, nprobe: Optional[int] = None) -> "CentroidAnnIndex":
        """Same structure, different search mode (the faiss index is shared, not copied)"""
        clone = object.__new__(CentroidAnnIndex)
        clone.__dict__.update(self.__dict__)
        clone.exact_flat_mode = exact_flat_mode
        if nprobe is not None:
            clone.nprobe = nprobe
        return clone

    def to_bytes(self) -> bytes:
        return faiss.serialize_index(self.ivf).tobytes()

    def search(self, queries: np.ndarray, k: int) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """
        Top-k entries by inner product for each query row.

        Returns:
            (similarities per query, entry ids per query), each sorted best first
            with ties broken by lower entry id
        """
        queries = np.ascontiguousarray(queries, dtype=np.float32)
        k = min(k, self.num_entries)
        if k < 1 or queries.shape[0] == 0:
            empty = [np.empty(0, dtype=np.int64) for _ in range(queries.shape[0])]
            return [e.astype(np.float32) for e in empty], empty

        if self.exact_flat_mode:
            sims, ids = faiss.knn(queries, self.entries, k, metric=faiss.METRIC_INNER_PRODUCT)
        else:
            params = faiss.SearchParametersIVF()
            params.nprobe = min(self.nprobe, self.nlist)
            sims, ids = self.ivf.search(queries, k, params=params)

        out_sims: List[np.ndarray] = []
        out_ids: List[np.ndarray] = []
        for s, i in zip(sims, ids):
            keep = i >= 0
            s, i = s[keep], i[keep].astype(np.int64)
            order = np.lexsort((i, -s.astype(np.float64)))
            out_sims.append(s[order])
            out_ids.append(i[order])
        return out_sims, out_ids


def default_nlist(num_entries: int) -> int:
    return max(1, int(round(math.sqrt(num_entries))))


def measure_recall(ann: CentroidAnnIndex, queries: np.ndarray, k: int = RECALL_K) -> float:
    """Mean fraction of the exact top-k entries the approximate search returns"""
    _, approx = ann.search(queries, k)
    _, exact = ann.with_mode(True).search(queries, k)
    hits = [len(set(a.tolist()) & set(e.tolist())) / max(len(e), 1) for a, e in zip(approx, exact)]
    return float(np.mean(hits)) if hits else 1.0


def calibrate_nprobe(ann: CentroidAnnIndex, target_recall: float, seed: int) -> Tuple[int, float]:
    """
    Double nprobe from its current value until recall@10 on random unit
    queries reaches target_recall (or every list is probed).

    Returns:
        (chosen nprobe, recall measured at it)
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0]))
    queries = normalize_rows(rng.standard_normal((RECALL_PROBES, ann.entries.shape[1])).astype(np.float32))
    nprobe = max(1, min(ann.nprobe, ann.nlist))
    while True:
        recall = measure_recall(ann.with_mode(False, nprobe), queries)
        if recall >= target_recall or nprobe >= ann.nlist:
            return nprobe, recall
        nprobe = min(2 * nprobe, ann.nlist)


def train_ann(
    entries: np.ndarray,
    entry_page: np.ndarray,
    nlist: int,
    nprobe: int,
    seed: int,
    exact_flat_mode: bool = False,
    target_recall: Optional[float] = None,
    train_iter: int = 10,
    points_per_list: int = 64,
) -> CentroidAnnIndex:
    """
    Train the inverted-file quantizer on a sample of entries and add every entry.

    Args:
        entries: n x d unit centroids
        entry_page: Page position per entry
        nlist: Number of inverted lists (clamped to n)
        nprobe: Lists visited per search (starting point when calibrating)
        seed: Sampling and clustering seed
        exact_flat_mode: Search mode of the returned index
        target_recall: Raise nprobe until recall@10 reaches this (None = keep nprobe)
        train_iter: Quantizer k-means iterations
        points_per_list: Training sample size per list

    Returns:
        CentroidAnnIndex over all entries
    """
    entries = np.ascontiguousarray(entries, dtype=np.float32)
    n, d = entries.shape
    nlist = max(1, min(nlist, n))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    sample_size = min(n, nlist * points_per_list)
    sample = entries[np.sort(rng.choice(n, size=sample_size, replace=False))] if sample_size < n else entries

    if nlist == 1:
        list_centroids = entries[:1].copy()
    else:
        list_centroids = spherical_kmeans(sample, nlist, int(rng.integers(2**31 - 1)), max_iter=train_iter).centroids

    quantizer = faiss.IndexFlatIP(d)
    quantizer.add(np.ascontiguousarray(list_centroids, dtype=np.float32))
    ivf = faiss.IndexIVFFlat(quantizer, d, nlist, faiss.METRIC_INNER_PRODUCT)
    ivf.train(sample)  # quantizer already holds nlist centroids, so this only marks it trained
    ivf.add(entries)
    ivf.nprobe = max(1, min(nprobe, nlist))

    ann = CentroidAnnIndex(entries, entry_page, ivf, exact_flat_mode=exact_flat_mode)

    if target_recall is not None:
        chosen, recall = calibrate_nprobe(ann, target_recall, seed)
        ivf.nprobe = chosen
        ann.nprobe = chosen
        logger.info(f"ANN nprobe {chosen}/{nlist}: recall@{RECALL_K} {recall:.3f} (target {target_recall:.2f})")
    return ann


# ==============================================================================
# PAGE INDEX
# ==============================================================================

@dataclass
class PageIndex:
    """Everything stage 1 needs: pages, their centroids, and the centroid ANN"""

    pages: List[PageRecord]
    centroid_sets: List[CentroidSet]
    ann: CentroidAnnIndex
    config: PipelineConfig
    projection: Optional[ProjectionModel] = None
    _position: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._position = {page.page_id: i for i, page in enumerate(self.pages)}
        self._page_ids = [page.page_id for page in self.pages]
        # ANN entries are stored page after page
        counts = np.array([cs.count for cs in self.centroid_sets], dtype=np.int64)
        self._entry_offsets = np.concatenate([[0], np.cumsum(counts)])

    @property
    def num_pages(self) -> int:
        return len(self.pages)

    @property
    def num_patches(self) -> int:
        return int(sum(page.n_patches for page in self.pages))

    @property
    def dim(self) -> int:
        return self.pages[0].dim

    def position(self, page_id: str) -> int:
        return self._position[page_id]

    def page(self, page_id: str) -> PageRecord:
        return self.pages[self._position[page_id]]

    def page_ids(self) -> List[str]:
        return self._page_ids

    def entry_offsets(self) -> np.ndarray:
        """Entry range of page i is [offsets[i], offsets[i + 1])"""
        return self._entry_offsets


def build_centroid_index(
    corpus: Sequence[PageRecord],
    cfg: PipelineConfig,
    seed: Optional[int] = None,
    projection: Optional[ProjectionModel] = None,
) -> PageIndex:
    """
    Build per-page centroids and the centroid ANN.

    Pages are clustered independently on a thread pool; each page draws from
    its own generator derived from (seed, page position), so the result does
    not depend on scheduling.

    Args:
        corpus: Pages (unit-norm patches, d = cfg.embed_dim)
        cfg: Pipeline config (C, ANN parameters, workers)
        seed: Build seed (defaults to cfg.seed)
        projection: Projection used to produce the patches, kept for persistence

    Returns:
        PageIndex ready for stage1_search
    """
    if not corpus:
        raise ValueError("build_centroid_index: empty corpus")
    seed = cfg.seed if seed is None else seed
    pages = list(corpus)

    def _build(i: int) -> CentroidSet:
        page = pages[i]
        return build_page_centroids(
            page.patches,
            cfg.centroids_per_page,
            page_id=page.page_id,
            max_iter=cfg.kmeans_iterations,
            rng=page_seed(seed, i),
        )

    start = time.perf_counter()
    if cfg.workers > 1 and len(pages) > 64:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            centroid_sets = list(pool.map(_build, range(len(pages))))
    else:
        centroid_sets = [_build(i) for i in range(len(pages))]

    entries = np.ascontiguousarray(np.vstack([cs.centroids for cs in centroid_sets]), dtype=np.float32)
    entry_page = np.concatenate(
        [np.full(cs.count, i, dtype=np.int64) for i, cs in enumerate(centroid_sets)]
    )
    nlist = cfg.ann_nlist or default_nlist(entries.shape[0])
    ann = train_ann(
        entries, entry_page, nlist, cfg.ann_nprobe, seed,
        exact_flat_mode=cfg.exact_flat, target_recall=cfg.ann_target_recall,
    )

    logger.info(
        f"Built centroid index: {len(pages)} pages, {entries.shape[0]} centroids, "
        f"{ann.nlist} lists (nprobe {ann.nprobe}) in {time.perf_counter() - start:.2f}s"
    )
    return PageIndex(
        pages=pages,
        centroid_sets=centroid_sets,
        ann=ann,
        config=cfg,
        projection=projection,
    )


# ==============================================================================
# ONLINE SEARCH
# ==============================================================================

@dataclass(frozen=True)
class CoarseCandidate:
    page_id: str
    coarse_score: float


@dataclass
class Stage1Timings:
    """Stage-1 rows of the latency table, in milliseconds"""

    ann_ms: float = 0.0
    coarse_ms: float = 0.0
    fine_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.ann_ms + self.coarse_ms + self.fine_ms

    def to_dict(self) -> Dict[str, float]:
        return {
            "ann_search_ms": round(self.ann_ms, 3),
            "coarse_ranking_ms": round(self.coarse_ms, 3),
            "fine_scoring_ms": round(self.fine_ms, 3),
            "total_ms": round(self.total_ms, 3),
        }


@dataclass
class Stage1Result:
    results: List[RankedPage]
    timings: Stage1Timings
    shortlist_size: int
    evidence_pages: int
    fine_dot_products: int
    shortlist: List[str] = field(default_factory=list, repr=False)


def _coarse_scores(
    q: np.ndarray,
    index: PageIndex,
    probe_k: int,
    ann: CentroidAnnIndex,
) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """Per-page coarse scores for pages with evidence: (positions, scores, ann_ms, aggregate_ms)"""
    t0 = time.perf_counter()
    sims_per_token, ids_per_token = ann.search(q, probe_k)
    t1 = time.perf_counter()
    positions, scores = _aggregate(sims_per_token, ids_per_token, ann.entry_page, index.num_pages)
    return positions, scores, (t1 - t0) * 1000, (time.perf_counter() - t1) * 1000


def _aggregate(
    sims_per_token: List[np.ndarray],
    ids_per_token: List[np.ndarray],
    entry_page: np.ndarray,
    num_pages: int,
) -> Tuple[np.ndarray, np.ndarray]:
    empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    if not ids_per_token:
        return empty
    keys_arr = np.concatenate(
        [token * num_pages + entry_page[ids] for token, ids in enumerate(ids_per_token)]
    )
    vals_arr = np.concatenate([sims.astype(np.float64) for sims in sims_per_token])
    if keys_arr.size == 0:
        return empty

    # max over a page's centroids per token, then sum over tokens
    order = np.argsort(keys_arr, kind="stable")
    keys_sorted = keys_arr[order]
    starts = np.flatnonzero(np.r_[True, keys_sorted[1:] != keys_sorted[:-1]])
    best = np.maximum.reduceat(vals_arr[order], starts)
    pages = keys_sorted[starts] % num_pages
    totals = np.bincount(pages, weights=best, minlength=num_pages)
    seen = np.zeros(num_pages, dtype=bool)
    seen[pages] = True
    positions = np.flatnonzero(seen)
    return positions, totals[positions]


def centroid_maxsim(q: np.ndarray, index: PageIndex, block_entries: int = 1 << 18) -> np.ndarray:
    """
    Late-interaction score of the query against every page's centroids.

    Σ over tokens of the best similarity among all of the page's centroids,
    computed in blocks of whole pages.

    Returns:
        One float64 score per page position
    """
    q = np.asarray(q, dtype=np.float32)
    offsets = index.entry_offsets()
    entries = index.ann.entries
    totals = np.empty(index.num_pages, dtype=np.float64)
    page = 0
    while page < index.num_pages:
        end = int(np.searchsorted(offsets, offsets[page] + block_entries, side="right")) - 1
        end = min(max(end, page + 1), index.num_pages)
        lo, hi = offsets[page], offsets[end]
        sims = q @ entries[lo:hi].T
        best = np.maximum.reduceat(sims, offsets[page:end] - lo, axis=1)
        totals[page:end] = best.sum(axis=0, dtype=np.float64)
        page = end
    return totals


def coarse_candidates(
    q: QueryTokens,
    index: PageIndex,
    R: int,
    probe_k: int,
    ann: Optional[CentroidAnnIndex] = None,
) -> List[CoarseCandidate]:
    """
    Coarse shortlist from the centroid index.

    For each query token the top-probe_k centroids are retrieved; a page scores
    Σ over tokens of its best centroid similarity seen for that token (0 when
    unseen). Pages never seen by any token are not returned.

    Args:
        q: Query tokens
        index: Built page index
        R: Shortlist length
        probe_k: Centroid neighbours per token
        ann: Override search structure (e.g. exact flat mode)

    Returns:
        At most R candidates by (coarse_score desc, page_id asc)
    """
    if R < 1:
        raise ValueError(f"coarse_candidates: R must be >= 1, got {R}")
    ann = ann or index.ann
    positions, scores, _, _ = _coarse_scores(q.tokens, index, probe_k, ann)
    ids = [index.pages[p].page_id for p in positions]
    ranked = rank_pages(ids, scores, R)
    return [CoarseCandidate(page_id=r.page_id, coarse_score=r.score) for r in ranked]


def shortlist_positions(
    q: np.ndarray,
    index: PageIndex,
    R: int,
    positions: np.ndarray,
    scores: np.ndarray,
) -> List[int]:
    """
    Page positions to rescore exactly.

    Pages with coarse evidence come first, by coarse score. When they number
    fewer than R the rest is filled from the remaining pages ranked by their
    full centroid MaxSim. The order does not depend on R, so a larger R only
    ever appends pages.
    """
    ids = [index.pages[p].page_id for p in positions]
    shortlist = [index.position(r.page_id) for r in rank_pages(ids, scores, R)]
    if len(shortlist) >= R:
        return shortlist

    full = centroid_maxsim(q, index)
    full[np.asarray(positions, dtype=np.int64)] = -np.inf
    rest = rank_pages(index.page_ids(), full, R - len(shortlist))
    shortlist.extend(index.position(r.page_id) for r in rest)
    return shortlist


def stage1_search(
    q: QueryTokens,
    index: PageIndex,
    cfg: Optional[PipelineConfig] = None,
    exact_flat: Optional[bool] = None,
) -> Stage1Result:
    """
    Coarse-to-fine stage-1 retrieval.

    The shortlist is the top-R pages by coarse score, completed by centroid
    MaxSim when fewer than R pages have coarse evidence. Only the shortlist is
    scored exactly.

    Args:
        q: Query tokens (same d as the index)
        index: Built page index
        cfg: Config (R, N1, probe_k); defaults to the index's config
        exact_flat: Force exhaustive centroid search

    Returns:
        Stage1Result with top-N1 pages, per-stage timings and work counters
    """
    cfg = cfg or index.config
    if q.dim != index.dim:
        raise ValueError(f"query d={q.dim} does not match index d={index.dim}")
    flat = cfg.exact_flat if exact_flat is None else exact_flat
    ann = index.ann if flat == index.ann.exact_flat_mode else index.ann.with_mode(flat)
    R = min(cfg.shortlist_r, index.num_pages)

    positions, scores, ann_ms, aggregate_ms = _coarse_scores(q.tokens, index, cfg.probe_k, ann)

    t0 = time.perf_counter()
    shortlist = shortlist_positions(q.tokens, index, R, positions, scores)
    coarse_ms = aggregate_ms + (time.perf_counter() - t0) * 1000

    t0 = time.perf_counter()
    fine_scores, dot_products = score_matrices(
        q.tokens, [index.pages[p].patches for p in shortlist], workers=cfg.workers
    )
    shortlist_ids = [index.pages[p].page_id for p in shortlist]
    results = rank_pages(shortlist_ids, fine_scores, cfg.stage1_cutoff)
    fine_ms = (time.perf_counter() - t0) * 1000

    timings = Stage1Timings(ann_ms=ann_ms, coarse_ms=coarse_ms, fine_ms=fine_ms)
    logger.debug(
        f"Stage 1: {len(positions)} pages with evidence, shortlist {len(shortlist)}, "
        f"{dot_products} dot products, {timings.total_ms:.1f}ms"
    )
    return Stage1Result(
        results=results,
        timings=timings,
        shortlist_size=len(shortlist),
        evidence_pages=len(positions),
        fine_dot_products=dot_products,
        shortlist=shortlist_ids,
    )
