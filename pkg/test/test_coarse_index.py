"""
Coarse-to-fine stage-1 tests

The exhaustive oracle is exact_top_k over the same pages; with R = N and an
exact flat centroid scan the coarse-to-fine path must reproduce it exactly.
"""

import numpy as np
import pytest

from sklearn.cluster import kmeans_plusplus

from conftest import make_page, make_query, unit_rows
from src.coarse_index import (
    build_centroid_index,
    build_page_centroids,
    coarse_candidates,
    measure_recall,
    spherical_kmeans,
    stage1_search,
)
from src.core_types import normalize_rows
from src.corpus_ingest import SyntheticCorpusSpec, generate_synthetic_corpus
from src.pipeline_config import PipelineConfig
from src.scoring import exact_top_k


def cfg_for(n_pages: int, **overrides) -> PipelineConfig:
    base = dict(
        embed_dim=16,
        source_dim=16,
        centroids_per_page=4,
        stage1_cutoff=min(20, n_pages),
        shortlist_r=max(min(20, n_pages), overrides.pop("shortlist_r", n_pages)),
        stage2_cutoff=min(5, n_pages),
        shard_size=8,
        map_target_k=4,
        probe_k=8,
        workers=1,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def random_corpus():
    rng = np.random.default_rng(99)
    return [make_page(f"p{i:04d}", unit_rows(rng, int(rng.integers(3, 20)), 16)) for i in range(120)]


# ==============================================================================
# PER-PAGE CENTROIDS
# ==============================================================================

def test_small_page_keeps_its_patches(rng):
    patches = unit_rows(rng, 3, 8)
    cs = build_page_centroids(patches, C=8)
    assert cs.count == 3
    assert np.array_equal(cs.centroids, patches)
    assert cs.weights.tolist() == [1, 1, 1]


def test_large_page_gets_c_unit_centroids(rng):
    cs = build_page_centroids(unit_rows(rng, 40, 8), C=8, seed=1)
    assert cs.count == 8
    assert np.allclose(np.linalg.norm(cs.centroids, axis=1), 1.0, atol=1e-5)
    assert int(cs.weights.sum()) == 40
    assert np.all(cs.weights >= 1)


def test_centroids_are_deterministic(rng):
    patches = unit_rows(rng, 50, 8)
    a = build_page_centroids(patches, C=6, seed=5)
    b = build_page_centroids(patches, C=6, seed=5)
    assert np.array_equal(a.centroids, b.centroids)


# ==============================================================================
# STAGE 1
# ==============================================================================

def test_self_retrieval(random_corpus):
    """A page's own patches used as the query rank that page first"""
    cfg = cfg_for(len(random_corpus), shortlist_r=40, centroids_per_page=32, exact_flat=True)
    index = build_centroid_index(random_corpus, cfg, seed=3)
    for page in random_corpus[:10]:
        result = stage1_search(make_query(page.patches, page.page_id), index, cfg)
        assert result.results[0].page_id == page.page_id
        assert result.results[0].score == pytest.approx(2.0, abs=1e-4)


def test_exhaustive_identity(random_corpus, rng):
    """R = N with an exact flat scan equals exact_top_k in ids, order and score"""
    cfg = cfg_for(len(random_corpus), exact_flat=True)
    index = build_centroid_index(random_corpus, cfg, seed=3)
    for _ in range(5):
        q = make_query(unit_rows(rng, 6, 16))
        got = stage1_search(q, index, cfg).results
        want = exact_top_k(q, index.pages, cfg.stage1_cutoff)
        assert [r.page_id for r in got] == [r.page_id for r in want]
        assert [r.score for r in got] == [r.score for r in want]


def test_scarce_evidence_is_completed_by_centroid_maxsim(random_corpus, rng):
    cfg = cfg_for(len(random_corpus), probe_k=1, shortlist_r=30, exact_flat=True)
    index = build_centroid_index(random_corpus, cfg, seed=3)
    q = make_query(unit_rows(rng, 2, 16))
    result = stage1_search(q, index, cfg)

    evidence = [c.page_id for c in coarse_candidates(q, index, R=30, probe_k=1, ann=index.ann.with_mode(True))]
    assert result.evidence_pages == len(evidence) <= 2
    assert result.shortlist_size == 30
    assert result.shortlist[: len(evidence)] == evidence

    def full_maxsim(page_id):
        cs = index.centroid_sets[index.position(page_id)]
        return float((q.tokens @ cs.centroids.T).max(axis=1).sum(dtype=np.float64))

    rest = [(full_maxsim(p.page_id), p.page_id) for p in random_corpus if p.page_id not in evidence]
    rest.sort(key=lambda t: (-t[0], t[1]))
    filled = result.shortlist[len(evidence):]
    cutoff = rest[len(filled) - 1][0]
    assert all(full_maxsim(pid) >= cutoff - 1e-5 for pid in filled)
    scores = [full_maxsim(pid) for pid in filled]
    assert all(a >= b - 1e-5 for a, b in zip(scores, scores[1:]))


def test_fine_work_is_linear_in_r(random_corpus, rng):
    cfg = cfg_for(len(random_corpus))
    index = build_centroid_index(random_corpus, cfg, seed=3)
    q = make_query(unit_rows(rng, 4, 16))
    n_min = min(p.n_patches for p in random_corpus)
    n_max = max(p.n_patches for p in random_corpus)
    counts = []
    for r in (20, 40, 80):
        result = stage1_search(q, index, cfg_for(len(random_corpus), shortlist_r=r))
        assert result.shortlist_size == r
        assert q.m * r * n_min <= result.fine_dot_products <= q.m * r * n_max
        counts.append(result.fine_dot_products)
    assert counts[0] < counts[1] < counts[2]


def test_shortlists_are_nested_in_r(random_corpus, rng):
    cfg = cfg_for(len(random_corpus), probe_k=2)
    index = build_centroid_index(random_corpus, cfg, seed=3)
    q = make_query(unit_rows(rng, 5, 16))
    shortlists = [
        stage1_search(q, index, cfg_for(len(random_corpus), probe_k=2, shortlist_r=r)).shortlist
        for r in (20, 40, 80, 120)
    ]
    for shorter, longer in zip(shortlists, shortlists[1:]):
        assert longer[: len(shorter)] == shorter


def test_overlap_with_exact_is_monotone_in_r(random_corpus, rng):
    cfg = cfg_for(len(random_corpus), probe_k=2)
    index = build_centroid_index(random_corpus, cfg, seed=3)
    for _ in range(20):
        q = make_query(unit_rows(rng, 5, 16))
        want = {r.page_id for r in exact_top_k(q, index.pages, cfg.stage1_cutoff)}
        overlaps = []
        for r in (20, 30, 60, 120):
            run_cfg = cfg_for(len(random_corpus), probe_k=2, shortlist_r=r)
            got = {res.page_id for res in stage1_search(q, index, run_cfg).results}
            overlaps.append(len(got & want))
        assert overlaps == sorted(overlaps)
        assert overlaps[-1] == len(want)


def test_query_dimension_mismatch(random_corpus, rng):
    cfg = cfg_for(len(random_corpus))
    index = build_centroid_index(random_corpus, cfg, seed=3)
    with pytest.raises(ValueError, match="does not match index"):
        stage1_search(make_query(unit_rows(rng, 2, 8)), index, cfg)


def test_build_is_deterministic(random_corpus):
    cfg = cfg_for(len(random_corpus))
    a = build_centroid_index(random_corpus, cfg, seed=11)
    b = build_centroid_index(random_corpus, cfg.model_copy(update={"workers": 4}), seed=11)
    assert np.array_equal(a.ann.entries, b.ann.entries)
    assert a.ann.nprobe == b.ann.nprobe
    assert a.ann.to_bytes() == b.ann.to_bytes()


# ==============================================================================
# COARSE AGGREGATION
# ==============================================================================

def test_coarse_score_sums_best_centroid_per_token():
    e = np.eye(4, dtype=np.float32)
    corpus = [
        make_page("pa", np.vstack([e[0], e[1]])),
        make_page("pb", np.vstack([e[0], 0.6 * e[1] + 0.8 * e[2]])),
        make_page("pc", np.vstack([e[3]])),
    ]
    cfg = PipelineConfig(
        embed_dim=4, source_dim=4, centroids_per_page=8, stage1_cutoff=3, shortlist_r=3,
        stage2_cutoff=1, shard_size=4, map_target_k=1, probe_k=5, exact_flat=True, workers=1,
    )
    index = build_centroid_index(corpus, cfg, seed=0)
    q = make_query(np.vstack([e[0], e[1]]))
    got = {c.page_id: c.coarse_score for c in coarse_candidates(q, index, R=3, probe_k=5, ann=index.ann.with_mode(True))}
    # per token: max over the page's centroids, then summed over tokens
    assert got["pa"] == pytest.approx(2.0, abs=1e-6)
    assert got["pb"] == pytest.approx(1.6, abs=1e-6)
    assert got["pc"] == pytest.approx(0.0, abs=1e-6)


def test_unseen_pages_are_not_coarse_candidates():
    e = np.eye(4, dtype=np.float32)
    corpus = [make_page("pa", e[:1]), make_page("pb", e[1:2]), make_page("pc", e[2:3])]
    cfg = PipelineConfig(
        embed_dim=4, source_dim=4, centroids_per_page=2, stage1_cutoff=3, shortlist_r=3,
        stage2_cutoff=1, shard_size=4, map_target_k=1, probe_k=1, exact_flat=True, workers=1,
    )
    index = build_centroid_index(corpus, cfg, seed=0)
    got = coarse_candidates(make_query(e[:1]), index, R=3, probe_k=1, ann=index.ann.with_mode(True))
    assert [c.page_id for c in got] == ["pa"]


def test_coarse_candidates_rejects_bad_r(random_corpus, rng):
    cfg = cfg_for(len(random_corpus))
    index = build_centroid_index(random_corpus, cfg, seed=3)
    with pytest.raises(ValueError):
        coarse_candidates(make_query(unit_rows(rng, 2, 16)), index, R=0, probe_k=4)


# ==============================================================================
# K-MEANS
# ==============================================================================

def test_two_separated_clusters_split_exactly(rng):
    e1 = np.zeros(8, dtype=np.float32)
    e1[0] = 1.0
    x = normalize_rows(np.vstack([
        e1 + 0.05 * rng.standard_normal((50, 8)),
        -e1 + 0.05 * rng.standard_normal((50, 8)),
    ]).astype(np.float32))
    fit = spherical_kmeans(x, 2, random_state=0)
    assert len(set(fit.labels[:50].tolist())) == 1
    assert len(set(fit.labels[50:].tolist())) == 1
    assert fit.labels[0] != fit.labels[50]
    assert sorted(np.abs(fit.centroids @ e1).tolist()) == pytest.approx([1.0, 1.0], abs=0.01)

    cs = build_page_centroids(x, C=2, seed=0)
    assert cs.weights.tolist() == [50, 50]


def lloyd_inertia(x: np.ndarray, init: np.ndarray, max_iter: int) -> float:
    """Plain Euclidean Lloyd iterations from fixed seeds"""
    x = x.astype(np.float64)
    centers = init.astype(np.float64)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        updated = np.array([
            x[labels == c].mean(axis=0) if np.any(labels == c) else centers[c] for c in range(len(centers))
        ])
        if np.allclose(updated, centers):
            break
        centers = updated
    dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(dist.min(axis=1).sum())


def test_inertia_matches_plain_lloyd_from_same_seeds(rng):
    x = unit_rows(rng, 103, 16)
    seeds, _ = kmeans_plusplus(x, n_clusters=8, random_state=7)
    fit = spherical_kmeans(x, 8, random_state=7, max_iter=25)
    assert fit.inertia <= lloyd_inertia(x, seeds, 25) * (1 + 1e-3)


def test_calibrated_nprobe_reaches_recall_target(small_index, rng):
    ann = small_index.ann
    assert 1 <= ann.nprobe <= ann.nlist
    queries = unit_rows(rng, 100, small_index.dim)
    assert measure_recall(ann, queries) >= 0.85
    assert measure_recall(ann.with_mode(False, ann.nlist), queries) >= 0.99


# ==============================================================================
# RECALL AT SCALE
# ==============================================================================

@pytest.fixture(scope="module")
def corpus_10k():
    """10K pages of ~103 patches at d=128, 20 queries"""
    synthetic = generate_synthetic_corpus(SyntheticCorpusSpec(num_pages=10_000, num_queries=20), seed=42)
    index = build_centroid_index(synthetic.corpus.to_records(), PipelineConfig(), seed=42)
    return synthetic, index


@pytest.mark.slow
def test_overlap_with_exact_at_10k_pages(corpus_10k):
    synthetic, index = corpus_10k
    cfg = PipelineConfig(workers=1)
    overlaps = []
    for q in synthetic.queries:
        got = {r.page_id for r in stage1_search(q, index, cfg).results}
        want = {r.page_id for r in exact_top_k(q, index.pages, cfg.stage1_cutoff)}
        overlaps.append(len(got & want) / len(want))
    assert np.mean(overlaps) >= 0.90


@pytest.mark.slow
def test_approximate_centroid_recall_at_10k_pages(corpus_10k):
    _, index = corpus_10k
    rng = np.random.default_rng(2024)
    queries = unit_rows(rng, 100, index.dim)
    assert index.ann.num_entries > 50_000
    assert measure_recall(index.ann, queries) >= 0.90
