"""
Two-way late-interaction scoring tests

Checks the vectorized kernel against a plain nested-loop implementation and
the hand-computed examples.
"""

import numpy as np
import pytest

from conftest import make_page, make_query, unit_rows
from src.scoring import exact_top_k, score_matrices, two_way_score


def nested_loop_score(q: np.ndarray, p: np.ndarray) -> float:
    q = q.astype(np.float64)
    p = p.astype(np.float64)
    q2p = sum(max(float(qi @ vj) for vj in p) for qi in q) / len(q)
    p2q = sum(max(float(qi @ vj) for qi in q) for vj in p) / len(p)
    return q2p + p2q


# ==============================================================================
# HAND-COMPUTED EXAMPLES
# ==============================================================================

def test_identical_single_vectors_score_two():
    e1 = np.array([[1.0, 0.0]], dtype=np.float32)
    assert two_way_score(e1, e1).total == pytest.approx(2.0)


def test_orthogonal_single_vectors_score_zero():
    e1 = np.array([[1.0, 0.0]], dtype=np.float32)
    e2 = np.array([[0.0, 1.0]], dtype=np.float32)
    assert two_way_score(e1, e2).total == pytest.approx(0.0)


def test_unmatched_page_patch_costs_half():
    q = np.array([[1.0, 0.0]], dtype=np.float32)
    p = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    breakdown = two_way_score(q, p)
    assert breakdown.query_to_page == pytest.approx(1.0)
    assert breakdown.page_to_query == pytest.approx(0.5)
    assert breakdown.total == pytest.approx(1.5)


def test_dimension_mismatch_is_rejected():
    with pytest.raises(ValueError, match="dimension mismatch"):
        two_way_score(np.ones((1, 3), dtype=np.float32), np.ones((1, 4), dtype=np.float32))


def test_empty_matrix_is_rejected():
    with pytest.raises(ValueError):
        two_way_score(np.zeros((0, 4), dtype=np.float32), np.ones((1, 4), dtype=np.float32))


# ==============================================================================
# PROPERTIES
# ==============================================================================

@pytest.mark.parametrize("m,n,d", [(1, 1, 8), (4, 17, 16), (16, 103, 32)], ids=lambda v: str(v))
def test_matches_nested_loop(rng, m, n, d):
    q = unit_rows(rng, m, d)
    p = unit_rows(rng, n, d)
    assert two_way_score(q, p).total == pytest.approx(nested_loop_score(q, p), abs=1e-5)


def test_score_is_bounded(rng):
    for _ in range(20):
        q = unit_rows(rng, 5, 8)
        p = unit_rows(rng, 9, 8)
        assert -2.0 - 1e-5 <= two_way_score(q, p).total <= 2.0 + 1e-5


def test_permutation_invariance(rng):
    q = unit_rows(rng, 6, 16)
    p = unit_rows(rng, 11, 16)
    base = two_way_score(q, p).total
    shuffled = two_way_score(q[rng.permutation(6)], p[rng.permutation(11)]).total
    assert shuffled == pytest.approx(base, abs=1e-6)


def test_duplicating_a_patch_keeps_query_term(rng):
    """Copying a patch leaves q->p unchanged but reweights the p->q mean"""
    q = unit_rows(rng, 4, 16)
    p = unit_rows(rng, 5, 16)
    doubled = np.vstack([p, p[:1]])
    before = two_way_score(q, p)
    after = two_way_score(q, doubled)
    assert after.query_to_page == pytest.approx(before.query_to_page, abs=1e-6)
    expected = (before.page_to_query * 5 + float(np.max(q @ p[0]))) / 6
    assert after.page_to_query == pytest.approx(expected, abs=1e-5)


def test_score_matrices_counts_dot_products(rng):
    q = unit_rows(rng, 3, 8)
    pages = [unit_rows(rng, n, 8) for n in (2, 5, 7)]
    scores, dots = score_matrices(q, pages)
    assert dots == 3 * (2 + 5 + 7)
    for s, p in zip(scores, pages):
        assert s == pytest.approx(nested_loop_score(q, p), abs=1e-5)


def test_score_matrices_threads_do_not_change_scores(rng):
    q = unit_rows(rng, 4, 8)
    pages = [unit_rows(rng, 3, 8) for _ in range(1500)]
    serial, _ = score_matrices(q, pages, workers=1)
    threaded, _ = score_matrices(q, pages, workers=4)
    assert np.array_equal(serial, threaded)


# ==============================================================================
# EXACT TOP-K
# ==============================================================================

def test_exact_top_k_orders_by_score_then_page_id(rng):
    q = make_query(np.array([[1.0, 0.0, 0.0]]))
    corpus = [
        make_page("p3", np.array([[1.0, 0.0, 0.0]])),
        make_page("p1", np.array([[0.0, 1.0, 0.0]])),
        make_page("p2", np.array([[1.0, 0.0, 0.0]])),
    ]
    results = exact_top_k(q, corpus, k=3)
    assert [r.page_id for r in results] == ["p2", "p3", "p1"]
    assert [r.rank for r in results] == [1, 2, 3]
    assert results[0].score == pytest.approx(2.0)


def test_exact_top_k_rejects_bad_arguments(rng):
    q = make_query(unit_rows(rng, 2, 4))
    with pytest.raises(ValueError):
        exact_top_k(q, [], k=1)
    with pytest.raises(ValueError):
        exact_top_k(q, [make_page("p", unit_rows(rng, 2, 4))], k=0)


def test_exact_top_k_caps_at_corpus_size(rng):
    q = make_query(unit_rows(rng, 2, 4))
    corpus = [make_page(f"p{i}", unit_rows(rng, 3, 4)) for i in range(5)]
    assert len(exact_top_k(q, corpus, k=50)) == 5


def test_exact_top_k_matches_full_sort(rng):
    q = make_query(unit_rows(rng, 8, 16))
    corpus = [make_page(f"p{i:04d}", unit_rows(rng, int(rng.integers(1, 40)), 16)) for i in range(500)]
    everything = sorted(
        ((nested_loop_score(q.tokens, page.patches), page.page_id) for page in corpus),
        key=lambda t: (-t[0], t[1]),
    )
    results = exact_top_k(q, corpus, k=20)
    assert [r.page_id for r in results] == [pid for _, pid in everything[:20]]
    assert [r.score for r in results] == pytest.approx([s for s, _ in everything[:20]], abs=1e-5)


@pytest.mark.slow
def test_matches_row_by_row_reference_on_random_pairs(rng):
    for _ in range(1000):
        m, n = int(rng.integers(1, 33)), int(rng.integers(1, 129))
        d = int(rng.choice([16, 128]))
        q, p = unit_rows(rng, m, d), unit_rows(rng, n, d)
        q64, p64 = q.astype(np.float64), p.astype(np.float64)
        q2p = sum(float(np.max(p64 @ qi)) for qi in q64) / m
        p2q = sum(float(np.max(q64 @ vj)) for vj in p64) / n
        assert two_way_score(q, p).total == pytest.approx(q2p + p2q, abs=1e-5)
