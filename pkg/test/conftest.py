"""
Shared fixtures: a small config and a seeded synthetic corpus small enough
for every test module to build an index in well under a second.
"""

import numpy as np
import pytest

from src.coarse_index import build_centroid_index
from src.core_types import PageRecord, QueryTokens, normalize_rows
from src.corpus_ingest import SyntheticCorpusSpec, generate_synthetic_corpus
from src.pipeline_config import PipelineConfig


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return normalize_rows(rng.standard_normal((n, d), dtype=np.float32))


def make_page(page_id: str, patches: np.ndarray, summary: str = "", article_id: str = "a0") -> PageRecord:
    return PageRecord(page_id=page_id, article_id=article_id, patches=normalize_rows(patches), summary=summary)


def make_query(tokens: np.ndarray, query_id: str = "q") -> QueryTokens:
    return QueryTokens(tokens=normalize_rows(tokens), query_id=query_id)


# ==============================================================================
# FIXTURES
# ==============================================================================

@pytest.fixture(scope="session")
def small_cfg() -> PipelineConfig:
    """N1 covers the whole test corpus so every page is scored exactly"""
    return PipelineConfig(
        embed_dim=32,
        source_dim=32,
        centroids_per_page=4,
        stage1_cutoff=200,
        shortlist_r=200,
        probe_k=16,
        ann_nprobe=8,
        stage2_cutoff=8,
        shard_size=32,
        map_target_k=4,
        max_inflight_maps=4,
        retry_backoff_s=0.0,
        workers=2,
    )


@pytest.fixture(scope="session")
def synthetic_spec() -> SyntheticCorpusSpec:
    return SyntheticCorpusSpec(
        num_pages=200,
        mean_patches=12,
        dim=32,
        num_queries=8,
        tokens_per_query=8,
        num_topics=4,
        pages_per_article=5,
        datasets=["mcq", "triage"],
    )


@pytest.fixture(scope="session")
def synthetic(synthetic_spec):
    return generate_synthetic_corpus(synthetic_spec, seed=7)


@pytest.fixture(scope="session")
def small_index(synthetic, small_cfg):
    return build_centroid_index(synthetic.corpus.to_records(), small_cfg, seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
