"""
On-disk corpus and index format tests
"""

import json

import numpy as np
import pytest

from conftest import unit_rows
from src.coarse_index import build_centroid_index, stage1_search
from src.core_types import PageRecord
from src.corpus_ingest import save_synthetic
from src.errors import IndexFormatError
from src.index_store import (
    INDEX_FORMAT,
    load_corpus,
    load_ground_truth,
    load_index,
    load_projection,
    load_queries,
    load_questions,
    save_corpus,
    save_index,
    save_projection,
)
from src.projection import fit_projection


@pytest.fixture
def corpus_dir(tmp_path, synthetic):
    return save_synthetic(tmp_path / "corpus", synthetic)


# ==============================================================================
# CORPUS
# ==============================================================================

def test_corpus_round_trip(corpus_dir, synthetic):
    raw = load_corpus(corpus_dir)
    assert raw.num_pages == synthetic.corpus.num_pages
    assert np.array_equal(raw.vectors, synthetic.corpus.vectors)
    assert [m.page_id for m in raw.metas] == [m.page_id for m in synthetic.corpus.metas]
    assert raw.metas[0].summary == synthetic.corpus.metas[0].summary
    assert raw.extra["seed"] == 7


def test_queries_questions_and_ground_truth_round_trip(corpus_dir, synthetic):
    queries = load_queries(corpus_dir)
    assert [q.query_id for q in queries] == [q.query_id for q in synthetic.queries]
    assert np.array_equal(queries[0].tokens, synthetic.queries[0].tokens)
    assert queries[0].text == synthetic.queries[0].text

    questions = load_questions(corpus_dir / "questions.jsonl")
    assert questions == synthetic.questions
    assert load_ground_truth(corpus_dir / "ground_truth.jsonl") == synthetic.relevance


def test_pages_are_read_only_views(corpus_dir):
    pages = load_corpus(corpus_dir).to_records()
    with pytest.raises(ValueError):
        pages[0].patches[0, 0] = 1.0


def test_truncated_blob_is_rejected(corpus_dir):
    blob = corpus_dir / "patches.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(IndexFormatError):
        load_corpus(corpus_dir)


def test_bad_page_line_reports_line_number(corpus_dir):
    path = corpus_dir / "pages.jsonl"
    lines = path.read_text().splitlines()
    row = json.loads(lines[2])
    row["offset"] += 4
    lines[2] = json.dumps(row)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(IndexFormatError) as exc:
        load_corpus(corpus_dir)
    assert exc.value.line == 3
    assert "pages.jsonl:3" in str(exc.value)


def test_invalid_json_line_reports_line_number(corpus_dir):
    path = corpus_dir / "questions.jsonl"
    lines = path.read_text().splitlines()
    lines[1] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(IndexFormatError) as exc:
        load_questions(path)
    assert exc.value.line == 2


def test_duplicate_page_ids_are_rejected(tmp_path, rng):
    pages = [PageRecord(page_id="dup", article_id="a", patches=unit_rows(rng, 2, 4)) for _ in range(2)]
    save_corpus(tmp_path, pages)
    with pytest.raises(IndexFormatError, match="duplicate page_id"):
        load_corpus(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(IndexFormatError, match="missing file"):
        load_corpus(tmp_path)


# ==============================================================================
# INDEX
# ==============================================================================

def test_index_round_trip_searches_identically(tmp_path, small_index, synthetic, small_cfg):
    save_index(tmp_path / "index", small_index, seed=7)
    loaded = load_index(tmp_path / "index")
    assert loaded.num_pages == small_index.num_pages
    assert loaded.ann.nlist == small_index.ann.nlist
    assert loaded.ann.nprobe == small_index.ann.nprobe
    assert loaded.ann.to_bytes() == small_index.ann.to_bytes()
    for query in synthetic.queries[:3]:
        before = stage1_search(query, small_index, small_cfg).results
        after = stage1_search(query, loaded, small_cfg).results
        assert before == after


def test_manifest_echoes_build_settings(tmp_path, small_index, small_cfg):
    save_index(tmp_path, small_index, dedup_report=[{"dropped_id": "x", "kept_id": "y", "cosine": 0.99}], seed=7)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["format"] == INDEX_FORMAT
    assert manifest["config"] == small_cfg.model_dump()
    assert manifest["seed"] == 7
    assert manifest["num_centroids"] == small_index.ann.num_entries
    assert manifest["dedup"]["dropped"] == 1
    assert (tmp_path / "dedup_report.jsonl").exists()


def test_rebuild_is_byte_identical(tmp_path, synthetic, small_cfg):
    pages = synthetic.corpus.to_records()
    for name in ("a", "b"):
        save_index(tmp_path / name, build_centroid_index(pages, small_cfg, seed=5))
    for filename in ("patches.bin", "centroids.bin", "ann.bin", "pages.jsonl", "manifest.json"):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()


def test_corpus_directory_is_not_an_index(corpus_dir):
    with pytest.raises(IndexFormatError, match="expected format"):
        load_index(corpus_dir)


def test_projection_round_trip(tmp_path, rng):
    model = fit_projection(rng.standard_normal((200, 12)), target_dim=4)
    save_projection(tmp_path / "projection.bin", model)
    loaded = load_projection(tmp_path / "projection.bin")
    assert loaded.source_dim == 12 and loaded.target_dim == 4
    assert np.array_equal(loaded.basis, model.basis)
    assert np.array_equal(loaded.mean, model.mean)


def test_missing_projection_file_is_a_format_error(tmp_path):
    with pytest.raises(IndexFormatError, match="missing projection file"):
        load_projection(tmp_path / "projection.bin")


def test_truncated_projection_file_is_a_format_error(tmp_path):
    (tmp_path / "projection.bin").write_bytes(b"PRJ1\x00")
    with pytest.raises(IndexFormatError, match="not a projection file"):
        load_projection(tmp_path / "projection.bin")


def test_index_with_missing_projection_is_a_format_error(tmp_path, small_index):
    save_index(tmp_path, small_index)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["files"]["projection"] = "projection.bin"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IndexFormatError, match="missing projection file") as err:
        load_index(tmp_path)
    assert err.value.path.endswith("projection.bin")


def test_corrupt_ann_file_is_a_format_error(tmp_path, small_index):
    save_index(tmp_path, small_index)
    (tmp_path / "ann.bin").write_bytes(b"\x00" * 16)
    with pytest.raises(IndexFormatError, match="ann.bin|faiss"):
        load_index(tmp_path)
