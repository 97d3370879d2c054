"""
Index Store - on-disk formats for corpora, indexes, queries and questions

Directory layout (corpus and index share it; the index adds centroid files):
    manifest.json   corpus stats, config echo, blob sizes
    patches.bin     concatenated float32 little-endian row-major patch matrices
    centroids.bin   same layout, c <= C rows per page (index only)
    ann.bin         faiss IVF-Flat index over centroids.bin rows (index only)
    projection.bin  PCA model, when the index was built from wider vectors
    pages.jsonl     one page per line: metadata, summary, byte offset/length

All JSON is written with sorted keys and no timestamps, so rebuilding with the
same inputs and seed gives byte-identical files.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import faiss
import numpy as np
from pydantic import ValidationError

from .coarse_index import CentroidAnnIndex, CentroidSet, PageIndex
from .core_types import PageRecord, QueryTokens, Question, RankedPage
from .errors import IndexFormatError
from .pipeline_config import PipelineConfig
from .projection import ProjectionModel

logger = logging.getLogger("index-store")

F32 = np.dtype("<f4")

CORPUS_FORMAT = "page-corpus/1"
INDEX_FORMAT = "page-index/1"
PROJECTION_MAGIC = b"PRJ1"

PathLike = Union[str, Path]


# ==============================================================================
# LOW-LEVEL HELPERS
# ==============================================================================

def write_json(path: PathLike, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise IndexFormatError("missing file", path=str(path))
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise IndexFormatError(f"invalid JSON: {e.msg}", path=str(path), line=e.lineno) from e


def write_jsonl(path: PathLike, rows: Iterable[Dict[str, Any]]) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def iter_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield (line number, record), skipping blank lines"""
    path = Path(path)
    if not path.exists():
        raise IndexFormatError("missing file", path=str(path))
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise IndexFormatError(f"invalid JSON: {e.msg}", path=str(path), line=lineno) from e


def write_f32_blob(path: PathLike, matrices: Sequence[np.ndarray]) -> List[Tuple[int, int]]:
    """Concatenate matrices as float32 LE; returns (byte offset, byte length) per matrix"""
    spans = []
    offset = 0
    with open(path, "wb") as f:
        for matrix in matrices:
            data = np.ascontiguousarray(matrix, dtype=F32).tobytes()
            f.write(data)
            spans.append((offset, len(data)))
            offset += len(data)
    return spans


def read_f32_blob(path: PathLike, dim: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IndexFormatError("missing blob", path=str(path))
    raw = np.fromfile(path, dtype=F32)
    if raw.size % dim:
        raise IndexFormatError(f"blob size {raw.size} floats is not a multiple of d={dim}", path=str(path))
    matrix = raw.reshape(-1, dim).astype(np.float32, copy=False)
    matrix.setflags(write=False)
    return matrix


# ==============================================================================
# CORPUS
# ==============================================================================

@dataclass(frozen=True)
class PageMeta:
    page_id: str
    article_id: str
    n_patches: int
    summary: str = ""
    image_ref: Optional[str] = None


@dataclass
class RawCorpus:
    """
    Pages as metadata plus one stacked vector matrix.

    Vectors may be wider than d (before projection), so rows are not required
    to be unit norm until to_records() is called.
    """

    metas: List[PageMeta]
    vectors: np.ndarray
    row_offsets: np.ndarray = field(default=None)  # len(metas) + 1
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.row_offsets is None:
            self.row_offsets = np.concatenate(
                [[0], np.cumsum([m.n_patches for m in self.metas])]
            ).astype(np.int64)
        if int(self.row_offsets[-1]) != self.vectors.shape[0]:
            raise IndexFormatError(
                f"page patch counts sum to {int(self.row_offsets[-1])} "
                f"but {self.vectors.shape[0]} vectors are present"
            )

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def num_pages(self) -> int:
        return len(self.metas)

    def page_vectors(self, i: int) -> np.ndarray:
        return self.vectors[self.row_offsets[i]:self.row_offsets[i + 1]]

    def with_vectors(self, vectors: np.ndarray) -> "RawCorpus":
        """Same pages, replaced vectors (e.g. after projection)"""
        return RawCorpus(metas=self.metas, vectors=vectors, row_offsets=self.row_offsets, extra=self.extra)

    def to_records(self) -> List[PageRecord]:
        return [
            PageRecord(
                page_id=meta.page_id,
                article_id=meta.article_id,
                patches=self.page_vectors(i),
                summary=meta.summary,
                image_ref=meta.image_ref,
            )
            for i, meta in enumerate(self.metas)
        ]

    @classmethod
    def from_records(cls, pages: Sequence[PageRecord], extra: Optional[Dict[str, Any]] = None) -> "RawCorpus":
        metas = [
            PageMeta(
                page_id=p.page_id,
                article_id=p.article_id,
                n_patches=p.n_patches,
                summary=p.summary,
                image_ref=p.image_ref,
            )
            for p in pages
        ]
        vectors = np.vstack([p.patches for p in pages]).astype(np.float32)
        return cls(metas=metas, vectors=vectors, extra=dict(extra or {}))


def _page_line(meta: PageMeta, span: Tuple[int, int]) -> Dict[str, Any]:
    return {
        "page_id": meta.page_id,
        "article_id": meta.article_id,
        "summary": meta.summary,
        "image_ref": meta.image_ref,
        "n_patches": meta.n_patches,
        "offset": span[0],
        "length": span[1],
    }


def save_corpus(directory: PathLike, corpus: Union[RawCorpus, Sequence[PageRecord]]) -> Path:
    """Write a corpus directory (manifest.json, patches.bin, pages.jsonl)"""
    raw = corpus if isinstance(corpus, RawCorpus) else RawCorpus.from_records(corpus)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    spans = write_f32_blob(directory / "patches.bin", [raw.page_vectors(i) for i in range(raw.num_pages)])
    write_jsonl(directory / "pages.jsonl", (_page_line(m, s) for m, s in zip(raw.metas, spans)))
    write_json(directory / "manifest.json", {
        "format": CORPUS_FORMAT,
        "dim": raw.dim,
        "num_pages": raw.num_pages,
        "num_patches": int(raw.vectors.shape[0]),
        "files": {"patches": "patches.bin", "pages": "pages.jsonl"},
        **raw.extra,
    })
    logger.info(f"Wrote corpus {directory}: {raw.num_pages} pages, {raw.vectors.shape[0]} patches")
    return directory


def _read_pages(directory: Path, dim: int) -> Tuple[List[PageMeta], List[Dict[str, Any]]]:
    metas: List[PageMeta] = []
    lines: List[Dict[str, Any]] = []
    expected_offset = 0
    pages_path = directory / "pages.jsonl"
    for lineno, row in iter_jsonl(pages_path):
        try:
            meta = PageMeta(
                page_id=str(row["page_id"]),
                article_id=str(row.get("article_id", "")),
                n_patches=int(row["n_patches"]),
                summary=row.get("summary") or "",
                image_ref=row.get("image_ref"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise IndexFormatError(f"bad page record: {e}", path=str(pages_path), line=lineno) from e
        if meta.n_patches < 1:
            raise IndexFormatError("n_patches must be >= 1", path=str(pages_path), line=lineno)
        length = meta.n_patches * dim * F32.itemsize
        if row.get("offset", expected_offset) != expected_offset or row.get("length", length) != length:
            raise IndexFormatError(
                f"offset/length ({row.get('offset')}, {row.get('length')}) do not match "
                f"expected ({expected_offset}, {length})",
                path=str(pages_path),
                line=lineno,
            )
        expected_offset += length
        metas.append(meta)
        lines.append(row)

    seen = set()
    for meta in metas:
        if meta.page_id in seen:
            raise IndexFormatError(f"duplicate page_id {meta.page_id}", path=str(pages_path))
        seen.add(meta.page_id)
    return metas, lines


def load_corpus(directory: PathLike) -> RawCorpus:
    """Read a corpus (or index) directory into a RawCorpus"""
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    dim = int(manifest["dim"])
    metas, _ = _read_pages(directory, dim)
    vectors = read_f32_blob(directory / manifest.get("files", {}).get("patches", "patches.bin"), dim)
    extra = {k: v for k, v in manifest.items() if k not in {"format", "dim", "num_pages", "num_patches", "files"}}
    return RawCorpus(metas=metas, vectors=vectors, extra=extra)


# ==============================================================================
# PROJECTION
# ==============================================================================

def save_projection(path: PathLike, model: ProjectionModel) -> None:
    """Header (magic, source_dim, target_dim, total_variance) then mean, basis, variance"""
    with open(path, "wb") as f:
        f.write(PROJECTION_MAGIC)
        f.write(struct.pack("<iid", model.source_dim, model.target_dim, model.total_variance))
        f.write(np.ascontiguousarray(model.mean, dtype=F32).tobytes())
        f.write(np.ascontiguousarray(model.basis, dtype=F32).tobytes())
        f.write(np.ascontiguousarray(model.explained_variance, dtype=F32).tobytes())


def load_projection(path: PathLike) -> ProjectionModel:
    path = Path(path)
    if not path.exists():
        raise IndexFormatError("missing projection file", path=str(path))
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IndexFormatError(f"unreadable projection file: {e.strerror}", path=str(path)) from e
    header = struct.calcsize("<iid")
    if data[:4] != PROJECTION_MAGIC or len(data) < 4 + header:
        raise IndexFormatError("not a projection file", path=str(path))
    source_dim, target_dim, total_variance = struct.unpack("<iid", data[4:4 + header])
    body = np.frombuffer(data, dtype=F32, offset=4 + header)
    expected = source_dim + target_dim * source_dim + target_dim
    if body.size != expected:
        raise IndexFormatError(f"projection body has {body.size} floats, expected {expected}", path=str(path))
    mean = body[:source_dim].copy()
    basis = body[source_dim:source_dim + target_dim * source_dim].reshape(target_dim, source_dim).copy()
    variance = body[source_dim + target_dim * source_dim:].copy()
    return ProjectionModel(
        source_dim=source_dim,
        target_dim=target_dim,
        mean=mean,
        basis=basis,
        explained_variance=variance,
        total_variance=float(total_variance),
    )


# ==============================================================================
# INDEX
# ==============================================================================

def _save_ann(path: Path, ann: CentroidAnnIndex) -> None:
    faiss.write_index(ann.ivf, str(path))


def _load_ann(path: Path, entries: np.ndarray, entry_page: np.ndarray, exact_flat: bool) -> CentroidAnnIndex:
    if not path.exists():
        raise IndexFormatError("missing ANN file", path=str(path))
    try:
        ivf = faiss.read_index(str(path))
    except RuntimeError as e:
        raise IndexFormatError(f"not a faiss index: {e}", path=str(path)) from e
    if not isinstance(ivf, faiss.IndexIVF):
        raise IndexFormatError(f"expected an IVF index, got {type(ivf).__name__}", path=str(path))
    if ivf.ntotal != entries.shape[0] or ivf.d != entries.shape[1]:
        raise IndexFormatError(
            f"ANN covers {ivf.ntotal}x{ivf.d} entries, centroids.bin has {entries.shape}", path=str(path)
        )
    return CentroidAnnIndex(entries=entries, entry_page=entry_page, ivf=ivf, exact_flat_mode=exact_flat)


def save_index(
    directory: PathLike,
    index: PageIndex,
    dedup_report: Optional[Sequence[Dict[str, Any]]] = None,
    seed: Optional[int] = None,
) -> Path:
    """Write every index file; returns the directory"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    metas = [
        PageMeta(p.page_id, p.article_id, p.n_patches, p.summary, p.image_ref) for p in index.pages
    ]
    spans = write_f32_blob(directory / "patches.bin", [p.patches for p in index.pages])
    write_f32_blob(directory / "centroids.bin", [cs.centroids for cs in index.centroid_sets])
    _save_ann(directory / "ann.bin", index.ann)

    lines = []
    centroid_row = 0
    for meta, span, cs in zip(metas, spans, index.centroid_sets):
        line = _page_line(meta, span)
        line["centroid_offset"] = centroid_row
        line["n_centroids"] = cs.count
        line["centroid_weights"] = [int(w) for w in cs.weights]
        centroid_row += cs.count
        lines.append(line)
    write_jsonl(directory / "pages.jsonl", lines)

    files: Dict[str, Any] = {
        "patches": "patches.bin",
        "centroids": "centroids.bin",
        "ann": "ann.bin",
        "pages": "pages.jsonl",
        "projection": None,
    }
    if index.projection is not None:
        save_projection(directory / "projection.bin", index.projection)
        files["projection"] = "projection.bin"

    dedup = None
    if dedup_report is not None:
        write_jsonl(directory / "dedup_report.jsonl", dedup_report)
        dedup = {"dropped": len(dedup_report), "report": "dedup_report.jsonl"}

    write_json(directory / "manifest.json", {
        "format": INDEX_FORMAT,
        "dim": index.dim,
        "num_pages": index.num_pages,
        "num_patches": index.num_patches,
        "num_centroids": index.ann.num_entries,
        "ann": {"nlist": index.ann.nlist, "nprobe": index.ann.nprobe},
        "config": index.config.model_dump(),
        "seed": index.config.seed if seed is None else seed,
        "files": files,
        "dedup": dedup,
        "blob_bytes": {
            "patches": int(sum(s[1] for s in spans)),
            "centroids": int(index.ann.num_entries * index.dim * F32.itemsize),
        },
    })
    logger.info(
        f"Wrote index {directory}: {index.num_pages} pages, {index.ann.num_entries} centroids"
    )
    return directory


def load_index(directory: PathLike, cfg: Optional[PipelineConfig] = None) -> PageIndex:
    """
    Open an index directory.

    Args:
        directory: Index directory written by save_index
        cfg: Config to search with (defaults to the echoed build config)

    Returns:
        PageIndex whose page patches are views into patches.bin
    """
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != INDEX_FORMAT:
        raise IndexFormatError(
            f"expected format {INDEX_FORMAT}, got {manifest.get('format')}", path=str(directory / "manifest.json")
        )
    dim = int(manifest["dim"])
    try:
        build_cfg = PipelineConfig.model_validate(manifest["config"])
    except (KeyError, ValidationError) as e:
        raise IndexFormatError(f"bad config echo: {e}", path=str(directory / "manifest.json")) from e
    cfg = cfg or build_cfg

    metas, lines = _read_pages(directory, dim)
    patches = read_f32_blob(directory / "patches.bin", dim)
    centroids = read_f32_blob(directory / "centroids.bin", dim)
    raw = RawCorpus(metas=metas, vectors=patches)
    pages = raw.to_records()

    centroid_sets = []
    entry_page = np.empty(centroids.shape[0], dtype=np.int64)
    next_row = 0
    for i, (meta, line) in enumerate(zip(metas, lines)):
        start, count = int(line["centroid_offset"]), int(line["n_centroids"])
        if start != next_row or start + count > centroids.shape[0]:
            raise IndexFormatError(
                f"centroid rows {start}+{count} are not contiguous within centroids.bin", path=str(directory / "pages.jsonl"), line=i + 1
            )
        entry_page[start:start + count] = i
        next_row = start + count
        centroid_sets.append(CentroidSet(
            page_id=meta.page_id,
            centroids=centroids[start:start + count],
            weights=np.asarray(line["centroid_weights"], dtype=np.int64),
        ))

    ann = _load_ann(directory / "ann.bin", centroids, entry_page, cfg.exact_flat)
    projection = None
    if manifest.get("files", {}).get("projection"):
        projection = load_projection(directory / manifest["files"]["projection"])

    logger.info(f"Loaded index {directory}: {len(pages)} pages, {centroids.shape[0]} centroids")
    return PageIndex(pages=pages, centroid_sets=centroid_sets, ann=ann, config=cfg, projection=projection)


# ==============================================================================
# QUERIES, QUESTIONS, GROUND TRUTH
# ==============================================================================

def save_queries(directory: PathLike, queries: Sequence[QueryTokens]) -> None:
    """queries.jsonl (id, text, m, byte span) + queries.bin (stacked tokens)"""
    directory = Path(directory)
    spans = write_f32_blob(directory / "queries.bin", [q.tokens for q in queries])
    write_jsonl(directory / "queries.jsonl", (
        {"query_id": q.query_id, "text": q.text, "m": q.m, "offset": s[0], "length": s[1]}
        for q, s in zip(queries, spans)
    ))


def load_queries(directory: PathLike) -> List[QueryTokens]:
    directory = Path(directory)
    rows = list(iter_jsonl(directory / "queries.jsonl"))
    if not rows:
        return []
    blob = np.fromfile(directory / "queries.bin", dtype=F32)
    queries = []
    dim = None
    for lineno, row in rows:
        count = int(row["length"]) // F32.itemsize
        start = int(row["offset"]) // F32.itemsize
        m = int(row["m"])
        if m < 1 or count % m:
            raise IndexFormatError("query span is not m rows", path=str(directory / "queries.jsonl"), line=lineno)
        dim = count // m
        tokens = blob[start:start + count].reshape(m, dim)
        queries.append(QueryTokens(tokens=tokens, query_id=row.get("query_id"), text=row.get("text")))
    return queries


def save_questions(path: PathLike, questions: Sequence[Question]) -> None:
    write_jsonl(path, (q.model_dump() for q in questions))


def load_questions(path: PathLike) -> List[Question]:
    questions = []
    for lineno, row in iter_jsonl(path):
        try:
            questions.append(Question.model_validate(row))
        except ValidationError as e:
            raise IndexFormatError(f"invalid question: {e.errors()[0]['msg']}", path=str(path), line=lineno) from e
    return questions


def save_ground_truth(path: PathLike, relevance: Dict[str, List[str]]) -> None:
    write_jsonl(path, ({"query_id": qid, "relevant_page_ids": ids} for qid, ids in sorted(relevance.items())))


def load_ground_truth(path: PathLike) -> Dict[str, List[str]]:
    return {str(row["query_id"]): list(row["relevant_page_ids"]) for _, row in iter_jsonl(path)}


def ranked_to_rows(results: Sequence[RankedPage]) -> List[Dict[str, Any]]:
    return [r.to_dict() for r in results]


def ranked_from_rows(rows: Sequence[Dict[str, Any]]) -> List[RankedPage]:
    return [RankedPage(page_id=str(r["page_id"]), score=float(r["score"]), rank=int(r["rank"])) for r in rows]
