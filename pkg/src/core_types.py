"""
Core domain types shared by every stage of the pipeline.

Vectors are float32 row-major numpy arrays, stored read-only so records can be
shared across threads without copying.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

UNIT_NORM_TOL = 1e-4

LETTER_LABELS = ("A", "B", "C", "D")
TRIAGE_LABELS = ("yes", "no", "maybe")


def _frozen_matrix(values: np.ndarray, name: str) -> np.ndarray:
    matrix = np.asarray(values, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {matrix.shape}")
    if matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {matrix.shape}")
    if matrix.flags.writeable or not matrix.flags.c_contiguous:
        matrix = np.array(matrix, dtype=np.float32, order="C")
        matrix.setflags(write=False)
    return matrix


def check_unit_rows(matrix: np.ndarray, name: str, tol: float = UNIT_NORM_TOL) -> None:
    """Raise ValueError unless every row has L2 norm 1 within tol"""
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(
            f"{name}: row {int(bad[0])} has norm {norms[bad[0]]:.6f}, expected unit norm"
        )


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize rows in float32; zero rows stay zero"""
    matrix = np.asarray(matrix, dtype=np.float32)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return (matrix / safe).astype(np.float32)


@dataclass(frozen=True)
class PageRecord:
    """One corpus page: its patch vectors plus the text summary used by stage 2"""

    page_id: str
    article_id: str
    patches: np.ndarray
    summary: str = ""
    image_ref: Optional[str] = None

    def __post_init__(self):
        patches = _frozen_matrix(self.patches, f"page {self.page_id} patches")
        check_unit_rows(patches, f"page {self.page_id}")
        object.__setattr__(self, "patches", patches)

    @property
    def n_patches(self) -> int:
        return int(self.patches.shape[0])

    @property
    def dim(self) -> int:
        return int(self.patches.shape[1])


@dataclass(frozen=True)
class QueryTokens:
    """A query encoded as m unit-norm token vectors"""

    tokens: np.ndarray
    query_id: Optional[str] = None
    text: Optional[str] = None

    def __post_init__(self):
        tokens = _frozen_matrix(self.tokens, "query tokens")
        check_unit_rows(tokens, f"query {self.query_id or ''}".strip())
        object.__setattr__(self, "tokens", tokens)

    @property
    def m(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[1])


@dataclass(frozen=True)
class RankedPage:
    page_id: str
    score: float
    rank: int

    def to_dict(self) -> Dict[str, object]:
        return {"page_id": self.page_id, "score": self.score, "rank": self.rank}


def rank_pages(page_ids: Sequence[str], scores: np.ndarray, k: int) -> List[RankedPage]:
    """
    Top-k pages ordered by (score desc, page_id asc).

    Args:
        page_ids: IDs aligned with scores
        scores: One score per page (non-finite scores are never returned)
        k: Number of results

    Returns:
        Up to k RankedPage entries with 1-based ranks
    """
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.flatnonzero(np.isfinite(scores))
    if k < 1 or finite.size == 0:
        return []

    candidates = finite
    if finite.size > k:
        # Keep everything tied with the k-th best so page_id can break ties
        kth = np.partition(scores[finite], finite.size - k)[finite.size - k]
        candidates = finite[scores[finite] >= kth]

    ordered = sorted(candidates.tolist(), key=lambda i: (-scores[i], page_ids[i]))[:k]
    return [
        RankedPage(page_id=page_ids[i], score=float(scores[i]), rank=r)
        for r, i in enumerate(ordered, start=1)
    ]


class Question(BaseModel):
    """A multiple-choice (A-D) or yes/no/maybe question"""

    model_config = ConfigDict(frozen=True)

    question_id: str
    stem: str
    options: Dict[str, str]
    gold_label: Optional[str] = None
    dataset: Optional[str] = None

    @model_validator(mode="after")
    def _check_labels(self) -> "Question":
        labels = list(self.options)
        if len(labels) < 2:
            raise ValueError(f"question {self.question_id} needs at least 2 options")
        letters = all(label in LETTER_LABELS for label in labels)
        triage = all(label in TRIAGE_LABELS for label in labels)
        if not (letters or triage):
            raise ValueError(
                f"question {self.question_id}: option labels {labels} must come from "
                f"{LETTER_LABELS} or {TRIAGE_LABELS}"
            )
        if self.gold_label is not None and self.gold_label not in self.options:
            raise ValueError(
                f"question {self.question_id}: gold label {self.gold_label!r} is not an option"
            )
        return self

    def render_options(self) -> str:
        return " ".join(f"{label}. {text}" for label, text in self.options.items())
