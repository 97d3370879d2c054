"""
Projection - PCA reduction of patch vectors from the encoder width to d

No whitening: basis rows are orthonormal and variance is not rescaled, so dot
products keep their geometry. Outputs are re-normalized so that dot = cosine.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg

logger = logging.getLogger("projection")

DEGENERATE_NORM = 1e-8


@dataclass(frozen=True)
class ProjectionModel:
    """Fitted PCA basis"""

    source_dim: int
    target_dim: int
    mean: np.ndarray  # (source_dim,)
    basis: np.ndarray  # (target_dim, source_dim), orthonormal rows
    explained_variance: np.ndarray  # (target_dim,), non-increasing
    total_variance: float

    @property
    def explained_variance_ratio(self) -> float:
        if self.total_variance <= 0:
            return 1.0
        return float(np.sum(self.explained_variance, dtype=np.float64) / self.total_variance)


def fit_projection(
    samples: np.ndarray,
    target_dim: int,
    seed: int = 42,
    max_samples: int = 100_000,
) -> ProjectionModel:
    """
    Fit a PCA basis on a sample of patch vectors.

    Args:
        samples: S x source_dim matrix
        target_dim: Output width d
        seed: Seed for subsampling when S > max_samples
        max_samples: Uniform random subsample cap

    Returns:
        ProjectionModel whose basis spans the top-d principal directions

    Raises:
        ValueError: "insufficient samples" or "invalid samples"
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"invalid samples: expected 2-D matrix, got shape {x.shape}")
    if x.shape[0] < target_dim:
        raise ValueError(f"insufficient samples: {x.shape[0]} < target_dim {target_dim}")
    if target_dim > x.shape[1]:
        raise ValueError(f"target_dim {target_dim} exceeds source_dim {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid samples: non-finite values")

    if x.shape[0] > max_samples:
        rng = np.random.default_rng(seed)
        rows = np.sort(rng.choice(x.shape[0], size=max_samples, replace=False))
        x = x[rows]
        logger.info(f"Fitting projection on a {max_samples}-row sample")

    source_dim = x.shape[1]
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(x.shape[0] - 1, 1)

    eigvals, eigvecs = linalg.eigh(cov, subset_by_index=[source_dim - target_dim, source_dim - 1])
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    basis = eigvecs[:, order].T

    # Sign convention: largest-magnitude coordinate of each direction is positive
    pivots = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(target_dim), pivots])
    signs[signs == 0] = 1.0
    basis = basis * signs[:, None]

    total_variance = float(np.trace(cov))
    model = ProjectionModel(
        source_dim=source_dim,
        target_dim=target_dim,
        mean=mean.astype(np.float32),
        basis=basis.astype(np.float32),
        explained_variance=eigvals.astype(np.float32),
        total_variance=total_variance,
    )
    logger.info(
        f"Projection {source_dim}->{target_dim} keeps "
        f"{model.explained_variance_ratio * 100:.1f}% of variance"
    )
    return model


def project_unnormalized(model: ProjectionModel, vectors: np.ndarray) -> np.ndarray:
    """basis · (row − mean) for every row, before re-normalization"""
    x = np.asarray(vectors, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != model.source_dim:
        raise ValueError(
            f"width mismatch: expected {model.source_dim} columns, got shape {x.shape}"
        )
    return (x - model.mean) @ model.basis.T


def apply_projection(model: ProjectionModel, vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Project and re-normalize.

    Args:
        model: Fitted projection
        vectors: k x source_dim

    Returns:
        (k x target_dim unit rows, boolean mask of degenerate rows mapped to zero)
    """
    projected = project_unnormalized(model, vectors).astype(np.float64)
    norms = np.linalg.norm(projected, axis=1)
    degenerate = norms <= DEGENERATE_NORM
    out = np.zeros_like(projected)
    keep = ~degenerate
    out[keep] = projected[keep] / norms[keep, None]
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} projected rows are degenerate (zero vector)")
    return out.astype(np.float32), degenerate
