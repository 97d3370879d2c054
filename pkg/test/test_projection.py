"""
PCA projection tests
"""

import numpy as np
import pytest

from src.projection import apply_projection, fit_projection, project_unnormalized


@pytest.fixture
def anisotropic(rng):
    """Samples whose variance is concentrated in the first few source axes"""
    scales = np.array([10.0, 5.0, 2.0] + [0.1] * 13)
    return (rng.standard_normal((500, 16)) * scales).astype(np.float32)


def test_basis_is_orthonormal(anisotropic):
    model = fit_projection(anisotropic, target_dim=4)
    gram = model.basis.astype(np.float64) @ model.basis.T.astype(np.float64)
    assert np.allclose(gram, np.eye(4), atol=1e-5)


def test_explained_variance_is_non_increasing(anisotropic):
    model = fit_projection(anisotropic, target_dim=6)
    ev = model.explained_variance
    assert np.all(ev[:-1] >= ev[1:])
    assert 0.9 < model.explained_variance_ratio <= 1.0


def test_leading_direction_is_the_dominant_axis(anisotropic):
    model = fit_projection(anisotropic, target_dim=3)
    assert np.argmax(np.abs(model.basis[0])) == 0
    assert model.basis[0, 0] > 0


def test_outputs_are_unit_rows(anisotropic):
    model = fit_projection(anisotropic, target_dim=4)
    out, degenerate = apply_projection(model, anisotropic[:50])
    assert out.shape == (50, 4)
    assert not degenerate.any()
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)


def test_mean_vector_is_degenerate(anisotropic):
    model = fit_projection(anisotropic, target_dim=4)
    out, degenerate = apply_projection(model, model.mean[None, :])
    assert degenerate.tolist() == [True]
    assert np.all(out == 0)


def test_fit_is_deterministic(anisotropic):
    a = fit_projection(anisotropic, target_dim=4, seed=3, max_samples=200)
    b = fit_projection(anisotropic, target_dim=4, seed=3, max_samples=200)
    assert np.array_equal(a.basis, b.basis)
    assert np.array_equal(a.mean, b.mean)


def test_insufficient_samples(rng):
    with pytest.raises(ValueError, match="insufficient samples"):
        fit_projection(rng.standard_normal((3, 16)), target_dim=4)


def test_non_finite_samples(rng):
    x = rng.standard_normal((20, 8))
    x[4, 2] = np.nan
    with pytest.raises(ValueError, match="invalid samples"):
        fit_projection(x, target_dim=2)


def test_width_mismatch_on_apply(anisotropic):
    model = fit_projection(anisotropic, target_dim=4)
    with pytest.raises(ValueError, match="width mismatch"):
        project_unnormalized(model, np.ones((2, 8), dtype=np.float32))


# ==============================================================================
# REFERENCE CHECKS
# ==============================================================================

def test_basis_matches_covariance_eigenvectors(anisotropic):
    model = fit_projection(anisotropic, target_dim=4)
    x = anisotropic.astype(np.float64)
    centered = x - x.mean(axis=0)
    eigvals, eigvecs = np.linalg.eigh(centered.T @ centered / (len(x) - 1))
    reference = eigvecs[:, ::-1][:, :4].T
    for got, want in zip(model.basis.astype(np.float64), reference):
        assert abs(float(got @ want)) == pytest.approx(1.0, abs=1e-4)
    assert model.explained_variance == pytest.approx(eigvals[::-1][:4], rel=1e-4)


def test_rank_two_input_is_fully_captured(rng):
    plane = np.linalg.qr(rng.standard_normal((10, 2)))[0].T
    x = (rng.standard_normal((300, 2)) * [3.0, 1.0]) @ plane + 0.5
    model = fit_projection(x, target_dim=2)
    assert model.explained_variance_ratio >= 0.999


def test_mean_plus_leading_direction_maps_to_first_axis(anisotropic):
    model = fit_projection(anisotropic, target_dim=4)
    out, degenerate = apply_projection(model, (model.mean + 2.5 * model.basis[0])[None, :])
    assert not degenerate.any()
    assert np.allclose(out[0], np.eye(4)[0], atol=1e-5)


def test_projection_is_linear_in_differences(anisotropic):
    model = fit_projection(anisotropic, target_dim=4)
    a, b = anisotropic[:20], anisotropic[20:40]
    diff = project_unnormalized(model, a) - project_unnormalized(model, b)
    assert np.allclose(diff, (a - b) @ model.basis.T, atol=1e-4)


def test_apply_matches_row_by_row_reference(anisotropic):
    model = fit_projection(anisotropic, target_dim=4)
    out, _ = apply_projection(model, anisotropic[:30])
    for row, got in zip(anisotropic[:30].astype(np.float64), out):
        y = model.basis.astype(np.float64) @ (row - model.mean.astype(np.float64))
        assert np.allclose(got, y / np.linalg.norm(y), atol=1e-5)
