from __future__ import annotations

import hashlib
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import unit_sphere_mesh
from solescan.errors import CorrespondenceError, EmptyInput
from solescan.geometry import PointCloud, TriangleMesh
from solescan.metrics import chamfer
from solescan.shapegen import (
    N_MODES,
    FitOptions,
    FootoidParams,
    build_pca,
    fit_pca,
    model_sample_weights,
    sample_coefficients,
    sample_dataset,
    self_intersections,
    synthesize,
    template_mesh,
)


# -- template --------------------------------------------------------------------

def test_template_topology(template):
    assert template.is_watertight()
    assert template.euler_characteristic() == 2
    assert 2000 <= len(template.vertices) <= 3000
    assert template.signed_volume() > 0


def test_template_proportions(template):
    ext = template.vertices.max(0) - template.vertices.min(0)
    assert np.all(np.abs(ext / np.array([0.26, 0.10, 0.12]) - 1) < 0.2), ext


def test_template_is_float32_exact_and_reproducible(template):
    v = template.vertices
    assert np.array_equal(v, v.astype(np.float32).astype(np.float64))
    digest = hashlib.sha256(v.tobytes() + template.faces.astype(np.int64).tobytes()).hexdigest()
    code = ("import hashlib, numpy as np; from solescan.shapegen import template_mesh; m = template_mesh(); "
            "print(hashlib.sha256(m.vertices.tobytes() + m.faces.astype(np.int64).tobytes()).hexdigest())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == digest


# -- synthesis -------------------------------------------------------------------

def test_zero_coefficients_give_the_template(template):
    s = synthesize(FootoidParams())
    assert np.array_equal(s.mesh.vertices, template.vertices)
    assert np.array_equal(s.mesh.faces, template.faces)


coeffs = st.lists(st.floats(-1.5, 1.5), min_size=N_MODES, max_size=N_MODES).map(np.array)


@given(coeffs, coeffs)
def test_synthesis_is_affine(template, w1, w2):
    v1 = synthesize(FootoidParams(w1), check=False).mesh.vertices
    v2 = synthesize(FootoidParams(w2), check=False).mesh.vertices
    v12 = synthesize(FootoidParams(w1 + w2), check=False).mesh.vertices
    assert np.abs(v12 - (v1 + v2 - template.vertices)).max() < 1e-12


@given(coeffs, st.floats(0.5, 2.0))
def test_scale_multiplies_vertices(w, s):
    a = synthesize(FootoidParams(w), check=False).mesh.vertices
    b = synthesize(FootoidParams(w, s), check=False).mesh.vertices
    assert np.abs(b - s * a).max() < 1e-12


def test_params_validation():
    with pytest.raises(ValueError):
        FootoidParams(np.full(N_MODES, 3.5))
    with pytest.raises(ValueError):
        FootoidParams(np.zeros(N_MODES - 1))
    with pytest.raises(ValueError):
        FootoidParams(scale=0.0)


def test_random_footoids_are_valid(template):
    w = np.concatenate([sample_coefficients(1, seed) for seed in range(100)])
    for row in w:
        mesh = synthesize(FootoidParams(row), check=False).mesh
        assert mesh.is_watertight()
        assert np.array_equal(mesh.faces, template.faces)
        assert self_intersections(mesh) == 0


def test_self_intersection_detector_finds_overlaps():
    a = unit_sphere_mesh(2)
    b = unit_sphere_mesh(2, centre=(1.0, 0.0, 0.0))
    both = TriangleMesh(np.vstack([a.vertices, b.vertices]), np.vstack([a.faces, b.faces + len(a.vertices)]))
    assert self_intersections(both) > 0
    assert self_intersections(a) == 0
    apart = TriangleMesh(np.vstack([a.vertices, b.vertices + [2.5, 0, 0]]),
                         np.vstack([a.faces, b.faces + len(a.vertices)]))
    assert self_intersections(apart) == 0


# -- datasets ---------------------------------------------------------------------

def test_dataset_is_seeded():
    a = sample_coefficients(40, 3)
    b = sample_coefficients(40, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_coefficients(40, 4))
    with pytest.raises(ValueError):
        sample_dataset(0, 1)


def test_coefficient_statistics():
    w = sample_coefficients(200, 7)
    assert w.shape == (200, N_MODES)
    assert np.all(np.abs(w) <= 3)
    assert np.all(np.abs(w.mean(0)) < 0.2)


def test_sample_dataset_matches_coefficients():
    samples = sample_dataset(4, 9)
    w = sample_coefficients(4, 9)
    for s, row in zip(samples, w):
        assert np.array_equal(s.params.coefficients, row)
        assert s.mesh.is_watertight()


# -- PCA model ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def train_set():
    return sample_dataset(20, 5)


@pytest.fixture(scope="module")
def pca(train_set):
    return build_pca(train_set, 8)


def test_pca_spans_the_generative_space(train_set, pca):
    for s in train_set + sample_dataset(3, 77):
        v = s.mesh.vertices
        rec = pca.reconstruct(pca.project(v))
        assert np.abs(rec - v).max() < 1e-9


def test_pca_basis_is_orthonormal(pca):
    g = pca.basis.T @ pca.basis
    assert np.abs(g - np.eye(8)).max() < 1e-9


def test_pca_stddevs_match_projection_spread(train_set, pca):
    proj = np.stack([pca.project(s.mesh.vertices) for s in train_set])
    assert np.abs(proj.mean(0)).max() < 1e-9
    assert np.allclose(proj.std(0, ddof=1), pca.mode_stddevs, rtol=1e-9)
    assert np.all(np.diff(pca.mode_stddevs) <= 0)


def test_pca_mean_only(train_set):
    m0 = build_pca(train_set, 0)
    assert m0.n_modes == 0
    mean = np.mean([s.mesh.vertices for s in train_set], axis=0)
    assert np.abs(m0.reconstruct() - mean).max() < 1e-12
    assert np.array_equal(m0.reconstruct([]), m0.mean_vertices)


def test_pca_is_idempotent(train_set, pca):
    recon = [TriangleMesh(pca.reconstruct(pca.project(s.mesh.vertices)), s.mesh.faces) for s in train_set]
    again = build_pca(recon, 8)
    assert np.abs(again.mean_vertices - pca.mean_vertices).max() < 1e-9
    signs = np.sign(np.sum(again.basis * pca.basis, axis=0))
    assert np.abs(again.basis * signs - pca.basis).max() < 1e-9


def test_pca_errors(train_set):
    with pytest.raises(ValueError):
        build_pca(train_set[:3], 3)
    odd = TriangleMesh(train_set[0].mesh.vertices, train_set[0].mesh.faces[:, ::-1])
    with pytest.raises(CorrespondenceError):
        build_pca([s.mesh for s in train_set[:4]] + [odd], 2)


# -- fitting -----------------------------------------------------------------------

def layout_samples(model, vertices, opts=FitOptions()):
    """Points of a mesh with the model's topology at the fit's fixed sample layout."""
    faces, bary = model_sample_weights(model, opts.n_model_points, opts.seed)
    return np.einsum("nk,nkj->nj", bary, np.asarray(vertices)[model.faces[faces]])


def test_fit_recovers_an_in_span_shape(pca):
    s = synthesize(FootoidParams(np.array([1.0, -0.5, 0.8, 0.0, 0.3, -1.0, 0.5, 0.2])))
    diag = s.mesh.bbox_diagonal()
    target = s.mesh.sample_surface(20_000, 2)
    res = fit_pca(pca, target)
    # vertex correspondence is known, so recovery is measured on the vertices
    rms = np.sqrt(np.mean(np.sum((res.vertices - s.mesh.vertices) ** 2, axis=1)))
    assert rms < 1e-3 * diag
    # the Chamfer value cannot beat the sampling floor of the true shape by much either way
    floor = chamfer(layout_samples(pca, s.mesh.vertices), target).cd
    assert res.cd <= floor * 1.01


def test_fit_mean_is_a_fixed_point(pca):
    res = fit_pca(pca, layout_samples(pca, pca.mean_vertices), FitOptions(steps=100))
    assert np.abs(res.coefficients).max() < 1e-3
    assert res.loss_trace[0] < 1e-20


def test_fit_trace_and_best_iterate(pca, footoids):
    target = footoids[1].mesh.sample_surface(4000, 1)
    res = fit_pca(pca, target, FitOptions(steps=60))
    assert len(res.loss_trace) == 61
    assert np.all(np.isfinite(res.loss_trace))
    running = np.minimum.accumulate(res.loss_trace)
    assert np.all(np.diff(running) <= 0)
    assert np.all(np.abs(res.coefficients) <= 3)


def test_fit_with_zero_steps_returns_the_initial_pose(pca, footoids):
    res = fit_pca(pca, footoids[0].mesh.sample_surface(2000, 1), FitOptions(steps=0))
    assert len(res.loss_trace) == 1
    assert np.array_equal(res.coefficients, np.zeros(8))
    assert np.allclose(res.vertices, pca.mean_vertices, atol=1e-12)


def test_fit_rejects_empty_target(pca):
    with pytest.raises(EmptyInput):
        fit_pca(pca, PointCloud(np.zeros((0, 3))))
