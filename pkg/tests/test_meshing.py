from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse.linalg import spsolve

from conftest import unit_sphere_mesh
from solescan.errors import EmptyMesh, InsufficientPoints, SolverDidNotConverge
from solescan.geometry import MeshSurfaceIndex, PointCloud
from solescan.meshing import (
    ScalarGrid,
    conjugate_residual,
    estimate_normals,
    laplacian,
    marching_cubes,
    mesh_cloud,
    screened_poisson,
)
from solescan.metrics import chamfer
from solescan.scanner import RigSpec, ScanNoise, virtual_scan


def sphere_samples(n, radius=0.1, seed=0):
    x = np.random.default_rng(seed).standard_normal((n, 3))
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    return PointCloud(radius * u, u)


# -- normals -----------------------------------------------------------------------

def test_plane_normals():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-1, 1, (500, 2)), np.zeros(500)]
    out = estimate_normals(PointCloud(pts), k=10)
    assert np.abs(np.abs(out.normals[:, 2]) - 1).max() < 1e-6
    # one consistent side
    assert np.all(out.normals[:, 2] > 0) or np.all(out.normals[:, 2] < 0)


def test_sphere_normals_face_the_cameras():
    mesh = unit_sphere_mesh(5, radius=0.1)
    scan = virtual_scan(mesh, RigSpec(n_views=12), ScanNoise(seed=1), per_view_budget=1000)
    cams = [v.sfm_camera for v in scan.views]
    out = estimate_normals(scan.cloud, k=16, cameras=cams)
    radial = scan.cloud.points / np.linalg.norm(scan.cloud.points, axis=1, keepdims=True)
    cos = np.sum(out.normals * radial, axis=1)
    assert len(scan.cloud) >= 10_000
    assert np.mean(cos >= math.cos(math.radians(5))) >= 0.99


def test_sphere_normals_propagate_outwards_without_cameras():
    cloud = sphere_samples(5000, seed=2)
    out = estimate_normals(PointCloud(cloud.points), k=12)
    cos = np.sum(out.normals * cloud.normals, axis=1)
    assert np.mean(cos > 0.9) >= 0.99


def test_normal_estimation_needs_more_points_than_k():
    with pytest.raises(InsufficientPoints):
        estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(16, 3))), k=16)
    with pytest.raises(ValueError):
        estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(16, 3))), k=2)


# -- marching cubes ------------------------------------------------------------------

def distance_grid(n=24, spacing=0.1, centre=(1.1, 1.2, 1.15), radius=0.7):
    grid = ScalarGrid(np.zeros(3), spacing, np.zeros((n, n, n)))
    d = np.linalg.norm(grid.node_positions() - np.asarray(centre), axis=-1) - radius
    return ScalarGrid(np.zeros(3), spacing, d)


def test_marching_cubes_on_a_distance_field():
    grid = distance_grid()
    mesh = marching_cubes(grid, 0.0)
    r = np.linalg.norm(mesh.vertices - [1.1, 1.2, 1.15], axis=1)
    assert np.abs(r - 0.7).max() <= grid.spacing / 2
    assert mesh.is_watertight()
    assert mesh.euler_characteristic() == 2
    # faces point towards increasing values, i.e. outwards
    n = mesh.face_normals()
    c = mesh.triangles.mean(1) - [1.1, 1.2, 1.15]
    assert np.all(np.sum(n * c, axis=1) > 0)


def test_marching_cubes_vertices_are_linear_crossings():
    grid = distance_grid(n=12, spacing=0.2)
    mesh = marching_cubes(grid, 0.0)
    g = (mesh.vertices - grid.origin) / grid.spacing
    # every vertex sits on a grid edge where the interpolated field is the iso value
    on_node_lines = np.sum(np.abs(g - np.round(g)) < 1e-9, axis=1)
    assert np.all(on_node_lines >= 2)
    assert np.abs(grid.interpolate(mesh.vertices)).max() < 1e-9


def test_marching_cubes_constant_grid():
    with pytest.raises(EmptyMesh):
        marching_cubes(ScalarGrid(np.zeros(3), 1.0, np.ones((4, 4, 4))), 0.5)
    with pytest.raises(ValueError):
        ScalarGrid(np.zeros(3), 1.0, np.ones((1, 4, 4)))


# -- linear algebra ------------------------------------------------------------------------

def brute_laplacian(x, h):
    """Sum over axis neighbours of (x_i - x_j) / h^2, by explicit loops."""
    out = np.zeros_like(x)
    nx, ny, nz = x.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + di, j + dj, k + dk
                    if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz:
                        out[i, j, k] += (x[i, j, k] - x[a, b, c]) / h ** 2
    return out


def test_laplacian_matches_stencil():
    x = np.random.default_rng(0).normal(size=(4, 5, 3))
    lap = laplacian(x.shape, 0.5)
    assert np.abs((lap @ x.reshape(-1)).reshape(x.shape) - brute_laplacian(x, 0.5)).max() < 1e-12


@given(st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(2, 6)), st.integers(0, 1000))
def test_laplacian_is_symmetric(shape, seed):
    rng = np.random.default_rng(seed)
    lap = laplacian(shape, 0.3)
    x, y = rng.normal(size=(2, int(np.prod(shape))))
    assert abs((lap @ x) @ y - x @ (lap @ y)) < 1e-10 * max(1.0, abs((lap @ x) @ y))


def test_conjugate_residual_solves_and_never_increases():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(60, 60))
    a = sp.csr_matrix(m @ m.T + 0.5 * np.eye(60))
    b = rng.normal(size=60)
    x, rep = conjugate_residual(a, b, tol=1e-12, max_iterations=500)
    assert rep.converged
    assert np.abs(x - spsolve(a.tocsc(), b)).max() < 1e-8
    res = np.array(rep.residuals)
    assert np.all(res[1:] <= res[:-1] * (1 + 1e-12))


def test_poisson_system_residual_never_increases():
    res = screened_poisson(sphere_samples(2000), resolution=24).solve
    r = np.array(res.residuals)
    assert np.all(r[1:] <= r[:-1] * (1 + 1e-12))


# -- screened Poisson ---------------------------------------------------------------------

@pytest.mark.parametrize("screening, tol", [(4.0, 0.02), (0.0, 0.03)])
def test_poisson_reconstructs_a_sphere(screening, tol):
    cloud = sphere_samples(10_000, radius=0.1)
    res = screened_poisson(cloud, resolution=64, screening=screening)
    r = np.linalg.norm(res.mesh.vertices, axis=1)
    assert np.abs(r - 0.1).max() <= tol * 0.1
    assert res.mesh.is_watertight()
    assert res.solve.converged


def test_poisson_mesh_agrees_with_input_normals():
    cloud = sphere_samples(10_000, radius=0.1, seed=3)
    mesh = screened_poisson(cloud, resolution=48).mesh
    _, _, face = MeshSurfaceIndex(mesh).query(cloud.points)
    agree = np.sum(mesh.face_normals()[face] * cloud.normals, axis=1) > 0
    assert np.mean(agree) >= 0.95


def test_poisson_on_a_footoid(template):
    dense = template.sample_surface(20_000, 4)
    gt = template.sample_surface(20_000, 5)
    mesh = mesh_cloud(dense, resolution=64)
    assert mesh.is_watertight()
    assert chamfer(mesh.sample_surface(20_000, 6), gt).cd <= 1.3 * chamfer(dense, gt).cd


def test_poisson_flags_non_convergence():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = screened_poisson(sphere_samples(2000), resolution=24, max_iterations=3)
    assert not res.solve.converged
    assert any(issubclass(w.category, SolverDidNotConverge) for w in caught)
    assert len(res.mesh.faces) > 0


def test_poisson_input_errors():
    with pytest.raises(ValueError):
        screened_poisson(PointCloud(sphere_samples(500).points))
    with pytest.raises(InsufficientPoints):
        screened_poisson(sphere_samples(50))


def test_poisson_closes_a_partial_cloud():
    cloud = sphere_samples(6000, seed=4)
    top = cloud.points[:, 2] > 0.02
    mesh = screened_poisson(PointCloud(cloud.points[top], cloud.normals[top]), resolution=32).mesh
    assert mesh.is_watertight()
    # the observed cap is still reproduced
    _, d, _ = MeshSurfaceIndex(mesh).query(cloud.points[cloud.points[:, 2] > 0.05])
    assert np.median(d) < 0.05 * 0.1
