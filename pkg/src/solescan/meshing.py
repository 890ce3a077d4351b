"""Normal estimation, screened Poisson reconstruction and isosurface extraction.

The indicator field is solved on a uniform node grid. Its gradient lives on
the grid edges (a staggered layout), so the Laplacian ``G^T G`` is symmetric
by construction and the natural boundary condition is zero normal flux.
Samples push the edge field ``V`` with their inward normals, which makes the
field close to 1 inside and 0 outside, and the screening term pulls it to
0.5 at the samples.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .errors import EmptyMesh, InsufficientPoints, SolverDidNotConverge
from .geometry import PinholeCamera, PointCloud, TriangleMesh


# ---------------------------------------------------------------------------
# Normals
# ---------------------------------------------------------------------------

def _pca_normals(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    tree = cKDTree(points)
    _, nbr = tree.query(points, k=k)
    local = points[nbr]
    local = local - local.mean(1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0], nbr


def _orient_mst(points: np.ndarray, normals: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Propagate a consistent sign along a minimum spanning tree of the k-NN graph."""
    n = len(points)
    rows = np.repeat(np.arange(n), nbr.shape[1])
    cols = nbr.reshape(-1)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    # nearly parallel normals are cheap edges; the offset keeps zero weights as edges
    w = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-9
    graph = sp.coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)
    tree = minimum_spanning_tree(graph)
    tree = tree + tree.T
    out = normals.copy()
    n_comp, labels = connected_components(tree, directed=False)
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        seed = int(members[np.argmax(points[members, 2])])
        if out[seed, 2] < 0:
            out[seed] = -out[seed]
        order, pred = breadth_first_order(tree, seed, directed=False)
        for v in order[1:]:
            if np.dot(out[v], out[pred[v]]) < 0:
                out[v] = -out[v]
    return out


def estimate_normals(cloud: PointCloud, k: int = 16,
                     cameras: list[PinholeCamera] | None = None) -> PointCloud:
    """PCA normals from k nearest neighbours (the point itself included).

    With cameras and view ids each normal faces its camera; otherwise the
    orientation is propagated from the highest point, whose normal is made
    to point up (+z).
    """
    pts = cloud.points
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(pts) <= k:
        raise InsufficientPoints(f"need more than k={k} points, got {len(pts)}")
    normals, nbr = _pca_normals(pts, k)
    if cameras is not None and cloud.view_ids is not None:
        centres = np.array([c.center for c in cameras])
        to_cam = centres[cloud.view_ids] - pts
        flip = np.einsum("ij,ij->i", normals, to_cam) < 0
        normals[flip] = -normals[flip]
    else:
        normals = _orient_mst(pts, normals, nbr)
    return cloud.with_normals(normals)


# ---------------------------------------------------------------------------
# Grids and isosurfaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarGrid:
    """Scalar samples at nodes ``origin + spacing * (i, j, k)``; values indexed [i, j, k]."""

    origin: np.ndarray
    spacing: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def node_positions(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.values.shape], indexing="ij"), -1)
        return self.origin + self.spacing * idx

    def interpolate(self, points) -> np.ndarray:
        idx, w = _trilinear((np.asarray(points, dtype=np.float64) - self.origin) / self.spacing,
                            self.values.shape)
        return np.sum(self.values.reshape(-1)[idx] * w, axis=1)


def _exact_crossings(verts: np.ndarray, v: np.ndarray, iso: float) -> np.ndarray:
    """Recompute each vertex's position along its grid edge in float64."""
    frac = np.abs(verts - np.round(verts))
    axis = np.argmax(frac, axis=1)
    on_edge = frac[np.arange(len(verts)), axis] > 0
    base = np.round(verts).astype(np.int64)
    rows = np.flatnonzero(on_edge)
    a = axis[rows]
    lo = base[rows].copy()
    lo[np.arange(len(rows)), a] = np.floor(verts[rows, a]).astype(np.int64)
    hi = lo.copy()
    hi[np.arange(len(rows)), a] += 1
    v0 = v[lo[:, 0], lo[:, 1], lo[:, 2]]
    v1 = v[hi[:, 0], hi[:, 1], hi[:, 2]]
    out = verts.copy()
    out[rows] = lo
    out[rows, a] = lo[np.arange(len(rows)), a] + (iso - v0) / (v1 - v0)
    return out


def marching_cubes(grid: ScalarGrid, iso: float) -> TriangleMesh:
    """Triangulated ``iso`` level set; face normals point towards increasing values."""
    from skimage.measure import marching_cubes as _mc

    v = grid.values
    if not (v.min() < iso < v.max()):
        raise EmptyMesh(f"no iso crossing at {iso}")
    verts, faces, _, _ = _mc(v, level=iso, allow_degenerate=False, method="lewiner")
    if len(faces) == 0:
        raise EmptyMesh(f"no iso crossing at {iso}")
    faces = faces.astype(np.int64)
    verts = _exact_crossings(verts.astype(np.float64), v, iso)
    # orientation is global in the table; settle it by a majority vote that
    # samples the field a quarter cell to either side of each face
    tri = verts[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
    c = tri.mean(1)
    unit = ScalarGrid(np.zeros(3), 1.0, v)
    rise = unit.interpolate(c + 0.25 * fn) - unit.interpolate(c - 0.25 * fn)
    if np.sum(rise < 0) > np.sum(rise > 0):
        faces = faces[:, ::-1].copy()
    return TriangleMesh(grid.origin + grid.spacing * verts, faces)


# ---------------------------------------------------------------------------
# Screened Poisson
# ---------------------------------------------------------------------------

def _trilinear(g: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    """Flat node indices (n, 8) and weights for grid coordinates ``g`` (clamped)."""
    shape = np.asarray(shape)
    g = np.clip(g, 0.0, shape - 1.0)
    base = np.minimum(np.floor(g).astype(np.int64), shape - 2)
    f = g - base
    idx, w = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                i = base + (dx, dy, dz)
                idx.append((i[:, 0] * shape[1] + i[:, 1]) * shape[2] + i[:, 2])
                w.append(np.where(dx, f[:, 0], 1 - f[:, 0]) * np.where(dy, f[:, 1], 1 - f[:, 1])
                         * np.where(dz, f[:, 2], 1 - f[:, 2]))
    return np.stack(idx, 1), np.stack(w, 1)


def _diff(n: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


def gradient_operator(shape, spacing: float) -> tuple[sp.csr_matrix, list[tuple[int, int, int]]]:
    """Stacked x/y/z edge differences of a node field, and each edge block's shape."""
    nx, ny, nz = shape
    eye = [sp.identity(n, format="csr") for n in shape]
    gx = sp.kron(_diff(nx), sp.kron(eye[1], eye[2]))
    gy = sp.kron(eye[0], sp.kron(_diff(ny), eye[2]))
    gz = sp.kron(eye[0], sp.kron(eye[1], _diff(nz)))
    g = sp.vstack([gx, gy, gz]).tocsr() / spacing
    return g, [(nx - 1, ny, nz), (nx, ny - 1, nz), (nx, ny, nz - 1)]


def laplacian(shape, spacing: float) -> sp.csr_matrix:
    """Symmetric positive semi-definite ``G^T G`` (the negated Laplacian)."""
    g, _ = gradient_operator(shape, spacing)
    return (g.T @ g).tocsr()


@dataclass
class SolveReport:
    iterations: int
    residuals: list[float] = field(default_factory=list)  # relative residual norms
    converged: bool = False


def conjugate_residual(a: sp.spmatrix, b: np.ndarray, x0: np.ndarray | None = None,
                       tol: float = 1e-6, max_iterations: int = 2000) -> tuple[np.ndarray, SolveReport]:
    """Conjugate residual iteration for symmetric ``a``.

    Unlike plain conjugate gradients it minimises the residual norm over the
    Krylov space, so the recorded residual never increases.
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - a @ x
    bnorm = float(np.linalg.norm(b)) or 1.0
    report = SolveReport(0, [float(np.linalg.norm(r)) / bnorm])
    if report.residuals[-1] <= tol:
        report.converged = True
        return x, report
    p = r.copy()
    ar = a @ r
    ap = ar.copy()
    rar = float(r @ ar)
    for it in range(1, max_iterations + 1):
        denom = float(ap @ ap)
        if denom == 0.0 or rar == 0.0:
            break
        alpha = rar / denom
        x += alpha * p
        r -= alpha * ap
        report.iterations = it
        report.residuals.append(float(np.linalg.norm(r)) / bnorm)
        if report.residuals[-1] <= tol:
            report.converged = True
            break
        ar = a @ r
        rar_new = float(r @ ar)
        beta = rar_new / rar
        rar = rar_new
        p = r + beta * p
        ap = ar + beta * ap
    return x, report


@dataclass
class PoissonResult:
    mesh: TriangleMesh
    grid: ScalarGrid        # indicator field, high inside
    iso: float
    solve: SolveReport


def _sample_areas(points: np.ndarray, k: int = 8) -> np.ndarray:
    """Local surface area per sample from the k-th neighbour distance."""
    k = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    return math.pi * d[:, -1] ** 2 / k


def screened_poisson(cloud: PointCloud, resolution: int = 64, screening: float = 4.0,
                     padding: float = 0.1, max_iterations: int = 2000,
                     tol: float = 1e-6) -> PoissonResult:
    """Screened Poisson surface from an oriented cloud (outward normals).

    Works in a frame where the padded bounding box's longest side is 1; the
    mesh is mapped back to the input frame.
    """
    if cloud.normals is None:
        raise ValueError("screened Poisson needs normals")
    pts = cloud.points
    if len(pts) < 100:
        raise InsufficientPoints(f"need at least 100 points, got {len(pts)}")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if screening < 0:
        raise ValueError("screening weight must be non-negative")
    normals = cloud.normals / np.linalg.norm(cloud.normals, axis=1, keepdims=True)

    lo, hi = pts.min(0), pts.max(0)
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise InsufficientPoints("degenerate point cloud")
    lo = lo - padding * extent
    side = extent * (1 + 2 * padding)
    q = (pts - lo) / side  # unit-cube frame
    h = 1.0 / resolution
    shape = tuple(int(math.ceil((float(np.max(q[:, a])) + padding * extent / side) / h)) + 1 for a in range(3))
    shape = tuple(max(2, s) for s in shape)

    areas = _sample_areas(q)
    g, blocks = gradient_operator(shape, h)
    # splat inward normals onto the three staggered edge grids
    v = np.zeros(g.shape[0])
    offset = 0
    for axis, bshape in enumerate(blocks):
        shift = np.zeros(3)
        shift[axis] = 0.5
        idx, w = _trilinear(q / h - shift, bshape)
        contrib = (-normals[:, axis] * areas)[:, None] * w / h ** 3
        v[offset:offset + int(np.prod(bshape))] = np.bincount(
            idx.reshape(-1), contrib.reshape(-1), minlength=int(np.prod(bshape)))
        offset += int(np.prod(bshape))

    vol = h ** 3
    nodes = int(np.prod(shape))
    sidx, sw = _trilinear(q / h, shape)
    b_mat = sp.csr_matrix((sw.reshape(-1), (np.repeat(np.arange(len(q)), 8), sidx.reshape(-1))),
                          shape=(len(q), nodes))
    a = (g.T @ g) * vol + screening * (b_mat.T @ sp.diags(areas) @ b_mat)
    rhs = (g.T @ v) * vol + screening * 0.5 * (b_mat.T @ areas)
    chi, report = conjugate_residual(a.tocsr(), rhs, tol=tol, max_iterations=max_iterations)
    if not report.converged:
        warnings.warn(SolverDidNotConverge(
            f"conjugate residual stopped at relative residual {report.residuals[-1]:.3g} "
            f"after {report.iterations} iterations"))

    field_ = chi.reshape(shape)
    iso = float(np.mean(b_mat @ chi))
    grid = ScalarGrid(lo, side * h, field_)
    # outward faces: extract the negated field, which increases outwards; a
    # border of outside values closes surfaces that leave the box (partial scans)
    neg = -field_
    outside = max(float(neg.max()), -iso + 1.0)
    closed = np.pad(neg, 1, constant_values=outside)
    mesh = marching_cubes(ScalarGrid(lo - side * h, side * h, closed), -iso)
    return PoissonResult(mesh, grid, iso, report)


def poisson_reconstruct(cloud: PointCloud, resolution: int = 64, screening: float = 4.0,
                        padding: float = 0.1, max_iterations: int = 2000) -> TriangleMesh:
    return screened_poisson(cloud, resolution, screening, padding, max_iterations).mesh


def mesh_cloud(cloud: PointCloud, *, k: int = 16, resolution: int = 64, screening: float = 4.0,
               padding: float = 0.1, max_iterations: int = 2000,
               cameras: list[PinholeCamera] | None = None) -> TriangleMesh:
    """Normals (if missing) then screened Poisson."""
    if cloud.normals is None:
        cloud = estimate_normals(cloud, k, cameras)
    return poisson_reconstruct(cloud, resolution, screening, padding, max_iterations)
