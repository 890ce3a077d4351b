"""Core geometric types: clouds, meshes, rigid/similarity transforms, cameras.

Conventions used throughout the package:

* units are meters;
* cameras are right-handed and look along +z of their own frame, image
  origin top-left, x to the right, y down;
* integer pixel coordinates are pixel *centres*, so the valid image domain
  is ``[0, width-1] x [0, height-1]``;
* depth is the camera-frame z coordinate, not the ray length;
* ties are always broken by the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import (
    BehindCamera,
    EmptyInput,
    InsufficientPoints,
    InvalidDepth,
    OutOfFrame,
)

_ORTHO_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Point clouds and meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    view_ids: np.ndarray | None = None

    def __post_init__(self):
        raw = np.array(self.points, dtype=np.float64)
        if raw.size and (raw.ndim != 2 or raw.shape[1] != 3):
            raise ValueError(f"points must have shape (n, 3), got {raw.shape}")
        pts = raw.reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals length differs from points length")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.view_ids is not None:
            vid = np.array(self.view_ids).reshape(-1)
            if len(vid) != len(pts):
                raise ValueError("view_ids length differs from points length")
            if len(vid) and (vid.min() < 0):
                raise ValueError("view_ids must be non-negative")
            object.__setattr__(self, "view_ids", _frozen(vid.astype(np.int64)))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.view_ids is None else self.view_ids[idx],
        )

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.view_ids)

    def bbox_diagonal(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("vertex coordinates must be finite")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face references the same vertex twice")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per (face, edge) incidence, sorted pairs."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two faces, with opposite winding."""
        if len(self.faces) == 0:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        if not np.all(counts == 2):
            return False
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return len(np.unique(directed, axis=0)) == len(directed)

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0))
        used = len(np.unique(self.faces))
        return used - n_edges + len(self.faces)

    def signed_volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def vertex_normals(self) -> np.ndarray:
        t = self.triangles
        fn = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])  # area weighted
        vn = np.zeros_like(self.vertices)
        for c in range(3):
            np.add.at(vn, self.faces[:, c], fn)
        ln = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(ln > 0, ln, 1.0)

    def sample_surface(self, n: int, seed: int = 0, return_faces: bool = False):
        """Area-weighted uniform samples on the surface, with face normals."""
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        cdf = np.cumsum(areas)
        face = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        face = np.minimum(face, len(areas) - 1)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        t = self.triangles[face]
        pts = ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
               + (r1 * r2)[:, None] * t[:, 2])
        cloud = PointCloud(pts, self.face_normals()[face])
        if return_faces:
            return cloud, face
        return cloud


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.array(r, dtype=np.float64).reshape(3, 3)
    if (np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL * 10
            or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL * 10):
        raise ValueError("rotation must be orthonormal with det +1")
    return _frozen(r)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        object.__setattr__(self, "translation",
                           _frozen(np.array(self.translation, dtype=np.float64).reshape(3)))

    @property
    def scale(self) -> float:
        return 1.0

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def to_sim3(self) -> "Sim3Transform":
        return Sim3Transform(1.0, self.rotation, self.translation)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """x -> scale * rotation @ x + translation."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        s = float(self.scale)
        if not (s > 0 and np.isfinite(s)):
            raise ValueError("scale must be positive")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        object.__setattr__(self, "translation",
                           _frozen(np.array(self.translation, dtype=np.float64).reshape(3)))

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls()

    def to_sim3(self) -> "Sim3Transform":
        return self

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(x, dtype=np.float64) @ self.rotation.T) + self.translation

    def inverse(self) -> "Sim3Transform":
        return invert(self)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m


Transform = Sim3Transform | RigidTransform


def compose(a: Transform, b: Transform) -> Sim3Transform:
    """``compose(a, b)(x) == a(b(x))``."""
    a, b = a.to_sim3(), b.to_sim3()
    return Sim3Transform(
        a.scale * b.scale,
        _reorthonormalize(a.rotation @ b.rotation),
        a.scale * (a.rotation @ b.translation) + a.translation,
    )


def compose_rigid(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(_reorthonormalize(a.rotation @ b.rotation),
                          a.rotation @ b.translation + a.translation)


def invert(t: Transform) -> Sim3Transform:
    t = t.to_sim3()
    rt = t.rotation.T
    inv_s = 1.0 / t.scale
    return Sim3Transform(inv_s, rt, -inv_s * (rt @ t.translation))


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    # products of rotations drift by ~1 ulp per multiply; snap back via SVD
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def apply_transform(t: Transform, p: PointCloud) -> PointCloud:
    if len(p) == 0:
        raise EmptyInput("cannot transform an empty cloud")
    pts = t.apply(p.points)
    normals = None
    if p.normals is not None:
        n = p.normals @ t.rotation.T
        normals = n / np.linalg.norm(n, axis=1, keepdims=True)
    return PointCloud(pts, normals, p.view_ids)


def transform_mesh(t: Transform, mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(t.apply(mesh.vertices), mesh.faces)


def axis_angle_to_matrix(v) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(v, dtype=np.float64)).as_matrix()


def matrix_to_axis_angle(r) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(r, dtype=np.float64)).as_rotvec()


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation(rng: np.random.Generator, max_angle: float | None = None) -> np.ndarray:
    """Uniform over SO(3), or uniform axis with angle uniform in [0, max_angle]."""
    if max_angle is None:
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        return Rotation.from_quat(q).as_matrix()
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return axis_angle_to_matrix(axis * rng.uniform(0.0, max_angle))


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return self.world_to_camera.inverse().translation

    @property
    def view_direction(self) -> np.ndarray:
        """World-frame optical axis."""
        return self.world_to_camera.rotation[2].copy()

    def with_pose(self, world_to_camera: RigidTransform) -> "PinholeCamera":
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                             world_to_camera)

    def in_frame(self, u, v):
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)

    def project_points(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised projection without error checks: (N,2) pixels, (N,) depths."""
        pc = self.world_to_camera.apply(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], 1)
        return uv, z

    def back_project_points(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        d = np.asarray(depth, dtype=np.float64).reshape(-1)
        pc = np.stack([(uv[:, 0] - self.cx) / self.fx * d, (uv[:, 1] - self.cy) / self.fy * d, d], 1)
        r, t = self.world_to_camera.rotation, self.world_to_camera.translation
        return (pc - t) @ r


def project(camera: PinholeCamera, p) -> tuple[np.ndarray, float]:
    """World point -> (pixel (u, v), depth)."""
    pc = camera.world_to_camera.apply(np.asarray(p, dtype=np.float64).reshape(3))
    z = pc[2]
    if not z > 0:
        raise BehindCamera(f"point has camera-frame z={z:.6g}")
    uv = np.array([camera.fx * pc[0] / z + camera.cx, camera.fy * pc[1] / z + camera.cy])
    if not camera.in_frame(uv[0], uv[1]):
        raise OutOfFrame(f"pixel ({uv[0]:.3f}, {uv[1]:.3f}) outside {camera.width}x{camera.height}")
    return uv, float(z)


def back_project(camera: PinholeCamera, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepth(f"depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    if not camera.in_frame(u, v):
        raise OutOfFrame(f"pixel ({u:.3f}, {v:.3f}) outside image")
    return camera.back_project_points([[u, v]], [depth])[0]


def look_at(position, target, *, fx: float, fy: float, cx: float, cy: float,
            width: int, height: int, up=(0.0, 0.0, 1.0)) -> PinholeCamera:
    """Camera at ``position`` whose optical axis passes through ``target``."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, z)) > 0.999:
        up = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    # image y points down, so camera y is roughly -up
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return PinholeCamera(fx, fy, cx, cy, width, height, RigidTransform(r, -r @ position))


# ---------------------------------------------------------------------------
# Sampling and spatial queries
# ---------------------------------------------------------------------------

def fps_indices(points: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Farthest point sampling indices.

    The first point maximises the projection onto a seeded random direction
    (lowest index on ties), so the selection is permutation-equivariant.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k > n:
        raise InsufficientPoints(f"cannot pick {k} points from {n}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    u = np.random.default_rng(seed).standard_normal(3)
    u /= np.linalg.norm(u)
    return _fps_from(np.ascontiguousarray(points), k, int(np.argmax(points @ u)))


@numba.njit(cache=True)
def _fps_from(points, k, first):
    n = points.shape[0]
    out = np.empty(k, dtype=np.int64)
    out[0] = first
    mind = np.empty(n)
    for j in range(n):
        dx = points[j, 0] - points[first, 0]
        dy = points[j, 1] - points[first, 1]
        dz = points[j, 2] - points[first, 2]
        mind[j] = dx * dx + dy * dy + dz * dz
    for i in range(1, k):
        nxt = 0
        best = mind[0]
        for j in range(1, n):
            if mind[j] > best:
                best = mind[j]
                nxt = j
        out[i] = nxt
        for j in range(n):
            dx = points[j, 0] - points[nxt, 0]
            dy = points[j, 1] - points[nxt, 1]
            dz = points[j, 2] - points[nxt, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
    return out


def farthest_point_sample(p: PointCloud, k: int, seed: int = 0) -> PointCloud:
    return p.subset(fps_indices(p.points, k, seed))


class NearestNeighborIndex:
    """Exact nearest-neighbour index whose answers equal a linear scan.

    Distances are recomputed as ``sqrt(sum((q - p)**2))`` and ties resolve
    to the lowest index; the KD-tree only narrows candidates.
    """

    _K = 4

    def __init__(self, points):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if len(self.points) == 0:
            raise EmptyInput("cannot index an empty point set")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(self._K, len(self.points))
        _, cand = self._tree.query(q, k=k)
        cand = cand.reshape(len(q), k)
        d = np.sqrt(np.sum((self.points[cand] - q[:, None, :]) ** 2, axis=2))
        # lexicographic (distance, index) minimum over candidates
        best = np.empty(len(q), dtype=np.int64)
        bestd = np.empty(len(q))
        dmin = d.min(axis=1)
        tied = d == dmin[:, None]
        best[:] = np.where(tied, cand, np.iinfo(np.int64).max).min(axis=1)
        bestd[:] = dmin
        # all k candidates tied: there may be more equidistant points beyond k
        overflow = np.nonzero(tied.all(axis=1) & (k < len(self.points)))[0]
        for i in overflow:
            ids = np.asarray(self._tree.query_ball_point(q[i], dmin[i] * (1 + 1e-12) + 1e-300))
            dd = np.sqrt(np.sum((self.points[ids] - q[i]) ** 2, axis=1))
            best[i] = ids[dd == dd.min()].min()
            bestd[i] = dd.min()
        return best, bestd

    def query_one(self, q) -> tuple[int, float]:
        i, d = self.query(np.asarray(q).reshape(1, 3))
        return int(i[0]), float(d[0])

    def knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64).reshape(-1, 3), k=k)
        return i.reshape(-1, k), d.reshape(-1, k)


def nearest_neighbor(index: NearestNeighborIndex, query) -> tuple[int, float]:
    return index.query_one(query)


@numba.njit(cache=True)
def _closest_on_triangle(px, py, pz, t):
    """Closest point on triangle ``t`` (3x3) by a Voronoi-region walk."""
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    abx, aby, abz = t[1, 0] - ax, t[1, 1] - ay, t[1, 2] - az
    acx, acy, acz = t[2, 0] - ax, t[2, 1] - ay, t[2, 2] - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - t[1, 0], py - t[1, 1], pz - t[1, 2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return t[1, 0], t[1, 1], t[1, 2]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - t[2, 0], py - t[2, 1], pz - t[2, 2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return t[2, 0], t[2, 1], t[2, 2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bx, by, bz = t[1, 0], t[1, 1], t[1, 2]
        return bx + w * (t[2, 0] - bx), by + w * (t[2, 1] - by), bz + w * (t[2, 2] - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w)


@numba.njit(cache=True)
def _closest_among(q, cand, tri, point, dist, face):
    """Per query, the closest point over its candidate faces (lowest face id on ties)."""
    for i in range(q.shape[0]):
        best = np.inf
        bf = -1
        for j in range(cand.shape[1]):
            f = cand[i, j]
            x, y, z = _closest_on_triangle(q[i, 0], q[i, 1], q[i, 2], tri[f])
            d = math.sqrt((x - q[i, 0]) ** 2 + (y - q[i, 1]) ** 2 + (z - q[i, 2]) ** 2)
            if d < best or (d == best and f < bf):
                best, bf = d, f
                point[i, 0], point[i, 1], point[i, 2] = x, y, z
        dist[i] = best
        face[i] = bf


def closest_point_on_triangles(p, triangles) -> np.ndarray:
    """Closest point to each ``p[i]`` on triangle ``triangles[i]`` (n, 3, 3)."""
    p = np.ascontiguousarray(np.asarray(p, dtype=np.float64).reshape(-1, 3))
    tri = np.ascontiguousarray(np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3))
    out = np.empty_like(p)
    _closest_among(p, np.arange(len(p), dtype=np.int64)[:, None], tri, out,
                   np.empty(len(p)), np.empty(len(p), dtype=np.int64))
    return out


@numba.njit(cache=True)
def _grid_query(q, tri, origin, h, dims, start, faces, point, dist, face):
    for i in range(q.shape[0]):
        px, py, pz = q[i, 0], q[i, 1], q[i, 2]
        c = np.empty(3, dtype=np.int64)
        for a in range(3):
            ca = int(math.floor((q[i, a] - origin[a]) / h))
            c[a] = min(max(ca, 0), dims[a] - 1)
        best = np.inf
        bx = by = bz = 0.0
        bf = -1
        r = 0
        while True:
            lo0, hi0 = max(c[0] - r, 0), min(c[0] + r, dims[0] - 1)
            lo1, hi1 = max(c[1] - r, 0), min(c[1] + r, dims[1] - 1)
            lo2, hi2 = max(c[2] - r, 0), min(c[2] + r, dims[2] - 1)
            for x in range(lo0, hi0 + 1):
                for y in range(lo1, hi1 + 1):
                    inner = abs(x - c[0]) != r and abs(y - c[1]) != r
                    z = lo2
                    while z <= hi2:
                        if inner and abs(z - c[2]) != r:
                            # jump to the far face of the shell
                            z = c[2] + r
                            continue
                        # skip cells whose box is farther than the best so far
                        bd2 = 0.0
                        for a, k in ((0, x), (1, y), (2, z)):
                            lo_a = origin[a] + k * h
                            if q[i, a] < lo_a:
                                bd2 += (lo_a - q[i, a]) ** 2
                            elif q[i, a] > lo_a + h:
                                bd2 += (q[i, a] - lo_a - h) ** 2
                        if bd2 > best * best:
                            z += 1
                            continue
                        cell = (x * dims[1] + y) * dims[2] + z
                        for s in range(start[cell], start[cell + 1]):
                            f = faces[s]
                            cx, cy, cz = _closest_on_triangle(px, py, pz, tri[f])
                            dx, dy, dz = cx - px, cy - py, cz - pz
                            d = math.sqrt(dx * dx + dy * dy + dz * dz)
                            if d < best or (d == best and f < bf):
                                best = d
                                bf = f
                                bx, by, bz = cx, cy, cz
                        z += 1
            # distance to the nearest unvisited cell: the visited block's
            # faces that do not lie on the grid boundary
            gap = np.inf
            for a, lo, hi in ((0, lo0, hi0), (1, lo1, hi1), (2, lo2, hi2)):
                if lo > 0:
                    gap = min(gap, q[i, a] - (origin[a] + lo * h))
                if hi < dims[a] - 1:
                    gap = min(gap, origin[a] + (hi + 1) * h - q[i, a])
            if best < gap:
                break
            r += 1
        point[i, 0], point[i, 1], point[i, 2] = bx, by, bz
        dist[i] = best
        face[i] = bf


class MeshSurfaceIndex:
    """Exact closest-point queries against a triangle mesh surface.

    Faces are bucketed into a uniform grid by their bounding boxes; a query
    scans rings of cells around its own cell until no unvisited cell can hold
    a closer point. Ties go to the lowest face id.
    """

    def __init__(self, mesh: TriangleMesh, cell_size: float | None = None):
        if len(mesh.faces) == 0:
            raise EmptyInput("cannot index a mesh without faces")
        self.mesh = mesh
        self._tri = np.ascontiguousarray(mesh.triangles)
        lo = self._tri.min((0, 1))
        hi = self._tri.max((0, 1))
        if cell_size is None:
            edges = np.linalg.norm(self._tri - np.roll(self._tri, 1, axis=1), axis=2)
            cell_size = 2.0 * float(np.mean(edges))
        h = max(cell_size, 1e-12)
        dims = np.maximum(np.ceil((hi - lo) / h).astype(np.int64), 1)
        fmin = np.clip(np.floor((self._tri.min(1) - lo) / h).astype(np.int64), 0, dims - 1)
        fmax = np.clip(np.floor((self._tri.max(1) - lo) / h).astype(np.int64), 0, dims - 1)
        cells, owners = [], []
        for f in range(len(self._tri)):
            xs, ys, zs = (np.arange(fmin[f, a], fmax[f, a] + 1) for a in range(3))
            g = ((xs[:, None, None] * dims[1] + ys[None, :, None]) * dims[2] + zs[None, None, :]).ravel()
            cells.append(g)
            owners.append(np.full(len(g), f, dtype=np.int64))
        cells, owners = np.concatenate(cells), np.concatenate(owners)
        order = np.lexsort((owners, cells))
        self._faces = owners[order]
        counts = np.bincount(cells, minlength=int(np.prod(dims)))
        self._start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self._origin, self._h, self._dims = lo.astype(np.float64), float(h), dims

    def query(self, queries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(closest points, distances, face ids), ties to the lowest face id."""
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        point = np.empty_like(q)
        dist = np.empty(len(q))
        face = np.empty(len(q), dtype=np.int64)
        _grid_query(q, self._tri, self._origin, self._h, self._dims, self._start, self._faces,
                    point, dist, face)
        return point, dist, face
        # an untested face can only be closer if its centroid lies within best + reach
        todo = np.flatnonzero(cdist[:, -1] <= dist + self._reach)
        if len(todo):
            sub = np.ascontiguousarray(q[todo])
            balls = self._tree.query_ball_point(sub, dist[todo] + self._reach)
            width = max(len(b) for b in balls)
            wide = np.empty((len(todo), width), dtype=np.int64)
            for i, b in enumerate(balls):
                wide[i, :len(b)] = b
                wide[i, len(b):] = b[0]
            p, d, f = np.empty_like(sub), np.empty(len(sub)), np.empty(len(sub), dtype=np.int64)
            _closest_among(sub, wide, self._tri, p, d, f)
            point[todo], dist[todo], face[todo] = p, d, f
        return point, dist, face
