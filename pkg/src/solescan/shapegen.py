"""Procedural foot-like shapes ("footoids"), the PCA shape model, and the
Chamfer-fitting baseline.

Frame of every footoid: +x heel-to-toe, +y medial, +z dorsal (up), meters,
bounding-box centre at the origin.

The template is an icosphere (4 subdivisions, 2562 vertices) pushed through a
map that is monotone within every x-slice, so the result stays embedded.
Shapes are ``scale * (template + sum_k w_k * sigma_k * B_k)`` with eight
analytic displacement fields B_k:

    0 length      B = (0.04 x, 0, 0)
    1 forefoot    B = (0, 0.10 y S(x; -0.02, 0.06), 0)
    2 arch        B = (0, 0, 0.006 G(x; -0.01, 0.035) G(z; zs, 0.015) T(y))
    3 toe splay   B = (0, 0.12 y S(x; 0.06, 0.12), 0)
    4 heel        B = 0.005 G(|p - h|; 0, 0.035) (p - h)/|p - h|
    5 dorsal      B = (0, 0, 0.05 (z - zs))
    6 twist       B = 0.35 x (0, -(z - zm), y)        (pronation about x)
    7 toe lift    B = (0, 0, 0.006 S(x; 0.04, 0.13))

with S a smoothstep, G a Gaussian bump, T(y) = 0.5 (1 + tanh(y / 0.015)),
zs the sole height, zm the mid height, h the heel centre. All sigma_k = 1.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import CorrespondenceError, DegenerateShape, DivergedFit, EmptyInput
from .geometry import PointCloud, Sim3Transform, TriangleMesh, matrix_to_axis_angle

N_MODES = 8
MODE_NAMES = ("length", "forefoot", "arch", "toe_splay", "heel", "dorsal", "twist", "toe_lift")
MODE_SIGMAS = np.ones(N_MODES)


@dataclass(frozen=True)
class FootoidParams:
    coefficients: np.ndarray = field(default_factory=lambda: np.zeros(N_MODES))
    scale: float = 1.0

    def __post_init__(self):
        w = np.array(self.coefficients, dtype=np.float64).reshape(-1)
        if len(w) != N_MODES:
            raise ValueError(f"expected {N_MODES} coefficients")
        if np.any(np.abs(w) > 3.0):
            raise ValueError("coefficients must lie within +-3")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "coefficients", w)


@dataclass(frozen=True)
class FootoidSample:
    params: FootoidParams
    mesh: TriangleMesh


# ---------------------------------------------------------------------------
# Template
# ---------------------------------------------------------------------------

def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return np.array(verts), np.array(faces, dtype=np.int64)


def _smoothstep(x, lo, hi):
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _bump(x, mu, sd):
    return np.exp(-((x - mu) / sd) ** 2)


def _foot_map(sph: np.ndarray) -> np.ndarray:
    a, b, c = sph[:, 0], sph[:, 1], sph[:, 2]
    rho = np.sqrt(np.maximum(1.0 - a * a, 0.0))
    safe = np.where(rho > 1e-12, rho, 1.0)
    beta = np.where(rho > 1e-12, b / safe, 0.0)
    gamma = np.where(rho > 1e-12, c / safe, 0.0)
    s = (a + 1.0) / 2.0  # 0 heel .. 1 toe
    # boxy tips: superellipse taper instead of the ellipsoid sqrt(1 - a^2)
    r = (1.0 - np.abs(a) ** 3) ** (1.0 / 3.0)
    length = 0.26
    half_w = 0.033 + 0.018 * _smoothstep(s, 0.25, 0.70) + 0.004 * _bump(s, 0.08, 0.08)
    h_bot = 0.018 + 0.002 * _bump(s, 0.1, 0.1)
    h_top = 0.016 + 0.092 * _bump(s, 0.24, 0.22) + 0.010 * _smoothstep(s, 0.3, 0.55) * (1 - _smoothstep(s, 0.75, 1.0))
    centre = h_bot + 0.008 * _smoothstep(s, 0.80, 1.0)
    # medial arch lifts the sole, never flips it
    arch = 0.55 * _bump(s, 0.45, 0.14) * 0.5 * (1.0 + np.tanh(beta / 0.35))
    h = np.where(gamma >= 0, h_top, h_bot * (1.0 - arch))
    x = 0.5 * length * a
    y = half_w * r * beta
    z = centre + r * h * gamma
    return np.stack([x, y, z], 1)


@functools.lru_cache(maxsize=1)
def _template_arrays() -> tuple[np.ndarray, np.ndarray]:
    sph, faces = icosphere(4)
    v = _foot_map(sph)
    v -= 0.5 * (v.max(0) + v.min(0))
    v = v.astype(np.float32).astype(np.float64)
    v.setflags(write=False)
    faces.setflags(write=False)
    return v, faces


def template_mesh() -> TriangleMesh:
    v, f = _template_arrays()
    return TriangleMesh(v, f)


def _sole_height(v):
    return v[:, 2].min()


@functools.lru_cache(maxsize=1)
def basis_fields() -> np.ndarray:
    """(8, V, 3) displacement fields evaluated at the template vertices."""
    v, _ = _template_arrays()
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zs = _sole_height(v)
    zm = 0.5 * (v[:, 2].max() + zs)
    zero = np.zeros_like(x)
    heel = np.array([x.min() + 0.035, 0.0, zs + 0.03])
    dh = v - heel
    rh = np.linalg.norm(dh, axis=1)
    radial = dh / np.maximum(rh, 1e-9)[:, None]
    side = 0.5 * (1.0 + np.tanh(y / 0.015))
    b = np.stack([
        np.stack([0.04 * x, zero, zero], 1),
        np.stack([zero, 0.10 * y * _smoothstep(x, -0.02, 0.06), zero], 1),
        np.stack([zero, zero, 0.006 * _bump(x, -0.01, 0.035) * _bump(z, zs, 0.015) * side], 1),
        np.stack([zero, 0.12 * y * _smoothstep(x, 0.06, 0.12), zero], 1),
        0.005 * _bump(rh, 0.0, 0.035)[:, None] * radial,
        np.stack([zero, zero, 0.05 * (z - zs)], 1),
        0.35 * x[:, None] * np.stack([zero, -(z - zm), y], 1),
        np.stack([zero, zero, 0.006 * _smoothstep(x, 0.04, 0.13)], 1),
    ])
    b.setflags(write=False)
    return b


# ---------------------------------------------------------------------------
# Synthesis and validation
# ---------------------------------------------------------------------------

def footoid_vertices(params: FootoidParams) -> np.ndarray:
    v, _ = _template_arrays()
    disp = np.tensordot(params.coefficients * MODE_SIGMAS, basis_fields(), axes=1)
    return params.scale * (v + disp)


def synthesize(params: FootoidParams, check: bool = True) -> FootoidSample:
    _, f = _template_arrays()
    mesh = TriangleMesh(footoid_vertices(params), f)
    if check:
        bad = self_intersections(mesh)
        if bad:
            raise DegenerateShape(f"{bad} intersecting triangle pairs")
    return FootoidSample(params, mesh)


def _seg_tri(p0, p1, a, b, c):
    """Vectorised strict segment/triangle crossing test."""
    d = p1 - p0
    e1, e2 = b - a, c - a
    pv = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pv)
    ok = np.abs(det) > 1e-18
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = p0 - a
    u = np.einsum("ij,ij->i", tv, pv) * inv
    qv = np.cross(tv, e1)
    v = np.einsum("ij,ij->i", d, qv) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    return ok & (u > 0) & (v > 0) & (u + v < 1) & (t > 0) & (t < 1)


def self_intersections(mesh: TriangleMesh, max_pairs: int | None = None, seed: int = 0) -> int:
    """Count intersecting pairs among nearby, vertex-disjoint triangles.

    Candidate pairs come from overlapping bounding spheres; with
    ``max_pairs`` a seeded random subset of them is tested.
    """
    tri = mesh.triangles
    cen = tri.mean(1)
    rad = np.linalg.norm(tri - cen[:, None], axis=2).max(1)
    pairs = cKDTree(cen).query_pairs(2.0 * rad.max(), output_type="ndarray")
    if len(pairs) == 0:
        return 0
    i, j = pairs[:, 0], pairs[:, 1]
    near = np.linalg.norm(cen[i] - cen[j], axis=1) <= rad[i] + rad[j]
    f = mesh.faces
    shared = (f[i][:, :, None] == f[j][:, None, :]).any(axis=(1, 2))
    keep = near & ~shared
    i, j = i[keep], j[keep]
    if max_pairs is not None and len(i) > max_pairs:
        sel = np.random.default_rng(seed).choice(len(i), max_pairs, replace=False)
        i, j = i[sel], j[sel]
    hit = np.zeros(len(i), dtype=bool)
    for src, dst in ((i, j), (j, i)):
        a, b, c = tri[dst, 0], tri[dst, 1], tri[dst, 2]
        for e0, e1 in ((0, 1), (1, 2), (2, 0)):
            hit |= _seg_tri(tri[src, e0], tri[src, e1], a, b, c)
    return int(hit.sum())


def sample_coefficients(n: int, seed: int) -> np.ndarray:
    """(n, 8) standard-normal draws truncated to [-3, 3] by resampling."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, N_MODES))
    bad = np.abs(w) > 3.0
    while bad.any():
        w[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(w) > 3.0
    return w


def sample_dataset(n: int, seed: int, check: bool = True) -> list[FootoidSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [synthesize(FootoidParams(w), check=check) for w in sample_coefficients(n, seed)]


# ---------------------------------------------------------------------------
# Landmarks
# ---------------------------------------------------------------------------

LANDMARK_LABELS = ("heel_apex", "toe_tip", "medial_ball", "lateral_ball", "ankle_front", "arch_peak")


def template_landmarks() -> tuple[list[str], np.ndarray]:
    """Six template face centroids nearest to anatomical target points.

    Centroids rather than vertices: the depth field is planar inside a facet,
    so bilinear depth lookups there are exact.

    Targets are expressed relative to the bounding box (xmin/xmax heel/toe,
    zs sole height, zt top) and sit on dorsal-facing or side regions so rigs
    restricted to the upper hemisphere still observe most of them.
    """
    mesh = template_mesh()
    v = mesh.vertices
    x0, x1 = v[:, 0].min(), v[:, 0].max()
    zs = v[:, 2].min()
    length = x1 - x0
    xb = x0 + 0.72 * length
    targets = np.array([
        [x0, 0.0, zs + 0.045],               # heel apex
        [x1, 0.0, zs + 0.03],                # toe tip
        [xb, 0.06, zs + 0.032],              # medial ball (upper shoulder)
        [xb, -0.06, zs + 0.032],             # lateral ball
        [x0 + 0.42 * length, 0.0, 0.2],      # ankle front, top midline
        [x0 + 0.47 * length, 0.06, zs + 0.022],  # arch peak, medial wall
    ])
    cen = mesh.triangles.mean(1)
    idx = [int(np.argmin(np.sum((cen - t) ** 2, axis=1))) for t in targets]
    return list(LANDMARK_LABELS), cen[idx].copy()


# ---------------------------------------------------------------------------
# PCA shape model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcaShapeModel:
    mean_vertices: np.ndarray  # (V, 3)
    basis: np.ndarray          # (V*3, m), orthonormal columns
    mode_stddevs: np.ndarray   # (m,)
    faces: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.basis.shape[1]

    def reconstruct(self, coefficients=None) -> np.ndarray:
        """Vertices for raw (unnormalised) coefficients along the basis."""
        if coefficients is None or len(coefficients) == 0:
            return self.mean_vertices.copy()
        c = np.asarray(coefficients, dtype=np.float64)
        return self.mean_vertices + (self.basis @ c).reshape(-1, 3)

    def project(self, vertices) -> np.ndarray:
        d = np.asarray(vertices, dtype=np.float64).reshape(-1) - self.mean_vertices.reshape(-1)
        return self.basis.T @ d

    def mesh(self, coefficients=None) -> TriangleMesh:
        return TriangleMesh(self.reconstruct(coefficients), self.faces)


def build_pca(samples, m: int) -> PcaShapeModel:
    meshes = [s.mesh if isinstance(s, FootoidSample) else s for s in samples]
    if len(meshes) < m + 1:
        raise ValueError(f"need at least {m + 1} samples for {m} modes")
    faces = meshes[0].faces
    nv = len(meshes[0].vertices)
    for mesh in meshes[1:]:
        if len(mesh.vertices) != nv or not np.array_equal(mesh.faces, faces):
            raise CorrespondenceError("all samples must share the template topology")
    data = np.stack([mesh.vertices.reshape(-1) for mesh in meshes])
    mean = data.mean(0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:m].T.copy()
    # sign convention: largest-magnitude entry of each mode is positive
    for k in range(m):
        if basis[np.argmax(np.abs(basis[:, k])), k] < 0:
            basis[:, k] *= -1
    return PcaShapeModel(mean.reshape(-1, 3), basis, s[:m] / math.sqrt(len(meshes) - 1), faces.copy())


# ---------------------------------------------------------------------------
# Chamfer fitting baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitOptions:
    steps: int = 400
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    n_model_points: int = 2048
    max_target_points: int = 32768
    seed: int = 0
    init: Sim3Transform | None = None


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray   # in units of mode stddevs
    transform: Sim3Transform
    cd: float                  # unsquared, fitted samples vs target
    loss_trace: np.ndarray
    vertices: np.ndarray

    def mesh(self, faces) -> TriangleMesh:
        return TriangleMesh(self.vertices, faces)

    def __iter__(self):
        return iter((self.coefficients, self.transform, self.cd))


def model_sample_weights(model: PcaShapeModel, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (face, barycentric) sample layout on the mean surface."""
    _, faces = model.mesh().sample_surface(n, seed, return_faces=True)
    rng = np.random.default_rng(seed + 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], 1)
    return faces, bary


def fit_pca(model: PcaShapeModel, target, opts: FitOptions = FitOptions()) -> FitResult:
    """Adam on squared Chamfer over shape coefficients and a similarity pose.

    Optimisation runs in a frame normalised by the target's centroid and
    bounding radius; coefficients are in stddev units and clamped to +-3.
    Returns the best iterate.
    """
    import torch

    from .completion.autodiff import rodrigues
    from .metrics import chamfer

    pts = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
    if len(pts) == 0:
        raise EmptyInput("empty fit target")
    if len(pts) > opts.max_target_points:
        sel = np.random.default_rng(opts.seed).choice(len(pts), opts.max_target_points, replace=False)
        pts = pts[np.sort(sel)]
    centre = pts.mean(0)
    radius = float(np.linalg.norm(pts - centre, axis=1).max()) or 1.0

    faces, bary = model_sample_weights(model, opts.n_model_points, opts.seed)
    m = model.n_modes
    dt = torch.float64
    mean_t = torch.tensor(model.mean_vertices, dtype=dt)
    modes_t = torch.tensor((model.basis * model.mode_stddevs).reshape(-1, 3, m), dtype=dt)
    tri_idx = torch.tensor(model.faces[faces], dtype=torch.long)
    bary_t = torch.tensor(bary, dtype=dt)
    tgt_np = (pts - centre) / radius
    tgt = torch.tensor(tgt_np, dtype=dt)
    tgt_tree = cKDTree(tgt_np)

    def chamfer_sq(p):
        # partners from KD-trees (no gradient), distances as explicit differences
        p_np = p.detach().numpy()
        to_tgt = torch.as_tensor(tgt_tree.query(p_np)[1])
        to_model = torch.as_tensor(cKDTree(p_np).query(tgt_np)[1])
        return ((p - tgt[to_tgt]) ** 2).sum(-1).mean() + ((tgt - p[to_model]) ** 2).sum(-1).mean()

    init = opts.init or Sim3Transform()
    z = torch.zeros(m, dtype=dt, requires_grad=True)
    rot = torch.tensor(matrix_to_axis_angle(init.rotation), dtype=dt, requires_grad=True)
    log_s = torch.tensor(math.log(init.scale), dtype=dt, requires_grad=True)
    # world translation = centre + radius * tau
    tau = torch.tensor((init.translation - centre) / radius, dtype=dt, requires_grad=True)
    params = [z, rot, log_s, tau]
    opt = torch.optim.Adam(params, lr=opts.lr, betas=opts.betas, eps=opts.eps)

    def forward():
        verts = mean_t + modes_t @ z
        p = (bary_t[:, :, None] * verts[tri_idx]).sum(1)
        r = rodrigues(rot)
        return torch.exp(log_s) / radius * (p @ r.T) + tau, verts, r

    trace = []
    best_val, best = math.inf, [t.detach().clone() for t in params]
    for step in range(opts.steps + 1):
        opt.zero_grad()
        p, _, _ = forward()
        loss = chamfer_sq(p)
        val = float(loss.detach())
        if not math.isfinite(val):
            raise DivergedFit(f"non-finite loss at step {step}")
        trace.append(val)
        if val < best_val:
            best_val, best = val, [t.detach().clone() for t in params]
        if step == opts.steps:
            break
        loss.backward()
        opt.step()
        with torch.no_grad():
            z.clamp_(-3.0, 3.0)

    with torch.no_grad():
        for t, b in zip(params, best):
            t.copy_(b)
        p, verts, r = forward()
        transform = Sim3Transform(math.exp(float(log_s)), r.numpy(), centre + radius * tau.numpy())
    fitted = transform.apply(verts.numpy())
    cd = chamfer(p.numpy() * radius + centre, pts).cd
    return FitResult(z.detach().numpy().copy(), transform, cd, np.array(trace), fitted)


__all__ = [
    "FootoidParams", "FootoidSample", "PcaShapeModel", "FitOptions", "FitResult",
    "template_mesh", "synthesize", "sample_dataset", "build_pca", "fit_pca",
    "template_landmarks", "basis_fields", "self_intersections",
]
