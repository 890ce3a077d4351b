"""Virtual depth scanner.

Stands in for the photogrammetry front end: renders z-depth maps of a mesh
from a camera rig, perturbs them like a depth sensor, back-projects to a
partial cloud, and produces a noisy "predicted" camera per view. The noisy
camera plays the role of a learned pose regressor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import EmptyScan, InfeasibleRig
from .geometry import (
    PinholeCamera,
    PointCloud,
    RigidTransform,
    Sim3Transform,
    TriangleMesh,
    axis_angle_to_matrix,
    look_at,
    random_rotation,
    transform_mesh,
)


@dataclass(frozen=True)
class DepthMap:
    width: int
    height: int
    depth: np.ndarray  # (height, width), NaN = no hit

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64).reshape(self.height, self.width)
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)


@dataclass(frozen=True)
class RigSpec:
    n_views: int = 6
    radius: float = 0.5
    elevation_range: tuple[float, float] = (-90.0, 90.0)
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_view_angle: float = 180.0
    width: int = 256
    height: int = 256
    fov_deg: float = 45.0

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0 < self.max_view_angle <= 180:
            raise ValueError("max_view_angle must lie in (0, 180]")


@dataclass(frozen=True)
class ScanNoise:
    depth_sigma: float = 0.0
    dropout_rate: float = 0.0
    vpp_rot_sigma: float = 0.0   # degrees
    vpp_trans_sigma: float = 0.0  # meters
    seed: int = 0

    def __post_init__(self):
        if min(self.depth_sigma, self.dropout_rate, self.vpp_rot_sigma, self.vpp_trans_sigma) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.dropout_rate >= 1:
            raise ValueError("dropout_rate must be < 1")


@dataclass(frozen=True)
class ScanView:
    sfm_camera: PinholeCamera
    vpp_camera: PinholeCamera
    depth: DepthMap

    def __iter__(self):
        return iter((self.sfm_camera, self.vpp_camera, self.depth))


@dataclass(frozen=True)
class ScanResult:
    cloud: PointCloud
    views: list[ScanView]
    face_ids: np.ndarray  # hit triangle per scan point

    def __iter__(self):
        return iter((self.cloud, self.views))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _raster(vc, faces, fx, fy, cx, cy, width, height, depth, fid):
    eps = 1e-14
    for f in range(faces.shape[0]):
        a = vc[faces[f, 0]]
        b = vc[faces[f, 1]]
        c = vc[faces[f, 2]]
        if a[2] > 1e-9 and b[2] > 1e-9 and c[2] > 1e-9:
            ua = fx * a[0] / a[2] + cx
            ub = fx * b[0] / b[2] + cx
            uc = fx * c[0] / c[2] + cx
            va = fy * a[1] / a[2] + cy
            vb = fy * b[1] / b[2] + cy
            vc_ = fy * c[1] / c[2] + cy
            u0 = max(0, int(math.ceil(min(ua, min(ub, uc))) - 1))
            u1 = min(width - 1, int(math.floor(max(ua, max(ub, uc))) + 1))
            v0 = max(0, int(math.ceil(min(va, min(vb, vc_))) - 1))
            v1 = min(height - 1, int(math.floor(max(va, max(vb, vc_))) + 1))
        else:
            u0, u1, v0, v1 = 0, width - 1, 0, height - 1
        e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
        e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
        # ray origin is the camera centre (0, 0, 0)
        tx, ty, tz = -a[0], -a[1], -a[2]
        qx = ty * e1z - tz * e1y
        qy = tz * e1x - tx * e1z
        qz = tx * e1y - ty * e1x
        for v in range(v0, v1 + 1):
            dy = (v - cy) / fy
            for u in range(u0, u1 + 1):
                dx = (u - cx) / fx
                # Moller-Trumbore with direction (dx, dy, 1)
                px = dy * e2z - e2y
                py = e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < eps:
                    continue
                inv = 1.0 / det
                bu = (tx * px + ty * py + tz * pz) * inv
                if bu < 0.0 or bu > 1.0:
                    continue
                bv = (dx * qx + dy * qy + qz) * inv
                if bv < 0.0 or bu + bv > 1.0:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t > 0.0 and t < depth[v, u]:
                    depth[v, u] = t
                    fid[v, u] = f


def render_depth_faces(mesh: TriangleMesh, camera: PinholeCamera) -> tuple[np.ndarray, np.ndarray]:
    """Depth (NaN = miss) and hit-face index (-1 = miss) per pixel."""
    vc = camera.world_to_camera.apply(mesh.vertices)
    depth = np.full((camera.height, camera.width), np.inf)
    fid = np.full((camera.height, camera.width), -1, dtype=np.int64)
    _raster(np.ascontiguousarray(vc), np.ascontiguousarray(mesh.faces), float(camera.fx),
            float(camera.fy), float(camera.cx), float(camera.cy), int(camera.width),
            int(camera.height), depth, fid)
    depth[~np.isfinite(depth)] = np.nan
    return depth, fid


def render_depth(mesh: TriangleMesh, camera: PinholeCamera) -> DepthMap:
    depth, _ = render_depth_faces(mesh, camera)
    return DepthMap(camera.width, camera.height, depth)


# ---------------------------------------------------------------------------
# Rigs
# ---------------------------------------------------------------------------

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def rig_directions(spec: RigSpec, seed: int = 0) -> np.ndarray:
    """Unit vectors from the target towards each camera.

    Stratified over the allowed band: heights z are evenly spaced (uniform
    in area on the sphere) and azimuths follow a golden-ratio sequence with
    a seeded offset.
    """
    el_lo, el_hi = sorted(spec.elevation_range)
    z_lo = math.sin(math.radians(max(el_lo, -90.0)))
    z_hi = math.sin(math.radians(min(el_hi, 90.0)))
    # reference axis is +z: a camera at elevation e views along an axis 90-e from -z
    z_lo = max(z_lo, math.cos(math.radians(spec.max_view_angle)))
    if z_lo > z_hi + 1e-12:
        raise InfeasibleRig(
            f"elevation range {spec.elevation_range} incompatible with max_view_angle "
            f"{spec.max_view_angle}")
    az_lo, az_hi = spec.azimuth_range
    span = az_hi - az_lo
    if span < 0:
        raise InfeasibleRig("empty azimuth range")
    full = span >= 360.0
    rng = np.random.default_rng(seed)
    offset = rng.random()
    n = spec.n_views
    dirs = np.empty((n, 3))
    ring = z_hi - z_lo < 1e-12
    for i in range(n):
        if ring:
            z = z_lo
            frac = (i + offset) / n if full else (i + 0.5) / n
        else:
            z = z_lo + (z_hi - z_lo) * (i + 0.5) / n
            frac = (i * _GOLDEN + offset) % 1.0
        az = math.radians(az_lo + span * frac)
        r = math.sqrt(max(0.0, 1.0 - z * z))
        dirs[i] = (r * math.cos(az), r * math.sin(az), z)
    return dirs


def make_rig(spec: RigSpec, seed: int = 0) -> list[PinholeCamera]:
    dirs = rig_directions(spec, seed)
    target = np.asarray(spec.target, dtype=np.float64)
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2)
    cams = []
    for d in dirs:
        cams.append(look_at(target + spec.radius * d, target, fx=f, fy=f,
                            cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
                            width=spec.width, height=spec.height))
    return cams


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------

def perturb_camera(camera: PinholeCamera, rot_sigma_deg: float, trans_sigma: float,
                   rng: np.random.Generator) -> PinholeCamera:
    """Rotate the camera about its own centre and shift the centre."""
    if rot_sigma_deg == 0 and trans_sigma == 0:
        return camera
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rot_sigma_deg) * rng.standard_normal()
    rn = axis_angle_to_matrix(axis * angle)
    delta = trans_sigma * rng.standard_normal(3)
    w2c = camera.world_to_camera
    r = rn @ w2c.rotation
    t = rn @ w2c.translation - r @ delta
    return camera.with_pose(RigidTransform(r, t))


def scramble_camera(camera: PinholeCamera, scramble: Sim3Transform) -> PinholeCamera:
    """The same camera expressed in the frame x' = s R x + t.

    Pixels are unchanged; depths scale by s.
    """
    s, r, t = scramble.scale, scramble.rotation, scramble.translation
    w2c = camera.world_to_camera
    rot = w2c.rotation @ r.T
    return camera.with_pose(RigidTransform(rot, s * w2c.translation - rot @ t))


def virtual_scan(mesh: TriangleMesh, spec: RigSpec, noise: ScanNoise = ScanNoise(),
                 scramble: Sim3Transform | None = None, *, rig_seed: int | None = None,
                 per_view_budget: int = 4096) -> ScanResult:
    rng = np.random.default_rng(noise.seed)
    cams = make_rig(spec, noise.seed if rig_seed is None else rig_seed)
    pts, vids, fids, views = [], [], [], []
    for i, cam in enumerate(cams):
        depth, fid = render_depth_faces(mesh, cam)
        hit = np.isfinite(depth)
        if noise.depth_sigma > 0:
            # displacement along the viewing ray, in meters
            vv, uu = np.mgrid[0:cam.height, 0:cam.width]
            ray_len = np.sqrt(((uu - cam.cx) / cam.fx) ** 2 + ((vv - cam.cy) / cam.fy) ** 2 + 1.0)
            eps = noise.depth_sigma * rng.standard_normal(depth.shape)
            depth = np.where(hit, depth + eps / ray_len, np.nan)
            hit &= depth > 0
            depth[~hit] = np.nan
        if noise.dropout_rate > 0:
            drop = rng.random(depth.shape) < noise.dropout_rate
            hit &= ~drop
            depth[~hit] = np.nan
        vpp = perturb_camera(cam, noise.vpp_rot_sigma, noise.vpp_trans_sigma, rng)
        flat = np.flatnonzero(hit.reshape(-1))
        if len(flat) > per_view_budget:
            flat = np.sort(rng.choice(flat, per_view_budget, replace=False))
        v, u = np.divmod(flat, cam.width)
        d = depth.reshape(-1)[flat]
        p = cam.back_project_points(np.stack([u, v], 1).astype(np.float64), d)
        sfm = cam
        if scramble is not None:
            p = scramble.apply(p)
            sfm = scramble_camera(cam, scramble)
            depth = depth * scramble.scale
        pts.append(p)
        vids.append(np.full(len(p), i, dtype=np.int64))
        fids.append(fid.reshape(-1)[flat])
        views.append(ScanView(sfm, vpp, DepthMap(cam.width, cam.height, depth)))
    allp = np.concatenate(pts)
    if len(allp) == 0:
        raise EmptyScan("no pixel hit the mesh in any view")
    return ScanResult(PointCloud(allp, None, np.concatenate(vids)), views, np.concatenate(fids))


def random_sim3(rng: np.random.Generator, diagonal: float, *, max_rotation_deg: float | None = 15.0,
                scale_range: tuple[float, float] = (0.8, 1.25), shift_fraction: float = 0.1) -> Sim3Transform:
    """Seeded similarity draw: bounded or uniform rotation, log-uniform scale, uniform shift."""
    rot = random_rotation(rng, None if max_rotation_deg is None else math.radians(max_rotation_deg))
    scale = math.exp(rng.uniform(math.log(scale_range[0]), math.log(scale_range[1])))
    shift = rng.uniform(-shift_fraction, shift_fraction, 3) * diagonal
    return Sim3Transform(scale, rot, shift)


def augment(mesh: TriangleMesh, n_transforms: int, seed: int = 0, *,
            max_rotation_deg: float | None = 15.0) -> list[tuple[Sim3Transform, TriangleMesh]]:
    if n_transforms < 1:
        raise ValueError("n_transforms must be >= 1")
    rng = np.random.default_rng(seed)
    diag = mesh.bbox_diagonal()
    out = []
    for _ in range(n_transforms):
        t = random_sim3(rng, diag, max_rotation_deg=max_rotation_deg)
        out.append((t, transform_mesh(t, mesh)))
    return out
