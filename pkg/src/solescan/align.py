"""Similarity Procrustes, trimmed ICP, and landmark-based canonicalization.

Canonicalization maps a partial scan expressed in an arbitrary (scaled,
rotated, shifted) reconstruction frame onto a reference template:

1. template landmarks are projected into each view with the *predicted*
   camera, the depth map is sampled there, and the pixel is lifted back to
   3-D with the *reconstruction* camera;
2. per-landmark centroids of those lifts are matched to the template
   landmarks by a least-squares similarity;
3. the scaled cloud is refined against dense template samples with rigid ICP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    EmptyInput,
    InsufficientLandmarks,
    NoCorrespondences,
    OutOfFrame,
)
from .geometry import (
    MeshSurfaceIndex,
    NearestNeighborIndex,
    PinholeCamera,
    PointCloud,
    RigidTransform,
    Sim3Transform,
    TriangleMesh,
    apply_transform,
    axis_angle_to_matrix,
    compose,
    compose_rigid,
    matrix_to_axis_angle,
    project,
)


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        labels = tuple(self.labels)
        if len(pts) != len(labels):
            raise ValueError("one label per landmark")
        if len(pts) < 3:
            raise InsufficientLandmarks(f"need at least 3 landmarks, got {len(pts)}")
        if _collinear(pts):
            raise DegenerateConfiguration("landmarks are collinear")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    convergence_tol: float = 1e-9
    trim_fraction: float = 0.2
    max_correspondence_dist: float = math.inf
    accelerate: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 <= self.trim_fraction < 1:
            raise ValueError("trim_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    rms: float
    iterations: int
    rms_history: list[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.transform, self.rms, self.iterations))


@dataclass(frozen=True)
class CanonicalizationResult:
    aligned: PointCloud
    similarity: Sim3Transform
    refinement: RigidTransform
    per_landmark_residual: np.ndarray
    views_used_per_landmark: np.ndarray
    icp: IcpResult

    @property
    def transform(self) -> Sim3Transform:
        """Composite map from the input frame to the template frame."""
        return compose(self.refinement, self.similarity)


def _collinear(pts: np.ndarray, tol: float = 1e-9) -> bool:
    s = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
    return len(s) < 2 or s[1] <= tol


# ---------------------------------------------------------------------------
# Procrustes
# ---------------------------------------------------------------------------

def umeyama(source, target, with_scale: bool = True) -> Sim3Transform:
    """Least-squares similarity (rigid if ``with_scale`` is False) mapping source onto target."""
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(tgt):
        raise ValueError("source and target must pair up")
    if len(src) < 3:
        raise InsufficientLandmarks(f"need at least 3 correspondences, got {len(src)}")
    if _collinear(src):
        raise DegenerateConfiguration("source points are collinear")
    mu_s, mu_t = src.mean(0), tgt.mean(0)
    xs, xt = src - mu_s, tgt - mu_t
    cov = xt.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    r = u @ np.diag(sign) @ vt
    scale = 1.0
    if with_scale:
        var_s = np.sum(xs * xs) / len(src)
        scale = float(np.dot(d, sign) / var_s)
    return Sim3Transform(scale, r, mu_t - scale * r @ mu_s)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------

def _as_points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def icp(source, target_surface, params: IcpParams = IcpParams(),
        init: RigidTransform | None = None,
        target_index: NearestNeighborIndex | MeshSurfaceIndex | None = None) -> IcpResult:
    """Trimmed point-to-point ICP (rigid).

    ``target_surface`` is a point set, or a mesh whose exact closest surface
    points serve as correspondences.
    """
    src = _as_points(source)
    if len(src) == 0:
        raise EmptyInput("ICP needs non-empty source and target")
    if target_index is None:
        if isinstance(target_surface, TriangleMesh):
            target_index = MeshSurfaceIndex(target_surface)
        else:
            tgt = _as_points(target_surface)
            if len(tgt) == 0:
                raise EmptyInput("ICP needs non-empty source and target")
            target_index = NearestNeighborIndex(tgt)
    current = init or RigidTransform()

    def closest(x):
        if isinstance(target_index, MeshSurfaceIndex):
            y, d, _ = target_index.query(x)
            return y, d
        idx, d = target_index.query(x)
        return target_index.points[idx], d

    def correspondences(t: RigidTransform):
        x = t.apply(src)
        y, d = closest(x)
        keep = np.flatnonzero(d <= params.max_correspondence_dist)
        if len(keep) == 0:
            raise NoCorrespondences("every correspondence exceeds max_correspondence_dist")
        n_keep = max(3, int(math.ceil((1.0 - params.trim_fraction) * len(keep))))
        if n_keep < len(keep):
            keep = keep[np.argsort(d[keep], kind="stable")[:n_keep]]
            keep.sort()
        rms = math.sqrt(math.fsum((d[keep] ** 2).tolist()) / len(keep))
        return x, y, keep, rms

    history = []
    x, y, keep, rms = correspondences(current)
    history.append(rms)
    states = [_state_vector(current)]
    mse = [rms * rms]
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        step = umeyama(x[keep], y[keep], with_scale=False)
        current = compose_rigid(RigidTransform(step.rotation, step.translation), current)
        x, y, keep, new_rms = correspondences(current)
        if params.accelerate and len(states) >= 2:
            jump = _extrapolate(states[-2], states[-1], _state_vector(current),
                                mse[-2], mse[-1], new_rms * new_rms)
            if jump is not None:
                cand = _from_state_vector(jump)
                cx, cy, ckeep, c_rms = correspondences(cand)
                if c_rms < new_rms:
                    current, x, y, keep, new_rms = cand, cx, cy, ckeep, c_rms
        history.append(new_rms)
        states.append(_state_vector(current))
        mse.append(new_rms * new_rms)
        done = abs(rms - new_rms) < params.convergence_tol
        rms = new_rms
        if done:
            break
    return IcpResult(current, rms, iterations, history)


def _state_vector(t: RigidTransform) -> np.ndarray:
    return np.concatenate([matrix_to_axis_angle(t.rotation), t.translation])


def _from_state_vector(q: np.ndarray) -> RigidTransform:
    return RigidTransform(axis_angle_to_matrix(q[:3]), q[3:])


def _extrapolate(q0, q1, q2, e0, e1, e2, max_angle_deg: float = 10.0, max_gain: float = 25.0):
    """Accelerated update along the registration-state direction.

    When the last two state increments point the same way (within
    ``max_angle_deg``), fit a parabola (or failing that a line) to the
    mean-square errors against arc length and jump to its minimum, capped at
    ``max_gain`` times the last increment. Returns None when not applicable.
    """
    d1, d2 = q1 - q0, q2 - q1
    n1, n2 = float(np.linalg.norm(d1)), float(np.linalg.norm(d2))
    if n1 == 0.0 or n2 == 0.0:
        return None
    cos = float(np.dot(d1, d2) / (n1 * n2))
    if cos < math.cos(math.radians(max_angle_deg)):
        return None
    # arc-length coordinates: current state at 0, previous ones behind it
    v = np.array([0.0, -n2, -n2 - n1])
    e = np.array([e2, e1, e0])
    vmax = max_gain * n2
    a, b, _ = np.polyfit(v, e, 2)
    step = None
    if a > 0:
        vertex = -b / (2 * a)
        if 0 < vertex < vmax:
            step = vertex
    if step is None:
        slope = (e[0] - e[1]) / n2
        if slope < 0:
            step = min(-e[0] / slope, vmax)
    if step is None or not step > 0:
        return None
    return q2 + step * d2 / n2


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------

def sample_depth_bilinear(depth: np.ndarray, u: float, v: float,
                          max_spread: float = math.inf) -> float:
    """Bilinear lookup at pixel-centre coordinates.

    NaN if any of the four neighbours is NaN, or if their depths spread by
    more than ``max_spread`` (the stencil straddles a depth discontinuity).
    """
    h, w = depth.shape
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        return math.nan
    u0 = min(int(math.floor(u)), w - 2) if w > 1 else 0
    v0 = min(int(math.floor(v)), h - 2) if h > 1 else 0
    fu, fv = u - u0, v - v0
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    q = depth[[v0, v0, v1, v1], [u0, u1, u0, u1]]
    if np.any(np.isnan(q)) or q.max() - q.min() > max_spread:
        return math.nan
    return float((1 - fv) * ((1 - fu) * q[0] + fu * q[1]) + fv * ((1 - fu) * q[2] + fu * q[3]))


def landmark_depth(depth: np.ndarray, u: float, v: float, max_spread: float = math.inf,
                   fallback_radius: int = 2) -> float:
    """Bilinear depth at (u, v), else the nearest valid pixel within ``fallback_radius``.

    The fallback covers stencils that touch a missing pixel or straddle a
    discontinuity (noise or grazing slopes make the spread test fire on
    valid surface) and landmarks projected just off the silhouette. Ties go
    to the lowest row, then column. NaN when nothing valid is in reach.
    """
    d = sample_depth_bilinear(depth, u, v, max_spread)
    if not math.isnan(d) or fallback_radius < 0:
        return d
    h, w = depth.shape
    ui, vi = int(round(u)), int(round(v))
    best, best_key = math.nan, None
    for dv in range(-fallback_radius, fallback_radius + 1):
        for du in range(-fallback_radius, fallback_radius + 1):
            a, b = ui + du, vi + dv
            if 0 <= a < w and 0 <= b < h and np.isfinite(depth[b, a]):
                key = (du * du + dv * dv, dv, du)
                if best_key is None or key < best_key:
                    best, best_key = float(depth[b, a]), key
    return best


def _depth_array(d) -> np.ndarray:
    return d.depth if hasattr(d, "depth") else np.asarray(d, dtype=np.float64)


def landmark_observations(landmarks: LandmarkSet, views, occlusion_threshold: float,
                          discontinuity_fraction: float = 0.5, fallback_radius: int = 2):
    """Per-landmark lists of back-projected points, plus diagnostics.

    Depths in the reconstruction frame and the template frame differ by an
    unknown global scale; it is estimated by consensus over all samples
    before the occlusion test. Only clean bilinear lookups are used unless
    they leave fewer than three landmarks observed; then landmarks without
    any clean observation take nearest-valid-pixel lookups (``landmark_depth``
    within ``fallback_radius``), counted under ``fallback``.
    """
    views = [tuple(v) for v in views]

    def observe(radius: int):
        raw = []  # (j, view, q, z_pred, d)
        skipped = {"behind": 0, "out_of_frame": 0, "invalid_depth": 0, "occluded": 0}
        for i, (sfm, vpp, dmap) in enumerate(views):
            depth = _depth_array(dmap)
            for j, p in enumerate(landmarks.points):
                try:
                    q, z = project(vpp, p)
                except BehindCamera:
                    skipped["behind"] += 1
                    continue
                except OutOfFrame:
                    skipped["out_of_frame"] += 1
                    continue
                d = landmark_depth(depth, q[0], q[1], discontinuity_fraction * occlusion_threshold, radius)
                if not (d > 0):
                    skipped["invalid_depth"] += 1
                    continue
                raw.append((j, i, q, z, d))
        obs: list[list[np.ndarray]] = [[] for _ in range(len(landmarks))]
        if raw:
            z = np.array([r[3] for r in raw])
            d = np.array([r[4] for r in raw])
            ratio = depth_ratio_consensus(z, d, occlusion_threshold)
            for (j, i, q, _, _), zi, di in zip(raw, z, d):
                if abs(ratio * zi - di) > occlusion_threshold:
                    skipped["occluded"] += 1
                    continue
                obs[j].append(views[i][0].back_project_points(q[None, :], [di])[0])
        return obs, skipped

    obs, skipped = observe(-1)
    skipped["fallback"] = 0
    if fallback_radius >= 0 and sum(1 for o in obs if o) < 3:
        loose, _ = observe(fallback_radius)
        for j, extra in enumerate(loose):
            if not obs[j] and extra:
                obs[j] = extra
                skipped["fallback"] += len(extra)
    return obs, skipped


def depth_ratio_consensus(z_pred: np.ndarray, d: np.ndarray, threshold: float) -> float:
    """Ratio d/z agreeing (within ``threshold``) with the most samples.

    Occluded samples hit nearer surfaces and pull a mean or median towards
    small ratios; the consensus ratio ignores them. Ties go to the lowest
    sample index, and the winner is refined by averaging its inliers.
    """
    ratios = d / z_pred
    support = (np.abs(ratios[:, None] * z_pred[None, :] - d[None, :]) <= threshold).sum(1)
    best = int(np.argmax(support))
    inl = np.abs(ratios[best] * z_pred - d) <= threshold
    return float(np.sum(d[inl]) / np.sum(z_pred[inl]))


def canonicalize(ref_mesh: TriangleMesh, landmarks: LandmarkSet, views, partial: PointCloud,
                 icp_params: IcpParams = IcpParams(), *, occlusion_fraction: float = 0.02,
                 target_samples: PointCloud | None = None, max_icp_points: int = 10_000,
                 seed: int = 0) -> CanonicalizationResult:
    """Map ``partial`` into the frame of ``ref_mesh``.

    ``views`` is a sequence of (reconstruction camera, predicted camera, depth map).
    ICP refines against the exact template surface unless ``target_samples``
    supplies a point set instead; it sees at most ``max_icp_points`` of the
    partial cloud (a seeded subset), but the result applies to all of it.
    """
    views = [tuple(v) for v in views]
    if len(views) == 0:
        raise ValueError("at least one view is required")
    if len(partial) == 0:
        raise EmptyInput("partial cloud is empty")
    thr = occlusion_fraction * partial.bbox_diagonal()
    obs, skipped = landmark_observations(landmarks, views, thr)
    counts = np.array([len(o) for o in obs], dtype=np.int64)
    valid = np.flatnonzero(counts > 0)
    if len(valid) < 3:
        raise InsufficientLandmarks(
            f"only {len(valid)} landmark(s) observed in any view",
            {"views_used_per_landmark": dict(zip(landmarks.labels, counts.tolist())), **skipped})
    # fixed-order accumulation
    centroids = np.array([np.sum(np.array(obs[j]), axis=0) / counts[j] for j in valid])
    ref_pts = landmarks.points[valid]
    try:
        similarity = umeyama(centroids, ref_pts, with_scale=True)
    except DegenerateConfiguration as exc:
        raise InsufficientLandmarks(f"observed landmarks are degenerate: {exc}",
                                    {"views_used_per_landmark": dict(zip(landmarks.labels, counts.tolist()))}) from exc
    scaled = apply_transform(similarity, partial)
    target = ref_mesh if target_samples is None else target_samples
    src = scaled.points
    if len(src) > max_icp_points:
        sel = np.random.default_rng(seed).choice(len(src), max_icp_points, replace=False)
        src = src[np.sort(sel)]
    result = icp(src, target, icp_params)
    full = compose(result.transform, similarity)
    aligned = apply_transform(full, partial)
    residual = np.full(len(landmarks), np.nan)
    residual[valid] = np.linalg.norm(full.apply(centroids) - ref_pts, axis=1)
    return CanonicalizationResult(aligned, similarity, result.transform, residual, counts, result)
