from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("solescan", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("solescan")


@pytest.fixture(scope="session")
def template():
    from solescan.shapegen import template_mesh

    return template_mesh()


@pytest.fixture(scope="session")
def footoids():
    from solescan.shapegen import sample_dataset

    return sample_dataset(6, 123)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_sphere_mesh(subdivisions: int = 3, radius: float = 1.0, centre=(0.0, 0.0, 0.0)):
    from solescan.geometry import TriangleMesh
    from solescan.shapegen import icosphere

    v, f = icosphere(subdivisions)
    return TriangleMesh(np.asarray(centre) + radius * v, f)


def random_scramble(rng):
    from solescan.geometry import Sim3Transform, random_rotation

    return Sim3Transform(float(np.exp(rng.uniform(-1, 1))), random_rotation(rng), rng.uniform(-1, 1, 3))


def two_stage_errors(trial: int, pose_noise: bool) -> tuple[float, float]:
    """Alignment error of the template scan after Procrustes only and after ICP.

    The error is the RMS over the scanned points of the distance between the
    recovered template-frame position and the true one.
    """
    from solescan.align import LandmarkSet, canonicalize
    from solescan.geometry import invert
    from solescan.scanner import RigSpec, ScanNoise, virtual_scan
    from solescan.shapegen import template_landmarks, template_mesh

    mesh = template_mesh()
    labels, pts = template_landmarks()
    rng = np.random.default_rng(100 + trial)
    scramble = random_scramble(rng)
    noise = ScanNoise(depth_sigma=1e-3, vpp_rot_sigma=1.0 if pose_noise else 0.0,
                      vpp_trans_sigma=3e-3 if pose_noise else 0.0, seed=trial)
    scan = virtual_scan(mesh, RigSpec(n_views=12, max_view_angle=90), noise, scramble)
    truth = invert(scramble).apply(scan.cloud.points)
    res = canonicalize(mesh, LandmarkSet(pts, labels), scan.views, scan.cloud)

    def rms(t):
        return float(np.sqrt(np.mean(np.sum((t.apply(scan.cloud.points) - truth) ** 2, axis=1))))

    return rms(res.similarity), rms(res.transform)
