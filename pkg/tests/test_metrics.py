from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from solescan.errors import EmptyInput
from solescan.metrics import chamfer, coverage, hausdorff


def brute_directed(p, q, squared=False):
    d = np.sqrt(((p[:, None, :] - q[None]) ** 2).sum(-1)).min(1)
    return float(np.mean(d * d if squared else d))


def brute_hausdorff(p, q):
    d = np.sqrt(((p[:, None, :] - q[None]) ** 2).sum(-1))
    return float(max(d.min(1).max(), d.min(0).max()))


def test_chamfer_identity(rng):
    p = rng.standard_normal((100, 3))
    assert chamfer(p, p).cd == 0.0
    assert chamfer(p, p, squared=True).cd == 0.0


def test_chamfer_hand_computed():
    r = chamfer(np.array([[0.0, 0, 0], [2.0, 0, 0]]), np.array([[0.0, 0, 0]]))
    assert (r.directed_pq, r.directed_qp, r.cd) == (1.0, 0.0, 1.0)


def test_chamfer_brute_force_512(rng):
    for _ in range(5):
        p, q = rng.standard_normal((512, 3)), rng.standard_normal((512, 3))
        for sq in (False, True):
            r = chamfer(p, q, squared=sq)
            assert abs(r.directed_pq - brute_directed(p, q, sq)) < 1e-9
            assert abs(r.directed_qp - brute_directed(q, p, sq)) < 1e-9


def test_hausdorff_identity_and_closed_form():
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    assert hausdorff(cube, cube) == 0.0
    q = np.vstack([cube, [[0.5, 0.5, 0.5]]])
    assert abs(hausdorff(cube, q) - math.sqrt(3) / 2) < 1e-15


@given(st.integers(0, 2**31 - 1), st.integers(1, 60), st.integers(1, 60))
def test_metrics_match_brute_force_and_are_symmetric(seed, n, m):
    rng = np.random.default_rng(seed)
    p, q = rng.standard_normal((n, 3)), rng.standard_normal((m, 3)) + rng.uniform(-1, 1, 3)
    r = chamfer(p, q)
    assert abs(r.cd - brute_directed(p, q) - brute_directed(q, p)) < 1e-9
    assert r.cd == chamfer(q, p).cd
    assert hausdorff(p, q) == hausdorff(q, p)
    assert abs(hausdorff(p, q) - brute_hausdorff(p, q)) < 1e-12


def test_empty_inputs_raise():
    with pytest.raises(EmptyInput):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


def test_coverage():
    ref = np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0]])
    assert coverage(ref, np.array([[0.0, 0, 0.05]]), 0.1) == pytest.approx(1 / 3)
    assert coverage(ref, ref, 0.0) == 1.0
