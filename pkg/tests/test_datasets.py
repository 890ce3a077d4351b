from __future__ import annotations

import numpy as np
import pytest

from solescan.datasets import (
    SuiteOptions,
    held_out_suite,
    read_dataset,
    sample_name,
    split_names,
    write_dataset,
)
from solescan.errors import ParseError
from solescan.geometry import MeshSurfaceIndex
from solescan.shapegen import sample_dataset


@pytest.mark.parametrize("n, fraction, n_train", [(50, 0.8, 40), (5, 0.8, 4), (1, 1.0, 1), (10, 0.5, 5)])
def test_split_sizes(n, fraction, n_train):
    split = split_names(n, fraction, seed=3)
    assert sorted(split) == [sample_name(i) for i in range(n)]
    assert sum(v == "train" for v in split.values()) == n_train


def test_split_is_seeded():
    assert split_names(30, 0.8, 1) == split_names(30, 0.8, 1)
    assert split_names(30, 0.8, 1) != split_names(30, 0.8, 2)


def test_dataset_round_trip(tmp_path):
    samples = sample_dataset(5, 11)
    write_dataset(samples, tmp_path, 0.8, seed=4)
    entries = read_dataset(tmp_path)
    assert [e.name for e in entries] == [sample_name(i) for i in range(5)]
    assert sum(e.split == "train" for e in entries) == 4
    for s, e in zip(samples, entries):
        # meshes are stored in float32
        assert np.array_equal(e.mesh.vertices, s.mesh.vertices.astype(np.float32).astype(np.float64))
        assert np.array_equal(e.mesh.faces, s.mesh.faces)
        assert np.array_equal(e.params.coefficients, s.params.coefficients)
        assert e.params.scale == s.params.scale


def test_bad_split_file(tmp_path):
    write_dataset(sample_dataset(2, 0), tmp_path)
    (tmp_path / "split.txt").write_text("sample_0000 validation\n")
    with pytest.raises(ParseError):
        read_dataset(tmp_path)


def test_held_out_suite_scans_the_surface():
    opts = SuiteOptions(n_shapes=3, seed=5)
    suite = held_out_suite(opts)
    assert len(suite) == 3
    for cloud, mesh in suite:
        assert 0 < len(cloud) <= opts.n_views * opts.per_view_budget
        _, d, _ = MeshSurfaceIndex(mesh).query(cloud.points)
        # depth noise of 1 mm, so points stay within a few sigma of the surface
        assert d.max() < 6 * opts.depth_sigma


def test_held_out_suite_is_reproducible_and_angle_dependent():
    a = held_out_suite(SuiteOptions(n_shapes=2, seed=5))
    b = held_out_suite(SuiteOptions(n_shapes=2, seed=5))
    for (ca, _), (cb, _) in zip(a, b):
        assert np.array_equal(ca.points, cb.points)
    wide = held_out_suite(SuiteOptions(n_shapes=2, seed=5, max_view_angle=180))
    assert any(not np.array_equal(ca.points, cw.points) for (ca, _), (cw, _) in zip(a, wide))
