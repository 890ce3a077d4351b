from __future__ import annotations

import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from solescan.errors import IoError, ParseError
from solescan.formats import (
    format_kv,
    parse_kv,
    read_cameras,
    read_checkpoint,
    read_cloud,
    read_depth,
    read_landmarks,
    read_mesh,
    read_metrics_csv,
    write_cameras,
    write_checkpoint,
    write_cloud,
    write_depth,
    write_landmarks,
    write_line_chart_svg,
    write_mesh,
    write_metrics_csv,
)
from solescan.geometry import PointCloud, TriangleMesh, look_at

TETRA = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float),
                     np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]))


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@pytest.mark.parametrize("binary", [True, False])
def test_mesh_round_trip(tmp_path, binary):
    write_mesh(TETRA, tmp_path / "t.ply", binary=binary)
    m = read_mesh(tmp_path / "t.ply")
    assert np.array_equal(m.vertices, TETRA.vertices)
    assert np.array_equal(m.faces, TETRA.faces)


def test_ascii_and_binary_agree(tmp_path, rng):
    mesh = TriangleMesh(rng.standard_normal((30, 3)), np.array([[i, i + 1, i + 2] for i in range(28)]))
    write_mesh(mesh, tmp_path / "a.ply", binary=False)
    write_mesh(mesh, tmp_path / "b.ply", binary=True)
    a, b = read_mesh(tmp_path / "a.ply"), read_mesh(tmp_path / "b.ply")
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)
    assert np.array_equal(a.vertices, f32(mesh.vertices))


@pytest.mark.parametrize("binary", [True, False])
def test_truncated_mesh_is_parse_error(tmp_path, binary):
    write_mesh(TETRA, tmp_path / "t.ply", binary=binary)
    data = (tmp_path / "t.ply").read_bytes()
    (tmp_path / "cut.ply").write_bytes(data[:-7])
    with pytest.raises(ParseError):
        read_mesh(tmp_path / "cut.ply")


def test_garbage_is_parse_error(tmp_path):
    (tmp_path / "g.ply").write_bytes(b"not a ply\n")
    with pytest.raises(ParseError):
        read_mesh(tmp_path / "g.ply")
    with pytest.raises(IoError):
        read_mesh(tmp_path / "missing.ply")


def test_parse_error_carries_location(tmp_path):
    (tmp_path / "bad.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                                      "property float y\nproperty float z\nend_header\n0 0 0\n1 two 3\n")
    with pytest.raises(ParseError) as err:
        read_cloud(tmp_path / "bad.ply")
    assert "bad.ply" in str(err.value)


def test_cloud_round_trip_with_normals_and_views(tmp_path, rng):
    n = rng.standard_normal((100, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    c = PointCloud(rng.standard_normal((100, 3)), n, rng.integers(0, 9, 100))
    write_cloud(c, tmp_path / "c.ply")
    r = read_cloud(tmp_path / "c.ply")
    assert np.array_equal(r.points, f32(c.points))
    assert np.abs(r.normals - c.normals).max() < 1e-6
    assert np.array_equal(r.view_ids, c.view_ids)


def test_cloud_without_normals(tmp_path, rng):
    write_cloud(PointCloud(rng.standard_normal((10, 3))), tmp_path / "c.ply", binary=False)
    r = read_cloud(tmp_path / "c.ply")
    assert r.normals is None and r.view_ids is None


def test_large_cloud_round_trip(tmp_path, rng):
    c = PointCloud(f32(rng.standard_normal((100_000, 3))))
    write_cloud(c, tmp_path / "big.ply")
    assert np.array_equal(read_cloud(tmp_path / "big.ply").points, c.points)


def test_writers_are_byte_deterministic(tmp_path, rng):
    c = PointCloud(rng.standard_normal((500, 3)))
    write_cloud(c, tmp_path / "a.ply")
    write_cloud(c, tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_depth_round_trip(tmp_path, rng):
    d = rng.uniform(0.1, 2.0, (7, 11))
    d[2, 3] = np.nan
    write_depth(d, tmp_path / "d.dpm")
    data = (tmp_path / "d.dpm").read_bytes()
    assert data[:4] == b"DPM1" and len(data) == 16 + 4 * 77
    r = read_depth(tmp_path / "d.dpm")
    assert r.shape == (7, 11)
    assert np.array_equal(np.isnan(r), np.isnan(d))
    ok = ~np.isnan(d)
    assert np.array_equal(r[ok], f32(d[ok]))


def test_depth_errors(tmp_path):
    (tmp_path / "x.dpm").write_bytes(b"DPM0" + bytes(12))
    with pytest.raises(ParseError):
        read_depth(tmp_path / "x.dpm")
    write_depth(np.zeros((4, 4)), tmp_path / "y.dpm")
    (tmp_path / "z.dpm").write_bytes((tmp_path / "y.dpm").read_bytes()[:-4])
    with pytest.raises(ParseError):
        read_depth(tmp_path / "z.dpm")


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.w": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "s": np.array(2.5)}
    write_checkpoint(tmp_path / "m.ckpt", tensors, {"config.n": "3", "note": "x y"})
    got, meta = read_checkpoint(tmp_path / "m.ckpt")
    assert list(got) == list(tensors)
    for k in tensors:
        assert got[k].shape == np.shape(tensors[k])
        assert np.array_equal(got[k], np.asarray(tensors[k], dtype=np.float32))
    assert meta == {"config.n": "3", "note": "x y"}


def test_checkpoint_truncated(tmp_path, rng):
    write_checkpoint(tmp_path / "m.ckpt", {"w": rng.standard_normal(100)})
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-10])
    with pytest.raises(ParseError):
        read_checkpoint(tmp_path / "cut.ckpt")


def test_kv_sorted_and_round_trip():
    text = format_kv({"b": 1, "a": 0.1, "c": "x"})
    assert text == "a=0.1\nb=1\nc=x\n"
    assert parse_kv(text) == {"a": "0.1", "b": "1", "c": "x"}
    with pytest.raises(ParseError):
        parse_kv("novalue\n")


def test_metrics_csv_empty_is_header_only(tmp_path):
    write_metrics_csv([], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == "label,cd,hd\n"


def test_metrics_csv_one_row(tmp_path):
    write_metrics_csv([("a", 0.5, 1.25)], tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 2
    rows = list(csv.reader(lines))
    assert rows[1] == ["a", "0.5", "1.25"]


def test_metrics_csv_round_trip(tmp_path, rng):
    vals = rng.uniform(1e-6, 1e3, (50, 3))
    rows = [(f"r{i}", v[0], v[1], {"x": v[2]}) for i, v in enumerate(vals)]
    write_metrics_csv(rows, tmp_path / "m.csv")
    back = read_metrics_csv(tmp_path / "m.csv")
    for v, r in zip(vals, back):
        for x, key in zip(v, ("cd", "hd", "x")):
            assert abs(float(r[key]) - x) <= 1e-6 * abs(x)


def test_metrics_csv_unwritable(tmp_path):
    with pytest.raises(IoError):
        write_metrics_csv([], tmp_path / "no" / "such" / "dir" / "m.csv")


def test_svg_chart(tmp_path):
    write_line_chart_svg([30, 60, 90], [0.02, float("nan"), 0.01], tmp_path / "c.svg", title="t<1>")
    root = ET.parse(tmp_path / "c.svg").getroot()
    assert root.get("viewBox") == "0 0 800 600"
    write_line_chart_svg([45], [0.3], tmp_path / "one.svg")
    ET.parse(tmp_path / "one.svg")


def test_landmarks_round_trip(tmp_path, rng):
    pts = rng.standard_normal((4, 3))
    write_landmarks(["a", "b", "c", "d"], pts, tmp_path / "l.txt")
    labels, got = read_landmarks(tmp_path / "l.txt")
    assert labels == ["a", "b", "c", "d"] and np.array_equal(got, pts)
    (tmp_path / "bad.txt").write_text("a 1 2\n")
    with pytest.raises(ParseError):
        read_landmarks(tmp_path / "bad.txt")


def test_cameras_round_trip(tmp_path, rng):
    pairs = []
    for _ in range(3):
        c = look_at(rng.uniform(-1, 1, 3) + [0, 0, 2], [0, 0, 0], fx=200, fy=210, cx=63.5, cy=64,
                    width=128, height=129)
        e = look_at(rng.uniform(-1, 1, 3) + [0, 0, 2], [0, 0, 0], fx=200, fy=210, cx=63.5, cy=64,
                    width=128, height=129)
        pairs.append((c, e))
    write_cameras(pairs, tmp_path / "cams.txt")
    got = read_cameras(tmp_path / "cams.txt")
    for (c, e), (c2, e2) in zip(pairs, got):
        for a, b in ((c, c2), (e, e2)):
            assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
            assert np.array_equal(a.world_to_camera.rotation, b.world_to_camera.rotation)
            assert np.array_equal(a.world_to_camera.translation, b.world_to_camera.translation)
