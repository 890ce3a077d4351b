from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from solescan.cli import main, read_transform
from solescan.formats import read_cloud, read_kv, read_mesh, read_metrics_csv
from solescan.geometry import compose

# small network and pair set so the chain runs in seconds
TINY = """\
completion.n_in=64
completion.n_scaffold=16
completion.n_gen_coarse=16
completion.n_fine=128
completion.latent_dim=16
completion.n_heads=2
completion.n_encoder_blocks=1
completion.n_refine_blocks=1
train.n_augment=1
train.n_scans=1
train.batch_size=2
train.warmup_steps=2
"""


def run(*args) -> int:
    return main([str(a) for a in args])


def payload(path: Path) -> dict[str, bytes]:
    """Bytes of every non-manifest file under ``path`` (manifests carry timings)."""
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    return {p.name: p.read_bytes() for p in files if not p.name.endswith("manifest.txt")}


def chain(root: Path, deterministic: bool = True) -> dict[str, Path]:
    """gen-dataset -> scan -> canonicalize -> train -> complete -> mesh -> eval."""
    det = ["--deterministic"] if deterministic else []
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    p = {k: root / v for k, v in dict(data="data", scan="scan", aligned="aligned.ply", model="model.ckpt",
                                       completed="completed.ply", mesh="mesh.ply", metrics="metrics.csv").items()}
    assert run("gen-dataset", "--n", 5, "--seed", 3, "--out", p["data"], *det) == 0
    assert run("scan", p["data"] / "sample_0000" / "mesh.ply", "--out", p["scan"], "--n-views", 4,
               "--theta-max", 90, "--depth-sigma", 1e-3, "--budget", 600, "--scramble-seed", 7, *det) == 0
    assert run("canonicalize", p["scan"], "--out", p["aligned"], *det) == 0
    assert run("train", p["data"], "--out", p["model"], "--max-steps", 3, "--config", cfg, *det) == 0
    assert run("complete", p["model"], p["aligned"], "--out", p["completed"], *det) == 0
    assert run("mesh", p["aligned"], "--out", p["mesh"], "--resolution", 24, *det) == 0
    assert run("eval", p["completed"], p["data"] / "sample_0000" / "mesh.ply", "--out", p["metrics"],
               "--samples", 2000, *det) == 0
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return chain(tmp_path_factory.mktemp("chain"))


def test_chain_outputs(pipeline):
    p = pipeline
    assert (p["data"] / "split.txt").read_text().count("train") == 4
    assert len(read_cloud(p["completed"])) == 128
    mesh = read_mesh(p["mesh"])
    assert mesh.is_watertight()
    rows = read_metrics_csv(p["metrics"])
    assert [r["label"] for r in rows] == ["completed", "mean", "std"]
    assert float(rows[0]["cd"]) > 0
    for f in ("aligned.ply.manifest.txt", "model.ckpt.manifest.txt", "metrics.csv.manifest.txt"):
        kv = read_kv(p["data"].parent / f)
        assert kv["args.deterministic"] == "True"
        assert all(Path(v).exists() for k, v in kv.items() if k.startswith(("inputs.", "outputs.")))
    assert (p["data"].parent / "model.history.csv").read_text().count("\n") == 4


def test_deterministic_mode_is_byte_identical(pipeline, tmp_path):
    again = chain(tmp_path)
    for key in ("data", "scan", "aligned", "model", "completed", "mesh", "metrics"):
        assert payload(again[key]) == payload(pipeline[key]), key


def test_canonicalize_inverts_the_scramble(tmp_path):
    assert run("gen-dataset", "--n", 1, "--out", tmp_path / "d") == 0
    assert run("scan", tmp_path / "d" / "template.ply", "--out", tmp_path / "s", "--n-views", 12,
               "--theta-max", 90, "--scramble-seed", 11) == 0
    assert run("canonicalize", tmp_path / "s", "--out", tmp_path / "a.ply") == 0
    scramble = read_transform(tmp_path / "s" / "scramble.txt")
    found = read_transform(tmp_path / "a.transform.txt")
    err = compose(found, scramble)
    pts = read_cloud(tmp_path / "s" / "scan.ply").points
    truth = scramble.inverse().apply(pts)
    diag = read_mesh(tmp_path / "d" / "template.ply").bbox_diagonal()
    assert abs(err.scale - 1) < 1e-4
    assert np.abs(err.rotation - np.eye(3)).max() < 1e-4
    assert np.linalg.norm(err.translation) < 1e-4 * diag
    assert np.abs(read_cloud(tmp_path / "a.ply").points - truth).max() < 1e-4 * diag


def test_eval_of_identical_inputs_is_zero(tmp_path):
    assert run("gen-dataset", "--n", 2, "--out", tmp_path / "d") == 0
    assert run("scan", tmp_path / "d" / "sample_0000" / "mesh.ply", "--out", tmp_path / "s",
               "--n-views", 3, "--budget", 300) == 0
    scan = tmp_path / "s" / "scan.ply"
    assert run("eval", scan, scan, "--out", tmp_path / "m.csv") == 0
    rows = read_metrics_csv(tmp_path / "m.csv")
    assert float(rows[0]["cd"]) == 0 and float(rows[0]["hd"]) == 0


def test_sweep_single_angle(pipeline, tmp_path):
    assert run("sweep-angle", pipeline["model"], "--out", tmp_path, "--angles", "90", "--n-shapes", 2,
               "--n-views", 4, "--budget", 400, "--deterministic") == 0
    rows = read_metrics_csv(tmp_path / "sweep.csv")
    assert len(rows) == 1 and float(rows[0]["angle"]) == 90
    assert math.isfinite(float(rows[0]["cd"]))
    assert "<svg" in (tmp_path / "sweep.svg").read_text()


def test_pca_baseline_commands(pipeline, tmp_path):
    assert run("build-pca", pipeline["data"], "--out", tmp_path / "pca.ckpt", "--modes", 2) == 0
    assert run("fit-baseline", tmp_path / "pca.ckpt", pipeline["completed"], "--out", tmp_path / "fit",
               "--steps", 5, "--gt", pipeline["data"] / "sample_0000" / "mesh.ply") == 0
    kv = read_kv(tmp_path / "fit" / "report.txt")
    assert float(kv["cd_gt"]) > 0
    assert read_mesh(tmp_path / "fit" / "fitted.ply").is_watertight()


# -- exit codes ----------------------------------------------------------------------

def test_usage_errors_exit_2(pipeline, tmp_path):
    assert run("gen-dataset", "--n", 0, "--out", tmp_path / "x") == 2
    assert run("gen-dataset", "--out", tmp_path / "x") == 2
    assert run("no-such-command") == 2
    assert run("gen-dataset", "--n", 2, "--out", tmp_path / "x", "--set", "scanner.bogus=1") == 2
    assert run("gen-dataset", "--n", 2, "--out", tmp_path / "x", "--set", "scanner.n_views=six") == 2
    assert run("sweep-angle", pipeline["model"], "--out", tmp_path, "--angles", "0,90") == 2
    assert not (tmp_path / "x").exists()


def test_unknown_config_file_key_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("meshing.resolution=32\nmeshing.colour=red\n")
    assert run("gen-dataset", "--n", 1, "--out", tmp_path / "x", "--config", cfg) == 2


def test_mismatched_eval_counts_exit_2(pipeline, tmp_path):
    d = tmp_path / "two"
    d.mkdir()
    for name in ("a.ply", "b.ply"):
        (d / name).write_bytes(pipeline["completed"].read_bytes())
    assert run("eval", d, pipeline["completed"], "--out", tmp_path / "m.csv") == 2


def test_missing_inputs_exit_3(pipeline, tmp_path):
    assert run("mesh", tmp_path / "nope.ply", "--out", tmp_path / "m.ply") == 3
    assert run("complete", tmp_path / "nope.ckpt", pipeline["aligned"], "--out", tmp_path / "c.ply") == 3
    assert run("eval", tmp_path / "nope.ply", pipeline["completed"], "--out", tmp_path / "m.csv") == 3
    bundle = tmp_path / "bundle"
    bundle.mkdir()
    for f in pipeline["scan"].iterdir():
        if f.name != "depth_001.dpm":
            (bundle / f.name).write_bytes(f.read_bytes())
    assert run("canonicalize", bundle, "--out", tmp_path / "a.ply") == 3


def test_corrupt_input_exits_3(tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 2\nend_header\n1 2 3\n")
    assert run("mesh", bad, "--out", tmp_path / "m.ply") == 3


def test_algorithmic_failure_exits_4(tmp_path):
    # a handful of points cannot support normal estimation
    from solescan.formats import write_cloud
    from solescan.geometry import PointCloud

    write_cloud(PointCloud(np.random.default_rng(0).normal(size=(8, 3))), tmp_path / "few.ply")
    assert run("mesh", tmp_path / "few.ply", "--out", tmp_path / "m.ply") == 4
    assert not (tmp_path / "m.ply").exists()


def test_gen_dataset_split_of_fifty(tmp_path):
    assert run("gen-dataset", "--n", 50, "--seed", 2, "--out", tmp_path) == 0
    split = (tmp_path / "split.txt").read_text().split()
    assert split.count("train") == 40 and split.count("test") == 10
    kv = read_kv(tmp_path / "manifest.txt")
    assert kv["command"] == "gen-dataset" and kv["seed"] == "2"
