"""Footoid dataset directories and the standard train / held-out scan suites."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .formats import ensure_dir, read_kv, read_mesh, write_kv, write_mesh
from .geometry import PointCloud, TriangleMesh
from .scanner import RigSpec, ScanNoise, virtual_scan
from .shapegen import N_MODES, FootoidParams, FootoidSample, sample_dataset

TRAIN_SEED = 0
TEST_SEED = 1


def sample_name(i: int) -> str:
    return f"sample_{i:04d}"


def split_names(n: int, train_fraction: float = 0.8, seed: int = 0) -> dict[str, str]:
    """Seeded name -> 'train' | 'test' assignment; round(n * fraction) train samples."""
    n_train = int(round(n * train_fraction))
    order = np.random.default_rng(seed).permutation(n)
    split = {}
    for rank, i in enumerate(order):
        split[sample_name(int(i))] = "train" if rank < n_train else "test"
    return dict(sorted(split.items()))


def write_dataset(samples: list[FootoidSample], root, train_fraction: float = 0.8,
                  seed: int = 0) -> list[Path]:
    """``sample_####/mesh.ply`` + ``params.txt`` per sample and ``split.txt``."""
    root = ensure_dir(root)
    written = []
    for i, s in enumerate(samples):
        d = ensure_dir(root / sample_name(i))
        write_mesh(s.mesh, d / "mesh.ply")
        vals = {f"w{k}": float(w) for k, w in enumerate(s.params.coefficients)}
        vals["scale"] = float(s.params.scale)
        write_kv(vals, d / "params.txt")
        written += [d / "mesh.ply", d / "params.txt"]
    split = split_names(len(samples), train_fraction, seed)
    (root / "split.txt").write_text("".join(f"{k} {v}\n" for k, v in split.items()))
    written.append(root / "split.txt")
    return written


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    mesh: TriangleMesh
    params: FootoidParams | None
    split: str


def read_dataset(root) -> list[DatasetEntry]:
    root = Path(root)
    split: dict[str, str] = {}
    split_file = root / "split.txt"
    if split_file.exists():
        for i, line in enumerate(split_file.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("train", "test"):
                raise ParseError(f"bad split line '{line}'", path=split_file, line=i)
            split[parts[0]] = parts[1]
    entries = []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sample_")):
        params = None
        if (d / "params.txt").exists():
            kv = read_kv(d / "params.txt")
            try:
                params = FootoidParams(np.array([float(kv[f"w{k}"]) for k in range(N_MODES)]),
                                       float(kv["scale"]))
            except (KeyError, ValueError) as exc:
                raise ParseError(f"bad params file: {exc}", path=d / "params.txt") from exc
        entries.append(DatasetEntry(d.name, read_mesh(d / "mesh.ply"), params, split.get(d.name, "train")))
    return entries


# ---------------------------------------------------------------------------
# Scan suites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteOptions:
    n_shapes: int = 50
    seed: int = TEST_SEED
    max_view_angle: float = 90.0
    n_views: int = 6
    depth_sigma: float = 1e-3
    per_view_budget: int = 1024


def held_out_suite(opts: SuiteOptions = SuiteOptions(),
                   meshes: list[TriangleMesh] | None = None) -> list[tuple[PointCloud, TriangleMesh]]:
    """One angle-restricted scan per held-out footoid, in the template frame.

    Footoids come from a seed disjoint from training; rig and noise seeds
    depend only on the shape index, so sweeping ``max_view_angle`` rescans
    the same shapes with the same rig stratification.
    """
    if meshes is None:
        meshes = [s.mesh for s in sample_dataset(opts.n_shapes, opts.seed)]
    suite = []
    for i, mesh in enumerate(meshes):
        rig = RigSpec(n_views=opts.n_views, max_view_angle=opts.max_view_angle)
        scan = virtual_scan(mesh, rig, ScanNoise(depth_sigma=opts.depth_sigma, seed=10_000 + i),
                            per_view_budget=opts.per_view_budget)
        suite.append((scan.cloud, mesh))
    return suite
