"""``solescan`` command-line interface.

Every command validates its arguments and configuration before doing any
work, writes its payload under the declared output location, and records a
run manifest beside it. Exit codes: 0 success, 2 usage, 3 I/O, 4 algorithmic
failure.
"""

from __future__ import annotations

import csv
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import config as cfgmod
from .errors import IoError, ParseError, SolescanError
from .formats import (
    ensure_dir,
    read_cameras,
    read_checkpoint,
    read_cloud,
    read_depth,
    read_kv,
    read_landmarks,
    read_mesh,
    write_cameras,
    write_checkpoint,
    write_cloud,
    write_depth,
    write_kv,
    write_line_chart_svg,
    write_mesh,
    write_metrics_csv,
)
from .geometry import PointCloud, Sim3Transform, TriangleMesh

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_ALGORITHM = 4

DEFAULT_ANGLES = (30.0, 45.0, 60.0, 75.0, 90.0, 120.0, 150.0, 180.0)


class UsageError(click.UsageError):
    pass


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class Run:
    command: str
    cfg: dict
    seed: int | None = None
    args: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    started: float = field(default_factory=time.time)
    t0: float = field(default_factory=time.perf_counter)

    def manifest(self, path) -> Path:
        """Write the manifest; every recorded path must exist."""
        path = Path(path)
        values: dict[str, object] = {"command": self.command, "version": __version__}
        if self.seed is not None:
            values["seed"] = int(self.seed)
        for k, v in self.cfg.items():
            values[f"config.{k}"] = v
        for k, v in self.args.items():
            values[f"args.{k}"] = v
        for kind, paths in (("inputs", self.inputs), ("outputs", self.outputs)):
            for i, p in enumerate(paths):
                if not Path(p).exists():
                    raise IoError(f"manifest lists missing file {p}")
                values[f"{kind}.{i:03d}"] = str(p)
        values["volatile.duration_s"] = round(time.perf_counter() - self.t0, 3)
        values["volatile.started_unix"] = round(self.started, 3)
        write_kv(values, path)
        return path


def _file_manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.txt")


def _side_file(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def _setup_threads(threads: int | None, deterministic: bool) -> int:
    if threads is None:
        env = os.environ.get("SOLESCAN_THREADS")
        try:
            threads = int(env) if env else (1 if deterministic else os.cpu_count() or 1)
        except ValueError:
            raise UsageError(f"SOLESCAN_THREADS must be an integer, got '{env}'") from None
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    if deterministic:
        threads = 1
    import torch

    torch.set_num_threads(threads)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    return threads


def _load_config(config_path, assignments, flag_layer: dict) -> dict:
    layers = {}
    if assignments:
        layers.update(cfgmod.parse_assignments(assignments))
    layers.update({k: v for k, v in flag_layer.items() if v is not None})
    return cfgmod.load(config_path, layers)


def common(func):
    """Options shared by every command."""
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False),
                     help="key=value configuration file (flags override it)."),
        click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE",
                     help="Override one configuration key; repeatable."),
        click.option("--threads", type=int, default=None,
                     help="Worker threads (default: $SOLESCAN_THREADS or all cores)."),
        click.option("--deterministic", is_flag=True,
                     help="Single-threaded, reproducible kernels."),
    ]
    for opt in reversed(opts):
        func = opt(func)
    return func


def _start(command: str, config_path, assignments, threads, deterministic, flags: dict, *,
           seed: int | None = None, args: dict | None = None) -> Run:
    cfg = _load_config(config_path, assignments, flags)
    _setup_threads(threads, deterministic)
    run_args = dict(args or {})
    run_args["deterministic"] = bool(deterministic)
    return Run(command, cfg, seed, run_args)


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise IoError(f"no such file: {p}")
    return p


def _require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise IoError(f"no such directory: {p}")
    return p


def _parse_floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated numbers, got '{text}'") from None
    if not vals:
        raise UsageError(f"{name}: empty list")
    return vals


def _read_points(path, n_samples: int, seed: int) -> np.ndarray:
    """Points of a cloud file, or seeded surface samples when the PLY has faces."""
    path = _require_file(path)
    mesh = read_mesh(path)
    if len(mesh.faces):
        return mesh.sample_surface(n_samples, seed).points
    return read_cloud(path).points


def _transform_values(prefix: str, t) -> dict:
    vals = {}
    if isinstance(t, Sim3Transform):
        vals[f"{prefix}.scale"] = float(t.scale)
    rot = np.asarray(t.rotation)
    for i in range(3):
        for j in range(3):
            vals[f"{prefix}.r{i}{j}"] = float(rot[i, j])
    for i, axis in enumerate("xyz"):
        vals[f"{prefix}.t{axis}"] = float(t.translation[i])
    return vals


def read_transform(path, prefix: str = "transform") -> Sim3Transform:
    kv = read_kv(path)
    try:
        rot = np.array([[float(kv[f"{prefix}.r{i}{j}"]) for j in range(3)] for i in range(3)])
        tr = np.array([float(kv[f"{prefix}.t{a}"]) for a in "xyz"])
        return Sim3Transform(float(kv.get(f"{prefix}.scale", 1.0)), rot, tr)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad transform record: {exc}", path=path) from exc


def _rig_spec(cfg: dict):
    from .scanner import RigSpec

    s = cfgmod.section(cfg, "scanner")
    return RigSpec(n_views=s["n_views"], radius=s["radius"],
                   elevation_range=(s["elevation_min"], s["elevation_max"]),
                   max_view_angle=s["max_view_angle"], width=s["resolution"],
                   height=s["resolution"], fov_deg=s["fov_deg"])


def _scan_noise(cfg: dict, seed: int):
    from .scanner import ScanNoise

    s = cfgmod.section(cfg, "scanner")
    return ScanNoise(depth_sigma=s["depth_sigma"], dropout_rate=s["dropout_rate"],
                     vpp_rot_sigma=s["vpp_rot_sigma"], vpp_trans_sigma=s["vpp_trans_sigma"], seed=seed)


def _icp_params(cfg: dict):
    from .align import IcpParams

    a = cfgmod.section(cfg, "align")
    return IcpParams(max_iterations=a["icp_max_iterations"], convergence_tol=a["icp_tolerance"],
                     trim_fraction=a["icp_trim_fraction"],
                     max_correspondence_dist=a["icp_max_correspondence_dist"])


def _scramble(mesh_diag: float, seed: int) -> Sim3Transform:
    """Arbitrary pose for a scan: uniform rotation, scale in [0.5, 2], shift up to 2 diagonals."""
    from .scanner import random_sim3

    return random_sim3(np.random.default_rng(seed), mesh_diag, max_rotation_deg=None,
                       scale_range=(0.5, 2.0), shift_fraction=2.0)


def _template(template_path, landmarks_path):
    from .align import LandmarkSet
    from .shapegen import template_landmarks, template_mesh

    mesh = read_mesh(_require_file(template_path)) if template_path else template_mesh()
    if landmarks_path:
        labels, pts = read_landmarks(_require_file(landmarks_path))
    else:
        labels, pts = template_landmarks()
    return mesh, LandmarkSet(pts, labels)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="solescan")
def cli():
    """Canonicalize, complete and mesh partial foot-like scans."""


@cli.command("gen-dataset")
@click.option("--n", "n", type=int, required=True, help="Number of footoids.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--train-fraction", type=float, default=0.8, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@common
def gen_dataset(n, seed, train_fraction, out_dir, config_path, assignments, threads, deterministic):
    """Write N footoid meshes with parameters and an 80/20 split."""
    if n < 1:
        raise UsageError("--n must be >= 1")
    if not 0 < train_fraction <= 1:
        raise UsageError("--train-fraction must lie in (0, 1]")
    run = _start("gen-dataset", config_path, assignments, threads, deterministic, {}, seed=seed,
                 args={"n": n, "train_fraction": train_fraction})
    from .datasets import write_dataset
    from .formats import write_landmarks
    from .shapegen import sample_dataset, template_landmarks, template_mesh

    out = ensure_dir(out_dir)
    samples = sample_dataset(n, seed)
    run.outputs += write_dataset(samples, out, train_fraction, seed)
    write_mesh(template_mesh(), out / "template.ply")
    labels, pts = template_landmarks()
    write_landmarks(labels, pts, out / "template_landmarks.txt")
    run.outputs += [out / "template.ply", out / "template_landmarks.txt"]
    run.manifest(out / "manifest.txt")
    click.echo(f"wrote {n} samples to {out}")


@cli.command()
@click.argument("mesh_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--n-views", type=int, default=None)
@click.option("--theta-max", type=float, default=None, help="Maximum polar view angle from +z (deg).")
@click.option("--resolution", type=int, default=None)
@click.option("--depth-sigma", type=float, default=None, help="Depth noise std (m).")
@click.option("--dropout", type=float, default=None)
@click.option("--vpp-rot", type=float, default=None, help="Predicted-pose rotation noise (deg).")
@click.option("--vpp-trans", type=float, default=None, help="Predicted-pose translation noise (m).")
@click.option("--budget", type=int, default=None, help="Maximum points kept per view.")
@click.option("--seed", type=int, default=0, show_default=True, help="Noise seed.")
@click.option("--rig-seed", type=int, default=None, help="Rig seed (default: --seed).")
@click.option("--scramble-seed", type=int, default=None, help="Apply a seeded arbitrary similarity.")
@common
def scan(mesh_path, out_dir, n_views, theta_max, resolution, depth_sigma, dropout, vpp_rot, vpp_trans,
         budget, seed, rig_seed, scramble_seed, config_path, assignments, threads, deterministic):
    """Virtual multi-view scan of a mesh into a scan bundle."""
    flags = {"scanner.n_views": n_views, "scanner.max_view_angle": theta_max,
             "scanner.resolution": resolution, "scanner.depth_sigma": depth_sigma,
             "scanner.dropout_rate": dropout, "scanner.vpp_rot_sigma": vpp_rot,
             "scanner.vpp_trans_sigma": vpp_trans, "scanner.per_view_budget": budget}
    run = _start("scan", config_path, assignments, threads, deterministic, flags, seed=seed,
                 args={"rig_seed": seed if rig_seed is None else rig_seed,
                       "scramble_seed": "none" if scramble_seed is None else scramble_seed})
    spec = _rig_spec(run.cfg)
    noise = _scan_noise(run.cfg, seed)
    mesh = read_mesh(_require_file(mesh_path))
    run.inputs.append(Path(mesh_path))
    from .scanner import virtual_scan

    scramble = None if scramble_seed is None else _scramble(mesh.bbox_diagonal(), scramble_seed)
    result = virtual_scan(mesh, spec, noise, scramble, rig_seed=rig_seed,
                          per_view_budget=run.cfg["scanner.per_view_budget"])
    out = ensure_dir(out_dir)
    write_cloud(result.cloud, out / "scan.ply")
    write_cameras([(v.sfm_camera, v.vpp_camera) for v in result.views], out / "cameras.txt")
    run.outputs += [out / "scan.ply", out / "cameras.txt"]
    for i, v in enumerate(result.views):
        write_depth(v.depth.depth, out / f"depth_{i:03d}.dpm")
        run.outputs.append(out / f"depth_{i:03d}.dpm")
    if scramble is not None:
        write_kv(_transform_values("transform", scramble), out / "scramble.txt")
        run.outputs.append(out / "scramble.txt")
    run.manifest(out / "manifest.txt")
    click.echo(f"{len(result.cloud)} points from {len(result.views)} views")


def read_bundle(bundle_dir):
    """(cloud, [(sfm camera, predicted camera, depth)]) from a scan bundle."""
    d = _require_dir(bundle_dir)
    cloud = read_cloud(_require_file(d / "scan.ply"))
    cams = read_cameras(_require_file(d / "cameras.txt"))
    views, files = [], [d / "scan.ply", d / "cameras.txt"]
    for i, (sfm, vpp) in enumerate(cams):
        f = _require_file(d / f"depth_{i:03d}.dpm")
        depth = read_depth(f)
        if depth.shape != (sfm.height, sfm.width):
            raise ParseError(f"depth map {depth.shape} does not match camera {sfm.height}x{sfm.width}", path=f)
        views.append((sfm, vpp, depth))
        files.append(f)
    return cloud, views, files


@cli.command()
@click.argument("bundle_dir", type=click.Path(file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True,
              help="Aligned cloud (PLY); the transform report is written beside it.")
@click.option("--template", "template_path", type=click.Path(dir_okay=False), default=None,
              help="Template mesh (default: built-in footoid template).")
@click.option("--landmarks", "landmarks_path", type=click.Path(dir_okay=False), default=None,
              help="Template landmarks, 'label x y z' per line.")
@click.option("--seed", type=int, default=0, show_default=True, help="ICP subsampling seed.")
@common
def canonicalize(bundle_dir, out_path, template_path, landmarks_path, seed, config_path, assignments,
                 threads, deterministic):
    """Map a scan bundle into the template frame (landmarks, Procrustes, ICP)."""
    run = _start("canonicalize", config_path, assignments, threads, deterministic, {}, seed=seed)
    icp_params = _icp_params(run.cfg)
    cloud, views, files = read_bundle(bundle_dir)
    mesh, landmarks = _template(template_path, landmarks_path)
    run.inputs += files + [Path(p) for p in (template_path, landmarks_path) if p]
    from .align import canonicalize as run_canonicalize

    res = run_canonicalize(mesh, landmarks, views, cloud, icp_params,
                           occlusion_fraction=run.cfg["align.occlusion_fraction"],
                           max_icp_points=run.cfg["align.max_icp_points"], seed=seed)
    out = Path(out_path)
    ensure_dir(out.parent)
    write_cloud(res.aligned, out)
    report = {}
    report.update(_transform_values("transform", res.transform))
    report.update(_transform_values("similarity", res.similarity))
    report.update(_transform_values("refinement", res.refinement))
    report["icp.rms"] = float(res.icp.rms)
    report["icp.iterations"] = int(res.icp.iterations)
    for lab, r, c in zip(landmarks.labels, res.per_landmark_residual, res.views_used_per_landmark):
        report[f"landmark.{lab}.residual"] = float(r)
        report[f"landmark.{lab}.views"] = int(c)
    report_path = _side_file(out, ".transform.txt")
    write_kv(report, report_path)
    run.outputs += [out, report_path]
    run.manifest(_file_manifest_path(out))
    click.echo(f"aligned {len(res.aligned)} points; icp rms {res.icp.rms:.3g}")


def _completion_config(cfg: dict):
    from .completion import CompletionConfig

    return CompletionConfig(**cfgmod.section(cfg, "completion"))


@cli.command()
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True,
              help="Model checkpoint; loss history CSV is written beside it.")
@click.option("--epochs", type=int, default=None)
@click.option("--max-steps", type=int, default=None, help="Stop after this many optimizer steps.")
@click.option("--seed", type=int, default=None, help="Training seed.")
@common
def train(dataset_dir, out_path, epochs, max_steps, seed, config_path, assignments, threads, deterministic):
    """Train the completion network on virtual scans of a dataset's train split."""
    flags = {"train.epochs": epochs, "train.max_steps": max_steps, "train.seed": seed}
    run = _start("train", config_path, assignments, threads, deterministic, flags)
    t = cfgmod.section(run.cfg, "train")
    run.seed = t["seed"]
    from .completion import PairOptions, TrainOptions, save_model, scan_pairs
    from .completion import train as run_train
    from .datasets import read_dataset

    config = _completion_config(run.cfg)
    pair_opts = PairOptions(n_augment=t["n_augment"], n_scans=t["n_scans"], n_views=t["n_views"],
                            theta_range=(t["theta_min"], t["theta_max"]), depth_sigma=t["depth_sigma"],
                            per_view_budget=t["per_view_budget"], max_rotation_deg=t["max_rotation_deg"])
    opts = TrainOptions(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], lr_min=t["lr_min"],
                        schedule=t["schedule"], warmup_steps=t["warmup_steps"], seed=t["seed"],
                        max_steps=t["max_steps"] or None)
    root = _require_dir(dataset_dir)
    entries = [e for e in read_dataset(root) if e.split == "train"]
    if not entries:
        raise UsageError(f"{root} has no training samples")
    run.inputs += [root / e.name / "mesh.ply" for e in entries]
    pairs = scan_pairs([e.mesh for e in entries], pair_opts, seed=t["seed"])
    model, report = run_train(pairs, config, opts)
    out = Path(out_path)
    ensure_dir(out.parent)
    save_model(model, out)
    hist = _side_file(out, ".history.csv")
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", "cd_coarse", "cd_fine"])
        for row in report.history_rows():
            w.writerow([row["step"], repr(row["total"]), repr(row["cd_coarse"]), repr(row["cd_fine"])])
    run.args.update({"n_pairs": len(pairs), "steps": report.steps})
    run.outputs += [out, hist]
    run.manifest(_file_manifest_path(out))
    click.echo(f"trained {report.steps} steps on {len(pairs)} pairs; final loss {report.total[-1]:.4g}")


@cli.command()
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.argument("cloud_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@common
def complete(model_path, cloud_path, out_path, config_path, assignments, threads, deterministic):
    """Complete a partial cloud with a trained model."""
    run = _start("complete", config_path, assignments, threads, deterministic, {})
    from .completion import complete as run_complete
    from .completion import load_model

    model = load_model(_require_file(model_path))
    cloud = read_cloud(_require_file(cloud_path))
    run.inputs += [Path(model_path), Path(cloud_path)]
    result = run_complete(model, cloud)
    out = Path(out_path)
    ensure_dir(out.parent)
    write_cloud(result, out)
    run.outputs.append(out)
    run.manifest(_file_manifest_path(out))
    click.echo(f"wrote {len(result)} points")


@cli.command()
@click.argument("cloud_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--resolution", type=int, default=None)
@click.option("--screening", type=float, default=None)
@click.option("--k", "k", type=int, default=None, help="Neighbours for normal estimation.")
@common
def mesh(cloud_path, out_path, resolution, screening, k, config_path, assignments, threads, deterministic):
    """Watertight surface from a cloud (normals + screened Poisson + marching cubes)."""
    flags = {"meshing.resolution": resolution, "meshing.screening": screening, "meshing.k": k}
    run = _start("mesh", config_path, assignments, threads, deterministic, flags)
    m = cfgmod.section(run.cfg, "meshing")
    from .meshing import mesh_cloud

    cloud = read_cloud(_require_file(cloud_path))
    run.inputs.append(Path(cloud_path))
    result = mesh_cloud(cloud, k=m["k"], resolution=m["resolution"], screening=m["screening"],
                        padding=m["padding"], max_iterations=m["max_iterations"])
    out = Path(out_path)
    ensure_dir(out.parent)
    write_mesh(result, out)
    run.outputs.append(out)
    run.manifest(_file_manifest_path(out))
    click.echo(f"{len(result.vertices)} vertices, {len(result.faces)} faces")


def _ply_files(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return sorted(f for f in p.iterdir() if f.suffix.lower() == ".ply" and f.is_file())
    return [_require_file(p)]


@cli.command("eval")
@click.argument("pred", type=click.Path())
@click.argument("gt", type=click.Path())
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--samples", type=int, default=None, help="Surface samples per mesh input.")
@click.option("--seed", type=int, default=None)
@common
def evaluate(pred, gt, out_path, samples, seed, config_path, assignments, threads, deterministic):
    """Chamfer (unsquared) and Hausdorff per pair plus mean and std rows.

    PRED and GT are PLY files or directories of PLY files, paired in sorted
    order. Meshes are sampled on their surface; clouds are used as is.
    """
    run = _start("eval", config_path, assignments, threads, deterministic,
                 {"eval.n_samples": samples, "eval.seed": seed})
    run.seed = run.cfg["eval.seed"]
    for p in (pred, gt):
        if not Path(p).exists():
            raise IoError(f"no such file or directory: {p}")
    preds, gts = _ply_files(pred), _ply_files(gt)
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} prediction file(s) but {len(gts)} ground-truth file(s)")
    if not preds:
        raise UsageError("no PLY files to evaluate")
    from .metrics import chamfer, hausdorff

    n, s = run.cfg["eval.n_samples"], run.cfg["eval.seed"]
    rows, cds, hds = [], [], []
    for fp, fg in zip(preds, gts):
        p, g = _read_points(fp, n, s), _read_points(fg, n, s)
        cd, hd = chamfer(p, g).cd, hausdorff(p, g)
        rows.append((fp.stem, cd, hd))
        cds.append(cd)
        hds.append(hd)
    rows.append(("mean", float(np.mean(cds)), float(np.mean(hds))))
    rows.append(("std", float(np.std(cds)), float(np.std(hds))))
    out = Path(out_path)
    ensure_dir(out.parent)
    write_metrics_csv(rows, out)
    run.inputs += preds + gts
    run.outputs.append(out)
    run.manifest(_file_manifest_path(out))
    click.echo(f"mean CD {rows[-2][1]:.6g} +- {rows[-1][1]:.6g}, mean HD {rows[-2][2]:.6g}")


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def sweep_angles(model, meshes, angles, cfg: dict, *, scramble: bool = True,
                 mesh_seed_base: int = 10_000) -> list[tuple[float, float, float, int]]:
    """(angle, mean CD, mean HD, failures) per maximum view angle.

    Each shape is scanned (rig and noise seeds depend only on its index),
    optionally scrambled, canonicalized against the template and completed;
    CD is measured against the ground-truth surface carried into the same
    aligned frame. Shapes whose canonicalization fails are counted and left
    out of the mean; an angle with no surviving shape gets NaN.
    """
    from dataclasses import replace

    from .align import canonicalize as run_canonicalize
    from .completion import complete_many
    from .geometry import compose
    from .metrics import chamfer, hausdorff
    from .scanner import virtual_scan

    template, landmarks = _template(None, None)
    icp_params = _icp_params(cfg)
    base = _rig_spec(cfg)
    gts = [m.sample_surface(cfg["eval.n_samples"], cfg["eval.seed"] + i).points for i, m in enumerate(meshes)]
    rows = []
    for angle in angles:
        try:
            spec = replace(base, max_view_angle=float(angle))
            aligned, gt_aligned, failures = [], [], 0
            for i, mesh in enumerate(meshes):
                sc = _scramble(mesh.bbox_diagonal(), mesh_seed_base + i) if scramble else None
                res = virtual_scan(mesh, spec, _scan_noise(cfg, mesh_seed_base + i), sc,
                                   per_view_budget=cfg["scanner.per_view_budget"])
                try:
                    can = run_canonicalize(template, landmarks, res.views, res.cloud, icp_params,
                                           occlusion_fraction=cfg["align.occlusion_fraction"],
                                           max_icp_points=cfg["align.max_icp_points"], seed=i)
                except SolescanError:
                    failures += 1
                    continue
                full = compose(can.transform, sc) if sc is not None else can.transform
                aligned.append(can.aligned)
                gt_aligned.append(full.apply(gts[i]))
            if not aligned:
                rows.append((float(angle), math.nan, math.nan, failures))
                continue
            completed = complete_many(model, aligned)
            cds = [chamfer(c, g).cd for c, g in zip(completed, gt_aligned)]
            hds = [hausdorff(c, g) for c, g in zip(completed, gt_aligned)]
            rows.append((float(angle), float(np.mean(cds)), float(np.mean(hds)), failures))
        except SolescanError as exc:
            click.echo(f"angle {angle}: {exc}", err=True)
            rows.append((float(angle), math.nan, math.nan, len(meshes)))
    return rows


def _test_meshes(dataset_dir, n_shapes: int, seed: int) -> tuple[list[TriangleMesh], list[Path]]:
    if dataset_dir:
        from .datasets import read_dataset

        root = _require_dir(dataset_dir)
        entries = [e for e in read_dataset(root) if e.split == "test"]
        if not entries:
            raise UsageError(f"{root} has no test samples")
        return [e.mesh for e in entries], [root / e.name / "mesh.ply" for e in entries]
    from .shapegen import sample_dataset

    return [s.mesh for s in sample_dataset(n_shapes, seed)], []


@cli.command("sweep-angle")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--angles", default=",".join(f"{a:g}" for a in DEFAULT_ANGLES), show_default=True)
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False), default=None,
              help="Use this dataset's test split (default: freshly generated held-out footoids).")
@click.option("--n-shapes", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True, help="Footoid seed for generated shapes.")
@click.option("--no-scramble", is_flag=True, help="Scan in the template frame instead of an arbitrary pose.")
@click.option("--depth-sigma", type=float, default=1e-3, show_default=True, help="Depth noise std (m).")
@click.option("--budget", type=int, default=1024, show_default=True, help="Maximum points kept per view.")
@click.option("--n-views", type=int, default=None)
@common
def sweep_angle(model_path, out_dir, angles, dataset_dir, n_shapes, seed, no_scramble, depth_sigma, budget, n_views,
                config_path, assignments, threads, deterministic):
    """Mean completed CD as a function of the maximum viewing angle (CSV + SVG)."""
    angle_list = _parse_floats(angles, "--angles")
    if any(not 0 < a <= 180 for a in angle_list):
        raise UsageError("angles must lie in (0, 180]")
    if n_shapes < 1:
        raise UsageError("--n-shapes must be >= 1")
    flags = {"scanner.depth_sigma": depth_sigma, "scanner.per_view_budget": budget, "scanner.n_views": n_views}
    run = _start("sweep-angle", config_path, assignments, threads, deterministic, flags, seed=seed,
                 args={"angles": angle_list, "scramble": not no_scramble, "n_shapes": n_shapes})
    from .completion import load_model

    model = load_model(_require_file(model_path))
    meshes, mesh_files = _test_meshes(dataset_dir, n_shapes, seed)
    run.inputs += [Path(model_path)] + mesh_files
    rows = sweep_angles(model, meshes, angle_list, run.cfg, scramble=not no_scramble)
    out = ensure_dir(out_dir)
    write_metrics_csv([(f"{a:g}", cd, hd, {"angle": a, "failures": f}) for a, cd, hd, f in rows],
                      out / "sweep.csv")
    write_line_chart_svg([r[0] for r in rows], [r[1] for r in rows], out / "sweep.svg",
                         title="Completed Chamfer distance vs scanning angle",
                         xlabel="maximum view angle (deg)", ylabel="mean CD (m)")
    run.outputs += [out / "sweep.csv", out / "sweep.svg"]
    run.manifest(out / "manifest.txt")
    for a, cd, _, f in rows:
        click.echo(f"{a:g}\t{cd:.6g}\tfailures={f}")


@cli.command("build-pca")
@click.argument("dataset_dir", type=click.Path(file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--modes", type=int, default=None)
@common
def build_pca_cmd(dataset_dir, out_path, modes, config_path, assignments, threads, deterministic):
    """PCA shape model over a dataset's train split."""
    run = _start("build-pca", config_path, assignments, threads, deterministic, {"fit.n_modes": modes})
    from .datasets import read_dataset
    from .shapegen import build_pca

    root = _require_dir(dataset_dir)
    entries = [e for e in read_dataset(root) if e.split == "train"]
    m = run.cfg["fit.n_modes"]
    if len(entries) < m + 1:
        raise UsageError(f"need at least {m + 1} training samples for {m} modes, found {len(entries)}")
    model = build_pca([e.mesh for e in entries], m)
    out = Path(out_path)
    ensure_dir(out.parent)
    save_pca(model, out)
    run.inputs += [root / e.name / "mesh.ply" for e in entries]
    run.outputs.append(out)
    run.manifest(_file_manifest_path(out))
    click.echo(f"{m} modes from {len(entries)} shapes")


def save_pca(model, path) -> None:
    write_checkpoint(path, {"mean_vertices": model.mean_vertices, "basis": model.basis,
                            "mode_stddevs": model.mode_stddevs, "faces": model.faces.astype(np.float32)},
                     {"kind": "pca"})


def load_pca(path):
    from .shapegen import PcaShapeModel

    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "pca":
        raise ParseError("not a PCA shape model", path=path)
    return PcaShapeModel(tensors["mean_vertices"].astype(np.float64), tensors["basis"].astype(np.float64),
                         tensors["mode_stddevs"].astype(np.float64), tensors["faces"].astype(np.int64))


@cli.command("fit-baseline")
@click.argument("pca_path", type=click.Path(dir_okay=False))
@click.argument("target_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--mode", type=click.Choice(["partial", "completed"]), default="partial", show_default=True,
              help="Whether the target is a raw partial scan or a completed cloud (recorded in the report).")
@click.option("--gt", "gt_path", type=click.Path(dir_okay=False), default=None,
              help="Ground-truth mesh or cloud for CD/HD of the fitted surface.")
@click.option("--steps", type=int, default=None)
@common
def fit_baseline(pca_path, target_path, out_dir, mode, gt_path, steps, config_path, assignments, threads,
                 deterministic):
    """Fit the PCA shape model to a target cloud by Chamfer minimisation."""
    if steps is not None and steps < 0:
        raise UsageError("--steps must be >= 0")
    run = _start("fit-baseline", config_path, assignments, threads, deterministic, {"fit.steps": steps},
                 args={"mode": mode})
    f = cfgmod.section(run.cfg, "fit")
    run.seed = f["seed"]
    from .metrics import chamfer, hausdorff
    from .shapegen import FitOptions, fit_pca

    model = load_pca(_require_file(pca_path))
    target = read_cloud(_require_file(target_path))
    run.inputs += [Path(pca_path), Path(target_path)]
    result = fit_pca(model, target, FitOptions(steps=f["steps"], lr=f["lr"], n_model_points=f["n_model_points"],
                                               seed=f["seed"]))
    fitted = result.mesh(model.faces)
    out = ensure_dir(out_dir)
    write_mesh(fitted, out / "fitted.ply")
    report = {"mode": mode, "cd_target": result.cd, "steps": f["steps"]}
    for k, z in enumerate(result.coefficients):
        report[f"coefficient.{k}"] = float(z)
    report.update(_transform_values("transform", result.transform))
    if gt_path:
        g = _read_points(gt_path, run.cfg["eval.n_samples"], run.cfg["eval.seed"])
        p = fitted.sample_surface(run.cfg["eval.n_samples"], run.cfg["eval.seed"]).points
        report["cd_gt"] = chamfer(p, g).cd
        report["hd_gt"] = hausdorff(p, g)
        run.inputs.append(Path(gt_path))
    write_kv(report, out / "report.txt")
    run.outputs += [out / "fitted.ply", out / "report.txt"]
    run.manifest(out / "manifest.txt")
    click.echo(f"cd to target {result.cd:.6g}" + (f", cd to gt {report['cd_gt']:.6g}" if gt_path else ""))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    """Run the CLI and map failures onto exit codes."""
    try:
        cli.main(args=argv, prog_name="solescan", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except cfgmod.ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (IoError, ParseError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO
    except SolescanError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        details = getattr(exc, "diagnostics", None)
        if details:
            for k, v in details.items():
                click.echo(f"  {k}: {v}", err=True)
        return EXIT_ALGORITHM
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
