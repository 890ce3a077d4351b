"""Training-pair synthesis, the training loop, and inference."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from ..errors import DivergedTraining, EmptyInput
from ..geometry import PointCloud, TriangleMesh
from ..scanner import RigSpec, ScanNoise, augment, virtual_scan
from .model import (
    AdamState,
    CompletionConfig,
    CompletionModel,
    adam_step,
    forward,
    loss_from_targets,
    loss_targets,
    resample_input,
    save_model,
)


def set_deterministic(threads: int = 1) -> None:
    """Sequential, reproducible torch kernels."""
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Pair synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairOptions:
    n_augment: int = 10
    n_scans: int = 5
    n_views: int = 6
    theta_range: tuple[float, float] = (30.0, 180.0)
    depth_sigma: float = 1e-3
    per_view_budget: int = 1024
    max_rotation_deg: float = 15.0
    resolution: int = 256


def scan_pairs(meshes, opts: PairOptions = PairOptions(), seed: int = 0) -> list[tuple[PointCloud, TriangleMesh]]:
    """Augment every mesh ``n_augment`` times and scan each variant ``n_scans`` times.

    Each scan draws its own rig seed and maximum view angle (uniform over
    ``theta_range``); all draws derive from ``seed``.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for mesh in meshes:
        for _, variant in augment(mesh, opts.n_augment, int(rng.integers(2**31)),
                                  max_rotation_deg=opts.max_rotation_deg):
            for _ in range(opts.n_scans):
                theta = float(rng.uniform(*opts.theta_range))
                s = int(rng.integers(2**31))
                rig = RigSpec(n_views=opts.n_views, max_view_angle=theta,
                              width=opts.resolution, height=opts.resolution)
                scan = virtual_scan(variant, rig, ScanNoise(depth_sigma=opts.depth_sigma, seed=s),
                                    per_view_budget=opts.per_view_budget)
                pairs.append((scan.cloud, variant))
    return pairs


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 4
    batch_size: int = 8
    lr: float = 1e-3
    lr_min: float = 1e-5
    schedule: str = "cosine"  # or "constant"
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule '{self.schedule}'")


@dataclass
class TrainReport:
    total: list[float] = field(default_factory=list)
    coarse: list[float] = field(default_factory=list)
    fine: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    model_path: str | None = None

    def history_rows(self) -> list[dict]:
        return [{"step": i, "total": t, "cd_coarse": c, "cd_fine": f}
                for i, (t, c, f) in enumerate(zip(self.total, self.coarse, self.fine))]


def learning_rate(opts: TrainOptions, step: int, total_steps: int) -> float:
    if opts.schedule == "constant":
        return opts.lr
    if step < opts.warmup_steps:
        return opts.lr * (step + 1) / opts.warmup_steps
    t = (step - opts.warmup_steps) / max(1, total_steps - opts.warmup_steps)
    return opts.lr_min + 0.5 * (opts.lr - opts.lr_min) * (1.0 + math.cos(math.pi * min(t, 1.0)))


def _prepare_inputs(pairs, n_in: int):
    xs, norms = [], []
    for partial, _ in pairs:
        x, norm = resample_input(partial, n_in, seed=0)
        xs.append(x)
        norms.append(norm)
    return np.stack(xs), norms


def _epoch_targets(pairs, norms, cfg: CompletionConfig, seed: int):
    """Fresh ground-truth surface samples, normalised like the matching input."""
    coarse, fine = [], []
    for i, ((_, mesh), norm) in enumerate(zip(pairs, norms)):
        s = int(np.random.default_rng([seed, i]).integers(2**31))
        gt = norm.normalize(mesh.sample_surface(cfg.n_fine, s).points)
        c, f = loss_targets(gt, cfg.n_coarse, cfg.n_fine, seed=0)
        coarse.append(c)
        fine.append(f)
    return np.stack(coarse), np.stack(fine)


def train(pairs, config: CompletionConfig = CompletionConfig(), options: TrainOptions = TrainOptions(),
          *, model: CompletionModel | None = None, checkpoint_path=None,
          progress: Callable[[int, float], None] | None = None) -> tuple[CompletionModel, TrainReport]:
    """Minibatch Adam on coarse + fine squared Chamfer; returns the best-epoch model."""
    if len(pairs) == 0:
        raise EmptyInput("no training pairs")
    t0 = time.perf_counter()
    model = model.copy() if model is not None else CompletionModel.create(config)
    cfg = model.config
    x_all, norms = _prepare_inputs(pairs, cfg.n_in)
    x_all = torch.as_tensor(x_all, dtype=model.dtype)
    steps_per_epoch = math.ceil(len(pairs) / options.batch_size)
    total_steps = options.epochs * steps_per_epoch
    if options.max_steps is not None:
        total_steps = min(total_steps, options.max_steps)

    state = AdamState()
    report = TrainReport()
    best = (math.inf, model.copy())
    step = 0
    for epoch in range(options.epochs):
        if step >= total_steps:
            break
        order = np.random.default_rng([options.seed, epoch]).permutation(len(pairs))
        ct_all, ft_all = _epoch_targets(pairs, norms, cfg, seed=options.seed * 100_003 + epoch)
        epoch_losses, seen = [], 0
        for start in range(0, len(order), options.batch_size):
            if step >= total_steps:
                break
            idx = np.sort(order[start:start + options.batch_size])
            leaves = {k: v.detach().requires_grad_(True) for k, v in model.params.items()}
            probe = CompletionModel(cfg, leaves)
            coarse, fine = forward(probe, x_all[idx])
            total, cd_c, cd_f = loss_from_targets(coarse, fine, ct_all[idx], ft_all[idx])
            val = float(total.detach())
            if not math.isfinite(val):
                raise DivergedTraining(f"non-finite loss at step {step}")
            names = list(leaves)
            grads = dict(zip(names, torch.autograd.grad(total, [leaves[n] for n in names])))
            adam_step(model.params, grads, state, learning_rate(options, step, total_steps),
                      options.beta1, options.beta2, options.eps)
            report.total.append(val)
            report.coarse.append(float(cd_c.detach()))
            report.fine.append(float(cd_f.detach()))
            epoch_losses.append(val * len(idx))
            seen += len(idx)
            step += 1
            if progress is not None:
                progress(step, val)
        mean = math.fsum(epoch_losses) / max(1, seen)
        report.epoch_loss.append(mean)
        if mean < best[0]:
            best = (mean, model.copy())
    model = best[1]
    report.steps = step
    report.wall_time = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_model(model, checkpoint_path)
        report.model_path = str(checkpoint_path)
    return model, report


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def complete(model: CompletionModel, partial) -> PointCloud:
    """Completed cloud (``n_fine`` points) in the frame of ``partial``."""
    x, norm = resample_input(partial, model.config.n_in, seed=0)
    with torch.no_grad():
        _, fine = forward(model, x)
    return PointCloud(norm.denormalize(fine.double().numpy()))


def complete_many(model: CompletionModel, partials, batch_size: int = 16) -> list[PointCloud]:
    out = []
    for start in range(0, len(partials), batch_size):
        chunk = partials[start:start + batch_size]
        prepared = [resample_input(p, model.config.n_in, seed=0) for p in chunk]
        with torch.no_grad():
            _, fine = forward(model, np.stack([x for x, _ in prepared]))
        for (_, norm), f in zip(prepared, fine):
            out.append(PointCloud(norm.denormalize(f.double().numpy())))
    return out
