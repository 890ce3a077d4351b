"""Attention-based coarse-to-fine completion network.

Pipeline for one normalised input set of ``n_in`` points:

1. a per-point MLP embeds every point into ``latent_dim`` features;
2. pre-norm transformer blocks (multi-head self-attention over all points,
   then a feed-forward layer, both residual) mix the tokens;
3. a learned query attends over the tokens to give one global latent;
4. an MLP maps the latent to ``n_gen_coarse`` coarse points;
5. ``n_scaffold`` input points chosen by farthest point sampling are
   appended verbatim, giving the coarse set;
6. every coarse point gets a feature from its position and the global
   latent, refined by cross-attention blocks against the encoder tokens;
   it is then copied ``up_ratio`` times, each copy adds a learned copy
   embedding and passes a residual feed-forward layer, and a displacement
   head (last layer zero-initialised) moves it off its parent.

Parameters live in a flat name -> tensor dict so that gradients, Adam
state and checkpoints are all keyed the same way.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import EmptyInput, NumericalError, ShapeError
from ..geometry import PointCloud, fps_indices
from .autodiff import chamfer_sq_torch


@dataclass(frozen=True)
class CompletionConfig:
    n_in: int = 1024
    n_scaffold: int = 128
    n_gen_coarse: int = 128
    n_fine: int = 2048
    latent_dim: int = 128
    n_heads: int = 4
    n_encoder_blocks: int = 2
    n_refine_blocks: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("n_in", "n_gen_coarse", "n_fine", "latent_dim", "n_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_scaffold", "n_encoder_blocks", "n_refine_blocks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_scaffold > self.n_in:
            raise ValueError("n_scaffold cannot exceed n_in")
        if self.latent_dim % self.n_heads:
            raise ValueError("latent_dim must be divisible by n_heads")
        if self.n_fine % self.n_coarse:
            raise ValueError("n_fine must be a multiple of n_gen_coarse + n_scaffold")

    @property
    def n_coarse(self) -> int:
        return self.n_gen_coarse + self.n_scaffold

    @property
    def up_ratio(self) -> int:
        return self.n_fine // self.n_coarse

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> CompletionConfig:
        return cls(**{k: int(v) for k, v in d.items()})


def _shapes(cfg: CompletionConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape, in a fixed order."""
    L = cfg.latent_dim
    s: dict[str, tuple[int, ...]] = {}

    def mlp(prefix, dims):
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            s[f"{prefix}.w{i}"] = (a, b)
            s[f"{prefix}.b{i}"] = (b,)

    def norm(prefix):
        s[f"{prefix}.g"] = (L,)
        s[f"{prefix}.b"] = (L,)

    def attn(prefix):
        for m in ("q", "k", "v", "o"):
            s[f"{prefix}.w{m}"] = (L, L)
        s[f"{prefix}.bo"] = (L,)

    mlp("embed", (3, L, L))
    for i in range(cfg.n_encoder_blocks):
        norm(f"enc{i}.norm1")
        attn(f"enc{i}.attn")
        norm(f"enc{i}.norm2")
        mlp(f"enc{i}.ff", (L, 2 * L, L))
    norm("pool.norm")
    s["pool.query"] = (L,)
    s["pool.wk"] = (L, L)
    s["pool.wv"] = (L, L)
    mlp("gen", (L, 2 * L, 3 * cfg.n_gen_coarse))
    mlp("ref.point", (3, L, L))
    s["ref.glob"] = (L, L)
    norm("ref.memory_norm")
    for i in range(cfg.n_refine_blocks):
        norm(f"ref{i}.norm1")
        attn(f"ref{i}.attn")
        norm(f"ref{i}.norm2")
        mlp(f"ref{i}.ff", (L, 2 * L, L))
    s["copy.embed"] = (cfg.up_ratio, L)
    norm("copy.norm")
    mlp("copy.ff", (L, 2 * L, L))
    norm("head.norm")
    mlp("head", (L, L, 3))
    return s


HEAD_OUTPUT = ("head.w1", "head.b1")


def _init_params(cfg: CompletionConfig, dtype=torch.float32) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(cfg.seed)
    params = {}
    for name, shape in _shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if name in HEAD_OUTPUT:
            t = torch.zeros(shape, dtype=torch.float64)
        elif leaf == "g":
            t = torch.ones(shape, dtype=torch.float64)
        elif leaf.startswith("b") and len(shape) == 1:
            t = torch.zeros(shape, dtype=torch.float64)
        elif name in ("pool.query", "copy.embed"):
            t = torch.randn(shape, generator=gen, dtype=torch.float64)
        else:
            fan_in = shape[0]
            t = torch.randn(shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
        params[name] = t.to(dtype)
    # generated coarse points start near the origin of the normalised frame
    params["gen.w1"].mul_(0.1)
    return params


@dataclass
class CompletionModel:
    config: CompletionConfig
    params: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, config: CompletionConfig, dtype=torch.float32) -> CompletionModel:
        return cls(config, _init_params(config, dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def to(self, dtype) -> CompletionModel:
        return CompletionModel(self.config, {k: v.detach().to(dtype).clone() for k, v in self.params.items()})

    def copy(self) -> CompletionModel:
        return self.to(self.dtype)

    def n_parameters(self) -> int:
        return sum(v.numel() for v in self.params.values())

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.params.values())

    def __call__(self, x):
        return forward(self, x)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _mlp(p, prefix, x, n_layers):
    for i in range(n_layers):
        x = x @ p[f"{prefix}.w{i}"] + p[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            x = F.gelu(x)
    return x


def _norm(p, prefix, x):
    return F.layer_norm(x, x.shape[-1:], p[f"{prefix}.g"], p[f"{prefix}.b"])


def _attention(p, prefix, q_in, kv_in, n_heads):
    b, nq, L = q_in.shape
    nk = kv_in.shape[1]
    dh = L // n_heads
    q = (q_in @ p[f"{prefix}.wq"]).view(b, nq, n_heads, dh).transpose(1, 2)
    k = (kv_in @ p[f"{prefix}.wk"]).view(b, nk, n_heads, dh).transpose(1, 2)
    v = (kv_in @ p[f"{prefix}.wv"]).view(b, nk, n_heads, dh).transpose(1, 2)
    a = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (a @ v).transpose(1, 2).reshape(b, nq, L)
    return out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def encode(model: CompletionModel, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(tokens, global latent) for a batch of normalised inputs (B, n_in, 3)."""
    p, cfg = model.params, model.config
    h = _mlp(p, "embed", x, 2)
    for i in range(cfg.n_encoder_blocks):
        hn = _norm(p, f"enc{i}.norm1", h)
        h = h + _attention(p, f"enc{i}.attn", hn, hn, cfg.n_heads)
        h = h + _mlp(p, f"enc{i}.ff", _norm(p, f"enc{i}.norm2", h), 2)
    # attention pooling: one learned query per head over all tokens
    b, n, L = h.shape
    dh = L // cfg.n_heads
    hn = _norm(p, "pool.norm", h)
    k = (hn @ p["pool.wk"]).view(b, n, cfg.n_heads, dh)
    v = (hn @ p["pool.wv"]).view(b, n, cfg.n_heads, dh)
    q = p["pool.query"].view(cfg.n_heads, dh)
    a = torch.softmax((k * q).sum(-1) / math.sqrt(dh), dim=1)  # (B, n, H)
    g = (a.unsqueeze(-1) * v).sum(1).reshape(b, L)
    return h, g


def scaffold_indices(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    return fps_indices(np.asarray(x, dtype=np.float64), k, seed)


def forward(model: CompletionModel, x) -> tuple[torch.Tensor, torch.Tensor]:
    """(coarse, fine) for input (n_in, 3) or a batch (B, n_in, 3).

    Coarse rows are ``n_gen_coarse`` generated points followed by the
    ``n_scaffold`` scaffold points; fine row ``i * up_ratio + r`` is copy
    ``r`` of coarse point ``i``.
    """
    cfg, p = model.config, model.params
    x = torch.as_tensor(x, dtype=model.dtype)
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 3 or x.shape[1:] != (cfg.n_in, 3):
        raise ShapeError(f"expected input of shape (n_in={cfg.n_in}, 3), got {tuple(x.shape)}")
    if not bool(torch.isfinite(x).all()):
        raise NumericalError("non-finite input")
    b = x.shape[0]
    tokens, g = encode(model, x)

    gen = _mlp(p, "gen", g, 2).view(b, cfg.n_gen_coarse, 3)
    xs = x.detach().cpu().numpy()
    idx = torch.as_tensor(np.stack([scaffold_indices(xs[i], cfg.n_scaffold, cfg.seed) for i in range(b)]))
    scaffold = torch.gather(x, 1, idx.unsqueeze(-1).expand(b, cfg.n_scaffold, 3))
    coarse = torch.cat([gen, scaffold], dim=1)

    f = _mlp(p, "ref.point", coarse, 2) + (g @ p["ref.glob"]).unsqueeze(1)
    memory = _norm(p, "ref.memory_norm", tokens)
    for i in range(cfg.n_refine_blocks):
        f = f + _attention(p, f"ref{i}.attn", _norm(p, f"ref{i}.norm1", f), memory, cfg.n_heads)
        f = f + _mlp(p, f"ref{i}.ff", _norm(p, f"ref{i}.norm2", f), 2)

    r = cfg.up_ratio
    parents = coarse.repeat_interleave(r, dim=1)
    e = f.repeat_interleave(r, dim=1) + p["copy.embed"].repeat(cfg.n_coarse, 1).unsqueeze(0)
    e = e + _mlp(p, "copy.ff", _norm(p, "copy.norm", e), 2)
    fine = parents + _mlp(p, "head", _norm(p, "head.norm", e), 2)

    if not (bool(torch.isfinite(coarse).all()) and bool(torch.isfinite(fine).all())):
        raise NumericalError("non-finite activation in forward pass")
    if single:
        return coarse[0], fine[0]
    return coarse, fine


def global_latent(model: CompletionModel, x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=model.dtype)
    return encode(model, x.unsqueeze(0) if x.dim() == 2 else x)[1]


# ---------------------------------------------------------------------------
# Input normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    centre: np.ndarray
    radius: float

    def normalize(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.centre) / self.radius

    def denormalize(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * self.radius + self.centre


def resample_input(p, n_in: int, seed: int = 0) -> tuple[np.ndarray, Normalizer]:
    """Fixed-size, centred, unit-bounding-sphere version of ``p``.

    With at least ``n_in`` points: farthest point sampling. With fewer, every
    point is kept once and the remainder is drawn with replacement.
    """
    pts = p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("cannot resample an empty cloud")
    if len(pts) >= n_in:
        sel = fps_indices(pts, n_in, seed)
    else:
        extra = np.random.default_rng(seed).integers(0, len(pts), n_in - len(pts))
        sel = np.concatenate([np.arange(len(pts)), extra])
    out = pts[sel]
    centre = out.mean(0)
    radius = float(np.sqrt(np.max(np.sum((out - centre) ** 2, axis=1))))
    # a single distinct location has no extent; rounding of the centroid is not extent either
    if not radius > 1e-12 * max(1.0, float(np.abs(centre).max())):
        radius = 1.0
    norm = Normalizer(centre, radius)
    return norm.normalize(out), norm


# ---------------------------------------------------------------------------
# Loss, gradients, optimiser
# ---------------------------------------------------------------------------

def loss_targets(gt, n_coarse: int, n_fine: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(coarse target, fine target) from normalised ground-truth points."""
    pts = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("empty ground truth")
    if len(pts) == n_fine:
        fine = pts
    elif len(pts) > n_fine:
        fine = pts[fps_indices(pts, n_fine, seed)]
    else:
        extra = np.random.default_rng(seed).integers(0, len(pts), n_fine - len(pts))
        fine = pts[np.concatenate([np.arange(len(pts)), extra])]
    k = min(n_coarse, len(fine))
    return fine[fps_indices(fine, k, seed)], fine


def loss_from_targets(coarse, fine, coarse_target, fine_target):
    """Batch-mean (total, cd_coarse, cd_fine) of squared Chamfer losses."""
    ct = torch.as_tensor(coarse_target, dtype=coarse.dtype)
    ft = torch.as_tensor(fine_target, dtype=fine.dtype)
    cd_c = chamfer_sq_torch(coarse, ct).mean()
    cd_f = chamfer_sq_torch(fine, ft).mean()
    return cd_c + cd_f, cd_c, cd_f


def loss(coarse, fine, ground_truth, seed: int = 0):
    """(total, cd_coarse, cd_fine); ground truth in the same normalised frame."""
    coarse = torch.as_tensor(coarse)
    fine = torch.as_tensor(fine)
    ct, ft = loss_targets(ground_truth, coarse.shape[-2], fine.shape[-2], seed)
    return loss_from_targets(coarse, fine, ct, ft)


def backward(model: CompletionModel, x, ground_truth, frozen: Iterable[str] = (),
             seed: int = 0) -> dict[str, torch.Tensor]:
    """Gradient of the total loss for every parameter not in ``frozen``."""
    frozen = set(frozen)
    names = [n for n in model.params if n not in frozen]
    leaves = {n: model.params[n].detach().requires_grad_(n in names) for n in model.params}
    probe = CompletionModel(model.config, leaves)
    coarse, fine = forward(probe, x)
    total, _, _ = loss(coarse, fine, ground_truth, seed)
    grads = torch.autograd.grad(total, [leaves[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        g = torch.zeros_like(leaves[n]) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NumericalError(f"non-finite gradient for {n}")
        out[n] = g.detach()
    return out


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, torch.Tensor], AdamState]:
    """Bias-corrected Adam update of the tensors named in ``grads`` (in place)."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {tuple(g.shape)} does not match {name} {tuple(p.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(model: CompletionModel, path, extra_meta: dict[str, str] | None = None) -> None:
    from ..formats import write_checkpoint

    meta = {f"config.{k}": str(v) for k, v in model.config.to_dict().items()}
    meta.update(extra_meta or {})
    write_checkpoint(path, {k: v.detach().cpu().numpy() for k, v in model.params.items()}, meta)


def load_model(path) -> CompletionModel:
    from ..formats import read_checkpoint

    tensors, meta = read_checkpoint(path)
    cfg = CompletionConfig.from_dict({k[7:]: v for k, v in meta.items() if k.startswith("config.")})
    expected = _shapes(cfg)
    if set(tensors) != set(expected):
        raise ShapeError("checkpoint tensors do not match its configuration")
    params = {}
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise ShapeError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
        params[name] = torch.from_numpy(np.array(tensors[name], dtype=np.float32))
    return CompletionModel(cfg, params)
