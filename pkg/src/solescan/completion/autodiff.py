"""Differentiable building blocks shared by training and the PCA fit.

Reverse-mode differentiation is delegated to torch autograd; the Chamfer
nearest-neighbour choice is an argmin, so gradients flow only through the
selected pairs.
"""

from __future__ import annotations

import torch


def pairwise_sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(..., N, M) squared distances computed as explicit differences."""
    return ((a.unsqueeze(-2) - b.unsqueeze(-3)) ** 2).sum(-1)


def _nearest(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Index into ``b`` of the nearest neighbour of every point of ``a`` (no grad)."""
    with torch.no_grad():
        # expanded form is cheap; it only picks the partner, the distance is recomputed
        d = (a * a).sum(-1, keepdim=True) + (b * b).sum(-1).unsqueeze(-2) - 2.0 * a @ b.transpose(-1, -2)
        return d.argmin(-1)


def _gather(b: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(b, -2, idx.unsqueeze(-1).expand(*idx.shape, 3))


def chamfer_sq_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared Chamfer distance, mean(min) in both directions; batched over leading dims.

    Partners are chosen without gradient; the selected squared distances are
    recomputed as explicit differences, so coincident sets give exactly zero.
    """
    ab = ((a - _gather(b, _nearest(a, b))) ** 2).sum(-1)
    ba = ((b - _gather(a, _nearest(b, a))) ** 2).sum(-1)
    return ab.mean(-1) + ba.mean(-1)


def rodrigues(w: torch.Tensor) -> torch.Tensor:
    """Axis-angle 3-vector to rotation matrix."""
    zero = torch.zeros((), dtype=w.dtype)
    k = torch.stack([zero, -w[2], w[1], w[2], zero, -w[0], -w[1], w[0], zero]).reshape(3, 3)
    eye = torch.eye(3, dtype=w.dtype)
    theta2 = (w * w).sum()
    if float(theta2.detach()) < 1e-12:
        # second-order series keeps the gradient finite at the identity
        return eye + k + 0.5 * (k @ k)
    theta = torch.sqrt(theta2)
    return eye + torch.sin(theta) / theta * k + (1 - torch.cos(theta)) / theta2 * (k @ k)
