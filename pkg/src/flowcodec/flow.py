"""Rectified-flow interpolation, noise-level sampling, and Stage 1A loss assembly.

Convention: the decoder regresses the velocity v* = x - z along the straight
path x_t = t*z + (1-t)*x, so integration toward data steps
x <- x + (t_i - t_{i+1}) * v as t decreases.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import DataError


def _broadcast_t(t: Tensor | float, like: Tensor) -> Tensor:
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    t = t.to(dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    if t.ndim != 1 or t.shape[0] != like.shape[0]:
        raise DataError(f"t must be scalar or [batch], got shape {tuple(t.shape)}")
    if (t < 0).any() or (t > 1).any():
        raise DataError("noise level t outside [0, 1]")
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def interpolate(x: Tensor, z: Tensor, t: Tensor | float) -> Tensor:
    """x_t = t*z + (1-t)*x, broadcast over the batch dimension."""
    if x.shape != z.shape:
        raise DataError(f"shape mismatch: x {tuple(x.shape)} vs z {tuple(z.shape)}")
    tb = _broadcast_t(t, x)
    return tb * z + (1 - tb) * x


def flow_loss(v_pred: Tensor, x: Tensor, z: Tensor) -> Tensor:
    """Mean squared error against the target velocity v* = x - z."""
    if not (v_pred.shape == x.shape == z.shape):
        raise DataError("flow_loss inputs must share one shape")
    return (x - z - v_pred).square().mean()


def denoise_one_step(x_t: Tensor, v_pred: Tensor, t: Tensor | float) -> Tensor:
    """One-jump denoised prediction x_hat = x_t + t*v."""
    tb = _broadcast_t(t, x_t)
    return x_t + tb * v_pred


def sample_noise_levels(
    batch: int,
    uniform_mix_prob: float,
    generator: torch.Generator,
    *,
    dtype=torch.float32,
    device=None,
) -> tuple[Tensor, Tensor]:
    """Draw noise levels from the thick-tailed logit-normal mixture.

    With probability ``uniform_mix_prob`` a level comes from Uniform(0, 1);
    otherwise it is sigmoid(n) with n ~ Normal(0, 1).  Returns (t, mask)
    where mask flags the draws that came from the uniform branch.
    """
    if not 0.0 <= uniform_mix_prob <= 1.0:
        raise DataError(f"uniform_mix_prob must lie in [0, 1], got {uniform_mix_prob}")
    device = device or "cpu"
    gate = torch.rand(batch, generator=generator, dtype=dtype, device=device)
    uniform = torch.rand(batch, generator=generator, dtype=dtype, device=device)
    normal = torch.randn(batch, generator=generator, dtype=dtype, device=device)
    mask = gate < uniform_mix_prob
    t = torch.where(mask, uniform, torch.sigmoid(normal))
    return t, mask


@dataclass
class LossBundle:
    """Per-batch loss components and their weighted total.

    Invariant: total = flow + lambda_perc*perc + lambda_commit*commit
    + lambda_ent*ent, held bitwise by construction.
    """

    flow: Tensor
    perc: Tensor
    commit: Tensor
    ent: Tensor
    total: Tensor
    lambda_perc: float
    lambda_commit: float
    lambda_ent: float


def assemble_stage1a_loss(
    flow: Tensor,
    perc: Tensor,
    commit: Tensor,
    ent: Tensor,
    *,
    lambda_perc: float = 0.1,
    lambda_commit: float = 0.000625,
    lambda_ent: float = 0.0025,
) -> LossBundle:
    """Combine the Stage 1A components under their configured weights."""
    for name, lam in (
        ("lambda_perc", lambda_perc),
        ("lambda_commit", lambda_commit),
        ("lambda_ent", lambda_ent),
    ):
        if lam < 0:
            raise DataError(f"{name} must be >= 0, got {lam}")
    total = flow + lambda_perc * perc + lambda_commit * commit + lambda_ent * ent
    return LossBundle(
        flow=flow,
        perc=perc,
        commit=commit,
        ent=ent,
        total=total,
        lambda_perc=lambda_perc,
        lambda_commit=lambda_commit,
        lambda_ent=lambda_ent,
    )
