"""Input validation helpers for array-facing estimator methods."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from .errors import DataError


def check_image_batch(X, resolution: int, channels: int) -> Tensor:
    """Coerce X to a float tensor [n, channels, resolution, resolution] in [-1, 1]."""
    if torch.is_tensor(X):
        array = X.detach().cpu().float()
    else:
        array = torch.as_tensor(np.asarray(X, dtype=np.float32))
    if array.ndim == 3:
        array = array[None]
    if array.ndim != 4:
        raise DataError(f"expected images of shape [n, C, H, W], got {tuple(array.shape)}")
    if array.shape[1] != channels or array.shape[2] != resolution or array.shape[3] != resolution:
        raise DataError(
            f"expected [n, {channels}, {resolution}, {resolution}] images, got {tuple(array.shape)}"
        )
    if not torch.isfinite(array).all():
        raise DataError("images contain non-finite values")
    if array.min() < -1.0 - 1e-6 or array.max() > 1.0 + 1e-6:
        raise DataError("images must be scaled to [-1, 1]")
    return array


def check_token_batch(X, positions: int, vocab_size: int) -> Tensor:
    """Coerce X to an int64 tensor [n, positions] with ids in [0, vocab_size)."""
    if torch.is_tensor(X):
        ids = X.detach().cpu().long()
    else:
        ids = torch.as_tensor(np.asarray(X), dtype=torch.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.ndim != 2 or ids.shape[1] != positions:
        raise DataError(f"expected token ids of shape [n, {positions}], got {tuple(ids.shape)}")
    if ids.numel() and (ids.min() < 0 or ids.max() >= vocab_size):
        raise DataError(f"token id out of range [0, {vocab_size})")
    return ids
