"""Lookup-free binary quantization, its regularizers, FSQ, and token packing.

The latent ``c_hat`` is a real tensor of shape [batch, S, D].  ``binarize``
maps it elementwise to {-1, +1} with a straight-through gradient, the entropy
and commitment losses regularize code usage, and ``pack_tokens`` /
``unpack_tokens`` convert between sign codes and integer ids, ``group_bits``
bits at a time.
"""

from __future__ import annotations

import struct

import torch
from torch import Tensor

from .errors import DataError

MAX_GROUP_BITS = 16  # entropy loss and uint16 serialization both cap here

TOKEN_MAGIC = b"FCTK"
TOKEN_VERSION = 1
_TOKEN_HEADER = struct.Struct("<4sHHHHI")  # magic, version, S, D, g, batch


def _check_finite(c_hat: Tensor) -> None:
    if not torch.isfinite(c_hat).all():
        raise DataError("latent contains non-finite entries")


def binarize(c_hat: Tensor) -> Tensor:
    """Elementwise sign quantization c = 2*[c_hat >= 0] - 1, straight-through.

    The forward value is exactly +-1; under differentiation the gradient
    passes through unchanged to ``c_hat``.
    """
    _check_finite(c_hat)
    hard = torch.where(c_hat >= 0, 1.0, -1.0).to(c_hat.dtype)
    # hard + (x - x.detach()) keeps the forward value exactly +-1; the usual
    # x + (hard - x).detach() form can miss by one ulp.
    return hard.detach() + (c_hat - c_hat.detach())


def hard_sign(c_hat: Tensor) -> Tensor:
    """Sign quantization with no gradient path (the commitment target)."""
    _check_finite(c_hat)
    return torch.where(c_hat >= 0, 1.0, -1.0).to(c_hat.dtype).detach()


def commitment_loss(c_hat: Tensor) -> Tensor:
    """Mean squared distance between the latent and its detached sign code."""
    return (c_hat - hard_sign(c_hat)).square().mean()


def codebook(group_bits: int, *, dtype=torch.float32, device=None) -> Tensor:
    """All 2**g sign vectors as a [g, 2**g] matrix.

    Column k holds the code whose j-th entry is +1 iff bit j of k is set,
    matching the bit order of :func:`pack_tokens`.
    """
    if group_bits < 1 or group_bits > MAX_GROUP_BITS:
        raise DataError(f"group_bits must lie in [1, {MAX_GROUP_BITS}], got {group_bits}")
    ks = torch.arange(2**group_bits, device=device)
    js = torch.arange(group_bits, device=device)
    bits = (ks[None, :] >> js[:, None]) & 1
    return (2.0 * bits - 1.0).to(dtype)


def entropy_loss(c_hat: Tensor, group_bits: int) -> Tensor:
    """LFQ entropy objective over softmax codebook probabilities, in nats.

    Each token's D dims split into D/g groups; per group, logits against the
    2**g codebook vectors give p = softmax(c_hat . C).  Returns
    mean(H(p)) - mean over group slots of H(batch-mean p): low per-sample
    entropy (confident codes) and high usage entropy (diverse codes) both
    push the loss down.
    """
    _check_finite(c_hat)
    if c_hat.ndim != 3:
        raise DataError(f"expected latent of shape [batch, S, D], got {tuple(c_hat.shape)}")
    batch, seq, dim = c_hat.shape
    if dim % group_bits != 0:
        raise DataError(f"token bits {dim} not divisible by group_bits {group_bits}")
    if group_bits > MAX_GROUP_BITS:
        raise DataError(f"group_bits {group_bits} exceeds enumeration bound {MAX_GROUP_BITS}")
    groups = c_hat.reshape(batch, seq, dim // group_bits, group_bits)
    logits = groups @ codebook(group_bits, dtype=c_hat.dtype, device=c_hat.device)
    logp = torch.log_softmax(logits, dim=-1)
    p = logp.exp()
    sample_entropy = -(p * logp).sum(dim=-1).mean()
    mean_p = p.mean(dim=0)  # batch-mean distribution per (position, group) slot
    usage_entropy = -(mean_p * torch.log(mean_p.clamp_min(1e-30))).sum(dim=-1).mean()
    return sample_entropy - usage_entropy


def fsq_quantize(c_hat: Tensor, levels: int) -> Tensor:
    """Round tanh(c_hat) to a symmetric ``levels``-point grid on [-1, 1].

    Straight-through gradient through the rounding; no entropy or commitment
    losses apply to FSQ codes.
    """
    if levels < 3 or levels % 2 == 0:
        raise DataError(f"fsq levels must be odd and >= 3, got {levels}")
    _check_finite(c_hat)
    half = (levels - 1) / 2
    soft = torch.tanh(c_hat) * half
    rounded = soft.round().detach() + (soft - soft.detach())
    return rounded / half


def quantize(c_hat: Tensor, kind: str, fsq_levels: int = 5) -> Tensor:
    """Dispatch to the configured quantizer."""
    if kind == "lfq":
        return binarize(c_hat)
    if kind == "fsq":
        return fsq_quantize(c_hat, fsq_levels)
    raise DataError(f"unknown quantizer kind {kind!r}")


def _check_signs(c: Tensor) -> None:
    if not torch.isin(c.detach().flatten(), torch.tensor([-1.0, 1.0], dtype=c.dtype)).all():
        raise DataError("quantized code has entries other than -1/+1")


def pack_tokens(c: Tensor, group_bits: int) -> Tensor:
    """Pack a sign code [batch, S, D] into integer ids [batch, S*(D/g)].

    Within each group, bit j of the id is (c_j + 1) / 2, j = 0 being the
    first element of the group.
    """
    if c.ndim != 3:
        raise DataError(f"expected code of shape [batch, S, D], got {tuple(c.shape)}")
    batch, seq, dim = c.shape
    if dim % group_bits != 0:
        raise DataError(f"token bits {dim} not divisible by group_bits {group_bits}")
    if group_bits > MAX_GROUP_BITS:
        raise DataError(f"group_bits {group_bits} exceeds id width bound {MAX_GROUP_BITS}")
    _check_signs(c)
    bits = ((c.detach() + 1) / 2).round().to(torch.int64)
    bits = bits.reshape(batch, seq, dim // group_bits, group_bits)
    weights = 2 ** torch.arange(group_bits, device=c.device)
    ids = (bits * weights).sum(dim=-1)
    return ids.reshape(batch, seq * (dim // group_bits))


def unpack_tokens(ids: Tensor, group_bits: int, token_bits: int) -> Tensor:
    """Exact inverse of :func:`pack_tokens`; returns a float sign code."""
    if ids.ndim != 2:
        raise DataError(f"expected ids of shape [batch, positions], got {tuple(ids.shape)}")
    if token_bits % group_bits != 0:
        raise DataError(f"token_bits {token_bits} not divisible by group_bits {group_bits}")
    if ids.numel() and (ids.min() < 0 or ids.max() >= 2**group_bits):
        raise DataError(f"token id out of range [0, {2**group_bits})")
    groups_per_token = token_bits // group_bits
    batch, positions = ids.shape
    if positions % groups_per_token != 0:
        raise DataError(
            f"id count {positions} not divisible by groups-per-token {groups_per_token}"
        )
    seq = positions // groups_per_token
    js = torch.arange(group_bits, device=ids.device)
    bits = (ids.reshape(batch, seq, groups_per_token, 1) >> js) & 1
    return (2.0 * bits - 1.0).reshape(batch, seq, token_bits).to(torch.float32)


def save_tokens(path, ids: Tensor, seq_len: int, token_bits: int, group_bits: int) -> None:
    """Write ids as little-endian uint16, row-major, behind a 16-byte header."""
    ids = ids.detach().to(torch.int64)
    if ids.numel() and (ids.min() < 0 or ids.max() >= 2**group_bits):
        raise DataError(f"token id out of range [0, {2**group_bits})")
    header = _TOKEN_HEADER.pack(
        TOKEN_MAGIC, TOKEN_VERSION, seq_len, token_bits, group_bits, ids.shape[0]
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ids.cpu().numpy().astype("<u2").tobytes())


def load_tokens(path) -> tuple[Tensor, int, int, int]:
    """Read a token file; returns (ids, seq_len, token_bits, group_bits)."""
    import numpy as np

    with open(path, "rb") as fh:
        header = fh.read(_TOKEN_HEADER.size)
        if len(header) != _TOKEN_HEADER.size:
            raise DataError(f"token file {path} is truncated")
        magic, version, seq_len, token_bits, group_bits, batch = _TOKEN_HEADER.unpack(header)
        if magic != TOKEN_MAGIC:
            raise DataError(f"{path} is not a token file (bad magic {magic!r})")
        if version != TOKEN_VERSION:
            raise DataError(f"unsupported token file version {version}")
        positions = seq_len * (token_bits // group_bits)
        payload = fh.read()
    expected = batch * positions * 2
    if len(payload) != expected:
        raise DataError(f"token file {path} payload is {len(payload)} bytes, expected {expected}")
    ids = np.frombuffer(payload, dtype="<u2").astype("int64").reshape(batch, positions)
    return torch.from_numpy(ids), seq_len, token_bits, group_bits
