"""Dual-stream transformer autoencoder with a diffusion decoder.

The encoder and decoder share one block design: latent tokens and image
patches keep separate projections and MLPs but attend over the concatenated
sequence.  The decoder additionally receives the noise level t through a
sinusoidal embedding that drives per-block scale/shift/gate modulation; the
encoder has no time input.  Width is scalable through ``width_factor`` with
1/fan_in initialization, down-scaled output heads, and per-parameter
learning-rate multipliers so hyperparameters transfer across sizes.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .config import ModelConfig
from .errors import DataError

ROW_NORM_EPS = 1e-8  # rows below this norm are left alone by renormalization


def patchify(x: Tensor, patch_size: int) -> Tensor:
    """Split [B, C, H, W] into row-major p*p patches, [B, (H/p)(W/p), p*p*C]."""
    if x.ndim != 4:
        raise DataError(f"expected image batch [B, C, H, W], got {tuple(x.shape)}")
    _, _, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise DataError(f"patch size {patch_size} does not divide resolution {h}x{w}")
    return rearrange(x, "b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify(tokens: Tensor, patch_size: int, channels: int) -> Tensor:
    """Exact inverse of :func:`patchify` for square token grids."""
    if tokens.ndim != 3:
        raise DataError(f"expected token batch [B, N, dim], got {tuple(tokens.shape)}")
    _, n, dim = tokens.shape
    side = math.isqrt(n)
    if side * side != n:
        raise DataError(f"token count {n} is not a square grid")
    if dim != patch_size * patch_size * channels:
        raise DataError(f"token dim {dim} != patch_size^2 * channels = {patch_size**2 * channels}")
    return rearrange(
        tokens,
        "b (h w) (p1 p2 c) -> b c (h p1) (w p2)",
        h=side,
        w=side,
        p1=patch_size,
        p2=patch_size,
        c=channels,
    )


class SinusoidalTimeEmbedding(nn.Module):
    """Classic sin/cos features of the noise level, t in [0, 1] scaled by 1000."""

    def __init__(self, dim: int, max_period: float = 10000.0):
        super().__init__()
        self.dim = dim
        half = dim // 2
        exponents = torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
        self.register_buffer("freqs", torch.exp(-math.log(max_period) * exponents), persistent=False)

    def forward(self, t: Tensor) -> Tensor:
        args = 1000.0 * t.to(self.freqs.dtype)[:, None] * self.freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        if emb.shape[-1] < self.dim:  # odd dim
            emb = F.pad(emb, (0, self.dim - emb.shape[-1]))
        return emb


class Mlp(nn.Module):
    """Feed-forward block; its two weight matrices are the renormalized ones."""

    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class DualStreamBlock(nn.Module):
    """Joint attention over (latent, image) tokens with per-stream parameters.

    When ``modulated`` the block consumes a time embedding through one
    6*width modulation projection per stream (shift/scale/gate for attention
    and MLP); otherwise the layer norms carry their own affine parameters.

    A final block only updates the stream that is read out afterwards
    (``update_streams``); the other stream still contributes keys and values
    but carries no output projection or MLP, so no parameter is dead weight.
    """

    def __init__(
        self,
        width: int,
        num_heads: int,
        mlp_ratio: float = 4.0,
        modulated: bool = False,
        update_streams: tuple[str, ...] = ("lat", "img"),
    ):
        super().__init__()
        self.num_heads = num_heads
        self.modulated = modulated
        self.update_streams = update_streams
        hidden = int(width * mlp_ratio)
        affine = not modulated
        for stream in ("lat", "img"):
            setattr(self, f"{stream}_norm1", nn.LayerNorm(width, elementwise_affine=affine))
            setattr(self, f"{stream}_qkv", nn.Linear(width, 3 * width))
            if stream not in update_streams:
                continue
            setattr(self, f"{stream}_norm2", nn.LayerNorm(width, elementwise_affine=affine))
            setattr(self, f"{stream}_proj", nn.Linear(width, width))
            setattr(self, f"{stream}_mlp", Mlp(width, hidden))
            if modulated:
                setattr(self, f"{stream}_mod", nn.Linear(width, 6 * width))

    def _mod_params(self, stream: str, t_emb: Tensor):
        mod: nn.Linear = getattr(self, f"{stream}_mod")
        return mod(t_emb).chunk(6, dim=-1)

    def forward(self, lat: Tensor, img: Tensor, t_emb: Tensor | None = None):
        if self.modulated and t_emb is None:
            raise DataError("modulated block needs a time embedding")
        n_lat = lat.shape[1]
        mods = {}
        normed = {}
        streams = {"lat": lat, "img": img}
        for stream, value in streams.items():
            h = getattr(self, f"{stream}_norm1")(value)
            if self.modulated and stream in self.update_streams:
                mods[stream] = self._mod_params(stream, t_emb)
                h = _modulate(h, mods[stream][0], mods[stream][1])
            normed[stream] = h

        qkv = torch.cat([self.lat_qkv(normed["lat"]), self.img_qkv(normed["img"])], dim=1)
        q, k, v = rearrange(qkv, "b n (three h d) -> three b h n d", three=3, h=self.num_heads)
        attn = F.scaled_dot_product_attention(q, k, v)
        attn = rearrange(attn, "b h n d -> b n (h d)")
        attn_parts = {"lat": attn[:, :n_lat], "img": attn[:, n_lat:]}

        for stream in self.update_streams:
            value = streams[stream]
            attn_out = getattr(self, f"{stream}_proj")(attn_parts[stream])
            norm2 = getattr(self, f"{stream}_norm2")
            mlp = getattr(self, f"{stream}_mlp")
            if self.modulated:
                _, _, gate1, shift2, scale2, gate2 = mods[stream]
                value = value + gate1[:, None, :] * attn_out
                value = value + gate2[:, None, :] * mlp(_modulate(norm2(value), shift2, scale2))
            else:
                value = value + attn_out
                value = value + mlp(norm2(value))
            streams[stream] = value
        return streams["lat"], streams["img"]


def _num_heads(width: int) -> int:
    heads = max(1, width // 32)
    while width % heads:
        heads -= 1
    return heads


class Encoder(nn.Module):
    """Maps images to the continuous latent.

    The latent stream starts from the zero code, so its only content is the
    learned per-position embedding (a projection of an all-zero vector would
    reduce to a bias anyway).
    """

    def __init__(self, config: ModelConfig, width: int):
        super().__init__()
        self.config = config
        p, c = config.patch_size, config.channels
        self.patch_embed = nn.Linear(p * p * c, width)
        self.pos_img = nn.Parameter(torch.zeros(1, config.num_image_tokens, width))
        self.pos_lat = nn.Parameter(torch.zeros(1, config.latent_seq_len, width))
        self.blocks = nn.ModuleList(
            DualStreamBlock(
                width,
                _num_heads(width),
                update_streams=("lat",) if d == config.encoder_depth - 1 else ("lat", "img"),
            )
            for d in range(config.encoder_depth)
        )
        self.final_norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, config.token_bits)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2:] != (
            cfg.image_resolution,
            cfg.image_resolution,
        ):
            raise DataError(
                f"encoder expects [B, {cfg.channels}, {cfg.image_resolution}, "
                f"{cfg.image_resolution}], got {tuple(x.shape)}"
            )
        img = self.patch_embed(patchify(x, cfg.patch_size)) + self.pos_img
        lat = self.pos_lat.expand(x.shape[0], -1, -1)
        for block in self.blocks:
            lat, img = block(lat, img)
        return self.head(self.final_norm(lat))


class Decoder(nn.Module):
    """Velocity field v(x_t, c, t); the noise level modulates every block."""

    def __init__(self, config: ModelConfig, width: int):
        super().__init__()
        self.config = config
        p, c = config.patch_size, config.channels
        self.patch_embed = nn.Linear(p * p * c, width)
        self.lat_embed = nn.Linear(config.token_bits, width)
        self.pos_img = nn.Parameter(torch.zeros(1, config.num_image_tokens, width))
        self.pos_lat = nn.Parameter(torch.zeros(1, config.latent_seq_len, width))
        self.time_embed = SinusoidalTimeEmbedding(width)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.blocks = nn.ModuleList(
            DualStreamBlock(
                width,
                _num_heads(width),
                modulated=True,
                update_streams=("img",) if d == config.decoder_depth - 1 else ("lat", "img"),
            )
            for d in range(config.decoder_depth)
        )
        self.final_norm = nn.LayerNorm(width, elementwise_affine=False)
        self.final_mod = nn.Linear(width, 2 * width)
        self.head = nn.Linear(width, p * p * c)

    def forward(self, x_t: Tensor, c: Tensor, t: Tensor | float) -> Tensor:
        cfg = self.config
        if x_t.ndim != 4 or x_t.shape[2:] != (cfg.image_resolution, cfg.image_resolution):
            raise DataError(f"decoder expects {cfg.image_resolution}px inputs, got {tuple(x_t.shape)}")
        if c.shape != (x_t.shape[0], cfg.latent_seq_len, cfg.token_bits):
            raise DataError(
                f"latent must be [B, {cfg.latent_seq_len}, {cfg.token_bits}], got {tuple(c.shape)}"
            )
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), float(t), dtype=x_t.dtype, device=x_t.device)
        if (t < 0).any() or (t > 1).any():
            raise DataError("noise level t outside [0, 1]")
        t_emb = self.time_mlp(self.time_embed(t).to(x_t.dtype))
        img = self.patch_embed(patchify(x_t, cfg.patch_size)) + self.pos_img
        lat = self.lat_embed(c.to(x_t.dtype)) + self.pos_lat
        for block in self.blocks:
            lat, img = block(lat, img, t_emb)
        shift, scale = self.final_mod(t_emb).chunk(2, dim=-1)
        out = self.head(_modulate(self.final_norm(img), shift, scale))
        return unpatchify(out, cfg.patch_size, cfg.channels)


class Autoencoder(nn.Module):
    """Encoder/decoder pair plus the metadata needed to rebuild it."""

    def __init__(self, config: ModelConfig, width_factor: int = 1):
        super().__init__()
        if width_factor < 1:
            raise DataError(f"width_factor must be >= 1, got {width_factor}")
        self.config = config
        self.width_factor = width_factor
        self.width = config.width * width_factor
        self.encoder = Encoder(config, self.width)
        self.decoder = Decoder(config, self.width)
        self.lr_multipliers: dict[str, float] = {}

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def decode(self, x_t: Tensor, c: Tensor, t) -> Tensor:
        return self.decoder(x_t, c, t)


def apply_latent_dropout(c: Tensor, prob: float, generator: torch.Generator) -> Tensor:
    """Zero out the whole latent of each sample independently with probability prob."""
    if not 0.0 <= prob <= 1.0:
        raise DataError(f"dropout probability must lie in [0, 1], got {prob}")
    if prob == 0.0:
        return c
    keep = (
        torch.rand(c.shape[0], generator=generator, device=c.device) >= prob
    ).to(c.dtype)
    return c * keep.reshape(-1, *([1] * (c.ndim - 1)))


def renormalize_weights(module: nn.Module) -> nn.Module:
    """Rescale every MLP weight-matrix row to unit L2 norm, in place.

    Rows with norm below ``ROW_NORM_EPS`` are left unchanged, as are rows
    already within 1e-6 of unit norm (keeps the operation exactly
    idempotent).  Attention and embedding weights are untouched.
    """
    with torch.no_grad():
        for sub in module.modules():
            if not isinstance(sub, Mlp):
                continue
            for lin in (sub.fc1, sub.fc2):
                w = lin.weight
                norms = w.norm(dim=1, keepdim=True)
                skip = (norms < ROW_NORM_EPS) | ((norms - 1).abs() <= 1e-6)
                w.mul_(torch.where(skip, torch.ones_like(norms), 1.0 / norms))
    return module


def _init_linear(lin: nn.Linear, generator: torch.Generator) -> None:
    fan_in = lin.weight.shape[1]
    lin.weight.data.normal_(0.0, fan_in**-0.5, generator=generator)
    if lin.bias is not None:
        lin.bias.data.zero_()


def build_autoencoder(
    config: ModelConfig,
    width_factor: int = 1,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> Autoencoder:
    """Construct and initialize the autoencoder with width-aware scaling.

    Hidden weights get variance 1/fan_in; the encoder/decoder output heads
    receive an extra 1/width_factor scale, and hidden weights record a
    1/width_factor learning-rate multiplier in ``model.lr_multipliers``.
    """
    generator = generator or torch.Generator().manual_seed(0)
    model = Autoencoder(config, width_factor)
    heads = {"encoder.head", "decoder.head"}
    inputs = {"encoder.patch_embed", "decoder.patch_embed", "decoder.lat_embed"}
    multipliers: dict[str, float] = {}
    for name, sub in model.named_modules():
        if isinstance(sub, nn.Linear):
            _init_linear(sub, generator)
            if name in heads:
                sub.weight.data.mul_(1.0 / width_factor)
                mult = 1.0
            elif name in inputs:
                mult = 1.0
            else:
                mult = 1.0 / width_factor
            multipliers[f"{name}.weight"] = mult
    for name, param in model.named_parameters():
        if name.startswith("encoder.pos_") or name.startswith("decoder.pos_"):
            param.data.normal_(0.0, 0.02, generator=generator)
        multipliers.setdefault(name, 1.0)
    model.lr_multipliers = multipliers
    return model.to(dtype)
