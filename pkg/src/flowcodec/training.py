"""Stage 1A / 1B optimization loops, optimizer and EMA mechanics, reports.

Stage 1A trains encoder and decoder end-to-end on the flow-matching loss plus
one-step perceptual, commitment, and entropy terms, with per-step MLP weight
renormalization, EMA tracking, and an encoder freeze after a configured step.
Stage 1B freezes the encoder and fine-tunes the decoder on the flow loss plus
a perceptual loss on the n-step sample, differentiated through the whole
Euler chain; batch size and learning rate are halved relative to Stage 1A and
early stopping watches a held-out perceptual distance.

All randomness flows through one explicit torch.Generator, so runs with the
same seed, config, and dataset are reproducible (CPU reduction order is
deterministic here; other backends may differ in the last ulp).
"""

from __future__ import annotations

import collections
import contextlib
import csv
import dataclasses
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .checkpoint import CheckpointState, require_compatible
from .config import ConfigBundle, config_to_text, parse_config_text, validate_config
from .data import ImageSet
from .errors import DataError, DivergenceError
from .flow import assemble_stage1a_loss, denoise_one_step, flow_loss, interpolate, sample_noise_levels
from .metrics import (
    STAGE1A_EXTRACTOR_SEED,
    STAGE1B_EXTRACTOR_SEED,
    PerceptualExtractor,
    perceptual_distance,
    psnr,
)
from .model import Autoencoder, apply_latent_dropout, build_autoencoder, renormalize_weights
from .quantizer import commitment_loss, entropy_loss, quantize
from .sampling import GuidanceSpec, integrate, random_schedule, scaled_initial_noise, shifted_schedule

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_WINDOW = 100
EARLY_STOP_PATIENCE = 3


@dataclass
class AdamState:
    """First/second moment trees plus the shared bias-correction step count."""

    m: dict[str, Tensor]
    v: dict[str, Tensor]
    step: int = 0

    @staticmethod
    def like(params: dict[str, Tensor]) -> "AdamState":
        return AdamState(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    lr_multipliers: dict[str, float] | None = None,
) -> None:
    """One standard Adam update with bias correction, applied in place.

    Parameters absent from ``grads`` are skipped entirely; per-parameter
    learning-rate multipliers (width scaling, encoder freeze) default to 1.
    """
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            mult = 1.0 if lr_multipliers is None else lr_multipliers.get(name, 1.0)
            if mult == 0.0:
                continue
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m / bc1, denom, value=-lr * mult)


def ema_update(ema: dict[str, Tensor], params: dict[str, Tensor], rate: float = 0.9999) -> None:
    """ema <- rate * ema + (1 - rate) * params, elementwise in place."""
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"ema rate must lie in [0, 1], got {rate}")
    with torch.no_grad():
        for name, p in params.items():
            ema[name].mul_(rate).add_(p.detach(), alpha=1 - rate)


@dataclass
class EvalSnapshot:
    step: int
    psnr: float
    perceptual: float


@dataclass
class TrainReport:
    """Per-step loss components plus periodic evaluation snapshots."""

    steps: list[dict] = field(default_factory=list)
    snapshots: list[EvalSnapshot] = field(default_factory=list)
    early_stopped: bool = False

    def loss_series(self, key: str) -> list[float]:
        return [row[key] for row in self.steps if key in row]

    def write_csv(self, path) -> None:
        keys: list[str] = ["step"]
        for row in self.steps:
            for key in row:
                if key not in keys:
                    keys.append(key)
        keys += ["eval_psnr", "eval_perceptual"]
        snap_by_step = {s.step: s for s in self.snapshots}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, restval="")
            writer.writeheader()
            for row in self.steps:
                out = dict(row)
                snap = snap_by_step.get(row["step"])
                if snap is not None:
                    out["eval_psnr"] = snap.psnr
                    out["eval_perceptual"] = snap.perceptual
                writer.writerow(out)


def params_of(model: torch.nn.Module) -> dict[str, Tensor]:
    return dict(model.named_parameters())


def clone_tree(tree: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v.detach().clone() for k, v in tree.items()}


def load_tree(model: torch.nn.Module, tree: dict[str, Tensor]) -> None:
    params = params_of(model)
    missing = set(params) ^ set(tree)
    if missing:
        raise DataError(f"parameter tree mismatch at {sorted(missing)[:4]}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(tree[name].to(p.dtype))


@contextlib.contextmanager
def swapped_params(model: torch.nn.Module, tree: dict[str, Tensor]):
    """Temporarily run the model under another parameter tree (e.g. EMA)."""
    backup = clone_tree(params_of(model))
    load_tree(model, tree)
    try:
        yield model
    finally:
        load_tree(model, backup)


def encode_quantized(model: Autoencoder, x: Tensor) -> Tensor:
    cfg = model.config
    with torch.no_grad():
        return quantize(model.encode(x), cfg.quantizer_kind, cfg.fsq_levels)


def reconstruct_images(
    model: Autoencoder,
    images: Tensor,
    bundle: ConfigBundle,
    generator: torch.Generator,
    batch_size: int = 16,
) -> Tensor:
    """encode -> quantize -> integrate the probability-flow ODE back to images."""
    sampler = bundle.sampler
    schedule = shifted_schedule(sampler.num_steps, sampler.rho)
    guidance = GuidanceSpec(weight=sampler.guidance_weight, interval=sampler.guidance_interval)
    outputs = []
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        c = encode_quantized(model, x)
        z = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        z = scaled_initial_noise(z, sampler.noise_scale)
        outputs.append(integrate(model.decode, c, z, schedule, guidance))
    return torch.cat(outputs, dim=0)


def evaluate_reconstruction(
    model: Autoencoder,
    images: Tensor,
    bundle: ConfigBundle,
    extractor: PerceptualExtractor,
    generator: torch.Generator,
) -> tuple[float, float]:
    """Mean PSNR and perceptual distance of ODE reconstructions."""
    recon = reconstruct_images(model, images, bundle, generator)
    with torch.no_grad():
        psnr_values = [psnr(images[i], recon[i]) for i in range(images.shape[0])]
        perc = float(perceptual_distance(extractor, images, recon))
    finite = [v for v in psnr_values if math.isfinite(v)]
    return (float(sum(finite) / len(finite)) if finite else math.inf, perc)


def _snapshot_bundle(bundle: ConfigBundle, num_steps: int = 4) -> ConfigBundle:
    # cheap deterministic eval settings for in-training snapshots
    sampler = dataclasses.replace(
        bundle.sampler, num_steps=num_steps, guidance_weight=1.0, noise_scale=1.0
    )
    return validate_config(bundle.model, bundle.train, sampler)


def make_state(
    model: Autoencoder,
    ema: dict[str, Tensor],
    adam: AdamState,
    step: int,
    stage: str,
    bundle: ConfigBundle,
    extra_meta: dict | None = None,
) -> CheckpointState:
    meta = {
        "config_text": config_to_text(bundle),
        "width_factor": model.width_factor,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    meta.update(extra_meta or {})
    return CheckpointState(
        params=clone_tree(params_of(model)),
        ema=clone_tree(ema),
        adam_m=clone_tree(adam.m),
        adam_v=clone_tree(adam.v),
        opt_step=adam.step,
        step=step,
        stage=stage,
        fingerprint=bundle.fingerprint,
        model_fingerprint=bundle.model_fingerprint,
        meta=meta,
    )


def rebuild_from_state(state: CheckpointState, use_ema: bool = False) -> tuple[Autoencoder, ConfigBundle]:
    """Reconstruct the autoencoder (and its config bundle) from a checkpoint."""
    bundle = parse_config_text(state.meta["config_text"])
    dtype = getattr(torch, state.meta.get("dtype", "float32"))
    model = build_autoencoder(
        bundle.model,
        width_factor=int(state.meta.get("width_factor", 1)),
        generator=torch.Generator().manual_seed(0),
        dtype=dtype,
    )
    load_tree(model, state.ema if use_ema else state.params)
    return model, bundle


class _DivergenceGuard:
    def __init__(self):
        self.history: collections.deque[float] = collections.deque(maxlen=DIVERGENCE_WINDOW)

    def check(self, total: float, step: int) -> None:
        if not math.isfinite(total):
            raise DivergenceError(f"non-finite total loss at step {step}")
        if len(self.history) == DIVERGENCE_WINDOW:
            average = sum(self.history) / len(self.history)
            if total > DIVERGENCE_FACTOR * average:
                raise DivergenceError(
                    f"total loss {total:.4g} exceeded {DIVERGENCE_FACTOR}x its "
                    f"{DIVERGENCE_WINDOW}-step moving average {average:.4g} at step {step}"
                )
        self.history.append(total)


def train_stage1a(
    bundle: ConfigBundle,
    dataset: ImageSet,
    *,
    seed: int = 0,
    width_factor: int = 1,
    dtype: torch.dtype = torch.float32,
    max_steps: int | None = None,
    eval_images: Tensor | None = None,
    snapshot_every: int = 200,
    accum_steps: int = 1,
    start_state: CheckpointState | None = None,
) -> tuple[CheckpointState, TrainReport]:
    """Mode-matching pre-training of encoder and decoder, end to end."""
    mcfg, tcfg = bundle.model, bundle.train
    max_steps = max_steps if max_steps is not None else tcfg.max_steps
    generator = torch.Generator().manual_seed(seed)
    model = build_autoencoder(mcfg, width_factor, generator, dtype)
    adam = AdamState.like(params_of(model))
    start_step = 0
    if start_state is not None:
        require_compatible(start_state, bundle.model_fingerprint, stages=("1A",))
        load_tree(model, start_state.params)
        ema = {k: v.clone().to(dtype) for k, v in start_state.ema.items()}
        adam = AdamState(
            m={k: v.clone().to(dtype) for k, v in start_state.adam_m.items()},
            v={k: v.clone().to(dtype) for k, v in start_state.adam_v.items()},
            step=start_state.opt_step,
        )
        start_step = start_state.step
    else:
        ema = clone_tree(params_of(model))
    extractor = PerceptualExtractor(STAGE1A_EXTRACTOR_SEED, channels=mcfg.channels)
    multipliers = dict(model.lr_multipliers)
    frozen_multipliers = {
        name: (0.0 if name.startswith("encoder.") else mult) for name, mult in multipliers.items()
    }
    guard = _DivergenceGuard()
    report = TrainReport()
    params = params_of(model)

    for step in range(start_step, max_steps):
        active = frozen_multipliers if step >= tcfg.encoder_freeze_step else multipliers
        model.zero_grad(set_to_none=True)
        parts = {"flow": 0.0, "perc": 0.0, "commit": 0.0, "ent": 0.0, "total": 0.0}
        for _ in range(accum_steps):
            x, _ = dataset.sample_batch(tcfg.batch_size, generator)
            x = x.to(dtype)
            t, _ = sample_noise_levels(x.shape[0], tcfg.uniform_mix_prob, generator, dtype=dtype)
            z = torch.randn(x.shape, generator=generator, dtype=dtype)
            c_hat = model.encode(x)
            c = quantize(c_hat, mcfg.quantizer_kind, mcfg.fsq_levels)
            c_in = apply_latent_dropout(c, mcfg.latent_dropout_prob, generator)
            x_t = interpolate(x, z, t)
            v = model.decode(x_t, c_in, t)
            l_flow = flow_loss(v, x, z)
            l_perc = perceptual_distance(extractor, x, denoise_one_step(x_t, v, t))
            if mcfg.quantizer_kind == "lfq":
                l_commit = commitment_loss(c_hat)
                l_ent = entropy_loss(c_hat, mcfg.entropy_group_bits)
            else:
                l_commit = torch.zeros((), dtype=dtype)
                l_ent = torch.zeros((), dtype=dtype)
            losses = assemble_stage1a_loss(
                l_flow,
                l_perc,
                l_commit,
                l_ent,
                lambda_perc=tcfg.lambda_perc,
                lambda_commit=tcfg.lambda_commit,
                lambda_ent=tcfg.lambda_ent,
            )
            (losses.total / accum_steps).backward()
            for key in parts:
                parts[key] += float(getattr(losses, key).detach()) / accum_steps
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        adam_step(
            params,
            grads,
            adam,
            lr=tcfg.learning_rate,
            beta1=tcfg.adam_beta1,
            beta2=tcfg.adam_beta2,
            lr_multipliers=active,
        )
        renormalize_weights(model)
        ema_update(ema, params, tcfg.ema_rate)
        guard.check(parts["total"], step)
        report.steps.append({"step": step, **parts})
        if eval_images is not None and (step + 1) % snapshot_every == 0:
            snap_gen = torch.Generator().manual_seed(seed + 2)
            with swapped_params(model, ema):
                p, d = evaluate_reconstruction(
                    model, eval_images.to(dtype), _snapshot_bundle(bundle), extractor, snap_gen
                )
            report.snapshots.append(EvalSnapshot(step=step, psnr=p, perceptual=d))
    return make_state(model, ema, adam, max_steps, "1A", bundle), report


def train_stage1b(
    bundle: ConfigBundle,
    init_state: CheckpointState,
    dataset: ImageSet,
    *,
    seed: int = 0,
    dtype: torch.dtype | None = None,
    max_steps: int | None = None,
    eval_images: Tensor | None = None,
    snapshot_every: int = 50,
    accum_steps: int = 1,
    chain_loss: bool = True,
) -> tuple[CheckpointState, TrainReport]:
    """Mode-seeking post-training: frozen encoder, decoder fine-tuned through the chain.

    ``chain_loss=False`` swaps the n-step sample loss for the same perceptual
    network applied to the one-jump denoised prediction (the ablation
    baseline that backpropagation-through-sampling is compared against).
    """
    mcfg, tcfg = bundle.model, bundle.train
    require_compatible(init_state, bundle.model_fingerprint, stages=("1A", "1B"))
    max_steps = max_steps if max_steps is not None else tcfg.max_steps
    dtype = dtype or getattr(torch, init_state.meta.get("dtype", "float32"))
    generator = torch.Generator().manual_seed(seed)
    model = build_autoencoder(
        mcfg, int(init_state.meta.get("width_factor", 1)), generator, dtype
    )
    load_tree(model, init_state.params)
    model.encoder.requires_grad_(False)
    resume = init_state.stage == "1B"
    if resume:
        ema = {k: v.clone().to(dtype) for k, v in init_state.ema.items()}
        adam = AdamState(
            m={k: v.clone().to(dtype) for k, v in init_state.adam_m.items()},
            v={k: v.clone().to(dtype) for k, v in init_state.adam_v.items()},
            step=init_state.opt_step,
        )
        start_step = init_state.step
    else:
        ema = clone_tree(params_of(model))
        adam = AdamState.like(params_of(model))
        start_step = 0

    # halved relative to the Stage 1A settings
    lr = tcfg.learning_rate / 2
    batch_size = max(1, tcfg.batch_size // 2)

    sample_extractor = PerceptualExtractor(STAGE1B_EXTRACTOR_SEED, channels=mcfg.channels)
    eval_extractor = PerceptualExtractor(STAGE1A_EXTRACTOR_SEED, channels=mcfg.channels)
    params = params_of(model)
    guard = _DivergenceGuard()
    report = TrainReport()
    best_heldout = math.inf
    stall = 0

    for step in range(start_step, start_step + max_steps):
        model.zero_grad(set_to_none=True)
        parts = {"flow": 0.0, "sample": 0.0, "total": 0.0}
        for _ in range(accum_steps):
            x, _ = dataset.sample_batch(batch_size, generator)
            x = x.to(dtype)
            c = encode_quantized(model, x)
            t, _ = sample_noise_levels(x.shape[0], tcfg.uniform_mix_prob, generator, dtype=dtype)
            z = torch.randn(x.shape, generator=generator, dtype=dtype)
            c_in = apply_latent_dropout(c, mcfg.latent_dropout_prob, generator)
            x_t = interpolate(x, z, t)
            v = model.decode(x_t, c_in, t)
            l_flow = flow_loss(v, x, z)
            if chain_loss:
                z_chain = torch.randn(x.shape, generator=generator, dtype=dtype)
                schedule = random_schedule(tcfg.stage1b_num_steps, generator)
                x_hat = integrate(model.decode, c, z_chain, schedule, differentiable=True)
                l_sample = perceptual_distance(sample_extractor, x, x_hat)
            else:
                l_sample = perceptual_distance(sample_extractor, x, denoise_one_step(x_t, v, t))
            total = l_flow + tcfg.lambda_sample * l_sample
            (total / accum_steps).backward()
            parts["flow"] += float(l_flow.detach()) / accum_steps
            parts["sample"] += float(l_sample.detach()) / accum_steps
            parts["total"] += float(total.detach()) / accum_steps
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        adam_step(
            params,
            grads,
            adam,
            lr=lr,
            beta1=tcfg.adam_beta1,
            beta2=tcfg.adam_beta2,
            lr_multipliers=model.lr_multipliers,
        )
        renormalize_weights(model.decoder)
        ema_update(ema, params, tcfg.ema_rate)
        guard.check(parts["total"], step)
        report.steps.append({"step": step, **parts})
        if eval_images is not None and (step + 1 - start_step) % snapshot_every == 0:
            snap_gen = torch.Generator().manual_seed(seed + 2)
            with swapped_params(model, ema):
                p, d = evaluate_reconstruction(
                    model, eval_images.to(dtype), _snapshot_bundle(bundle), eval_extractor, snap_gen
                )
            report.snapshots.append(EvalSnapshot(step=step, psnr=p, perceptual=d))
            if d < best_heldout - 1e-12:
                best_heldout = d
                stall = 0
            else:
                stall += 1
                if stall >= EARLY_STOP_PATIENCE:
                    report.early_stopped = True
                    break
    return make_state(model, ema, adam, report.steps[-1]["step"] + 1 if report.steps else start_step, "1B", bundle), report
