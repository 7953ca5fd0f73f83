"""Calibration for the acceptance thresholds (criteria 6-8). Not shipped."""
import time

import numpy as np
import torch

from flowcodec.config import ModelConfig, SamplerConfig, TrainConfig, validate_config
from flowcodec.data import synthetic_dataset
from flowcodec.metrics import (
    STAGE1A_EXTRACTOR_SEED,
    PerceptualExtractor,
    FeatureStats,
    frechet_distance,
    pooled_features,
)
from flowcodec.training import (
    evaluate_reconstruction,
    rebuild_from_state,
    reconstruct_images,
    train_stage1a,
    train_stage1b,
)

MODEL = ModelConfig(
    image_resolution=16,
    patch_size=4,
    width=64,
    encoder_depth=1,
    decoder_depth=2,
    latent_seq_len=8,
    token_bits=8,
    entropy_group_bits=4,
)


def bundle(lr=1e-3, mix=0.1, steps=1000, batch=8, n=8):
    return validate_config(
        MODEL,
        TrainConfig(
            learning_rate=lr,
            batch_size=batch,
            max_steps=steps,
            encoder_freeze_step=10**6,
            uniform_mix_prob=mix,
            ema_rate=0.99,
        ),
        SamplerConfig(num_steps=n, rho=4.0, guidance_weight=1.0),
    )


def smoke(lr, seeds=(0, 1, 2)):
    data = synthetic_dataset(100, 8, 16)
    for seed in seeds:
        t0 = time.time()
        state, report = train_stage1a(bundle(lr=lr), data, seed=seed)
        flows = report.loss_series("flow")
        first = float(np.mean(flows[:100]))
        last = float(np.mean(flows[-100:]))
        print(
            f"[smoke lr={lr} seed={seed}] first100={first:.4f} last100={last:.4f} "
            f"ratio={last / first:.3f} time={time.time() - t0:.1f}s"
        )


def toy_fid_of(model, images, b, extractor, seed):
    gen = torch.Generator().manual_seed(seed)
    recon = reconstruct_images(model, images, b, gen)
    real = FeatureStats.from_features(pooled_features(extractor, images))
    fake = FeatureStats.from_features(pooled_features(extractor, recon))
    return frechet_distance(real, fake)


def direction(seed):
    train_set = synthetic_dataset(200, 64, 16)
    heldout = synthetic_dataset(300, 16, 16).images
    extractor = PerceptualExtractor(STAGE1A_EXTRACTOR_SEED)
    b = bundle(lr=1e-3, steps=1000)

    t0 = time.time()
    state_1a, _ = train_stage1a(b, train_set, seed=seed)
    t_1a = time.time() - t0

    t0 = time.time()
    state_1b, _ = train_stage1b(b, state_1a, train_set, seed=seed + 50, max_steps=150)
    t_1b = time.time() - t0

    model_1a, _ = rebuild_from_state(state_1a, use_ema=True)
    model_1b, _ = rebuild_from_state(state_1b, use_ema=True)
    g = torch.Generator().manual_seed(999)
    psnr_a, perc_a = evaluate_reconstruction(model_1a, heldout, b, extractor, g)
    g = torch.Generator().manual_seed(999)
    psnr_b, perc_b = evaluate_reconstruction(model_1b, heldout, b, extractor, g)
    print(
        f"[direction seed={seed}] 1A psnr={psnr_a:.3f} perc={perc_a:.5f} | "
        f"1B psnr={psnr_b:.3f} perc={perc_b:.5f} | dPSNR={psnr_b - psnr_a:+.3f} "
        f"dPERC={perc_b - perc_a:+.5f} (times {t_1a:.0f}s/{t_1b:.0f}s)"
    )

    # rho ablation on the 1A model, at two sampling budgets
    import dataclasses

    for n in (8, 25):
        b_n = validate_config(b.model, b.train, dataclasses.replace(b.sampler, num_steps=n))
        b_rho1 = validate_config(
            b.model, b.train, dataclasses.replace(b.sampler, num_steps=n, rho=1.0)
        )
        fid_default = toy_fid_of(model_1a, train_set.images, b_n, extractor, 777)
        fid_rho1 = toy_fid_of(model_1a, train_set.images, b_rho1, extractor, 777)
        psnr_d, _ = evaluate_reconstruction(
            model_1a, train_set.images[:16], b_n, extractor, torch.Generator().manual_seed(5)
        )
        psnr_r, _ = evaluate_reconstruction(
            model_1a, train_set.images[:16], b_rho1, extractor, torch.Generator().manual_seed(5)
        )
        print(
            f"[rho seed={seed} n={n}] toyFID default={fid_default:.5f} rho1={fid_rho1:.5f} "
            f"rho_ok={fid_rho1 >= fid_default} | trainPSNR default={psnr_d:.3f} rho1={psnr_r:.3f}"
        )

    # uniform-mix ablation: retrain with mix=0
    b_mix0 = bundle(lr=1e-3, steps=1000, mix=0.0)
    state_mix0, _ = train_stage1a(b_mix0, train_set, seed=seed)
    model_mix0, _ = rebuild_from_state(state_mix0, use_ema=True)
    fid_default = toy_fid_of(model_1a, train_set.images, b, extractor, 777)
    fid_mix0 = toy_fid_of(model_mix0, train_set.images, b, extractor, 777)
    print(
        f"[mix seed={seed}] toyFID default={fid_default:.5f} mix0={fid_mix0:.5f} "
        f"mix_ok={fid_mix0 >= fid_default}"
    )


if __name__ == "__main__":
    smoke(1e-3)
    for s in (0, 1, 2):
        direction(s)
