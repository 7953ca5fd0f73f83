"""Acceptance suite: one test (group) per criterion, at its stated tolerance.

Heavy training fixtures are session-scoped and shared across criteria; the
terminal summary (see conftest) prints one pass/fail line per criterion.
Run with `pytest tests/test_acceptance.py -v`.
"""

from __future__ import annotations

import dataclasses
import math
import os
import statistics

import numpy as np
import pytest
import torch

from flowcodec.checkpoint import load_checkpoint, save_checkpoint
from flowcodec.cli import run as cli_run
from flowcodec.config import ModelConfig, SamplerConfig, TrainConfig, compute_bpp, validate_config
from flowcodec.data import synthetic_dataset, write_grid
from flowcodec.flow import flow_loss, interpolate
from flowcodec.maskgit import rebuild_maskgit, sample_maskgit, tokenize_dataset, train_maskgit
from flowcodec.metrics import (
    STAGE1A_EXTRACTOR_SEED,
    FeatureStats,
    PerceptualExtractor,
    frechet_distance,
    perceptual_distance,
    pooled_features,
    precision_recall,
    psnr,
    ssim,
)
from flowcodec.model import build_autoencoder
from flowcodec.quantizer import (
    binarize,
    commitment_loss,
    entropy_loss,
    pack_tokens,
    unpack_tokens,
)
from flowcodec.sampling import (
    GuidanceSpec,
    guided_velocity,
    integrate,
    random_schedule,
    shifted_schedule,
    sigma_to_flow_time,
)
from flowcodec.training import (
    evaluate_reconstruction,
    rebuild_from_state,
    reconstruct_images,
    train_stage1a,
    train_stage1b,
)

from conftest import finite_difference, relative_error

SEEDS = (0, 1, 2)

SMOKE_MODEL = ModelConfig(
    image_resolution=16,
    patch_size=4,
    width=64,
    encoder_depth=1,
    decoder_depth=2,
    latent_seq_len=8,
    token_bits=8,
    entropy_group_bits=4,
)
SMOKE_TRAIN = TrainConfig(
    learning_rate=1e-3,
    batch_size=8,
    max_steps=1000,
    encoder_freeze_step=10**6,
    uniform_mix_prob=0.1,
    ema_rate=0.99,  # half-life ~69 steps, matched to the 1000-step budget
)
SMOKE_SAMPLER = SamplerConfig(num_steps=8, rho=4.0, guidance_weight=1.0)


def smoke_bundle(**train_overrides):
    train = dataclasses.replace(SMOKE_TRAIN, **train_overrides)
    return validate_config(SMOKE_MODEL, train, SMOKE_SAMPLER)


# ---------------------------------------------------------------- criterion 1


def test_criterion_01_bpp_exactness() -> None:
    rows = [
        (0.070, 256, 2**18),
        (0.219, 1024, 2**14),
        (0.006, 32, 2**12),
        (0.012, 64, 2**12),
        (0.023, 128, 2**12),
        (0.055, 256, 2**14),
    ]
    for published, tokens, vocab in rows:
        value = compute_bpp(tokens, vocab, 256)
        assert abs(value - published) <= 5e-4, (published, value)


# ---------------------------------------------------------------- criterion 2


def test_criterion_02_quantizer_suite() -> None:
    gen = torch.Generator().manual_seed(0)
    c = torch.randn(4, 6, 8, generator=gen, dtype=torch.float64)

    once = binarize(c)
    assert torch.equal(binarize(once), once)

    probe = c.clone().requires_grad_(True)
    binarize(probe).sum().backward()
    assert torch.equal(probe.grad, torch.ones_like(probe))

    for group_bits in range(1, 11):
        ids = torch.arange(2**group_bits).reshape(-1, 1)
        codes = unpack_tokens(ids, group_bits, group_bits)
        assert torch.equal(pack_tokens(codes, group_bits), ids)

    all_codes = torch.tensor(
        [[[-1.0, -1.0]], [[1.0, -1.0]], [[-1.0, 1.0]], [[1.0, 1.0]]], dtype=torch.float64
    )
    collapsed = all_codes[:1].repeat(4, 1, 1)
    for tau in (5.0, 20.0):
        assert entropy_loss(tau * all_codes, 2) < entropy_loss(tau * collapsed, 2)

    assert abs(entropy_loss(torch.zeros(5, 4, 6, dtype=torch.float64), 2).item()) <= 1e-9


# ---------------------------------------------------------------- criterion 3


def _fd_over_elements(f, param: torch.Tensor, indices, eps: float = 1e-6) -> list[float]:
    grads = []
    flat = param.data.reshape(-1)
    for index in indices:
        original = flat[index].item()
        flat[index] = original + eps
        hi = float(f())
        flat[index] = original - eps
        lo = float(f())
        flat[index] = original
        grads.append((hi - lo) / (2 * eps))
    return grads


def test_criterion_03_gradient_oracles() -> None:
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    z = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)

    # flow loss w.r.t. the prediction
    v = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    fd = finite_difference(lambda u: flow_loss(u, x, z), v.clone())
    v.requires_grad_(True)
    flow_loss(v, x, z).backward()
    assert relative_error(v.grad, fd) <= 1e-4

    # perceptual loss w.r.t. the second image
    extractor = PerceptualExtractor(STAGE1A_EXTRACTOR_SEED)
    y = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    fd = finite_difference(lambda u: perceptual_distance(extractor, x[:1], u), y.clone())
    y.requires_grad_(True)
    perceptual_distance(extractor, x[:1], y).backward()
    assert relative_error(y.grad, fd) <= 1e-4

    # commitment and entropy losses w.r.t. the latent
    c = torch.randn(2, 2, 4, generator=gen, dtype=torch.float64)
    fd = finite_difference(commitment_loss, c.clone())
    probe = c.clone().requires_grad_(True)
    commitment_loss(probe).backward()
    assert relative_error(probe.grad, fd) <= 1e-4
    fd = finite_difference(lambda u: entropy_loss(u, 2), c.clone())
    probe = c.clone().requires_grad_(True)
    entropy_loss(probe, 2).backward()
    assert relative_error(probe.grad, fd) <= 1e-4

    # sampled-chain loss w.r.t. decoder weights, through a 3-step chain
    config = ModelConfig(
        image_resolution=8,
        patch_size=4,
        width=32,
        encoder_depth=1,
        decoder_depth=1,
        latent_seq_len=2,
        token_bits=4,
        entropy_group_bits=2,
    )
    model = build_autoencoder(config, 1, torch.Generator().manual_seed(2), torch.float64)
    x_small = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    with torch.no_grad():
        c_code = binarize(model.encode(x_small))
    z_chain = torch.randn(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    schedule = random_schedule(3, torch.Generator().manual_seed(3))

    def chain_loss() -> torch.Tensor:
        x_hat = integrate(model.decode, c_code, z_chain, schedule, differentiable=True)
        return perceptual_distance(extractor, x_small, x_hat)

    model.zero_grad(set_to_none=True)
    chain_loss().backward()
    for name in ("decoder.head.weight", "decoder.blocks.0.img_mlp.fc1.weight"):
        param = dict(model.named_parameters())[name]
        indices = [0, 1, param.numel() // 2, param.numel() - 1]
        with torch.no_grad():
            fd_vals = _fd_over_elements(chain_loss, param, indices)
        auto = param.grad.reshape(-1)[indices].tolist()
        scale = max(max(abs(a) for a in auto), max(abs(b) for b in fd_vals), 1e-12)
        for a, b in zip(auto, fd_vals):
            assert abs(a - b) / scale <= 1e-4, (name, a, b)


# ---------------------------------------------------------------- criterion 4


def test_criterion_04_sampler_exactness() -> None:
    gen = torch.Generator().manual_seed(4)
    target = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64)
    z = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64)

    def oracle(x_t, c, t):
        return target - z

    for rho in (1.0, 2.0, 4.0):
        for n in (1, 8, 25):
            out = integrate(oracle, None, z, shifted_schedule(n, rho))
            assert float((out - target).abs().max()) <= 1e-6, (rho, n)

    for n in (1, 8, 25):
        linear = tuple((n - i + 1) / n for i in range(1, n + 1)) + (0.0,)
        assert shifted_schedule(n, 1.0).times == linear

    for n in (8, 25):
        for lo, hi in ((1.0, 2.0), (2.0, 4.0)):
            a = shifted_schedule(n, lo).times
            b = shifted_schedule(n, hi).times
            assert all(tb <= ta for ta, tb in zip(a, b))


# ---------------------------------------------------------------- criterion 5


def test_criterion_05_guidance_identities() -> None:
    gen = torch.Generator().manual_seed(5)
    v_cond = torch.randn(3, 2, 4, 4, generator=gen, dtype=torch.float64)
    v_uncond = torch.randn(3, 2, 4, 4, generator=gen, dtype=torch.float64)
    spec = GuidanceSpec(weight=1.0, interval=(0.0, 1.0))
    for t in (0.0, 0.2, 0.5, 1.0):
        diff = (guided_velocity(v_cond, v_uncond, t, spec) - v_cond).abs().max()
        assert float(diff) <= 1e-12
    assert abs(sigma_to_flow_time(0.17) - 0.145) <= 1e-3
    assert abs(sigma_to_flow_time(1.02) - 0.505) <= 1e-3


# ------------------------------------------------------- criteria 6-8 fixtures


@pytest.fixture(scope="session")
def smoke_runs():
    """Three seeded Stage 1A runs of the frozen smoke configuration."""
    dataset = synthetic_dataset(100, 8, 16)
    runs = []
    for seed in SEEDS:
        state, report = train_stage1a(smoke_bundle(), dataset, seed=seed)
        runs.append((state, report))
    return dataset, runs


@pytest.fixture(scope="session")
def direction_runs():
    """Stage 1A + 1B + mix-ablation runs on a 64-image set, three seeds."""
    train_set = synthetic_dataset(200, 64, 16)
    heldout = synthetic_dataset(300, 16, 16).images
    extractor = PerceptualExtractor(STAGE1A_EXTRACTOR_SEED)
    bundle = smoke_bundle()
    mix0_bundle = smoke_bundle(uniform_mix_prob=0.0)
    runs = []
    for seed in SEEDS:
        state_1a, _ = train_stage1a(bundle, train_set, seed=seed)
        state_1b, _ = train_stage1b(bundle, state_1a, train_set, seed=seed + 50, max_steps=150)
        state_mix0, _ = train_stage1a(mix0_bundle, train_set, seed=seed)
        runs.append({"1a": state_1a, "1b": state_1b, "mix0": state_mix0, "seed": seed})
    return {
        "train_set": train_set,
        "heldout": heldout,
        "extractor": extractor,
        "bundle": bundle,
        "runs": runs,
    }


def _toy_fid(model, images, bundle, extractor, seed=777) -> float:
    generator = torch.Generator().manual_seed(seed)
    recon = reconstruct_images(model, images, bundle, generator)
    real = FeatureStats.from_features(pooled_features(extractor, images))
    fake = FeatureStats.from_features(pooled_features(extractor, recon))
    return frechet_distance(real, fake)


# ---------------------------------------------------------------- criterion 6


def test_criterion_06_stage1a_smoke(smoke_runs) -> None:
    _, runs = smoke_runs
    for seed, (_, report) in zip(SEEDS, runs):
        flows = report.loss_series("flow")
        first = statistics.fmean(flows[:100])
        last = statistics.fmean(flows[-100:])
        assert last <= 0.20 * first, (seed, first, last, last / first)


# ---------------------------------------------------------------- criterion 7


def test_criterion_07_stage1b_direction(direction_runs) -> None:
    heldout = direction_runs["heldout"]
    extractor = direction_runs["extractor"]
    bundle = direction_runs["bundle"]
    train_set = direction_runs["train_set"]
    psnr_deltas, perc_deltas = [], []
    for run in direction_runs["runs"]:
        model_1a, _ = rebuild_from_state(run["1a"], use_ema=True)
        model_1b, _ = rebuild_from_state(run["1b"], use_ema=True)
        gen = torch.Generator().manual_seed(999)
        psnr_a, perc_a = evaluate_reconstruction(model_1a, heldout, bundle, extractor, gen)
        gen = torch.Generator().manual_seed(999)
        psnr_b, perc_b = evaluate_reconstruction(model_1b, heldout, bundle, extractor, gen)
        psnr_deltas.append(psnr_b - psnr_a)
        perc_deltas.append(perc_b - perc_a)
        # frozen-encoder corollary: identical token ids before and after
        tokens_a = tokenize_dataset(model_1a, train_set)
        tokens_b = tokenize_dataset(model_1b, train_set)
        assert torch.equal(tokens_a.ids, tokens_b.ids)
    assert statistics.median(psnr_deltas) >= 0.0, psnr_deltas
    assert statistics.median(perc_deltas) <= 0.0, perc_deltas


# ---------------------------------------------------------------- criterion 8


def test_criterion_08_ablation_directions(direction_runs) -> None:
    train_set = direction_runs["train_set"]
    extractor = direction_runs["extractor"]
    bundle = direction_runs["bundle"]
    rho1_bundle = validate_config(
        bundle.model, bundle.train, dataclasses.replace(bundle.sampler, rho=1.0)
    )
    rho_wins = 0
    mix_wins = 0
    for run in direction_runs["runs"]:
        model, _ = rebuild_from_state(run["1a"], use_ema=True)
        fid_default = _toy_fid(model, train_set.images, bundle, extractor)
        fid_rho1 = _toy_fid(model, train_set.images, rho1_bundle, extractor)
        if fid_rho1 >= fid_default:
            rho_wins += 1
        model_mix0, _ = rebuild_from_state(run["mix0"], use_ema=True)
        fid_mix0 = _toy_fid(model_mix0, train_set.images, bundle, extractor)
        if fid_mix0 >= fid_default:
            mix_wins += 1
    assert rho_wins >= 2, f"shifted sampler beaten in {3 - rho_wins}/3 seeds"
    assert mix_wins >= 2, f"uniform tail mix beaten in {3 - mix_wins}/3 seeds"


# ---------------------------------------------------------------- criterion 9


def test_criterion_09_stage2_end_to_end(smoke_runs) -> None:
    dataset, runs = smoke_runs
    state, _ = runs[0]
    model, bundle = rebuild_from_state(state, use_ema=True)
    tokens = tokenize_dataset(model, dataset)
    stage2_state, report = train_maskgit(
        tokens, bundle, seed=0, steps=200, batch_size=8, learning_rate=3e-3, width=64, depth=2
    )
    uniform = math.log(2**tokens.group_bits)
    tail = [row["masked_ce"] for row in report.steps[-20:]]
    assert statistics.fmean(tail) < uniform

    generator_model = rebuild_maskgit(stage2_state)
    ids = sample_maskgit(
        generator_model, num_samples=4, steps=8, generator=torch.Generator().manual_seed(1)
    )
    assert int(ids.max()) < tokens.vocab_size  # no MASK survives
    codes = unpack_tokens(ids, bundle.model.entropy_group_bits, bundle.model.token_bits)
    z = torch.randn(
        4,
        bundle.model.channels,
        bundle.model.image_resolution,
        bundle.model.image_resolution,
        generator=torch.Generator().manual_seed(2),
    )
    images = integrate(
        model.decode, codes, z, shifted_schedule(bundle.sampler.num_steps, bundle.sampler.rho)
    )
    assert images.shape == (4, 3, 16, 16)
    assert torch.isfinite(images).all()


# --------------------------------------------------------------- criterion 10


def test_criterion_10_metrics_oracles() -> None:
    rng = np.random.default_rng(6)
    stats = FeatureStats.from_features(rng.normal(size=(40, 5)))
    assert frechet_distance(stats, stats) <= 1e-8
    mu = np.array([0.5, -1.5, 2.0])
    a = FeatureStats(mean=np.zeros(3), cov=np.eye(3), count=10)
    b = FeatureStats(mean=mu, cov=np.eye(3), count=10)
    assert abs(frechet_distance(a, b) - float(mu @ mu)) <= 1e-8

    x = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(7)) * 2 - 1
    assert psnr(x, x) == math.inf
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)
    assert psnr(torch.full((1, 16, 16), -1.0), torch.full((1, 16, 16), 1.0)) == pytest.approx(
        0.0, abs=1e-9
    )

    real = rng.normal(size=(20, 4))
    fake = rng.normal(loc=0.4, size=(20, 4))
    ours = precision_recall(real, fake, k=3)

    def oracle(points, manifold, k=3):
        radii = []
        for i in range(len(manifold)):
            dists = sorted(
                float(np.linalg.norm(manifold[i] - manifold[j]))
                for j in range(len(manifold))
                if j != i
            )
            radii.append(dists[k - 1])
        hits = sum(
            1
            for p in points
            if any(float(np.linalg.norm(p - manifold[i])) <= radii[i] for i in range(len(manifold)))
        )
        return hits / len(points)

    assert ours[0] == pytest.approx(oracle(fake, real), abs=1e-12)
    assert ours[1] == pytest.approx(oracle(real, fake), abs=1e-12)


# --------------------------------------------------------------- criterion 11


TINY_CLI = [
    "--set", "image_resolution=16",
    "--set", "width=32",
    "--set", "encoder_depth=1",
    "--set", "decoder_depth=2",
    "--set", "latent_seq_len=4",
    "--set", "token_bits=4",
    "--set", "entropy_group_bits=2",
    "--set", "batch_size=4",
    "--set", "learning_rate=0.001",
    "--set", "num_steps=2",
    "--set", "guidance_weight=1.0",
]


def _file_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def test_criterion_11_checkpoint_and_cli_determinism(tmp_path, smoke_runs) -> None:
    _, runs = smoke_runs
    state, _ = runs[0]
    path = tmp_path / "roundtrip.ckpt"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    for tree in ("params", "ema", "adam_m", "adam_v"):
        ours, theirs = getattr(state, tree), getattr(loaded, tree)
        assert set(ours) == set(theirs)
        for name in ours:
            assert torch.equal(ours[name], theirs[name]), (tree, name)
    assert (loaded.step, loaded.stage, loaded.fingerprint) == (
        state.step,
        state.stage,
        state.fingerprint,
    )

    def duplicate(label: str, argv_builder) -> None:
        outputs = []
        for attempt in ("x", "y"):
            out = str(tmp_path / f"{label}-{attempt}")
            argv, artifacts = argv_builder(out)
            assert cli_run(argv) == 0, label
            outputs.append([_file_bytes(os.path.join(out, a)) for a in artifacts])
        for a, b in zip(outputs[0], outputs[1]):
            assert a == b, label

    duplicate(
        "train1a",
        lambda out: (
            ["train-stage1a", "--train-steps", "3", "--images", "6", "--out", out, *TINY_CLI],
            ["report.csv", "stage1a.ckpt"],
        ),
    )
    ck1a = str(tmp_path / "train1a-x" / "stage1a.ckpt")
    duplicate(
        "train1b",
        lambda out: (
            ["train-stage1b", "--init", ck1a, "--train-steps", "2", "--images", "6", "--out", out],
            ["report.csv", "stage1b.ckpt"],
        ),
    )
    duplicate(
        "train2",
        lambda out: (
            ["train-stage2", "--init", ck1a, "--train-steps", "5", "--images", "6", "--out", out],
            ["report.csv", "stage2.ckpt", "tokens.bin"],
        ),
    )
    ck2 = str(tmp_path / "train2-x" / "stage2.ckpt")
    duplicate(
        "reconstruct",
        lambda out: (
            ["reconstruct", "--init", ck1a, "--images", "4", "--out", out],
            ["metrics.csv"],
        ),
    )
    duplicate(
        "sample",
        lambda out: (
            [
                "sample", "--init", ck2, "--tokenizer", ck1a, "--num-samples", "2",
                "--sample-steps", "3", "--out", out,
            ],
            ["tokens.bin"],
        ),
    )
    folder = tmp_path / "eval-images"
    folder.mkdir()
    images = synthetic_dataset(0, 4, 16).images
    for i in range(4):
        write_grid(images[i : i + 1], folder / f"{i}.png", columns=1)
    duplicate(
        "eval",
        lambda out: (
            [
                "eval", "--originals", str(folder), "--reconstructions", str(folder),
                "--resolution", "16", "--out", out,
            ],
            ["metrics.csv"],
        ),
    )
    duplicate(
        "ablate",
        lambda out: (
            ["ablate", "--train-steps", "3", "--images", "6", "--out", out, *TINY_CLI],
            ["ablation.csv"],
        ),
    )
