"""Command-line entry points.

Subcommands: train-stage1a, train-stage1b, train-stage2, reconstruct, sample,
eval, ablate.  Every run owns its output directory exclusively through a lock
file; with a fixed seed every subcommand writes identical reports across
reruns.  The default output root comes from $FLOWCODEC_OUT.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from . import maskgit as maskgit_lib
from .checkpoint import load_checkpoint, require_compatible, save_checkpoint
from .config import (
    ConfigBundle,
    apply_overrides,
    config_to_text,
    load_config_file,
    parse_config_text,
    validate_config,
)
from .data import load_folder, synthetic_dataset, write_grid
from .errors import ConfigError, FlowCodecError, StageDependencyError
from .metrics import STAGE1A_EXTRACTOR_SEED, PerceptualExtractor, reconstruction_report
from .quantizer import save_tokens, unpack_tokens
from .sampling import GuidanceSpec, integrate, shifted_schedule
from .training import (
    TrainReport,
    rebuild_from_state,
    reconstruct_images,
    train_stage1a,
    train_stage1b,
)

ENV_OUT_ROOT = "FLOWCODEC_OUT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcodec",
        description="Desk-scale diffusion-autoencoder image tokenizer toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, init_help: str | None = None):
        p.add_argument("--config", help="config file (flat key=value lines)")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable); keys as in the config file",
        )
        p.add_argument("--seed", type=int, default=0, help="global random seed")
        p.add_argument("--out", help=f"output directory (default: ${ENV_OUT_ROOT} or ./runs)")
        if init_help:
            p.add_argument("--init", help=init_help)

    def sampler_flags(p: argparse.ArgumentParser):
        p.add_argument("--steps", type=int, help="ODE sampling steps (sampler.num_steps)")
        p.add_argument("--rho", type=float, help="shifted-schedule exponent (sampler.rho)")
        p.add_argument("--guidance", type=float, help="guidance weight (sampler.guidance_weight)")
        p.add_argument(
            "--guidance-interval",
            metavar="LO,HI",
            help="flow-time guidance interval (sampler.guidance_interval)",
        )
        p.add_argument("--noise-scale", type=float, help="initial-noise norm multiplier")

    def data_flags(p: argparse.ArgumentParser):
        p.add_argument("--data", help="folder of images (default: synthetic shapes)")
        p.add_argument("--images", type=int, default=64, help="synthetic image count")

    p = sub.add_parser("train-stage1a", help="mode-matching pre-training")
    common(p, init_help="resume from a stage-1A checkpoint")
    data_flags(p)
    p.add_argument("--train-steps", type=int, help="override train.max_steps")

    p = sub.add_parser("train-stage1b", help="mode-seeking post-training through the sampler")
    common(p, init_help="stage-1A (or 1B, to resume) checkpoint to start from")
    data_flags(p)
    p.add_argument("--train-steps", type=int, help="override train.max_steps")
    p.add_argument(
        "--one-step-loss",
        action="store_true",
        help="ablation: perceptual loss on the 1-step prediction instead of the sampled chain",
    )

    p = sub.add_parser("train-stage2", help="train the masked-token generator")
    common(p, init_help="tokenizer checkpoint used to produce token ids")
    data_flags(p)
    p.add_argument("--train-steps", type=int, default=500, help="generator training steps")
    p.add_argument("--stage2-width", type=int, default=128, help="generator hidden width")
    p.add_argument("--stage2-depth", type=int, default=4, help="generator block count")

    p = sub.add_parser("reconstruct", help="encode + decode a folder and report metrics")
    common(p, init_help="tokenizer checkpoint")
    data_flags(p)
    sampler_flags(p)

    p = sub.add_parser("sample", help="stage-2 sampling decoded to an image grid")
    common(p, init_help="stage-2 generator checkpoint")
    sampler_flags(p)
    p.add_argument("--tokenizer", required=False, help="tokenizer checkpoint used for decoding")
    p.add_argument("--num-samples", type=int, default=8, help="number of samples")
    p.add_argument("--class-id", type=int, help="class to condition on (default: unconditional)")
    p.add_argument("--temperature", type=float, default=1.0, help="stage-2 softmax temperature")
    p.add_argument("--sample-steps", type=int, default=64, help="masked-token unmasking steps")

    p = sub.add_parser("eval", help="metrics for existing originals/reconstructions")
    common(p)
    p.add_argument("--originals", required=True, help="folder of original images")
    p.add_argument("--reconstructions", required=True, help="folder of reconstructed images")
    p.add_argument("--resolution", type=int, default=32, help="evaluation resolution")

    p = sub.add_parser("ablate", help="scripted design-choice sweeps as a comparison table")
    common(p)
    data_flags(p)
    p.add_argument("--train-steps", type=int, default=300, help="training steps per variant")
    p.add_argument(
        "--posttrain-steps",
        type=int,
        default=0,
        help="when > 0, also compare post-training with the sampled-chain loss vs the "
        "one-step perceptual loss for this many steps",
    )

    return parser


@contextlib.contextmanager
def output_lock(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out_dir} is locked by another invocation ({lock_path})"
        ) from None
    try:
        yield
    finally:
        os.close(fd)
        os.unlink(lock_path)


def _out_dir(args) -> str:
    if args.out:
        return args.out
    root = os.environ.get(ENV_OUT_ROOT, "runs")
    return os.path.join(root, args.command)


def _bundle_from_args(args, base: ConfigBundle | None = None) -> ConfigBundle:
    bundle = base or validate_config()
    if args.config:
        bundle = load_config_file(args.config, base=bundle)
    if args.overrides:
        bundle = apply_overrides(bundle, args.overrides)
    sampler_updates = {}
    if getattr(args, "steps", None) is not None:
        sampler_updates["num_steps"] = args.steps
    if getattr(args, "rho", None) is not None:
        sampler_updates["rho"] = args.rho
    if getattr(args, "guidance", None) is not None:
        sampler_updates["guidance_weight"] = args.guidance
    if getattr(args, "guidance_interval", None) is not None:
        lo, hi = (float(v) for v in args.guidance_interval.split(","))
        sampler_updates["guidance_interval"] = (lo, hi)
    if getattr(args, "noise_scale", None) is not None:
        sampler_updates["noise_scale"] = args.noise_scale
    if sampler_updates:
        bundle = validate_config(
            bundle.model, bundle.train, dataclasses.replace(bundle.sampler, **sampler_updates)
        )
    return bundle


def _dataset(args, bundle: ConfigBundle):
    if getattr(args, "data", None):
        return load_folder(args.data, bundle.model.image_resolution, bundle.model.channels)
    return synthetic_dataset(args.seed, args.images, bundle.model.image_resolution)


def _plot_losses(report: TrainReport, path: str, keys: tuple[str, ...] = ("flow", "total")) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [row["step"] for row in report.steps]
    for key in keys:
        series = report.loss_series(key)
        if len(series) == len(steps):
            ax.plot(steps, series, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _write_config(bundle: ConfigBundle, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config_to_text(bundle))


def _cmd_train_stage1a(args, out_dir: str) -> int:
    bundle = _bundle_from_args(args)
    dataset = _dataset(args, bundle)
    start_state = load_checkpoint(args.init) if args.init else None
    eval_images = dataset.images[: min(8, len(dataset))]
    state, report = train_stage1a(
        bundle,
        dataset,
        seed=args.seed,
        max_steps=args.train_steps,
        eval_images=eval_images,
        snapshot_every=max(1, (args.train_steps or bundle.train.max_steps) // 5),
        start_state=start_state,
    )
    save_checkpoint(state, os.path.join(out_dir, "stage1a.ckpt"))
    report.write_csv(os.path.join(out_dir, "report.csv"))
    _plot_losses(report, os.path.join(out_dir, "loss_curve.png"))
    _write_config(bundle, out_dir)
    print(f"stage 1A finished at step {state.step}; outputs in {out_dir}")
    return 0


def _cmd_train_stage1b(args, out_dir: str) -> int:
    if not args.init:
        raise StageDependencyError("train-stage1b requires --init with a stage-1A checkpoint")
    init_state = load_checkpoint(args.init)
    base = parse_config_text(init_state.meta["config_text"])
    bundle = _bundle_from_args(args, base=base)
    dataset = _dataset(args, bundle)
    eval_images = dataset.images[: min(8, len(dataset))]
    state, report = train_stage1b(
        bundle,
        init_state,
        dataset,
        seed=args.seed,
        max_steps=args.train_steps,
        eval_images=eval_images,
        snapshot_every=max(1, (args.train_steps or bundle.train.max_steps) // 5),
        chain_loss=not args.one_step_loss,
    )
    save_checkpoint(state, os.path.join(out_dir, "stage1b.ckpt"))
    report.write_csv(os.path.join(out_dir, "report.csv"))
    _plot_losses(report, os.path.join(out_dir, "loss_curve.png"), keys=("flow", "sample", "total"))
    _write_config(bundle, out_dir)
    print(f"stage 1B finished at step {state.step}; outputs in {out_dir}")
    return 0


def _cmd_train_stage2(args, out_dir: str) -> int:
    if not args.init:
        raise StageDependencyError("train-stage2 requires --init with a tokenizer checkpoint")
    tok_state = load_checkpoint(args.init)
    if tok_state.stage not in ("1A", "1B"):
        raise StageDependencyError("--init must point at a stage-1A/1B tokenizer checkpoint")
    model, base = rebuild_from_state(tok_state, use_ema=True)
    bundle = _bundle_from_args(args, base=base)
    require_compatible(tok_state, bundle.model_fingerprint, stages=("1A", "1B"))
    dataset = _dataset(args, bundle)
    tokens = maskgit_lib.tokenize_dataset(model, dataset)
    tokens.save(os.path.join(out_dir, "tokens.bin"))
    state, report = maskgit_lib.train_maskgit(
        tokens,
        bundle,
        seed=args.seed,
        steps=args.train_steps,
        width=args.stage2_width,
        depth=args.stage2_depth,
    )
    save_checkpoint(state, os.path.join(out_dir, "stage2.ckpt"))
    report.write_csv(os.path.join(out_dir, "report.csv"))
    _plot_losses(report, os.path.join(out_dir, "loss_curve.png"), keys=("masked_ce",))
    _write_config(bundle, out_dir)
    print(f"stage 2 finished after {state.step} steps; outputs in {out_dir}")
    return 0


def _cmd_reconstruct(args, out_dir: str) -> int:
    if not args.init:
        raise StageDependencyError("reconstruct requires --init with a tokenizer checkpoint")
    state = load_checkpoint(args.init)
    model, base = rebuild_from_state(state, use_ema=True)
    bundle = _bundle_from_args(args, base=base)
    require_compatible(state, bundle.model_fingerprint, stages=("1A", "1B"))
    dataset = _dataset(args, bundle)
    generator = torch.Generator().manual_seed(args.seed)
    recon = reconstruct_images(model, dataset.images, bundle, generator)
    columns = max(1, int(len(dataset) ** 0.5))
    write_grid(dataset.images, os.path.join(out_dir, "originals.png"), columns)
    write_grid(recon, os.path.join(out_dir, "reconstructions.png"), columns)
    pairs = torch.stack([dataset.images, recon], dim=1).reshape(-1, *dataset.images.shape[1:])
    write_grid(pairs, os.path.join(out_dir, "side_by_side.png"), columns=2)
    extractor = PerceptualExtractor(STAGE1A_EXTRACTOR_SEED, channels=bundle.model.channels)
    report = reconstruction_report(dataset.images, recon, extractor, sources=dataset.sources)
    report.write_csv(os.path.join(out_dir, "metrics.csv"))
    _write_config(bundle, out_dir)
    agg = report.aggregate
    print(
        f"reconstructed {len(dataset)} images: psnr={agg['psnr']:.3f} "
        f"ssim={agg['ssim']:.4f} perceptual={agg['perceptual']:.5f} toy_fid={agg['toy_fid']:.5f}"
    )
    return 0


def _cmd_sample(args, out_dir: str) -> int:
    if not args.init:
        raise StageDependencyError("sample requires --init with a stage-2 checkpoint")
    if not args.tokenizer:
        raise StageDependencyError("sample requires --tokenizer with a stage-1A/1B checkpoint")
    gen_state = load_checkpoint(args.init)
    generator_model = maskgit_lib.rebuild_maskgit(gen_state)
    tok_state = load_checkpoint(args.tokenizer)
    model, base = rebuild_from_state(tok_state, use_ema=True)
    bundle = _bundle_from_args(args, base=base)
    if gen_state.model_fingerprint != tok_state.model_fingerprint:
        raise StageDependencyError(
            "stage-2 checkpoint was trained on tokens from a different tokenizer config"
        )
    rng = torch.Generator().manual_seed(args.seed)
    # token-logit guidance uses the same weight as the decoder; it only
    # applies when a class is given
    ids = maskgit_lib.sample_maskgit(
        generator_model,
        num_samples=args.num_samples,
        steps=args.sample_steps,
        temperature=args.temperature,
        guidance_weight=bundle.sampler.guidance_weight,
        class_id=args.class_id,
        generator=rng,
    )
    mcfg = bundle.model
    codes = unpack_tokens(ids, mcfg.entropy_group_bits, mcfg.token_bits)
    schedule = shifted_schedule(bundle.sampler.num_steps, bundle.sampler.rho)
    guidance = GuidanceSpec(
        weight=bundle.sampler.guidance_weight, interval=bundle.sampler.guidance_interval
    )
    z = torch.randn(
        (ids.shape[0], mcfg.channels, mcfg.image_resolution, mcfg.image_resolution), generator=rng
    )
    images = integrate(model.decode, codes, z, schedule, guidance)
    save_tokens(
        os.path.join(out_dir, "tokens.bin"), ids, mcfg.latent_seq_len, mcfg.token_bits,
        mcfg.entropy_group_bits,
    )
    write_grid(images, os.path.join(out_dir, "samples.png"), columns=max(1, int(len(ids) ** 0.5)))
    print(f"sampled {len(ids)} images into {out_dir}")
    return 0


def _cmd_eval(args, out_dir: str) -> int:
    originals = load_folder(args.originals, args.resolution)
    recon = load_folder(args.reconstructions, args.resolution)
    if len(originals) != len(recon):
        raise ConfigError(
            f"folder sizes differ: {len(originals)} originals vs {len(recon)} reconstructions"
        )
    extractor = PerceptualExtractor(STAGE1A_EXTRACTOR_SEED, channels=3)
    report = reconstruction_report(
        originals.images, recon.images, extractor, sources=originals.sources
    )
    report.write_csv(os.path.join(out_dir, "metrics.csv"))
    agg = report.aggregate
    print(
        f"evaluated {len(originals)} pairs: psnr={agg['psnr']} ssim={agg['ssim']:.4f} "
        f"perceptual={agg['perceptual']:.5f} toy_fid={agg['toy_fid']:.6f}"
    )
    return 0


def _cmd_ablate(args, out_dir: str) -> int:
    import csv

    bundle = _bundle_from_args(args)
    dataset = _dataset(args, bundle)
    eval_images = dataset.images
    extractor = PerceptualExtractor(STAGE1A_EXTRACTOR_SEED, channels=bundle.model.channels)

    def train_variant(variant_bundle: ConfigBundle):
        state, _ = train_stage1a(
            variant_bundle, dataset, seed=args.seed, max_steps=args.train_steps
        )
        model, _ = rebuild_from_state(state, use_ema=True)
        return state, model

    def evaluate(model, variant_bundle: ConfigBundle) -> dict:
        generator = torch.Generator().manual_seed(args.seed + 1)
        recon = reconstruct_images(model, eval_images, variant_bundle, generator)
        report = reconstruction_report(eval_images, recon, extractor)
        return {
            "psnr": report.aggregate["psnr"],
            "perceptual": report.aggregate["perceptual"],
            "toy_fid": report.aggregate["toy_fid"],
        }

    def with_sampler(b: ConfigBundle, **updates) -> ConfigBundle:
        return validate_config(b.model, b.train, dataclasses.replace(b.sampler, **updates))

    rows = []
    default_state, default_model = train_variant(bundle)
    rows.append({"variant": "default", **evaluate(default_model, bundle)})
    rows.append(
        {"variant": "rho=1 (unshifted sampler)", **evaluate(default_model, with_sampler(bundle, rho=1.0))}
    )
    rows.append(
        {
            "variant": "no guidance (w=1)",
            **evaluate(default_model, with_sampler(bundle, guidance_weight=1.0)),
        }
    )
    fsq_bundle = validate_config(
        dataclasses.replace(bundle.model, quantizer_kind="fsq"), bundle.train, bundle.sampler
    )
    rows.append({"variant": "fsq quantizer", **evaluate(train_variant(fsq_bundle)[1], fsq_bundle)})
    mix_bundle = validate_config(
        bundle.model, dataclasses.replace(bundle.train, uniform_mix_prob=0.0), bundle.sampler
    )
    rows.append(
        {"variant": "no uniform tail mix", **evaluate(train_variant(mix_bundle)[1], mix_bundle)}
    )
    if args.posttrain_steps > 0:
        for label, chain in (("chain loss", True), ("one-step loss", False)):
            state, _ = train_stage1b(
                bundle,
                default_state,
                dataset,
                seed=args.seed,
                max_steps=args.posttrain_steps,
                chain_loss=chain,
            )
            model, _ = rebuild_from_state(state, use_ema=True)
            rows.append({"variant": f"post-trained ({label})", **evaluate(model, bundle)})

    table_path = os.path.join(out_dir, "ablation.csv")
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "psnr", "perceptual", "toy_fid"])
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(
            f"{row['variant']:>28}: psnr={row['psnr']:.3f} "
            f"perceptual={row['perceptual']:.5f} toy_fid={row['toy_fid']:.5f}"
        )
    print(f"table written to {table_path}")
    return 0


_COMMANDS = {
    "train-stage1a": _cmd_train_stage1a,
    "train-stage1b": _cmd_train_stage1b,
    "train-stage2": _cmd_train_stage2,
    "reconstruct": _cmd_reconstruct,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and bad flags
        return int(exc.code or 0)
    torch.manual_seed(args.seed)
    out_dir = _out_dir(args)
    try:
        with output_lock(out_dir):
            return _COMMANDS[args.command](args, out_dir)
    except FlowCodecError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
