from __future__ import annotations

import pytest
import torch

from flowcodec.config import ModelConfig
from flowcodec.errors import DataError
from flowcodec.flow import flow_loss, interpolate
from flowcodec.model import (
    Mlp,
    apply_latent_dropout,
    build_autoencoder,
    patchify,
    renormalize_weights,
    unpatchify,
)
from flowcodec.quantizer import binarize


def _tiny_model(seed: int = 0, dtype=torch.float32, width_factor: int = 1, **overrides):
    config = ModelConfig(
        image_resolution=16,
        patch_size=4,
        width=32,
        encoder_depth=1,
        decoder_depth=2,
        latent_seq_len=4,
        token_bits=4,
        entropy_group_bits=2,
        **overrides,
    )
    gen = torch.Generator().manual_seed(seed)
    return build_autoencoder(config, width_factor, gen, dtype), config


def test_patchify_token_arithmetic() -> None:
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    assert patchify(x, 4).shape == (2, 64, 48)
    assert patchify(x, 8).shape == (2, 16, 192)


def test_patchify_round_trip_bitwise() -> None:
    x = torch.randn(3, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    assert torch.equal(unpatchify(patchify(x, 4), 4, 3), x)
    assert torch.equal(unpatchify(patchify(x, 8), 8, 3), x)


def test_patchify_is_row_major_blocks() -> None:
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    tokens = patchify(x, 2)
    # first patch is the top-left 2x2 block, rows first
    assert tokens[0, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert tokens[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]


def test_patchify_rejects_indivisible() -> None:
    with pytest.raises(DataError, match="does not divide"):
        patchify(torch.zeros(1, 3, 30, 30), 4)


def test_encode_shape_and_determinism() -> None:
    model, config = _tiny_model()
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(5, 3, 16, 16, generator=gen) * 2 - 1
    with torch.no_grad():
        a = model.encode(x)
        b = model.encode(x.clone())
    assert a.shape == (5, config.latent_seq_len, config.token_bits)
    assert torch.equal(a, b)


def test_encode_no_cross_batch_leakage() -> None:
    model, _ = _tiny_model()
    gen = torch.Generator().manual_seed(3)
    x = torch.rand(6, 3, 16, 16, generator=gen) * 2 - 1
    perm = torch.tensor([4, 2, 0, 5, 1, 3])
    with torch.no_grad():
        assert torch.allclose(model.encode(x)[perm], model.encode(x[perm]), atol=1e-6)


def test_encode_rejects_wrong_resolution() -> None:
    model, _ = _tiny_model()
    with pytest.raises(DataError, match="encoder expects"):
        model.encode(torch.zeros(1, 3, 32, 32))


def test_decode_shape_time_sensitivity_determinism() -> None:
    model, config = _tiny_model()
    gen = torch.Generator().manual_seed(4)
    x_t = torch.randn(2, 3, 16, 16, generator=gen)
    c = binarize(torch.randn(2, config.latent_seq_len, config.token_bits, generator=gen))
    with torch.no_grad():
        v1 = model.decode(x_t, c, 0.2)
        v2 = model.decode(x_t, c, 0.9)
        v1_again = model.decode(x_t, c, 0.2)
    assert v1.shape == x_t.shape
    assert float((v1 - v2).abs().max()) > 0
    assert torch.equal(v1, v1_again)


def test_decode_rejects_bad_latent_shape_and_t() -> None:
    model, _ = _tiny_model()
    x_t = torch.zeros(1, 3, 16, 16)
    with pytest.raises(DataError, match="latent must be"):
        model.decode(x_t, torch.zeros(1, 2, 4), 0.5)
    with pytest.raises(DataError, match="outside"):
        model.decode(x_t, torch.zeros(1, 4, 4), 1.5)


def test_latent_dropout_edge_probabilities() -> None:
    gen = torch.Generator().manual_seed(5)
    c = torch.randn(10, 4, 4, generator=gen)
    assert torch.equal(apply_latent_dropout(c, 0.0, gen), c)
    assert torch.equal(apply_latent_dropout(c, 1.0, gen), torch.zeros_like(c))


def test_latent_dropout_rate_monte_carlo() -> None:
    gen = torch.Generator().manual_seed(6)
    c = torch.ones(100_000, 1, 1)
    dropped = apply_latent_dropout(c, 0.1, gen)
    # whole latents go to zero, never partial
    per_sample = dropped.reshape(100_000, -1)
    assert set(per_sample.sum(dim=1).unique().tolist()) <= {0.0, 1.0}
    rate = float((per_sample.sum(dim=1) == 0).double().mean())
    assert rate == pytest.approx(0.10, abs=0.01)


def test_renormalize_row_example() -> None:
    mlp = Mlp(2, 1)
    with torch.no_grad():
        mlp.fc1.weight.copy_(torch.tensor([[3.0, 4.0]]))
    renormalize_weights(mlp)
    assert torch.allclose(mlp.fc1.weight, torch.tensor([[0.6, 0.8]]), atol=1e-7)


def test_renormalize_idempotent_und_unit_rows_fixed() -> None:
    model, _ = _tiny_model(seed=7)
    renormalize_weights(model)
    snapshot = {k: v.detach().clone() for k, v in model.named_parameters()}
    renormalize_weights(model)
    for name, param in model.named_parameters():
        assert torch.equal(param, snapshot[name]), name


def test_renormalize_touches_only_mlp_weights() -> None:
    model, _ = _tiny_model(seed=8)
    before = {k: v.detach().clone() for k, v in model.named_parameters()}
    renormalize_weights(model)
    for name, param in model.named_parameters():
        if "_mlp.fc" in name and name.endswith("weight"):
            norms = param.norm(dim=1)
            assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)
        else:
            assert torch.equal(param, before[name]), name


def test_renormalize_preserves_row_direction() -> None:
    model, _ = _tiny_model(seed=9)
    before = {k: v.detach().clone() for k, v in model.named_parameters()}
    renormalize_weights(model)
    for name, param in model.named_parameters():
        if "_mlp.fc" in name and name.endswith("weight"):
            cos = torch.nn.functional.cosine_similarity(param, before[name], dim=1)
            assert torch.allclose(cos, torch.ones_like(cos), atol=1e-6)


def test_width_factor_scales_hidden_dimension() -> None:
    base, _ = _tiny_model(seed=10, width_factor=1)
    doubled, _ = _tiny_model(seed=10, width_factor=2)
    assert doubled.width == 2 * base.width
    assert doubled.encoder.patch_embed.weight.shape[0] == 2 * base.encoder.patch_embed.weight.shape[0]
    assert (
        doubled.decoder.blocks[0].img_mlp.fc1.weight.shape[0]
        == 2 * base.decoder.blocks[0].img_mlp.fc1.weight.shape[0]
    )


def test_width_factor_one_uses_fan_in_variance() -> None:
    model, _ = _tiny_model(seed=11)
    w = model.decoder.blocks[0].img_qkv.weight.detach()
    assert float(w.std()) == pytest.approx(w.shape[1] ** -0.5, rel=0.25)


def test_lr_multipliers_scale_with_width_factor() -> None:
    model, _ = _tiny_model(seed=12, width_factor=4)
    mults = model.lr_multipliers
    assert mults["decoder.blocks.0.img_qkv.weight"] == 0.25
    assert mults["decoder.blocks.0.img_mlp.fc1.weight"] == 0.25
    assert mults["encoder.patch_embed.weight"] == 1.0
    assert mults["encoder.head.weight"] == 1.0
    assert mults["encoder.pos_img"] == 1.0


def test_preactivation_rms_stable_across_width() -> None:
    gen = torch.Generator().manual_seed(13)
    x = torch.rand(64, 3, 16, 16, generator=gen) * 2 - 1
    rms = {}
    for factor in (1, 2, 4):
        model, config = _tiny_model(seed=13, width_factor=factor)
        captured = {}

        def hook(module, inputs, output):
            captured["value"] = float(output.square().mean().sqrt())

        handle = model.decoder.blocks[0].img_mlp.fc1.register_forward_hook(hook)
        c = torch.zeros(64, config.latent_seq_len, config.token_bits)
        with torch.no_grad():
            model.decode(x, c, 0.5)
        handle.remove()
        rms[factor] = captured["value"]
    values = list(rms.values())
    assert max(values) / min(values) < 2.0


def test_gradient_reaches_every_encoder_parameter() -> None:
    model, config = _tiny_model(seed=14, dtype=torch.float64)
    gen = torch.Generator().manual_seed(14)
    x = torch.rand(4, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    z = torch.randn(4, 3, 16, 16, generator=gen, dtype=torch.float64)
    t = torch.rand(4, generator=gen, dtype=torch.float64)
    c_hat = model.encode(x)
    v = model.decode(interpolate(x, z, t), binarize(c_hat), t)
    flow_loss(v, x, z).backward()
    for name, param in model.encoder.named_parameters():
        assert param.grad is not None, name
        assert float(param.grad.abs().max()) > 0, name
