from __future__ import annotations

import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from flowcodec.errors import DataError, IntegrationError
from flowcodec.sampling import (
    GuidanceSpec,
    Schedule,
    guided_velocity,
    integrate,
    random_schedule,
    scaled_initial_noise,
    schedule_from_weights,
    shifted_schedule,
    sigma_to_flow_time,
)


def test_shifted_schedule_linear_case() -> None:
    assert shifted_schedule(4, 1.0).times == (1.0, 0.75, 0.5, 0.25, 0.0)


def test_shifted_schedule_rho_four() -> None:
    assert shifted_schedule(4, 4.0).times == (1.0, 0.31640625, 0.0625, 0.00390625, 0.0)


def test_shifted_schedule_single_step() -> None:
    for rho in (1.0, 2.0, 7.0):
        assert shifted_schedule(1, rho).times == (1.0, 0.0)


def test_shifted_schedule_rejects_small_rho() -> None:
    with pytest.raises(DataError, match="rho"):
        shifted_schedule(4, 0.9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(1.0, 8.0), st.floats(0.0, 4.0))
def test_interior_times_non_increasing_in_rho(n: int, rho: float, bump: float) -> None:
    a = shifted_schedule(n, rho).times
    b = shifted_schedule(n, rho + bump).times
    assert all(tb <= ta for ta, tb in zip(a, b))


def test_schedule_validation() -> None:
    with pytest.raises(DataError, match="start at 1"):
        Schedule((0.9, 0.5, 0.0))
    with pytest.raises(DataError, match="end at 0"):
        Schedule((1.0, 0.5))
    with pytest.raises(DataError, match="strictly decreasing"):
        Schedule((1.0, 0.5, 0.5, 0.0))


def test_schedule_from_weights_examples() -> None:
    assert schedule_from_weights([1.0, 1.0, 1.0, 1.0]).times == (1.0, 0.75, 0.5, 0.25, 0.0)
    assert schedule_from_weights([2.0, 1.0, 1.0]).times == (1.0, 0.5, 0.25, 0.0)


def test_random_schedules_always_valid() -> None:
    gen = torch.Generator().manual_seed(0)
    for _ in range(10_000):
        schedule = random_schedule(8, gen)
        times = schedule.times
        assert times[0] == 1.0 and times[-1] == 0.0
        assert all(a > b for a, b in zip(times, times[1:]))


def test_guidance_weight_one_is_identity() -> None:
    gen = torch.Generator().manual_seed(1)
    v_cond = torch.randn(2, 3, 4, 4, generator=gen)
    v_uncond = torch.randn(2, 3, 4, 4, generator=gen)
    spec = GuidanceSpec(weight=1.0, interval=(0.0, 1.0))
    for t in (0.0, 0.3, 0.9, 1.0):
        assert torch.allclose(guided_velocity(v_cond, v_uncond, t, spec), v_cond, atol=1e-12)


def test_guidance_extrapolation_inside_interval() -> None:
    spec = GuidanceSpec(weight=1.5, interval=(0.145, 0.505))
    v = guided_velocity(torch.tensor([2.0]), torch.tensor([1.0]), 0.3, spec)
    assert v.item() == pytest.approx(2.5, abs=1e-12)


def test_guidance_outside_interval_is_conditional() -> None:
    spec = GuidanceSpec(weight=1.5, interval=(0.145, 0.505))
    v_cond = torch.tensor([2.0])
    assert torch.equal(guided_velocity(v_cond, torch.tensor([-7.0]), 0.9, spec), v_cond)


def test_sigma_interval_maps_to_flow_time() -> None:
    assert sigma_to_flow_time(0.17) == pytest.approx(0.145, abs=1e-3)
    assert sigma_to_flow_time(1.02) == pytest.approx(0.505, abs=1e-3)


def test_integrate_constant_velocity_telescopes() -> None:
    gen = torch.Generator().manual_seed(2)
    target = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64)
    z = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64)

    def oracle(x_t, c, t):
        return target - z

    for rho in (1.0, 2.0, 4.0):
        for n in (1, 8, 25):
            out = integrate(oracle, None, z, shifted_schedule(n, rho))
            assert float((out - target).abs().max()) <= 1e-6


def test_integrate_single_step() -> None:
    z = torch.full((1, 1, 2, 2), 0.25)

    def field(x_t, c, t):
        return 2 * x_t

    out = integrate(field, None, z, shifted_schedule(1, 1.0))
    assert torch.allclose(out, z + 2 * z)


def test_integrate_matches_exponential_decay() -> None:
    # dx/ds = -x integrated over unit time from x=1: closed form exp(-1)
    z = torch.ones(1, 1, 1, 1, dtype=torch.float64)

    def field(x_t, c, t):
        return -x_t

    out = integrate(field, None, z, shifted_schedule(1000, 1.0))
    assert out.item() == pytest.approx(math.exp(-1.0), abs=2e-3)


def test_integrate_rejects_nan_with_step_index() -> None:
    z = torch.ones(1, 1, 1, 1)

    def field(x_t, c, t):
        return torch.full_like(x_t, math.nan) if t < 0.8 else torch.zeros_like(x_t)

    with pytest.raises(IntegrationError) as err:
        integrate(field, None, z, shifted_schedule(4, 1.0))
    assert err.value.step == 1


def test_integrate_guided_calls_zero_latent_branch() -> None:
    calls = []

    def field(x_t, c, t):
        calls.append(float(c.abs().sum()))
        return torch.zeros_like(x_t)

    c = torch.ones(1, 2, 2)
    z = torch.zeros(1, 1, 2, 2)
    spec = GuidanceSpec(weight=1.5, interval=(0.0, 1.0))
    integrate(field, c, z, shifted_schedule(2, 1.0), spec)
    # each step evaluates the conditional and the zero-latent branch
    assert calls == [4.0, 0.0, 4.0, 0.0]


def test_integrate_differentiable_matches_plain_bitwise() -> None:
    from flowcodec.config import ModelConfig
    from flowcodec.model import build_autoencoder
    from flowcodec.quantizer import binarize

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
    model = build_autoencoder(config, 1, torch.Generator().manual_seed(5))
    gen = torch.Generator().manual_seed(6)
    x = torch.rand(2, 3, 8, 8, generator=gen) * 2 - 1
    z = torch.randn(2, 3, 8, 8, generator=gen)
    with torch.no_grad():
        c = binarize(model.encode(x))
    schedule = shifted_schedule(4, 4.0)
    plain = integrate(model.decode, c, z, schedule, differentiable=False)
    diff = integrate(model.decode, c, z, schedule, differentiable=True)
    assert torch.equal(plain, diff.detach())


def test_scaled_noise_identity_and_norm() -> None:
    gen = torch.Generator().manual_seed(3)
    z = torch.randn(4, 3, 8, 8, generator=gen)
    assert torch.equal(scaled_initial_noise(z, 1.0), z)
    halved = scaled_initial_noise(z, 0.5)
    for i in range(4):
        assert halved[i].norm().item() == pytest.approx(0.5 * z[i].norm().item(), rel=1e-6)
    with pytest.raises(DataError, match="scale"):
        scaled_initial_noise(z, 0.0)


def test_noise_scale_sweep_changes_reconstruction_error() -> None:
    # fixed toy velocity field: pulls toward a target with state feedback
    gen = torch.Generator().manual_seed(4)
    target = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    z = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)

    def field(x_t, c, t):
        return (target - x_t) * (1.5 - t)

    errors = []
    for scale in (0.7, 1.0, 1.3):
        out = integrate(field, None, scaled_initial_noise(z, scale), shifted_schedule(8, 1.0))
        errors.append(float((out - target).square().mean()))
    assert len({round(e, 12) for e in errors}) == 3
