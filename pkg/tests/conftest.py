from __future__ import annotations

import re

import pytest
import torch

from flowcodec.config import ModelConfig, SamplerConfig, TrainConfig, validate_config

_CRITERION_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, aggregated over its tests."""
    results: dict[int, str] = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            match = _CRITERION_PATTERN.search(getattr(report, "nodeid", ""))
            if match:
                number = int(match.group(1))
                if outcome != "passed" or results.get(number) is None:
                    results[number] = outcome if results.get(number) != "failed" else "failed"
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        status = "PASS" if results[number] == "passed" else "FAIL"
        terminalreporter.write_line(f"acceptance criterion {number:02d}: {status}")


@pytest.fixture()
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        image_resolution=16,
        patch_size=4,
        width=64,
        encoder_depth=1,
        decoder_depth=2,
        latent_seq_len=8,
        token_bits=4,
        entropy_group_bits=2,
    )


@pytest.fixture()
def tiny_bundle(tiny_model_config):
    return validate_config(
        tiny_model_config,
        TrainConfig(batch_size=8, learning_rate=1e-3, max_steps=30, encoder_freeze_step=10_000),
        SamplerConfig(num_steps=4, rho=4.0, guidance_weight=1.0),
    )


def finite_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. every element of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.numel()):
        original = flat[i].item()
        flat[i] = original + eps
        hi = float(fn(x))
        flat[i] = original - eps
        lo = float(fn(x))
        flat[i] = original
        out[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / denom
