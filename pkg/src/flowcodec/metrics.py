"""Reconstruction and distribution metrics.

Per-image: PSNR, SSIM, and a perceptual distance computed by a deterministic
seed-derived convolutional feature pyramid (the desk-scale stand-in for a
pretrained perceptual network; different seeds model different perceptual
networks).  Set-level: Frechet distance between feature statistics
("toy-FID") and k-NN precision/recall.  Absolute toy-FID values are not
comparable to anything computed with pretrained features, so reports carry
the extractor fingerprint.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import DataError

STAGE1A_EXTRACTOR_SEED = 26  # pre-training perceptual network
STAGE1B_EXTRACTOR_SEED = 27  # post-training swaps to a different network


def _to_unit_range(x: Tensor) -> Tensor:
    return (x + 1.0) / 2.0


def _as_tensor(x) -> Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x))


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB on [0,1]-rescaled inputs; inf if equal."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise DataError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = (_to_unit_range(x.double()) - _to_unit_range(y.double())).square().mean().item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x, y, *, window_size: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM with an 11x11 Gaussian window, channel-averaged.

    Inputs in [-1, 1] are rescaled to [0, 1]; the dynamic range is 1 with
    K1 = 0.01, K2 = 0.03.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise DataError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 3:
        x, y = x[None], y[None]
    if x.ndim != 4:
        raise DataError(f"expected [C, H, W] or [B, C, H, W], got {tuple(x.shape)}")
    _, c, h, w = x.shape
    if h < window_size or w < window_size:
        raise DataError(f"images smaller than the {window_size}px SSIM window")
    x = _to_unit_range(x.double())
    y = _to_unit_range(y.double())
    kernel = _gaussian_window(window_size, sigma).expand(c, 1, window_size, window_size)

    def local_mean(v: Tensor) -> Tensor:
        return F.conv2d(v, kernel, groups=c)

    mu_x, mu_y = local_mean(x), local_mean(y)
    var_x = local_mean(x * x) - mu_x * mu_x
    var_y = local_mean(y * y) - mu_y * mu_y
    cov = local_mean(x * y) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return score.mean().item()


class PerceptualExtractor:
    """Deterministic multi-scale conv pyramid with fixed seed-derived weights.

    Three cascaded 3x3 conv + GELU stages with average-pool downsampling in
    between; each stage's features are scaled by a normalization constant
    measured once on a seed-derived probe batch.  Identical seeds give
    identical features; everything is differentiable with respect to the
    input images.
    """

    def __init__(self, seed: int = STAGE1A_EXTRACTOR_SEED, channels: int = 3, features: int = 16, levels: int = 3):
        if levels < 1:
            raise DataError(f"levels must be >= 1, got {levels}")
        self.seed = seed
        self.channels = channels
        self.features = features
        self.levels = levels
        gen = torch.Generator().manual_seed(seed)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        fan_in_ch = channels
        for _ in range(levels):
            w = torch.empty(features, fan_in_ch, 3, 3, dtype=torch.float64)
            w.normal_(0.0, (fan_in_ch * 9) ** -0.5, generator=gen)
            self.weights.append(w)
            self.biases.append(torch.zeros(features, dtype=torch.float64))
            fan_in_ch = features
        probe = 2 * torch.rand(8, channels, 32, 32, generator=gen, dtype=torch.float64) - 1
        self.norm_constants: list[float] = []
        h = probe
        for level in range(levels):
            if level > 0:
                h = F.avg_pool2d(h, 2)
            h = F.gelu(F.conv2d(h, self.weights[level], self.biases[level], padding=1))
            self.norm_constants.append(1.0 / float(h.square().mean().sqrt() + 1e-12))

    @property
    def fingerprint(self) -> str:
        text = f"conv-pyramid/seed={self.seed}/c={self.channels}/f={self.features}/l={self.levels}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def __call__(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DataError(f"expected [B, {self.channels}, H, W] images, got {tuple(x.shape)}")
        feats = []
        h = x
        for level in range(self.levels):
            if level > 0:
                h = F.avg_pool2d(h, 2)
            w = self.weights[level].to(x.dtype)
            b = self.biases[level].to(x.dtype)
            h = F.gelu(F.conv2d(h, w, b, padding=1))
            feats.append(h * self.norm_constants[level])
        return feats


def perceptual_distance(extractor: PerceptualExtractor, x: Tensor, y: Tensor) -> Tensor:
    """Sum over pyramid levels of mean squared normalized-feature differences."""
    if x.shape != y.shape:
        raise DataError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    fx = extractor(x)
    fy = extractor(y)
    total = None
    for a, b in zip(fx, fy):
        term = (a - b).square().mean()
        total = term if total is None else total + term
    return total


def pooled_features(extractor: PerceptualExtractor, images: Tensor, batch_size: int = 64) -> np.ndarray:
    """Per-channel spatial mean and standard deviation of every pyramid level.

    The std half captures local texture/edge statistics that plain averages
    miss, which is what a Frechet comparison of reconstructions is mostly
    about.  Shape [N, 2 * features * levels], float64.
    """
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start : start + batch_size].double()
            pooled = []
            for level in extractor(chunk):
                pooled.append(level.mean(dim=(2, 3)))
                pooled.append(level.std(dim=(2, 3)))
            out.append(torch.cat(pooled, dim=1).numpy())
    return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class FeatureStats:
    """Mean vector, unbiased covariance, and sample count of a feature set."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise DataError(f"feature statistics need >= 2 samples, got {self.count}")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise DataError("covariance shape does not match mean dimension")

    @staticmethod
    def from_features(features: np.ndarray) -> "FeatureStats":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise DataError("need a [N >= 2, dim] feature matrix")
        mean = features.mean(axis=0)
        cov = np.cov(features, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        return FeatureStats(mean=mean, cov=cov, count=features.shape[0])

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        """Exact streaming combination of two disjoint sample sets."""
        na, nb = self.count, other.count
        n = na + nb
        delta = other.mean - self.mean
        mean = self.mean + delta * (nb / n)
        m2 = (
            self.cov * (na - 1)
            + other.cov * (nb - 1)
            + np.outer(delta, delta) * (na * nb / n)
        )
        return FeatureStats(mean=mean, cov=m2 / (n - 1), count=n)


def _psd_sqrt(matrix: np.ndarray, tolerance: float = 1e-8) -> np.ndarray:
    sym = (matrix + matrix.T) / 2
    eigenvalues, eigenvectors = np.linalg.eigh(sym)
    if eigenvalues.min() < -tolerance:
        raise DataError(f"matrix is not PSD (min eigenvalue {eigenvalues.min():.3e})")
    clamped = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors * np.sqrt(clamped)) @ eigenvectors.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross square root is evaluated as sqrt(S_a^{1/2} S_b S_a^{1/2}) via
    symmetric eigendecomposition with eigenvalues clamped at zero.
    """
    if a.mean.shape != b.mean.shape:
        raise DataError(
            f"feature dimensions differ: {a.mean.shape[0]} vs {b.mean.shape[0]}"
        )
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner_sym = (inner + inner.T) / 2
    eigenvalues = np.linalg.eigvalsh(inner_sym)
    cross = np.sqrt(np.clip(eigenvalues, 0.0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * cross)
    return max(value, 0.0)


def toy_fid(extractor: PerceptualExtractor, real: Tensor, fake: Tensor) -> float:
    """Frechet distance between pooled-feature statistics of two image sets."""
    stats_real = FeatureStats.from_features(pooled_features(extractor, real))
    stats_fake = FeatureStats.from_features(pooled_features(extractor, fake))
    return frechet_distance(stats_real, stats_fake)


def precision_recall(
    real_features: np.ndarray, fake_features: np.ndarray, k: int = 3
) -> tuple[float, float]:
    """k-NN manifold precision/recall between two feature sets.

    A fake point counts as precise if it falls inside the k-th nearest
    neighbor radius of some real point; recall swaps the roles.
    """
    real = np.asarray(real_features, dtype=np.float64)
    fake = np.asarray(fake_features, dtype=np.float64)
    for name, arr in (("real", real), ("fake", fake)):
        if arr.ndim != 2 or arr.shape[0] < k + 1:
            raise DataError(f"{name} feature set needs at least {k + 1} points")
    if real.shape[1] != fake.shape[1]:
        raise DataError("feature dimensions differ between sets")

    def covered(points: np.ndarray, manifold: np.ndarray) -> float:
        d_mm = np.linalg.norm(manifold[:, None, :] - manifold[None, :, :], axis=-1)
        radii = np.sort(d_mm, axis=1)[:, k]  # column 0 is the self-distance
        d_pm = np.linalg.norm(points[:, None, :] - manifold[None, :, :], axis=-1)
        return float((d_pm <= radii[None, :]).any(axis=1).mean())

    return covered(fake, real), covered(real, fake)


@dataclass
class MetricReport:
    """Per-image metric rows plus set-level aggregates, exportable as CSV."""

    rows: list[dict]
    aggregate: dict
    extractor_fingerprint: str

    def write_csv(self, path) -> None:
        columns = ["index", "source", "psnr", "ssim", "perceptual", "toy_fid", "precision", "recall"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, restval="")
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
            writer.writerow(self.aggregate)


def _finite_or_inf_mean(values: list[float]) -> float:
    return math.inf if any(math.isinf(v) for v in values) else float(np.mean(values))


def reconstruction_report(
    originals: Tensor,
    reconstructions: Tensor,
    extractor: PerceptualExtractor,
    sources: list[str] | None = None,
) -> MetricReport:
    """Assemble the full per-image + aggregate reconstruction report."""
    if originals.shape != reconstructions.shape:
        raise DataError("originals and reconstructions must share one shape")
    n = originals.shape[0]
    sources = sources or [str(i) for i in range(n)]
    rows = []
    with torch.no_grad():
        for i in range(n):
            rows.append(
                {
                    "index": i,
                    "source": sources[i],
                    "psnr": psnr(originals[i], reconstructions[i]),
                    "ssim": ssim(originals[i], reconstructions[i]),
                    "perceptual": float(
                        perceptual_distance(extractor, originals[i : i + 1], reconstructions[i : i + 1])
                    ),
                }
            )
    real_feats = pooled_features(extractor, originals)
    fake_feats = pooled_features(extractor, reconstructions)
    aggregate = {
        "index": "aggregate",
        "source": f"extractor:{extractor.fingerprint}",
        "psnr": _finite_or_inf_mean([r["psnr"] for r in rows]),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "perceptual": float(np.mean([r["perceptual"] for r in rows])),
        "toy_fid": frechet_distance(
            FeatureStats.from_features(real_feats), FeatureStats.from_features(fake_feats)
        ),
    }
    k = 3
    if n >= k + 1:
        precision, recall = precision_recall(real_feats, fake_feats, k=k)
        aggregate["precision"] = precision
        aggregate["recall"] = recall
    return MetricReport(rows=rows, aggregate=aggregate, extractor_fingerprint=extractor.fingerprint)


def save_feature_stats(path, stats: FeatureStats, extractor_fingerprint: str, dataset_hash: str) -> None:
    """Cache feature statistics keyed by extractor fingerprint + dataset hash."""
    np.savez(
        path,
        mean=stats.mean,
        cov=stats.cov,
        count=stats.count,
        extractor=extractor_fingerprint,
        dataset=dataset_hash,
    )


def load_feature_stats(path, extractor_fingerprint: str, dataset_hash: str) -> FeatureStats:
    data = np.load(path, allow_pickle=False)
    if str(data["extractor"]) != extractor_fingerprint or str(data["dataset"]) != dataset_hash:
        raise DataError("cached feature statistics belong to a different extractor or dataset")
    return FeatureStats(mean=data["mean"], cov=data["cov"], count=int(data["count"]))
