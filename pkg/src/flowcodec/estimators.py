"""Scikit-learn style estimator facade.

``DiffusionTokenizer`` wraps the two-stage tokenizer behind the familiar
fit/transform/inverse_transform surface so it composes with pipelines and
model-selection tooling; ``MaskedTokenGenerator`` wraps the second-stage
generative model behind fit/sample.  Heavy lifting stays in the library
modules; these classes only hold hyperparameters (verbatim, per sklearn
convention) and fitted state on trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from . import maskgit as maskgit_lib
from .config import ModelConfig, SamplerConfig, TrainConfig, validate_config
from .data import ImageSet
from .errors import NotFittedError
from .metrics import psnr
from .quantizer import pack_tokens, unpack_tokens
from .sampling import GuidanceSpec, integrate, shifted_schedule
from .training import (
    encode_quantized,
    rebuild_from_state,
    reconstruct_images,
    train_stage1a,
    train_stage1b,
)
from .validation import check_image_batch, check_token_batch


class DiffusionTokenizer(TransformerMixin, BaseEstimator):
    """Diffusion-autoencoder image tokenizer with a sklearn estimator surface.

    ``fit(X)`` runs mode-matching pre-training (and optionally mode-seeking
    post-training) on images X of shape [n, channels, resolution, resolution]
    scaled to [-1, 1].  ``transform`` maps images to integer token ids;
    ``inverse_transform`` decodes ids back to images by integrating the
    probability-flow ODE.
    """

    def __init__(
        self,
        image_resolution: int = 32,
        channels: int = 3,
        patch_size: int = 4,
        width: int = 64,
        encoder_depth: int = 1,
        decoder_depth: int = 2,
        latent_seq_len: int = 8,
        token_bits: int = 8,
        entropy_group_bits: int = 4,
        learning_rate: float = 1e-3,
        batch_size: int = 8,
        stage1a_steps: int = 300,
        stage1b_steps: int = 0,
        sampler_steps: int = 8,
        rho: float = 4.0,
        guidance_weight: float = 1.0,
        seed: int = 0,
    ):
        self.image_resolution = image_resolution
        self.channels = channels
        self.patch_size = patch_size
        self.width = width
        self.encoder_depth = encoder_depth
        self.decoder_depth = decoder_depth
        self.latent_seq_len = latent_seq_len
        self.token_bits = token_bits
        self.entropy_group_bits = entropy_group_bits
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.stage1a_steps = stage1a_steps
        self.stage1b_steps = stage1b_steps
        self.sampler_steps = sampler_steps
        self.rho = rho
        self.guidance_weight = guidance_weight
        self.seed = seed

    def _bundle(self):
        model = ModelConfig(
            image_resolution=self.image_resolution,
            channels=self.channels,
            patch_size=self.patch_size,
            width=self.width,
            encoder_depth=self.encoder_depth,
            decoder_depth=self.decoder_depth,
            latent_seq_len=self.latent_seq_len,
            token_bits=self.token_bits,
            entropy_group_bits=self.entropy_group_bits,
        )
        train = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_steps=self.stage1a_steps,
            encoder_freeze_step=max(self.stage1a_steps, 1),
        )
        sampler = SamplerConfig(
            num_steps=self.sampler_steps,
            rho=self.rho,
            guidance_weight=self.guidance_weight,
        )
        return validate_config(model, train, sampler)

    def fit(self, X, y=None):
        bundle = self._bundle()
        images = check_image_batch(X, self.image_resolution, self.channels)
        dataset = ImageSet(images=images, sources=[str(i) for i in range(len(images))])
        state, report = train_stage1a(bundle, dataset, seed=self.seed)
        if self.stage1b_steps > 0:
            state, report = train_stage1b(
                bundle, state, dataset, seed=self.seed, max_steps=self.stage1b_steps
            )
        self.bundle_ = bundle
        self.state_ = state
        self.report_ = report
        self.model_, _ = rebuild_from_state(state, use_ema=True)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this DiffusionTokenizer is not fitted yet; call fit first")

    def transform(self, X) -> np.ndarray:
        """Images -> integer token ids [n, latent_seq_len * token_bits / group_bits]."""
        self._check_fitted()
        images = check_image_batch(X, self.image_resolution, self.channels)
        c = encode_quantized(self.model_, images)
        return pack_tokens(c, self.entropy_group_bits).numpy()

    def inverse_transform(self, X) -> np.ndarray:
        """Token ids -> images in [-1, 1], via the guided ODE sampler."""
        self._check_fitted()
        bundle = self.bundle_
        positions = bundle.model.tokens_per_image
        ids = check_token_batch(X, positions, 2**self.entropy_group_bits)
        c = unpack_tokens(ids, self.entropy_group_bits, self.token_bits)
        generator = torch.Generator().manual_seed(self.seed + 1)
        schedule = shifted_schedule(bundle.sampler.num_steps, bundle.sampler.rho)
        guidance = GuidanceSpec(
            weight=bundle.sampler.guidance_weight, interval=bundle.sampler.guidance_interval
        )
        z = torch.randn(
            (ids.shape[0], self.channels, self.image_resolution, self.image_resolution),
            generator=generator,
        )
        return integrate(self.model_.decode, c, z, schedule, guidance).numpy()

    def reconstruct(self, X) -> np.ndarray:
        """Round-trip encode/decode of images (the tokenizer's main task)."""
        self._check_fitted()
        images = check_image_batch(X, self.image_resolution, self.channels)
        generator = torch.Generator().manual_seed(self.seed + 1)
        return reconstruct_images(self.model_, images, self.bundle_, generator).numpy()

    def score(self, X, y=None) -> float:
        """Mean reconstruction PSNR in dB (higher is better)."""
        images = check_image_batch(X, self.image_resolution, self.channels)
        recon = torch.as_tensor(self.reconstruct(images))
        values = [psnr(images[i], recon[i]) for i in range(images.shape[0])]
        finite = [v for v in values if np.isfinite(v)]
        return float(np.mean(finite)) if finite else float("inf")


class MaskedTokenGenerator(BaseEstimator):
    """Masked-token generative model over tokenizer ids, fit/sample shaped."""

    def __init__(
        self,
        width: int = 128,
        depth: int = 4,
        steps: int = 500,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        sample_steps: int = 16,
        temperature: float = 1.0,
        guidance_weight: float = 1.0,
        seed: int = 0,
    ):
        self.width = width
        self.depth = depth
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sample_steps = sample_steps
        self.temperature = temperature
        self.guidance_weight = guidance_weight
        self.seed = seed

    def fit(self, X, y=None, *, tokenizer: DiffusionTokenizer | None = None):
        """Fit on token ids [n, positions] (or images when ``tokenizer`` given).

        y, when provided, supplies integer class labels for conditional
        generation.
        """
        if tokenizer is not None:
            X = tokenizer.transform(X)
            token_bits = tokenizer.token_bits
            group_bits = tokenizer.entropy_group_bits
            seq_len = tokenizer.latent_seq_len
            bundle = tokenizer.bundle_
        else:
            X = np.asarray(X)
            group_bits = max(int(np.max(X)), 1).bit_length()
            token_bits = group_bits
            seq_len = X.shape[1]
            bundle = validate_config()
        ids = check_token_batch(X, X.shape[1], 2**group_bits)
        labels = None if y is None else torch.as_tensor(np.asarray(y), dtype=torch.int64)
        dataset = maskgit_lib.TokenDataset(
            ids=ids, seq_len=seq_len, token_bits=token_bits, group_bits=group_bits, labels=labels
        )
        state, report = maskgit_lib.train_maskgit(
            dataset,
            bundle,
            seed=self.seed,
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            width=self.width,
            depth=self.depth,
        )
        self.state_ = state
        self.report_ = report
        self.model_ = maskgit_lib.rebuild_maskgit(state)
        return self

    def sample(self, n: int, class_id: int | None = None) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("this MaskedTokenGenerator is not fitted yet; call fit first")
        generator = torch.Generator().manual_seed(self.seed + 1)
        ids = maskgit_lib.sample_maskgit(
            self.model_,
            num_samples=n,
            steps=self.sample_steps,
            temperature=self.temperature,
            guidance_weight=self.guidance_weight,
            class_id=class_id,
            generator=generator,
        )
        return ids.numpy()


__all__ = ["DiffusionTokenizer", "MaskedTokenGenerator"]
