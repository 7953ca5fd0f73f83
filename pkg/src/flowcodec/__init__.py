"""flowcodec: a desk-scale diffusion-autoencoder image tokenizer.

Images are compressed to a short binary latent by a dual-stream transformer
encoder, and reconstructed by a conditional rectified-flow decoder that
integrates a probability-flow ODE from noise.  Training happens in two
stages: mode-matching pre-training on flow-matching plus latent regularizers,
and mode-seeking post-training that backpropagates a perceptual loss through
the whole sampling chain.  A small masked-token transformer generates new
token sequences on top.

The sklearn-style estimators are the friendly entry point:

    >>> from flowcodec import DiffusionTokenizer
    >>> tok = DiffusionTokenizer(stage1a_steps=200).fit(images)
    >>> ids = tok.transform(images)
    >>> recon = tok.inverse_transform(ids)

Lower-level pieces (configs, quantizer, schedules, training loops, metrics,
CLI) live in the submodules.
"""

from .config import (
    ConfigBundle,
    ModelConfig,
    SamplerConfig,
    TrainConfig,
    compute_bpp,
    validate_config,
)
from .estimators import DiffusionTokenizer, MaskedTokenGenerator

__version__ = "0.1.0"

__all__ = [
    "ConfigBundle",
    "DiffusionTokenizer",
    "MaskedTokenGenerator",
    "ModelConfig",
    "SamplerConfig",
    "TrainConfig",
    "compute_bpp",
    "validate_config",
    "__version__",
]
