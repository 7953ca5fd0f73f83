"""Typed configuration records, validation, fingerprinting, and bit-rate accounting.

Three records cover the system: :class:`ModelConfig` (architecture and latent
shape), :class:`TrainConfig` (optimization and loss weights), and
:class:`SamplerConfig` (inference-time ODE settings).  ``validate_config``
bundles them, re-checks every invariant, and attaches a content fingerprint
used to tie checkpoints to the configuration that produced them.

Configs can be read from / written to a flat ``key=value`` text format, one
key per line, ``#`` comments allowed.  Keys are the field names below, with an
optional ``model.`` / ``train.`` / ``sampler.`` prefix; unknown keys are
rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .errors import ConfigError

QUANTIZER_KINDS = ("lfq", "fsq")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and latent-capacity settings.

    Defaults are the smallest desk-scale configuration that exercises every
    code path: 32x32 RGB images, 4px patches, width 128, a 16-token latent of
    8 bits each, packed in 4-bit groups.
    """

    image_resolution: int = 32
    channels: int = 3
    patch_size: int = 4
    width: int = 128
    encoder_depth: int = 2
    decoder_depth: int = 4
    latent_seq_len: int = 16
    token_bits: int = 8
    entropy_group_bits: int = 4
    quantizer_kind: str = "lfq"
    fsq_levels: int = 5
    latent_dropout_prob: float = 0.1

    def validate(self) -> "ModelConfig":
        for name in (
            "image_resolution",
            "channels",
            "patch_size",
            "width",
            "encoder_depth",
            "decoder_depth",
            "latent_seq_len",
            "token_bits",
            "entropy_group_bits",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.image_resolution % self.patch_size != 0:
            raise ConfigError(
                f"model.patch_size={self.patch_size} must divide "
                f"model.image_resolution={self.image_resolution}"
            )
        if self.token_bits % self.entropy_group_bits != 0:
            raise ConfigError(
                f"model.token_bits={self.token_bits} must be a multiple of "
                f"model.entropy_group_bits={self.entropy_group_bits}"
            )
        if self.quantizer_kind not in QUANTIZER_KINDS:
            raise ConfigError(
                f"model.quantizer_kind must be one of {QUANTIZER_KINDS}, got {self.quantizer_kind!r}"
            )
        if self.quantizer_kind == "fsq" and (self.fsq_levels < 3 or self.fsq_levels % 2 == 0):
            raise ConfigError(f"model.fsq_levels must be odd and >= 3, got {self.fsq_levels}")
        if not 0.0 <= self.latent_dropout_prob <= 1.0:
            raise ConfigError(
                f"model.latent_dropout_prob must lie in [0, 1], got {self.latent_dropout_prob}"
            )
        return self

    @property
    def num_image_tokens(self) -> int:
        return (self.image_resolution // self.patch_size) ** 2

    @property
    def tokens_per_image(self) -> int:
        """Packed token-id count: one id per entropy group."""
        return self.latent_seq_len * (self.token_bits // self.entropy_group_bits)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings and loss weights for both tokenizer stages."""

    learning_rate: float = 1e-4
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    ema_rate: float = 0.9999
    encoder_freeze_step: int = 5000
    lambda_perc: float = 0.1
    lambda_commit: float = 0.000625
    lambda_ent: float = 0.0025
    lambda_sample: float = 0.01
    uniform_mix_prob: float = 0.1
    stage1b_num_steps: int = 8
    max_steps: int = 6000

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        for name in ("batch_size", "encoder_freeze_step", "stage1b_num_steps", "max_steps"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"train.{name} must be a positive integer, got {value!r}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1), got {value}")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ConfigError(f"train.ema_rate must lie in [0, 1), got {self.ema_rate}")
        for name in ("lambda_perc", "lambda_commit", "lambda_ent", "lambda_sample"):
            value = getattr(self, name)
            if value < 0:
                raise ConfigError(f"train.{name} must be >= 0, got {value}")
        if not 0.0 <= self.uniform_mix_prob <= 1.0:
            raise ConfigError(
                f"train.uniform_mix_prob must lie in [0, 1], got {self.uniform_mix_prob}"
            )
        return self


@dataclass(frozen=True)
class SamplerConfig:
    """Inference-time ODE integration settings.

    Defaults follow the deployment settings: 25 Euler steps on the shifted
    schedule with exponent 4, guidance weight 1.5 inside the flow-time
    interval (0.145, 0.505), unscaled initial noise.
    """

    num_steps: int = 25
    rho: float = 4.0
    guidance_weight: float = 1.5
    guidance_interval: tuple[float, float] = (0.145, 0.505)
    noise_scale: float = 1.0

    def validate(self) -> "SamplerConfig":
        if not isinstance(self.num_steps, int) or self.num_steps < 1:
            raise ConfigError(f"sampler.num_steps must be a positive integer, got {self.num_steps!r}")
        if self.rho < 1.0:
            raise ConfigError(f"sampler.rho must be >= 1, got {self.rho}")
        if self.guidance_weight < 0:
            raise ConfigError(f"sampler.guidance_weight must be >= 0, got {self.guidance_weight}")
        lo, hi = self.guidance_interval
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(
                f"sampler.guidance_interval must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"
            )
        if self.noise_scale <= 0:
            raise ConfigError(f"sampler.noise_scale must be > 0, got {self.noise_scale}")
        return self


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerConfig}


@dataclass(frozen=True)
class ConfigBundle:
    """Validated (model, train, sampler) triple with content fingerprints.

    Immutable after validation; safe to share across workers.  ``fingerprint``
    hashes every field of all three records; ``model_fingerprint`` hashes only
    the model section and is the compatibility key for loading checkpoints
    (sampler and training settings may legitimately differ at inference time).
    """

    model: ModelConfig
    train: TrainConfig
    sampler: SamplerConfig
    fingerprint: str = field(default="", compare=False)
    model_fingerprint: str = field(default="", compare=False)


def _canonical_value(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    if isinstance(value, tuple):
        return "(" + ",".join(_canonical_value(v) for v in value) + ")"
    return repr(value)


def _fingerprint_of(parts: dict[str, object]) -> str:
    text = "\n".join(f"{k}={_canonical_value(v)}" for k, v in sorted(parts.items()))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _section_fields(section: str, cfg) -> dict[str, object]:
    return {f"{section}.{f.name}": getattr(cfg, f.name) for f in fields(cfg)}


def validate_config(
    model: ModelConfig | None = None,
    train: TrainConfig | None = None,
    sampler: SamplerConfig | None = None,
) -> ConfigBundle:
    """Validate all three records and return a fingerprinted bundle.

    Every violated invariant raises :class:`ConfigError` naming the offending
    field.  Identical field values always produce identical fingerprints.
    """
    model = (model or ModelConfig()).validate()
    train = (train or TrainConfig()).validate()
    sampler = (sampler or SamplerConfig()).validate()
    parts: dict[str, object] = {}
    for section, cfg in (("model", model), ("train", train), ("sampler", sampler)):
        parts.update(_section_fields(section, cfg))
    return ConfigBundle(
        model=model,
        train=train,
        sampler=sampler,
        fingerprint=_fingerprint_of(parts),
        model_fingerprint=_fingerprint_of(_section_fields("model", model)),
    )


def compute_bpp(latent_seq_len: int, vocab_size: int, resolution: int) -> float:
    """Bits per pixel of a tokenizer latent: S * log2(V) / resolution**2.

    ``vocab_size`` must be a power of two; log2 is then computed exactly on
    the integer exponent so the result is exact in double precision.
    """
    for name, value in (
        ("latent_seq_len", latent_seq_len),
        ("vocab_size", vocab_size),
        ("resolution", resolution),
    ):
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    if vocab_size & (vocab_size - 1) != 0:
        raise ConfigError(f"vocab_size must be a power of two, got {vocab_size}")
    bits = vocab_size.bit_length() - 1
    return latent_seq_len * bits / float(resolution**2)


def bundle_bpp(bundle: ConfigBundle) -> float:
    """BPP of a bundle under the implicit LFQ vocabulary V = 2**token_bits."""
    m = bundle.model
    return compute_bpp(m.latent_seq_len, 2**m.token_bits, m.image_resolution)


def _coerce(section: str, name: str, ftype, raw: str):
    raw = raw.strip()
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is str:
            return raw
        # the only tuple field is guidance_interval: "lo,hi"
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(parts) != 2:
            raise ValueError("expected two comma-separated values")
        return (float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{name}: {raw!r} ({exc})") from exc


def _field_index() -> dict[str, list[tuple[str, str, type]]]:
    index: dict[str, list[tuple[str, str, type]]] = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            ftype = {"int": int, "float": float, "str": str}.get(f.type.split("[")[0], tuple)
            index.setdefault(f.name, []).append((section, f.name, ftype))
    return index


def parse_config_text(text: str, base: ConfigBundle | None = None) -> ConfigBundle:
    """Parse flat ``key=value`` config text into a validated bundle.

    Unknown keys are rejected.  Bare field names are accepted because every
    field name is unique across the three sections; ``section.field`` works
    too and is what override flags use.
    """
    index = _field_index()
    values: dict[str, dict[str, object]] = {"model": {}, "train": {}, "sampler": {}}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r} in key {key!r}")
            matches = [m for m in index.get(name, []) if m[0] == section]
        else:
            matches = index.get(key, [])
            name = key
        if not matches:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        section, name, ftype = matches[0]
        values[section][name] = _coerce(section, name, ftype, raw)

    base = base or validate_config()
    return validate_config(
        model=dataclasses.replace(base.model, **values["model"]),
        train=dataclasses.replace(base.train, **values["train"]),
        sampler=dataclasses.replace(base.sampler, **values["sampler"]),
    )


def load_config_file(path, base: ConfigBundle | None = None) -> ConfigBundle:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


def config_to_text(bundle: ConfigBundle) -> str:
    """Serialize a bundle to the flat key=value format (round-trips exactly)."""
    lines = []
    for section, cfg in (("model", bundle.model), ("train", bundle.train), ("sampler", bundle.sampler)):
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(float(v)) for v in value)
            lines.append(f"{section}.{f.name}={value}")
    return "\n".join(lines) + "\n"


def apply_overrides(bundle: ConfigBundle, overrides: list[str]) -> ConfigBundle:
    """Apply ``key=value`` override strings (the CLI ``--set`` grammar)."""
    return parse_config_text("\n".join(overrides), base=bundle)
