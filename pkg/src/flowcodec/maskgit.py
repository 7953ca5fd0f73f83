"""Masked-token generative model over the tokenizer's factorized ids.

A small bidirectional transformer learns to predict masked token ids; sampling
starts from an all-masked sequence and commits the most confident predictions
step by step, following the cosine unmasking schedule.  Class conditioning is
optional and enables logit-space guidance.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import CheckpointState
from .config import ConfigBundle
from .data import ImageSet
from .errors import DataError
from .model import Autoencoder
from .quantizer import load_tokens, pack_tokens, save_tokens
from .training import AdamState, TrainReport, adam_step, clone_tree, encode_quantized, params_of


@dataclass
class TokenDataset:
    """Token-id sequences per image with optional class labels."""

    ids: Tensor  # [N, L] int64 in [0, 2**group_bits)
    seq_len: int
    token_bits: int
    group_bits: int
    labels: Tensor | None = None

    def __post_init__(self):
        if self.ids.ndim != 2:
            raise DataError(f"ids must be [N, L], got {tuple(self.ids.shape)}")
        vocab = 2**self.group_bits
        if self.ids.numel() and (self.ids.min() < 0 or self.ids.max() >= vocab):
            raise DataError(f"token id out of range [0, {vocab})")
        if self.labels is not None and self.labels.shape[0] != self.ids.shape[0]:
            raise DataError("labels length does not match sequence count")

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def positions(self) -> int:
        return self.ids.shape[1]

    @property
    def vocab_size(self) -> int:
        return 2**self.group_bits

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None else 0

    def save(self, path) -> None:
        save_tokens(path, self.ids, self.seq_len, self.token_bits, self.group_bits)
        if self.labels is not None:
            with open(str(path) + ".labels", "w", encoding="utf-8") as fh:
                fh.writelines(f"{int(label)}\n" for label in self.labels)

    @staticmethod
    def load(path) -> "TokenDataset":
        ids, seq_len, token_bits, group_bits = load_tokens(path)
        labels = None
        label_path = str(path) + ".labels"
        if os.path.exists(label_path):
            with open(label_path, "r", encoding="utf-8") as fh:
                labels = torch.tensor([int(line) for line in fh if line.strip()], dtype=torch.int64)
        return TokenDataset(
            ids=ids, seq_len=seq_len, token_bits=token_bits, group_bits=group_bits, labels=labels
        )


def tokenize_dataset(model: Autoencoder, dataset: ImageSet, batch_size: int = 32) -> TokenDataset:
    """Encode, binarize, and pack a whole image set into token ids."""
    cfg = model.config
    if cfg.quantizer_kind != "lfq":
        raise DataError("token packing requires the sign (lfq) quantizer")
    if dataset.resolution != cfg.image_resolution:
        raise DataError(
            f"dataset resolution {dataset.resolution} != model resolution {cfg.image_resolution}"
        )
    dtype = next(model.parameters()).dtype
    chunks = []
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size].to(dtype)
        chunks.append(pack_tokens(encode_quantized(model, x), cfg.entropy_group_bits))
    return TokenDataset(
        ids=torch.cat(chunks, dim=0),
        seq_len=cfg.latent_seq_len,
        token_bits=cfg.token_bits,
        group_bits=cfg.entropy_group_bits,
        labels=dataset.labels,
    )


def mask_fraction(progress: float) -> float:
    """Cosine unmasking schedule: 1 at the start, 0 at the end, non-increasing."""
    if not 0.0 <= progress <= 1.0:
        raise DataError(f"progress must lie in [0, 1], got {progress}")
    return math.cos(math.pi * progress / 2)


def masked_cross_entropy(logits: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    """Cross-entropy over masked positions only; unmasked positions contribute nothing."""
    if not mask.any():
        raise DataError("at least one position must be masked")
    return F.cross_entropy(logits[mask], targets[mask])


def guided_logits(cond: Tensor, uncond: Tensor, weight: float) -> Tensor:
    """Shift logits by the conditional/unconditional difference: u + w*(c - u)."""
    if cond.shape != uncond.shape:
        raise DataError("conditional and unconditional logits must share one shape")
    return uncond + weight * (cond - uncond)


class MaskedTokenTransformer(nn.Module):
    """Bidirectional transformer over token-id embeddings with a MASK id.

    The vocabulary is 2**group_bits real ids plus one reserved MASK id; an
    optional class token is prepended (index num_classes is the null class
    used for guidance and label dropout).
    """

    def __init__(
        self,
        vocab_size: int,
        positions: int,
        width: int = 128,
        depth: int = 4,
        num_heads: int = 4,
        num_classes: int = 0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.positions = positions
        self.num_classes = num_classes
        self.mask_id = vocab_size
        self.token_embed = nn.Embedding(vocab_size + 1, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, positions, width))
        self.class_embed = nn.Embedding(num_classes + 1, width) if num_classes else None
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=num_heads,
            dim_feedforward=4 * width,
            batch_first=True,
            norm_first=True,
            dropout=0.0,
            activation="gelu",
        )
        self.blocks = nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, vocab_size)

    def forward(self, ids: Tensor, labels: Tensor | None = None) -> Tensor:
        if ids.ndim != 2 or ids.shape[1] != self.positions:
            raise DataError(f"expected ids [B, {self.positions}], got {tuple(ids.shape)}")
        if ids.max() > self.mask_id or ids.min() < 0:
            raise DataError(f"token id out of range [0, {self.mask_id}]")
        h = self.token_embed(ids) + self.pos_embed
        if self.class_embed is not None:
            if labels is None:
                labels = torch.full((ids.shape[0],), self.num_classes, dtype=torch.int64)
            h = torch.cat([self.class_embed(labels)[:, None, :], h], dim=1)
        h = self.norm(self.blocks(h))
        if self.class_embed is not None:
            h = h[:, 1:]
        return self.head(h)


def _init_maskgit(model: MaskedTokenTransformer, generator: torch.Generator) -> None:
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.ndim >= 2:
                param.normal_(0.0, param.shape[-1] ** -0.5, generator=generator)
            elif name.endswith("bias"):
                param.zero_()  # layer-norm weights keep their default of 1
        model.pos_embed.normal_(0.0, 0.02, generator=generator)


def train_maskgit(
    dataset: TokenDataset,
    bundle: ConfigBundle,
    *,
    seed: int = 0,
    steps: int = 500,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    width: int = 128,
    depth: int = 4,
    class_conditional: bool | None = None,
    label_dropout: float = 0.1,
) -> tuple[CheckpointState, TrainReport]:
    """Train the masked-token predictor with cross-entropy at masked positions."""
    if len(dataset) < 1:
        raise DataError("token dataset is empty")
    if class_conditional is None:
        class_conditional = dataset.labels is not None
    if class_conditional and dataset.labels is None:
        raise DataError("class-conditional training needs labels")
    generator = torch.Generator().manual_seed(seed)
    num_classes = dataset.num_classes if class_conditional else 0
    model = MaskedTokenTransformer(
        vocab_size=dataset.vocab_size,
        positions=dataset.positions,
        width=width,
        depth=depth,
        num_heads=max(1, width // 32),
        num_classes=num_classes,
    )
    _init_maskgit(model, generator)
    params = params_of(model)
    adam = AdamState.like(params)
    report = TrainReport()
    length = dataset.positions
    for step in range(steps):
        idx = torch.randint(0, len(dataset), (batch_size,), generator=generator)
        ids = dataset.ids[idx]
        labels = None
        if class_conditional:
            labels = dataset.labels[idx].clone()
            drop = torch.rand(batch_size, generator=generator) < label_dropout
            labels[drop] = num_classes  # null class
        progress = torch.rand(batch_size, generator=generator)
        n_masked = (
            (torch.cos(math.pi * progress / 2) * length).round().clamp(min=1, max=length).long()
        )
        scores = torch.rand(batch_size, length, generator=generator)
        order = scores.argsort(dim=1)
        mask = torch.zeros(batch_size, length, dtype=torch.bool)
        for row in range(batch_size):
            mask[row, order[row, : n_masked[row]]] = True
        inputs = ids.masked_fill(mask, model.mask_id)
        logits = model(inputs, labels)
        loss = masked_cross_entropy(logits, ids, mask)
        model.zero_grad(set_to_none=True)
        loss.backward()
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        adam_step(params, grads, adam, lr=learning_rate)
        ce = float(loss.detach())
        report.steps.append({"step": step, "masked_ce": ce, "total": ce})
    meta = {
        "kind": "maskgit",
        "width": width,
        "depth": depth,
        "num_classes": num_classes,
        "vocab_size": dataset.vocab_size,
        "positions": dataset.positions,
        "seq_len": dataset.seq_len,
        "token_bits": dataset.token_bits,
        "group_bits": dataset.group_bits,
    }
    state = CheckpointState(
        params=clone_tree(params),
        ema=clone_tree(params),
        adam_m=clone_tree(adam.m),
        adam_v=clone_tree(adam.v),
        opt_step=adam.step,
        step=steps,
        stage="2",
        fingerprint=bundle.fingerprint,
        model_fingerprint=bundle.model_fingerprint,
        meta=meta,
    )
    return state, report


def rebuild_maskgit(state: CheckpointState) -> MaskedTokenTransformer:
    if state.meta.get("kind") != "maskgit":
        raise DataError("checkpoint does not hold a masked-token generator")
    model = MaskedTokenTransformer(
        vocab_size=int(state.meta["vocab_size"]),
        positions=int(state.meta["positions"]),
        width=int(state.meta["width"]),
        depth=int(state.meta["depth"]),
        num_heads=max(1, int(state.meta["width"]) // 32),
        num_classes=int(state.meta["num_classes"]),
    )
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(state.params[name])
    return model


def sample_maskgit(
    model: MaskedTokenTransformer,
    *,
    num_samples: int = 1,
    steps: int = 64,
    temperature: float = 1.0,
    guidance_weight: float = 1.0,
    class_id: int | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Iterative confidence-ordered unmasking; returns ids with no MASK left.

    Softmax temperature anneals linearly from ``temperature`` down to zero
    (greedy) across steps.  With class conditioning and a guidance weight
    other than 1, logits are shifted by the conditional/unconditional logit
    difference.
    """
    if steps < 1:
        raise DataError(f"steps must be >= 1, got {steps}")
    generator = generator or torch.Generator().manual_seed(0)
    length = model.positions
    ids = torch.full((num_samples, length), model.mask_id, dtype=torch.int64)
    labels = None
    null_labels = None
    if model.class_embed is not None:
        cls = model.num_classes if class_id is None else int(class_id)
        if not 0 <= cls <= model.num_classes:
            raise DataError(f"class id {cls} out of range [0, {model.num_classes}]")
        labels = torch.full((num_samples,), cls, dtype=torch.int64)
        null_labels = torch.full((num_samples,), model.num_classes, dtype=torch.int64)
    guided = (
        model.class_embed is not None
        and guidance_weight != 1.0
        and class_id is not None
    )
    with torch.no_grad():
        for k in range(1, steps + 1):
            progress = k / steps
            target_unmasked = length - int(mask_fraction(progress) * length)
            masked = ids == model.mask_id
            if not masked.any():
                break
            logits = model(ids, labels)
            if guided:
                logits = guided_logits(logits, model(ids, null_labels), guidance_weight)
            tau = temperature * (1.0 - k / steps)
            if tau > 1e-8:
                gumbel = -torch.log(
                    -torch.log(torch.rand(logits.shape, generator=generator).clamp_min(1e-20))
                )
                choices = (logits / tau + gumbel).argmax(dim=-1)
            else:
                choices = logits.argmax(dim=-1)
            confidence = torch.log_softmax(logits, dim=-1).gather(-1, choices[:, :, None])[:, :, 0]
            for row in range(num_samples):
                remaining = int(masked[row].sum())
                budget = target_unmasked - (length - remaining)
                if k == steps:
                    budget = remaining  # commit everything on the last step
                if budget <= 0:
                    continue
                candidate_conf = confidence[row].masked_fill(~masked[row], -math.inf)
                top = candidate_conf.topk(min(budget, remaining)).indices
                ids[row, top] = choices[row, top]
    if (ids == model.mask_id).any():
        raise DataError("sampling finished with MASK tokens left")
    return ids
