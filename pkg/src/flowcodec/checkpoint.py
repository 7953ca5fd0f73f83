"""Versioned binary checkpoint container.

Layout: a fixed header (magic, format version, stage tag, step, config
fingerprints), a JSON metadata blob, a JSON tensor table (name, tree, dtype,
shape), then the raw little-endian tensor bytes in table order.  Round trips
are bitwise lossless.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import (
    CheckpointVersionError,
    CorruptCheckpointError,
    FingerprintMismatchError,
    StageDependencyError,
)

MAGIC = b"FCKP"
FORMAT_VERSION = 1
STAGES = ("1A", "1B", "2")
_HEADER = struct.Struct("<4sH2sQ64s64s")  # magic, version, stage, step, fingerprint, model_fp

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
}
_DTYPES_BACK = {v: k for k, v in _DTYPES.items()}


@dataclass
class CheckpointState:
    """Everything needed to resume or deploy: parameters, EMA, optimizer moments."""

    params: dict[str, Tensor]
    ema: dict[str, Tensor]
    adam_m: dict[str, Tensor]
    adam_v: dict[str, Tensor]
    opt_step: int
    step: int
    stage: str
    fingerprint: str
    model_fingerprint: str
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CorruptCheckpointError(f"unknown stage tag {self.stage!r}")
        for tree in (self.ema, self.adam_m, self.adam_v):
            if set(tree) - set(self.params):
                raise CorruptCheckpointError("auxiliary tree names do not match parameters")
            for name in tree:
                if tree[name].shape != self.params[name].shape:
                    raise CorruptCheckpointError(f"shape mismatch in auxiliary tree at {name!r}")


def _trees(state: CheckpointState) -> dict[str, dict[str, Tensor]]:
    return {"params": state.params, "ema": state.ema, "adam_m": state.adam_m, "adam_v": state.adam_v}


def save_checkpoint(state: CheckpointState, path) -> None:
    """Serialize a checkpoint; the written file round-trips bitwise."""
    stage_bytes = state.stage.encode().ljust(2)
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        stage_bytes,
        state.step,
        state.fingerprint.encode().ljust(64),
        state.model_fingerprint.encode().ljust(64),
    )
    meta = dict(state.meta)
    meta["opt_step"] = state.opt_step
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    table = []
    payloads = []
    for tree_name, tree in _trees(state).items():
        for name in sorted(tree):
            tensor = tree[name].detach().cpu()
            dtype = _DTYPES.get(tensor.dtype)
            if dtype is None:
                raise CorruptCheckpointError(f"unsupported tensor dtype {tensor.dtype} at {name!r}")
            table.append(
                {"name": name, "tree": tree_name, "dtype": dtype, "shape": list(tensor.shape)}
            )
            payloads.append(tensor.numpy().astype(dtype).tobytes())
    table_blob = json.dumps(table).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(table_blob)))
        fh.write(table_blob)
        for payload in payloads:
            fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CorruptCheckpointError(f"checkpoint truncated while reading {what}")
    return blob


def load_checkpoint(path) -> CheckpointState:
    """Read a checkpoint file; version and corruption problems raise named errors."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, _HEADER.size, "header")
        magic, version, stage_bytes, step, fp, model_fp = _HEADER.unpack(header)
        if magic != MAGIC:
            raise CorruptCheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
            )
        meta_len = struct.unpack("<I", _read_exact(fh, 4, "meta length"))[0]
        meta = json.loads(_read_exact(fh, meta_len, "meta"))
        table_len = struct.unpack("<I", _read_exact(fh, 4, "table length"))[0]
        table = json.loads(_read_exact(fh, table_len, "tensor table"))
        trees: dict[str, dict[str, Tensor]] = {"params": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
        for entry in table:
            dtype = entry["dtype"]
            if dtype not in _DTYPES_BACK:
                raise CorruptCheckpointError(f"unknown dtype {dtype!r} in tensor table")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            nbytes = count * np.dtype(dtype).itemsize
            raw = _read_exact(fh, nbytes, f"tensor {entry['name']!r}")
            array = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
            trees[entry["tree"]][entry["name"]] = torch.from_numpy(array)
    opt_step = int(meta.pop("opt_step", 0))
    return CheckpointState(
        params=trees["params"],
        ema=trees["ema"],
        adam_m=trees["adam_m"],
        adam_v=trees["adam_v"],
        opt_step=opt_step,
        step=step,
        stage=stage_bytes.decode().strip(),
        fingerprint=fp.decode().strip(),
        model_fingerprint=model_fp.decode().strip(),
        meta=meta,
    )


def require_compatible(state: CheckpointState, model_fingerprint: str, stages: tuple[str, ...]) -> None:
    """Reject checkpoints from a different model config or wrong stage."""
    if state.model_fingerprint != model_fingerprint:
        raise FingerprintMismatchError(
            "checkpoint was trained under a different model configuration "
            f"({state.model_fingerprint[:12]}... vs {model_fingerprint[:12]}...)"
        )
    if state.stage not in stages:
        raise StageDependencyError(
            f"checkpoint stage {state.stage!r} not usable here (need one of {stages})"
        )
