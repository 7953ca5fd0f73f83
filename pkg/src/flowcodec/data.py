"""Dataset ingestion, procedural synthetic data, and image grid output.

Images live in [-1, 1] as float tensors of shape [N, C, H, W] throughout the
package; loading maps 8-bit pixels via x / 127.5 - 1 and writing inverts it,
so a write -> load round trip is exact up to 1/255 per channel.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import DataError

SHAPE_CLASSES = (
    "rectangle",
    "circle",
    "ring",
    "horizontal_gradient",
    "vertical_gradient",
    "stripes",
    "checker",
    "cross",
)


@dataclass
class ImageSet:
    """A fixed dataset of [-1, 1] images with source ids and optional labels."""

    images: Tensor
    sources: list[str]
    labels: Tensor | None = None
    class_names: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {tuple(self.images.shape)}")
        if len(self.sources) != self.images.shape[0]:
            raise DataError("sources length does not match image count")
        if self.labels is not None and self.labels.shape[0] != self.images.shape[0]:
            raise DataError("labels length does not match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def content_hash(self) -> str:
        payload = self.images.numpy().astype("<f4").tobytes()
        return hashlib.sha256(payload).hexdigest()[:16]

    def sample_batch(self, batch_size: int, generator: torch.Generator) -> tuple[Tensor, Tensor | None]:
        idx = torch.randint(0, len(self), (batch_size,), generator=generator)
        labels = self.labels[idx] if self.labels is not None else None
        return self.images[idx], labels


def _to_unit_interval(array: np.ndarray) -> np.ndarray:
    return array.astype(np.float64) / 127.5 - 1.0


def load_folder(path, resolution: int, channels: int = 3) -> ImageSet:
    """Load every raster image under ``path`` in lexicographic filename order.

    Each file is center-cropped to a square, resized bilinearly to
    ``resolution``, and mapped to [-1, 1].  Unreadable files are skipped with
    a warning; an empty result is an error.
    """
    import os

    names = sorted(os.listdir(path))
    images, sources = [], []
    for name in names:
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        try:
            with Image.open(full) as img:
                img = img.convert("RGB" if channels == 3 else "L")
                side = min(img.size)
                left = (img.width - side) // 2
                top = (img.height - side) // 2
                img = img.crop((left, top, left + side, top + side))
                img = img.resize((resolution, resolution), Image.BILINEAR)
                array = np.asarray(img, dtype=np.uint8)
        except Exception as exc:  # noqa: BLE001 - any decode failure just skips the file
            warnings.warn(f"skipping unreadable image {full}: {exc}", stacklevel=2)
            continue
        if array.ndim == 2:
            array = array[:, :, None]
        images.append(_to_unit_interval(array).transpose(2, 0, 1))
        sources.append(name)
    if not images:
        raise DataError(f"no readable images found under {path}")
    stacked = torch.from_numpy(np.stack(images)).float()
    return ImageSet(images=stacked, sources=sources)


def _draw_shape(kind: str, resolution: int, rng: np.random.Generator, palette: np.ndarray) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    bg, fg = rng.choice(len(palette), size=2, replace=False)
    canvas = np.broadcast_to(palette[bg][:, None, None], (3, resolution, resolution)).copy()
    color = palette[fg][:, None, None]
    r = resolution
    if kind == "rectangle":
        x0, y0 = rng.integers(0, r // 2, size=2)
        x1 = rng.integers(x0 + r // 4, r)
        y1 = rng.integers(y0 + r // 4, r)
        mask = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    elif kind == "circle":
        cx, cy = rng.integers(r // 4, 3 * r // 4, size=2)
        radius = rng.integers(r // 6, r // 3)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    elif kind == "ring":
        cx, cy = rng.integers(r // 3, 2 * r // 3, size=2)
        outer = rng.integers(r // 4, r // 2)
        inner = max(1, outer - max(2, r // 8))
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        mask = (d2 <= outer**2) & (d2 >= inner**2)
    elif kind == "horizontal_gradient":
        ramp = xx / (r - 1)
        canvas = palette[bg][:, None, None] * (1 - ramp) + palette[fg][:, None, None] * ramp
        mask = np.zeros_like(xx, dtype=bool)
    elif kind == "vertical_gradient":
        ramp = yy / (r - 1)
        canvas = palette[bg][:, None, None] * (1 - ramp) + palette[fg][:, None, None] * ramp
        mask = np.zeros_like(xx, dtype=bool)
    elif kind == "stripes":
        period = int(rng.integers(max(2, r // 8), max(3, r // 3)))
        mask = (xx // period) % 2 == 0
    elif kind == "checker":
        period = int(rng.integers(max(2, r // 8), max(3, r // 4)))
        mask = ((xx // period) + (yy // period)) % 2 == 0
    elif kind == "cross":
        thickness = int(rng.integers(max(1, r // 8), max(2, r // 4)))
        cx, cy = rng.integers(r // 3, 2 * r // 3, size=2)
        mask = (np.abs(xx - cx) < thickness) | (np.abs(yy - cy) < thickness)
    else:
        raise DataError(f"unknown shape class {kind!r}")
    canvas = np.where(mask[None, :, :], color, canvas)
    return canvas


def synthetic_dataset(seed: int, count: int, resolution: int, palette_size: int = 8) -> ImageSet:
    """Procedural shapes dataset: class label = shape type, colors from a palette.

    Deterministic per seed; values in [-1, 1]; classes drawn uniformly.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    if palette_size < 2:
        raise DataError(f"palette_size must be >= 2, got {palette_size}")
    rng = np.random.default_rng(seed)
    hues = np.linspace(0.0, 1.0, palette_size, endpoint=False)
    palette = np.stack([_hsv_to_rgb(h, 0.85, 0.9) for h in hues]) * 2.0 - 1.0
    images = np.empty((count, 3, resolution, resolution), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        cls = int(rng.integers(0, len(SHAPE_CLASSES)))
        labels[i] = cls
        images[i] = _draw_shape(SHAPE_CLASSES[cls], resolution, rng, palette)
    return ImageSet(
        images=torch.from_numpy(images),
        sources=[f"synthetic-{seed}-{i}" for i in range(count)],
        labels=torch.from_numpy(labels),
        class_names=SHAPE_CLASSES,
    )


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float64)


def to_uint8(images: Tensor) -> np.ndarray:
    """Map [-1, 1] float images to 8-bit pixels, the inverse of loading."""
    array = ((images.detach().cpu().numpy() + 1.0) * 127.5).round()
    return np.clip(array, 0, 255).astype(np.uint8)


def write_grid(images: Tensor, path, columns: int) -> None:
    """Tile a [-1, 1] image batch row-major into one 8-bit raster file."""
    if images.ndim != 4 or images.shape[0] < 1:
        raise DataError(f"expected a nonempty [N, C, H, W] batch, got {tuple(images.shape)}")
    if columns < 1:
        raise DataError(f"columns must be >= 1, got {columns}")
    n, c, h, w = images.shape
    columns = min(columns, n)
    rows = math.ceil(n / columns)
    pixels = to_uint8(images)
    grid = np.zeros((rows * h, columns * w, c), dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, columns)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = pixels[i].transpose(1, 2, 0)
    if c == 1:
        Image.fromarray(grid[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(grid, mode="RGB").save(path)
