"""
Two-view augmentation and the NT-Xent contrastive loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from fllsim.core.encoder import LayeredEncoder, forward, project
from fllsim.core.errors import DimensionError
from fllsim.core.tensor import (
    Tensor,
    add,
    concat,
    matmul,
    scale,
    softmax_cross_entropy,
    transpose,
)
from fllsim.io.schema import AugmentConfig

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ContrastiveBatch:
    """
    Two aligned augmented views of the same source images.

    Row i of `view_a` and `view_b` both derive from image `indices[i]`.
    """

    view_a: np.ndarray
    view_b: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def _augment_one(image: np.ndarray, aug: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    _, height, width = image.shape

    # square random-resized crop, nearest-neighbour resize back
    area_scale = rng.uniform(aug.crop_scale_min, 1.0)
    side = max(1, int(round(np.sqrt(area_scale) * min(height, width))))
    side_h, side_w = min(side, height), min(side, width)
    top = int(rng.integers(0, height - side_h + 1))
    left = int(rng.integers(0, width - side_w + 1))
    rows = top + (np.arange(height) * side_h) // height
    cols = left + (np.arange(width) * side_w) // width
    out = image[:, rows][:, :, cols]

    if rng.random() < aug.flip_prob:
        out = out[:, :, ::-1]

    if aug.noise_std > 0:
        out = out + rng.normal(0.0, aug.noise_std, size=out.shape)

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_views(
    images: np.ndarray,
    aug: AugmentConfig,
    rng: np.random.Generator,
    indices: Optional[Iterable[int]] = None,
) -> ContrastiveBatch:
    """
    Draw two independent augmentations of every image.

    Parameters
    ----------
    images : np.ndarray
        [b, C, H, W] pixels in [0, 1].
    aug : AugmentConfig
        Crop scale range, flip probability and pixel noise.
    rng : np.random.Generator
        Consumed in a fixed order (image by image, view a then view b), so
        the result is a pure function of the generator state.
    indices : iterable of int, optional
        Source indices recorded in the batch; defaults to 0..b-1.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise DimensionError(f"make_views expects [b, C, H, W] images, got {images.shape}")
    if images.shape[0] == 0:
        raise ValueError("make_views: the image batch is empty")

    view_a = np.empty_like(images)
    view_b = np.empty_like(images)
    for i, image in enumerate(images):
        view_a[i] = _augment_one(image, aug, rng)
        view_b[i] = _augment_one(image, aug, rng)

    idx = np.arange(len(images)) if indices is None else np.asarray(list(indices), dtype=np.int64)
    return ContrastiveBatch(view_a=view_a, view_b=view_b, indices=idx)


def nt_xent(z_a: Tensor, z_b: Tensor, temperature: float = 0.5) -> Tensor:
    """
    Normalized temperature-scaled cross entropy over 2b anchors.

    Anchor i's positive is its other view; the remaining 2b - 2 embeddings
    are negatives. Rows are expected to be L2-normalized already, so the dot
    product is the cosine similarity.
    """
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise DimensionError(f"nt_xent: views must be matching [b, k] arrays, got {z_a.shape} and {z_b.shape}")
    b = z_a.shape[0]
    if b < 2:
        raise ValueError(f"nt_xent needs at least 2 pairs to form negatives (got batch size {b})")
    if temperature <= 0:
        raise ValueError(f"nt_xent: temperature must be > 0 (got {temperature})")

    z = concat([z_a, z_b], axis=0)
    logits = scale(matmul(z, transpose(z)), 1.0 / temperature)
    logits = add(logits, Tensor(np.diag(np.full(2 * b, MASK_VALUE))))
    labels = np.concatenate([np.arange(b, 2 * b), np.arange(0, b)])
    return softmax_cross_entropy(logits, labels)


def contrastive_loss(
    enc: LayeredEncoder,
    batch: ContrastiveBatch,
    kept: Iterable[int],
    tap_layer: int,
    temperature: float,
) -> Tensor:
    """NT-Xent of the tap layer's projected views; each view is encoded separately."""
    kept = tuple(kept)
    z_a = project(enc, tap_layer, forward(enc, batch.view_a, kept, tap_layer))
    z_b = project(enc, tap_layer, forward(enc, batch.view_b, kept, tap_layer))
    return nt_xent(z_a, z_b, temperature)
