"""
Synthetic class-conditional image generator for desk-scale runs.

Each class owns a smooth, periodic low-frequency template (a coarse random
grid upsampled with wrap-around linear interpolation), standardized so every
class has the same per-channel mean and spread. Samples are the template,
circularly shifted by a random per-sample offset, plus Gaussian pixel noise,
clipped to [0, 1]. Classes then differ only in their local color patterns,
not in where those sit or in their average color. Templates depend only on
the seed, so train and test splits drawn from the same seed share classes.
"""

from typing import Tuple

import numpy as np
from scipy.ndimage import zoom

from fllsim.core.datasets import Dataset
from fllsim.io.schema import DatasetConfig
from fllsim.utils.rng import derive_seed

TEMPLATE_GRID = 4
TEMPLATE_MEAN = 0.5
TEMPLATE_STD = 0.2


def class_templates(num_classes: int, height: int, width: int, seed: int, channels: int = 3) -> np.ndarray:
    """[num_classes, C, H, W] smooth periodic templates in [0, 1]."""
    rng = np.random.default_rng(derive_seed(seed, "templates"))
    coarse = rng.uniform(0.0, 1.0, size=(num_classes, channels, TEMPLATE_GRID, TEMPLATE_GRID))
    factors = (1, 1, height / TEMPLATE_GRID, width / TEMPLATE_GRID)
    smooth = zoom(coarse, factors, order=1, mode="grid-wrap", grid_mode=True)[:, :, :height, :width]

    mean = smooth.mean(axis=(2, 3), keepdims=True)
    std = smooth.std(axis=(2, 3), keepdims=True)
    standardized = TEMPLATE_MEAN + TEMPLATE_STD * (smooth - mean) / np.maximum(std, 1e-8)
    return np.clip(standardized, 0.0, 1.0).astype(np.float32)


def synth_dataset(
    num_classes: int,
    n: int,
    height: int,
    width: int,
    seed: int,
    noise_std: float = 0.1,
    split: str = "train",
    channels: int = 3,
    max_shift: int = 0,
) -> Dataset:
    """
    Balanced synthetic dataset of `n` images.

    Parameters
    ----------
    max_shift : int
        Every image is rolled by offsets drawn uniformly from
        [-max_shift, max_shift] along each spatial axis. 0 keeps templates
        in place, so with no noise all images of a class are identical.

    Raises
    ------
    ValueError
        If sizes are invalid or n < num_classes.
    """
    if num_classes < 1 or height < 1 or width < 1 or channels < 1:
        raise ValueError(
            f"invalid synthetic dataset shape: classes={num_classes}, "
            f"size={height}x{width}, channels={channels}"
        )
    if n < num_classes:
        raise ValueError(f"need at least one image per class (n={n}, classes={num_classes})")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0 (got {noise_std})")
    if max_shift < 0:
        raise ValueError(f"max_shift must be >= 0 (got {max_shift})")

    templates = class_templates(num_classes, height, width, seed, channels)
    rng = np.random.default_rng(derive_seed(seed, "samples", split))

    labels = rng.permutation(np.arange(n) % num_classes)
    images = templates[labels]
    if max_shift > 0:
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        images = np.stack([
            np.roll(image, (int(dy), int(dx)), axis=(1, 2)) for image, (dy, dx) in zip(images, shifts)
        ])
    if noise_std > 0:
        images = images + rng.normal(0.0, noise_std, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)

    return Dataset(images=images, labels=labels.astype(np.int64), num_classes=num_classes, name=f"synth-{split}")


def synth_splits(cfg: DatasetConfig, channels: int = 3) -> Tuple[Dataset, Dataset]:
    """Train and test splits sharing class templates."""
    def make(n: int, split: str) -> Dataset:
        return synth_dataset(
            cfg.num_classes, n, cfg.image_size, cfg.image_size,
            cfg.seed, cfg.noise_std, split, channels, cfg.max_shift,
        )

    return make(cfg.n_train, "train"), make(cfg.n_test, "test")
