"""
In-memory image datasets and IID client partitions.

Datasets are immutable once built; client shards hold indices into the
training set rather than copies of the images.
"""

from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np
import pandas as pd

from fllsim.utils import setup_logger

logger = setup_logger(__name__)


@dataclass(frozen=True)
class Dataset:
    """
    Labelled images.

    Attributes
    ----------
    images : np.ndarray
        [n, C, H, W] float32 pixels in [0, 1].
    labels : np.ndarray
        [n] fine class labels in [0, num_classes).
    num_classes : int
        Size of the label space.
    name : str
        Free-form origin tag ("cifar100-train", "synth", ...).
    """

    images: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [n, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"images and labels disagree on n ({len(self.images)} vs {len(self.labels)})"
            )
        if len(self.labels) == 0:
            raise ValueError("a dataset needs at least one example")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def take(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def class_counts(self) -> pd.DataFrame:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return pd.DataFrame({"label": np.arange(self.num_classes), "count": counts})


@dataclass(frozen=True)
class Partition:
    """
    Assignment of training indices to clients.

    Shards are disjoint, cover every index, and differ in size by at most one.
    """

    client_shards: List[np.ndarray]

    @property
    def num_clients(self) -> int:
        return len(self.client_shards)

    def shard(self, client_id: int) -> np.ndarray:
        return self.client_shards[client_id]

    def sizes(self) -> List[int]:
        return [len(s) for s in self.client_shards]

    def to_dataframe(self) -> pd.DataFrame:
        """One row per (client_id, index) pair, shards in client order."""
        return pd.DataFrame({
            "client_id": np.concatenate([
                np.full(len(s), cid, dtype=np.int64) for cid, s in enumerate(self.client_shards)
            ]),
            "index": np.concatenate(self.client_shards).astype(np.int64),
        })


def partition_iid(dataset: Union[Dataset, int], num_clients: int, seed: int) -> Partition:
    """
    Random permutation of the example indices split into num_clients
    near-equal shards. `dataset` may also be a plain example count.
    """
    n = dataset.size if isinstance(dataset, Dataset) else int(dataset)
    if num_clients < 1:
        raise ValueError(f"number of clients must be >= 1 (got {num_clients})")
    if num_clients > n:
        raise ValueError(f"cannot split {n} examples over {num_clients} clients")

    permutation = np.random.default_rng(seed).permutation(n)
    shards = [np.sort(s) for s in np.array_split(permutation, num_clients)]
    logger.debug(f"Partitioned {n} examples over {num_clients} clients (sizes {min(map(len, shards))}-{max(map(len, shards))})")
    return Partition(client_shards=shards)
