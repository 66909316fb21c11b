"""
Configuration and persistence contracts for FLLSim.

These frozen dataclasses are the data contracts shared by the readers, the
simulator core and the CLI. Field names are also the exact keys accepted in
experiment config files.

Validation rules live in io/validators.py.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the layered transformer encoder."""

    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    heads: int = 2
    mlp_ratio: float = 4.0
    num_blocks: int = 6
    head_dim_out: int = 32
    channels: int = 3

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        # register token + patches
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    @property
    def head_width(self) -> int:
        return self.width // self.heads

    @property
    def num_layers(self) -> int:
        # stem + blocks
        return self.num_blocks + 1


ENCODER_PROFILES: Dict[str, EncoderConfig] = {
    "desk": EncoderConfig(),
    "vit-ti16": EncoderConfig(
        image_size=32, patch_size=16, width=192, heads=3,
        mlp_ratio=4.0, num_blocks=12, head_dim_out=128,
    ),
}


@dataclass(frozen=True)
class FedConfig:
    """Cross-device federation settings."""

    num_clients: int = 16
    clients_per_round: int = 4
    rounds_per_layer: int = 50
    batch_size: int = 16
    local_steps: int = 4
    client_lr: float = 0.05
    server_lr: float = 1.0
    budget: int = 0  # 0 disables the layer budget
    drop_rate: float = 0.0
    seed: int = 0
    active_window: int = 1


FED_PROFILES: Dict[str, FedConfig] = {
    "desk": FedConfig(),
    "cross-device": FedConfig(
        num_clients=125, clients_per_round=32, rounds_per_layer=4000,
        batch_size=16, local_steps=4, client_lr=1e-3, server_lr=1.0,
    ),
}


@dataclass(frozen=True)
class AugmentConfig:
    """Two-view augmentation strength."""

    crop_scale_min: float = 0.5
    flip_prob: float = 0.5
    noise_std: float = 0.05
    stream: str = "augment"


@dataclass(frozen=True)
class DatasetConfig:
    """Where images come from: a CIFAR-100 binary directory or the synthetic generator."""

    source: str = "synth"  # "synth" | "cifar"
    path: Optional[str] = None
    num_classes: int = 4
    n_train: int = 2000
    n_test: int = 500
    image_size: int = 32
    noise_std: float = 0.15
    max_shift: int = 16  # per-sample circular shift, pixels per axis
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    """Downstream evaluation protocol."""

    layers: Tuple[int, ...] = (1, 3, 6)
    mode: str = "linear"  # "linear" | "finetune"
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 32
    finetune_epochs: int = 10
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one pretrain/eval run needs."""

    name: str = "fllsim"
    mode: str = "layerwise"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    federation: FedConfig = field(default_factory=FedConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    temperature: float = 0.5
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    accounting: str = "full"  # "full" | "cached"
    workers: int = 1
    output_dir: Optional[str] = None


@dataclass(frozen=True)
class Checkpoint:
    """
    Persisted encoder state.

    Attributes
    ----------
    version : int
        Format version; readers reject unknown versions.
    encoder : EncoderConfig
        Echo of the encoder shape the tensors belong to.
    tensors : dict
        Parameter id string ("<layer>/<name>") -> float32 array, in file order.
    cursor_round : int
        Next round to run when resuming.
    cursor_phase : int
        Phase of `cursor_round`.
    experiment : dict or None
        Echo of the experiment config that produced the checkpoint.
    """

    version: int
    encoder: EncoderConfig
    tensors: Dict[str, np.ndarray] = field(repr=False)
    cursor_round: int = 0
    cursor_phase: int = 0
    experiment: Optional[Dict[str, Any]] = field(default=None, repr=False)


CHECKPOINT_MAGIC = b"FLLCKPT\0"
CHECKPOINT_VERSION = 1
