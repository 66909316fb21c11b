"""
Validation utilities for FLLSim configuration schemas.

Each validator checks one config section against the invariants the
simulator relies on and raises ValueError naming the offending field.
Cross-section rules (budget vs depth, eval layers vs depth, dataset image
size vs encoder) are enforced by validate_experiment_config.
"""

from pathlib import Path

from fllsim.io.schema import (
    AugmentConfig,
    DatasetConfig,
    EncoderConfig,
    EvalConfig,
    ExperimentConfig,
    FedConfig,
)
from fllsim.utils import setup_logger

TRAINING_MODE_NAMES = ("layerwise", "layerwise-dropout", "end2end")
EVAL_MODES = ("linear", "finetune")
ACCOUNTING_MODES = ("full", "cached")
DATASET_SOURCES = ("synth", "cifar")


logger = setup_logger(__name__)


def _fail(message: str) -> None:
    logger.error(message)
    raise ValueError(message)


def _require(condition: bool, message: str) -> None:
    if not condition:
        _fail(message)


# Section validation

def validate_encoder_config(cfg: EncoderConfig) -> None:
    for name in ("image_size", "patch_size", "width", "heads", "num_blocks", "head_dim_out", "channels"):
        value = getattr(cfg, name)
        _require(
            isinstance(value, int) and value >= 1,
            f"encoder.{name} must be a positive integer (got {value!r})",
        )
    _require(
        cfg.image_size % cfg.patch_size == 0,
        f"encoder.image_size ({cfg.image_size}) must be divisible by encoder.patch_size ({cfg.patch_size})",
    )
    _require(
        cfg.width % cfg.heads == 0,
        f"encoder.width ({cfg.width}) must be divisible by encoder.heads ({cfg.heads})",
    )
    _require(cfg.mlp_ratio > 0, f"encoder.mlp_ratio must be > 0 (got {cfg.mlp_ratio})")
    _require(cfg.mlp_hidden >= 1, "encoder.mlp_ratio yields an empty MLP hidden layer")


def validate_fed_config(cfg: FedConfig, num_blocks: int) -> None:
    for name in ("num_clients", "clients_per_round", "rounds_per_layer", "batch_size", "active_window"):
        value = getattr(cfg, name)
        _require(
            isinstance(value, int) and value >= 1,
            f"federation.{name} must be an integer >= 1 (got {value!r})",
        )
    _require(
        cfg.batch_size >= 2,
        f"federation.batch_size must be >= 2 so each view has a negative (got {cfg.batch_size})",
    )
    _require(
        cfg.clients_per_round <= cfg.num_clients,
        f"federation.clients_per_round ({cfg.clients_per_round}) cannot exceed "
        f"federation.num_clients ({cfg.num_clients})",
    )
    _require(
        isinstance(cfg.local_steps, int) and cfg.local_steps >= 0,
        f"federation.local_steps must be an integer >= 0 (got {cfg.local_steps!r})",
    )
    _require(cfg.client_lr >= 0, f"federation.client_lr must be >= 0 (got {cfg.client_lr})")
    _require(cfg.server_lr >= 0, f"federation.server_lr must be >= 0 (got {cfg.server_lr})")
    _require(
        0.0 <= cfg.drop_rate <= 1.0,
        f"federation.drop_rate must be between 0 and 1 (got {cfg.drop_rate})",
    )
    _require(
        cfg.active_window <= num_blocks + 1,
        f"federation.active_window ({cfg.active_window}) exceeds the {num_blocks + 1} encoder layers",
    )

    # Budget must hold the stem plus the active window
    minimum = cfg.active_window + 1
    _require(
        isinstance(cfg.budget, int)
        and (cfg.budget == 0 or minimum <= cfg.budget <= num_blocks + 1),
        f"federation.budget must be 0 or between {minimum} and {num_blocks + 1} "
        f"(got {cfg.budget!r})",
    )


def validate_augment_config(cfg: AugmentConfig) -> None:
    _require(
        0.0 < cfg.crop_scale_min <= 1.0,
        f"augment.crop_scale_min must be in (0, 1] (got {cfg.crop_scale_min})",
    )
    _require(
        0.0 <= cfg.flip_prob <= 1.0,
        f"augment.flip_prob must be between 0 and 1 (got {cfg.flip_prob})",
    )
    _require(cfg.noise_std >= 0.0, f"augment.noise_std must be >= 0 (got {cfg.noise_std})")
    _require(bool(cfg.stream), "augment.stream cannot be empty")


def validate_dataset_config(cfg: DatasetConfig) -> None:
    _require(
        cfg.source in DATASET_SOURCES,
        f"dataset.source must be one of {list(DATASET_SOURCES)} (got {cfg.source!r})",
    )

    if cfg.source == "cifar":
        _require(cfg.path is not None, "dataset.path is required when dataset.source is 'cifar'")
        path = Path(cfg.path)
        for name in ("train.bin", "test.bin"):
            _require((path / name).is_file(), f"dataset.path: file not found: {path / name}")
        return

    _require(cfg.num_classes >= 2, f"dataset.num_classes must be >= 2 (got {cfg.num_classes})")
    _require(
        cfg.n_train >= cfg.num_classes,
        f"dataset.n_train ({cfg.n_train}) must be >= dataset.num_classes ({cfg.num_classes})",
    )
    _require(cfg.n_test >= 1, f"dataset.n_test must be >= 1 (got {cfg.n_test})")
    _require(cfg.image_size >= 1, f"dataset.image_size must be >= 1 (got {cfg.image_size})")
    _require(cfg.noise_std >= 0.0, f"dataset.noise_std must be >= 0 (got {cfg.noise_std})")
    _require(
        isinstance(cfg.max_shift, int) and cfg.max_shift >= 0,
        f"dataset.max_shift must be an integer >= 0 (got {cfg.max_shift!r})",
    )


def validate_eval_config(cfg: EvalConfig, num_blocks: int) -> None:
    _require(cfg.mode in EVAL_MODES, f"evaluation.mode must be one of {list(EVAL_MODES)} (got {cfg.mode!r})")
    _require(len(cfg.layers) > 0, "evaluation.layers cannot be empty")
    for layer in cfg.layers:
        _require(
            isinstance(layer, int) and 0 <= layer <= num_blocks,
            f"evaluation.layers: layer {layer!r} outside [0, {num_blocks}]",
        )
    for name in ("epochs", "batch_size", "finetune_epochs"):
        value = getattr(cfg, name)
        _require(
            isinstance(value, int) and value >= 1,
            f"evaluation.{name} must be an integer >= 1 (got {value!r})",
        )
    _require(cfg.lr > 0, f"evaluation.lr must be > 0 (got {cfg.lr})")


# Whole experiment

def validate_experiment_config(cfg: ExperimentConfig) -> None:
    _require(
        cfg.mode in TRAINING_MODE_NAMES,
        f"mode must be one of {list(TRAINING_MODE_NAMES)} (got {cfg.mode!r})",
    )
    _require(
        cfg.accounting in ACCOUNTING_MODES,
        f"accounting must be one of {list(ACCOUNTING_MODES)} (got {cfg.accounting!r})",
    )
    _require(cfg.temperature > 0, f"temperature must be > 0 (got {cfg.temperature})")
    _require(
        isinstance(cfg.workers, int) and cfg.workers >= 1,
        f"workers must be an integer >= 1 (got {cfg.workers!r})",
    )

    validate_encoder_config(cfg.encoder)
    validate_fed_config(cfg.federation, cfg.encoder.num_blocks)
    validate_augment_config(cfg.augment)
    validate_dataset_config(cfg.dataset)
    validate_eval_config(cfg.evaluation, cfg.encoder.num_blocks)

    if cfg.dataset.source == "synth":
        _require(
            cfg.dataset.image_size == cfg.encoder.image_size,
            f"dataset.image_size ({cfg.dataset.image_size}) must equal "
            f"encoder.image_size ({cfg.encoder.image_size})",
        )
    else:
        _require(cfg.encoder.image_size == 32, "encoder.image_size must be 32 for CIFAR-100 inputs")
