import numpy as np
import pytest

from fllsim.core.encoder import init_encoder
from fllsim.io.schema import (
    AugmentConfig,
    DatasetConfig,
    EncoderConfig,
    EvalConfig,
    ExperimentConfig,
    FedConfig,
)
from fllsim.utils.data_generator import synth_dataset

# ----------------------------------------------------------------------
# TINY CONFIGS
# ----------------------------------------------------------------------
TINY_ENCODER = EncoderConfig(
    image_size=8, patch_size=4, width=8, heads=2,
    mlp_ratio=2.0, num_blocks=3, head_dim_out=4, channels=3,
)

TINY_FED = FedConfig(
    num_clients=4, clients_per_round=2, rounds_per_layer=2,
    batch_size=4, local_steps=1, client_lr=0.05, server_lr=1.0, seed=7,
)

TINY_EXPERIMENT = ExperimentConfig(
    name="tiny",
    mode="layerwise",
    encoder=TINY_ENCODER,
    federation=TINY_FED,
    dataset=DatasetConfig(num_classes=2, n_train=32, n_test=16, image_size=8, seed=3),
    evaluation=EvalConfig(layers=(1, 3), epochs=5, batch_size=8, finetune_epochs=1),
)

IDENTITY_AUGMENT = AugmentConfig(crop_scale_min=1.0, flip_prob=0.0, noise_std=0.0)


@pytest.fixture
def tiny_cfg():
    return TINY_ENCODER


@pytest.fixture
def tiny_encoder():
    return init_encoder(TINY_ENCODER, seed=0)


@pytest.fixture
def tiny_experiment():
    return TINY_EXPERIMENT


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(0)
    return rng.uniform(0.0, 1.0, size=(4, 3, 8, 8)).astype(np.float32)


@pytest.fixture
def tiny_train():
    return synth_dataset(2, 32, 8, 8, seed=3, split="train")


@pytest.fixture
def tiny_test():
    return synth_dataset(2, 16, 8, 8, seed=3, split="test")


# ----------------------------------------------------------------------
# FINITE DIFFERENCES
# ----------------------------------------------------------------------
def numeric_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar f() with respect to array x (modified in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def numeric_grad_at(f, x: np.ndarray, indices, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar f() at the given multi-indices of x only."""
    values = []
    for idx in indices:
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        values.append((plus - minus) / (2 * eps))
    return np.asarray(values, dtype=np.float64)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray) -> None:
    """Relative error < 1e-3, with an absolute floor of 1e-4 for tiny gradients."""
    np.testing.assert_allclose(np.asarray(analytic, dtype=np.float64), numeric, rtol=1e-3, atol=1e-4)
