from dataclasses import replace

import numpy as np
import pytest

from fllsim.core.encoder import (
    LayeredEncoder,
    block_param_count,
    forward,
    head_param_count,
    init_encoder,
    layer_param_counts,
    patchify,
    project,
    set_trainable,
    stem_param_count,
)
from fllsim.core.errors import DimensionError, UsageError
from fllsim.core.objective import contrastive_loss, make_views
from fllsim.core.tensor import Tape, Tensor, backward, check_precision, mul, reduce_sum
from fllsim.io.schema import ENCODER_PROFILES, AugmentConfig, EncoderConfig
from tests.conftest import IDENTITY_AUGMENT, TINY_ENCODER, assert_grad_close, numeric_grad, numeric_grad_at

# ----------------------------------------------------------------------
# INIT AND PARAMETER COUNTS
# ----------------------------------------------------------------------
def test_init_is_deterministic(tiny_cfg):
    a, b = init_encoder(tiny_cfg, 5), init_encoder(tiny_cfg, 5)
    for pid, t in a.parameters().items():
        assert t.data.tobytes() == b.parameters()[pid].data.tobytes()


def test_init_depends_on_seed(tiny_cfg):
    a, b = init_encoder(tiny_cfg, 5), init_encoder(tiny_cfg, 6)
    pid = (1, "attn.qkv.weight")
    assert not np.array_equal(a.parameters()[pid].data, b.parameters()[pid].data)


def test_init_distribution(tiny_encoder):
    params = tiny_encoder.parameters()
    weight = params[(1, "mlp.fc1.weight")].data
    assert np.abs(weight).max() <= 2 * 0.02 + 1e-7
    assert not params[(0, "stem.pos_embed")].data.any()
    assert not params[(2, "attn.qkv.bias")].data.any()
    np.testing.assert_array_equal(params[(3, "mlp.norm.gamma")].data, 1.0)


def test_zero_blocks_rejected():
    with pytest.raises(ValueError, match="num_blocks"):
        init_encoder(replace(TINY_ENCODER, num_blocks=0), 0)


def test_vit_stem_param_count():
    cfg = ENCODER_PROFILES["vit-ti16"]
    assert stem_param_count(cfg) == 16 * 16 * 3 * 192 + 192 + (1 + (32 // 16) ** 2) * 192


@pytest.mark.parametrize("cfg", [
    TINY_ENCODER,
    ENCODER_PROFILES["desk"],
    EncoderConfig(image_size=12, patch_size=4, width=6, heads=3, mlp_ratio=1.5, num_blocks=2, head_dim_out=5),
    EncoderConfig(image_size=16, patch_size=8, width=12, heads=4, mlp_ratio=3.0, num_blocks=4, head_dim_out=2, channels=1),
    EncoderConfig(image_size=6, patch_size=2, width=4, heads=1, mlp_ratio=0.5, num_blocks=1, head_dim_out=3),
])
def test_param_counts_match_registry(cfg):
    enc = init_encoder(cfg, 0)
    counts = layer_param_counts(cfg)
    for layer in range(cfg.num_layers):
        assert sum(t.size for t in enc.layer_parameters(layer).values()) == counts[layer]
        assert sum(t.size for t in enc.head_parameters(layer).values()) == head_param_count(cfg)
    assert counts[1] == block_param_count(cfg)


def test_parameter_ids_are_unique_and_layered(tiny_encoder):
    ids = list(tiny_encoder.parameters())
    assert len(ids) == len(set(ids))
    assert {layer for layer, _ in ids} == {0, 1, 2, 3}


# ----------------------------------------------------------------------
# FORWARD
# ----------------------------------------------------------------------
def test_patchify_register_and_order(tiny_cfg):
    images = np.arange(2 * 3 * 8 * 8, dtype=np.float32).reshape(2, 3, 8, 8)
    tokens = patchify(images, tiny_cfg)
    assert tokens.shape == (2, 5, 48)
    assert not tokens[:, 0].any()
    np.testing.assert_array_equal(tokens[0, 1, :4], images[0, 0, 0, :4])
    np.testing.assert_array_equal(tokens[0, 2, :4], images[0, 0, 0, 4:8])


def test_patchify_rejects_wrong_shape(tiny_cfg):
    with pytest.raises(DimensionError):
        patchify(np.zeros((2, 3, 9, 9)), tiny_cfg)


@pytest.mark.parametrize("tap", [0, 1, 2, 3])
def test_representation_shape(tiny_encoder, tiny_images, tap):
    rep = forward(tiny_encoder, tiny_images, (0, 1, 2, 3), tap)
    assert rep.shape == (4, 8)


def test_tap_not_kept_is_usage_error(tiny_encoder, tiny_images):
    with pytest.raises(UsageError):
        forward(tiny_encoder, tiny_images, (0, 1), 2)


def test_kept_without_stem_rejected(tiny_encoder, tiny_images):
    with pytest.raises(ValueError, match="stem"):
        forward(tiny_encoder, tiny_images, (1, 2), 2)


def test_zeroed_residual_branch_is_identity(tiny_encoder, tiny_images):
    enc = tiny_encoder.copy()
    for name in ("attn.out.weight", "attn.out.bias", "mlp.fc2.weight", "mlp.fc2.bias"):
        enc.layers[2][name].data[...] = 0.0
    with_block = forward(enc, tiny_images, (0, 2), 2)
    stem_only = forward(enc, tiny_images, (0,), 0)
    np.testing.assert_array_equal(with_block.data, stem_only.data)


def test_dropped_blocks_match_recomposed_encoder(tiny_images):
    cfg = replace(TINY_ENCODER, num_blocks=5)
    enc = init_encoder(cfg, 11)
    small = enc.compose([1, 3, 5])
    assert small.num_blocks == 3
    dropped = forward(enc, tiny_images, (0, 1, 3, 5), 5)
    composed = forward(small, tiny_images, (0, 1, 2, 3), 3)
    np.testing.assert_array_equal(dropped.data, composed.data)


def test_restricted_snapshot_forward(tiny_encoder, tiny_images):
    snapshot = tiny_encoder.restrict((0, 2), head_layers=[2])
    assert not snapshot.has_layer(1)
    full = forward(tiny_encoder, tiny_images, (0, 2), 2)
    np.testing.assert_array_equal(forward(snapshot, tiny_images, (0, 2), 2).data, full.data)
    with pytest.raises(UsageError):
        forward(snapshot, tiny_images, (0, 1, 2), 2)


# ----------------------------------------------------------------------
# PROJECTION HEAD
# ----------------------------------------------------------------------
def test_projection_rows_are_unit_norm(tiny_encoder, tiny_images):
    z = project(tiny_encoder, 1, forward(tiny_encoder, tiny_images, (0, 1), 1))
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-5)


def test_projection_of_zero_rep_is_defined(tiny_encoder):
    enc = tiny_encoder.copy()
    for t in enc.heads[0].values():
        t.data[...] = 0.0
    z = project(enc, 0, Tensor(np.zeros((2, 8))))
    assert np.all(np.isfinite(z.data))
    assert not z.data.any()


def test_missing_head_is_usage_error(tiny_encoder, tiny_images):
    snapshot = tiny_encoder.restrict((0, 1), head_layers=[])
    with pytest.raises(UsageError):
        project(snapshot, 1, forward(snapshot, tiny_images, (0, 1), 1))


def test_projection_gradient():
    rng = np.random.default_rng(0)
    with check_precision():
        enc = init_encoder(TINY_ENCODER, 1)
        set_trainable(enc, 1)
        rep = rng.uniform(-1, 1, (3, 8))
        probe = rng.uniform(-1, 1, (3, 4))
        weight = enc.heads[1]["head.fc1.weight"]

        def value():
            return float((project(enc, 1, Tensor(rep)).data * probe).sum())

        with Tape() as tape:
            grads = backward(reduce_sum(mul(project(enc, 1, Tensor(rep)), Tensor(probe))), tape)
        assert_grad_close(grads[(1, "head.fc1.weight")], numeric_grad(value, weight.data))


COMPOSED_PARAMS = [
    (0, "stem.proj.weight"),
    (0, "stem.pos_embed"),
    (1, "attn.qkv.weight"),
    (1, "attn.norm.gamma"),
    (2, "attn.out.weight"),
    (2, "mlp.fc1.weight"),
    (3, "mlp.fc2.bias"),
    (3, "mlp.norm.beta"),
    (3, "head.fc2.weight"),
]


@pytest.mark.parametrize("seed", range(20))
def test_encoder_contrastive_gradient(seed):
    """Stem, blocks and head all trainable, loss through attention and NT-Xent."""
    rng = np.random.default_rng(seed)
    kept = tuple(range(TINY_ENCODER.num_layers))
    tap = TINY_ENCODER.num_blocks
    with check_precision():
        enc = init_encoder(TINY_ENCODER, seed)
        # larger weights so attention is far from uniform
        for t in enc.parameters().values():
            t.data = t.data + rng.normal(0.0, 0.3, t.shape)
        set_trainable(enc, kept)
        images = rng.uniform(0.0, 1.0, (3, 3, 8, 8))
        batch = make_views(images, AugmentConfig(crop_scale_min=0.5, flip_prob=0.5, noise_std=0.05), rng)
        params = enc.parameters()

        def value():
            return contrastive_loss(enc, batch, kept, tap, 0.5).item()

        with Tape() as tape:
            grads = backward(contrastive_loss(enc, batch, kept, tap, 0.5), tape)

        for pid in COMPOSED_PARAMS:
            data = params[pid].data
            flat = rng.choice(data.size, size=min(6, data.size), replace=False)
            indices = [np.unravel_index(i, data.shape) for i in flat]
            expected = numeric_grad_at(value, data, indices)
            assert_grad_close(np.array([grads[pid][idx] for idx in indices]), expected)


# ----------------------------------------------------------------------
# TRAINABLE SET
# ----------------------------------------------------------------------
def test_active_stem_trains_stem_and_head_zero(tiny_encoder):
    set_trainable(tiny_encoder, 0)
    layers = {layer for layer, _ in tiny_encoder.trainable_parameters()}
    names = {name for _, name in tiny_encoder.trainable_parameters()}
    assert layers == {0}
    assert names == set(tiny_encoder.layers[0]) | set(tiny_encoder.heads[0])


def test_gradient_keys_are_active_layer_and_head(tiny_encoder, tiny_images):
    set_trainable(tiny_encoder, 2)
    batch = make_views(tiny_images, IDENTITY_AUGMENT, np.random.default_rng(0))
    with Tape() as tape:
        grads = backward(contrastive_loss(tiny_encoder, batch, (0, 1, 2), 2, 0.5), tape)
    expected = set(tiny_encoder.layer_parameters(2)) | set(tiny_encoder.head_parameters(2))
    assert set(grads) == expected


def test_toggling_active_layer_keeps_values(tiny_encoder):
    before = {pid: t.data.copy() for pid, t in tiny_encoder.parameters().items()}
    set_trainable(tiny_encoder, 3)
    assert {layer for layer, _ in tiny_encoder.trainable_parameters()} == {3}
    set_trainable(tiny_encoder, 2)
    assert {layer for layer, _ in tiny_encoder.trainable_parameters()} == {2}
    for pid, t in tiny_encoder.parameters().items():
        assert t.data.tobytes() == before[pid].tobytes()


def test_active_window_head_follows_deepest_layer(tiny_encoder):
    set_trainable(tiny_encoder, (1, 2))
    heads = {layer for layer, name in tiny_encoder.trainable_parameters() if name.startswith("head.")}
    assert heads == {2}


@pytest.mark.parametrize("layer", [-1, 4])
def test_out_of_range_active_layer(tiny_encoder, layer):
    with pytest.raises(ValueError):
        set_trainable(tiny_encoder, layer)


def test_state_dict_round_trip(tiny_encoder):
    rebuilt = LayeredEncoder.from_state_dict(TINY_ENCODER, tiny_encoder.state_dict())
    assert rebuilt.parameters().keys() == tiny_encoder.parameters().keys()
    for pid, t in tiny_encoder.parameters().items():
        assert rebuilt.parameters()[pid].data.tobytes() == t.data.tobytes()
