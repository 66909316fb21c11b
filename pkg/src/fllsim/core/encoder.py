"""
Layered transformer encoder.

Layer 0 is the stem (patch projection + position embedding); layers 1..L
are pre-norm residual transformer blocks. Every layer also owns a projection
head used by the contrastive objective while that layer is being trained.

The forward pass runs over any kept subset of layers: a block that is not
kept contributes the identity map, which keeps shapes fixed and matches the
residual form x + f(x) with f removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.stats import truncnorm

from fllsim.core.errors import DimensionError, UsageError
from fllsim.core.tensor import (
    ParamId,
    Tensor,
    add,
    gelu,
    l2_normalize,
    layernorm,
    matmul,
    mean_tokens,
    reshape,
    scale,
    select,
    softmax,
    transpose,
)
from fllsim.io.schema import EncoderConfig
from fllsim.io.validators import validate_encoder_config

INIT_STD = 0.02

ParamSet = Dict[str, Tensor]


# Parameter counts (closed form)

def stem_param_count(cfg: EncoderConfig) -> int:
    return cfg.patch_dim * cfg.width + cfg.width + cfg.num_tokens * cfg.width


def block_param_count(cfg: EncoderConfig) -> int:
    d, m = cfg.width, cfg.mlp_hidden
    norms = 4 * d
    attention = (3 * d * d + 3 * d) + (d * d + d)
    mlp = (d * m + m) + (m * d + d)
    return norms + attention + mlp


def head_param_count(cfg: EncoderConfig) -> int:
    d, k = cfg.width, cfg.head_dim_out
    return d * d + d + d * k + k


def layer_param_counts(cfg: EncoderConfig) -> List[int]:
    """Parameter count per layer index 0..L (heads excluded)."""
    return [stem_param_count(cfg)] + [block_param_count(cfg)] * cfg.num_blocks


# Encoder container

@dataclass
class LayeredEncoder:
    """
    Parameter sets indexed by layer.

    A slot holding None marks a layer (or head) that is not materialized,
    e.g. in a client snapshot restricted to the kept layers.
    """

    config: EncoderConfig
    layers: List[Optional[ParamSet]]
    heads: List[Optional[ParamSet]]

    def __post_init__(self):
        expected = self.config.num_layers
        if len(self.layers) != expected or len(self.heads) != expected:
            raise ValueError(
                f"encoder expects {expected} layer and head slots, "
                f"got {len(self.layers)} and {len(self.heads)}"
            )

    @property
    def num_blocks(self) -> int:
        return self.config.num_blocks

    def has_layer(self, layer: int) -> bool:
        return 0 <= layer < len(self.layers) and self.layers[layer] is not None

    def layer_parameters(self, layer: int) -> Dict[ParamId, Tensor]:
        params = self.layers[layer] or {}
        return {(layer, name): t for name, t in params.items()}

    def head_parameters(self, layer: int) -> Dict[ParamId, Tensor]:
        params = self.heads[layer] or {}
        return {(layer, name): t for name, t in params.items()}

    def parameters(self) -> Dict[ParamId, Tensor]:
        """All materialized parameters: layers first, then heads."""
        out: Dict[ParamId, Tensor] = {}
        for layer in range(len(self.layers)):
            out.update(self.layer_parameters(layer))
        for layer in range(len(self.heads)):
            out.update(self.head_parameters(layer))
        return out

    def trainable_parameters(self) -> Dict[ParamId, Tensor]:
        return {pid: t for pid, t in self.parameters().items() if t.requires_grad}

    def num_words(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def copy(self) -> "LayeredEncoder":
        return LayeredEncoder(
            config=self.config,
            layers=[_copy_set(p) for p in self.layers],
            heads=[_copy_set(p) for p in self.heads],
        )

    def restrict(self, kept: Iterable[int], head_layers: Iterable[int] = ()) -> "LayeredEncoder":
        """Private copy holding only the kept layers and the listed heads."""
        kept, head_layers = set(kept), set(head_layers)
        return LayeredEncoder(
            config=self.config,
            layers=[_copy_set(p) if i in kept else None for i, p in enumerate(self.layers)],
            heads=[_copy_set(p) if i in head_layers else None for i, p in enumerate(self.heads)],
        )

    def compose(self, blocks: Sequence[int]) -> "LayeredEncoder":
        """
        Smaller encoder made of the stem and the given blocks, in order.

        Parameters are copied; heads follow their blocks.
        """
        blocks = list(blocks)
        for b in blocks:
            if not 1 <= b <= self.num_blocks or self.layers[b] is None:
                raise UsageError(f"compose: block {b} is not available")
        if self.layers[0] is None:
            raise UsageError("compose: the stem is not available")

        order = [0] + blocks
        config = replace(self.config, num_blocks=len(blocks))
        return LayeredEncoder(
            config=config,
            layers=[_copy_set(self.layers[i]) for i in order],
            heads=[_copy_set(self.heads[i]) for i in order],
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"{layer}/{name}": t.data for (layer, name), t in self.parameters().items()}

    @classmethod
    def from_state_dict(cls, config: EncoderConfig, tensors: Dict[str, np.ndarray]) -> "LayeredEncoder":
        layers: List[Optional[ParamSet]] = [None] * config.num_layers
        heads: List[Optional[ParamSet]] = [None] * config.num_layers
        for key, array in tensors.items():
            layer_str, name = key.split("/", 1)
            layer = int(layer_str)
            if not 0 <= layer < config.num_layers:
                raise ValueError(f"tensor {key!r} refers to layer {layer} outside the encoder")
            target = heads if name.startswith("head.") else layers
            if target[layer] is None:
                target[layer] = {}
            target[layer][name] = Tensor(np.array(array, dtype=np.float32), name=(layer, name))
        return cls(config=config, layers=layers, heads=heads)


def _copy_set(params: Optional[ParamSet]) -> Optional[ParamSet]:
    if params is None:
        return None
    return {name: t.copy() for name, t in params.items()}


# Initialization

def _trunc_normal(rng: np.random.Generator, shape) -> np.ndarray:
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=INIT_STD, size=shape, random_state=rng)
    return np.asarray(values, dtype=np.float32)


def _init_stem(cfg: EncoderConfig, rng: np.random.Generator) -> ParamSet:
    d = cfg.width
    return {
        "stem.proj.weight": _trunc_normal(rng, (cfg.patch_dim, d)),
        "stem.proj.bias": np.zeros(d, np.float32),
        "stem.pos_embed": np.zeros((cfg.num_tokens, d), np.float32),
    }


def _init_block(cfg: EncoderConfig, rng: np.random.Generator) -> ParamSet:
    d, m = cfg.width, cfg.mlp_hidden
    return {
        "attn.norm.gamma": np.ones(d, np.float32),
        "attn.norm.beta": np.zeros(d, np.float32),
        "attn.qkv.weight": _trunc_normal(rng, (d, 3 * d)),
        "attn.qkv.bias": np.zeros(3 * d, np.float32),
        "attn.out.weight": _trunc_normal(rng, (d, d)),
        "attn.out.bias": np.zeros(d, np.float32),
        "mlp.norm.gamma": np.ones(d, np.float32),
        "mlp.norm.beta": np.zeros(d, np.float32),
        "mlp.fc1.weight": _trunc_normal(rng, (d, m)),
        "mlp.fc1.bias": np.zeros(m, np.float32),
        "mlp.fc2.weight": _trunc_normal(rng, (m, d)),
        "mlp.fc2.bias": np.zeros(d, np.float32),
    }


def _init_head(cfg: EncoderConfig, rng: np.random.Generator) -> ParamSet:
    d, k = cfg.width, cfg.head_dim_out
    return {
        "head.fc1.weight": _trunc_normal(rng, (d, d)),
        "head.fc1.bias": np.zeros(d, np.float32),
        "head.fc2.weight": _trunc_normal(rng, (d, k)),
        "head.fc2.bias": np.zeros(k, np.float32),
    }


def _wrap(layer: int, arrays: Dict[str, np.ndarray]) -> ParamSet:
    return {name: Tensor(a, name=(layer, name)) for name, a in arrays.items()}


def init_encoder(config: EncoderConfig, seed: int) -> LayeredEncoder:
    """
    Build a freshly initialized encoder.

    Weights are drawn from a normal with std 0.02 truncated at two standard
    deviations; biases and the position embedding start at zero and layer
    norms at identity. The result is a pure function of (config, seed).
    """
    validate_encoder_config(config)
    rng = np.random.default_rng(seed)

    layers = [_wrap(0, _init_stem(config, rng))]
    for layer in range(1, config.num_layers):
        layers.append(_wrap(layer, _init_block(config, rng)))
    heads = [_wrap(layer, _init_head(config, rng)) for layer in range(config.num_layers)]

    return LayeredEncoder(config=config, layers=layers, heads=heads)


# Trainable set

def set_trainable(enc: LayeredEncoder, active_layers, include_head: bool = True) -> None:
    """
    Mark exactly the active layer(s) trainable, plus the head of the deepest
    active layer when include_head is set. Parameter values are untouched.
    """
    active = {active_layers} if isinstance(active_layers, int) else set(active_layers)
    if not active:
        raise ValueError("set_trainable: at least one active layer is required")
    for layer in active:
        if not isinstance(layer, (int, np.integer)) or not 0 <= layer <= enc.num_blocks:
            raise ValueError(f"set_trainable: layer {layer!r} outside [0, {enc.num_blocks}]")

    head_layer = max(active)
    for layer, params in enumerate(enc.layers):
        for t in (params or {}).values():
            t.requires_grad = layer in active
    for layer, params in enumerate(enc.heads):
        for t in (params or {}).values():
            t.requires_grad = include_head and layer == head_layer


# Forward

def validate_kept(kept: Iterable[int], num_blocks: int) -> tuple:
    kept = tuple(int(k) for k in kept)
    if not kept or kept[0] != 0:
        raise ValueError(f"kept set must start with the stem (0), got {kept}")
    if any(b <= a for a, b in zip(kept, kept[1:])):
        raise ValueError(f"kept set must be strictly ascending, got {kept}")
    if kept[-1] > num_blocks:
        raise ValueError(f"kept set {kept} exceeds the {num_blocks} encoder blocks")
    return kept


def patchify(images: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """[n, C, H, W] -> [n, 1 + patches, C*P*P], a zero register patch first."""
    images = np.asarray(images)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"images must have shape [n, {', '.join(map(str, expected))}], got {images.shape}")
    n, g, p = images.shape[0], cfg.grid, cfg.patch_size
    patches = (
        images.reshape(n, cfg.channels, g, p, g, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n, g * g, cfg.patch_dim)
    )
    register = np.zeros((n, 1, cfg.patch_dim), dtype=patches.dtype)
    return np.concatenate([register, patches], axis=1)


def stem_forward(params: ParamSet, images, cfg: EncoderConfig) -> Tensor:
    data = images.data if isinstance(images, Tensor) else images
    tokens = Tensor(patchify(data, cfg))
    x = matmul(tokens, params["stem.proj.weight"])
    x = add(x, params["stem.proj.bias"])
    return add(x, params["stem.pos_embed"])


def block_forward(params: ParamSet, x: Tensor, cfg: EncoderConfig) -> Tensor:
    n, tokens, d = x.shape
    h, dh = cfg.heads, cfg.head_width

    # attention
    y = layernorm(x, params["attn.norm.gamma"], params["attn.norm.beta"])
    qkv = add(matmul(y, params["attn.qkv.weight"]), params["attn.qkv.bias"])
    qkv = transpose(reshape(qkv, (n, tokens, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = select(qkv, 0), select(qkv, 1), select(qkv, 2)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attended = matmul(softmax(scores), v)
    attended = reshape(transpose(attended, (0, 2, 1, 3)), (n, tokens, d))
    x = add(x, add(matmul(attended, params["attn.out.weight"]), params["attn.out.bias"]))

    # mlp
    y = layernorm(x, params["mlp.norm.gamma"], params["mlp.norm.beta"])
    y = gelu(add(matmul(y, params["mlp.fc1.weight"]), params["mlp.fc1.bias"]))
    y = add(matmul(y, params["mlp.fc2.weight"]), params["mlp.fc2.bias"])
    return add(x, y)


def forward(enc: LayeredEncoder, images, kept: Iterable[int], tap_layer: int) -> Tensor:
    """
    Mean-pooled patch-token representation [n, width] after layer tap_layer.

    Layers run in ascending kept order up to tap_layer; blocks missing from
    kept are skipped (identity). Kept layers deeper than the tap are ignored.
    """
    kept = validate_kept(kept, enc.num_blocks)
    if tap_layer not in kept:
        raise UsageError(f"tap layer {tap_layer} is not in the kept set {kept}")
    for layer in kept:
        if layer <= tap_layer and not enc.has_layer(layer):
            raise UsageError(f"layer {layer} is kept but not materialized in this encoder")

    x = stem_forward(enc.layers[0], images, enc.config)
    for layer in kept:
        if layer == 0 or layer > tap_layer:
            continue
        x = block_forward(enc.layers[layer], x, enc.config)
    return mean_tokens(x, start=1)


def project(enc: LayeredEncoder, layer: int, rep: Tensor) -> Tensor:
    """Projection head of `layer`: d -> d -> head_dim_out with GELU, rows L2-normalized."""
    if not 0 <= layer < len(enc.heads) or enc.heads[layer] is None:
        raise UsageError(f"no projection head is initialized for layer {layer}")
    head = enc.heads[layer]
    z = gelu(add(matmul(rep, head["head.fc1.weight"]), head["head.fc1.bias"]))
    z = add(matmul(z, head["head.fc2.weight"]), head["head.fc2.bias"])
    return l2_normalize(z)
