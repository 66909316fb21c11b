"""
Per-client, per-round resource accounting.

Two sources produce the same quantities:

    - measured: counters filled while a client trains (bytes actually
      shipped, matmul FLOPs seen by the op counter, taped activation words,
      gradient words);
    - analytic: closed-form costs derived from EncoderConfig alone.

Both follow one convention: only matmuls cost FLOPs (2 per multiply-add),
backward costs twice the taped forward, activation memory is the sum of the
outputs of every taped op, and plain SGD keeps no optimizer state. Under this
convention the measured and analytic numbers agree exactly, which the test
suite checks.

Fractions compare a round against the end-to-end baseline of the same
configuration (every layer kept and trained, last head attached).
"""

from __future__ import annotations

from dataclasses import asdict, astuple, dataclass
from typing import List, Sequence, Tuple

import pandas as pd

from fllsim.core.encoder import block_param_count, head_param_count, stem_param_count
from fllsim.core.tensor import BACKWARD_FLOP_FACTOR, WORD_BYTES
from fllsim.io.schema import EncoderConfig

OPTIMIZER_STATE_WORDS = 0


@dataclass(frozen=True)
class ResourceSample:
    """Resources one client spends in one round."""

    bytes_down: int = 0
    bytes_up: int = 0
    flops_forward: int = 0
    flops_backward: int = 0
    peak_memory_words: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"ResourceSample.{name} must be >= 0 (got {value})")
        if self.bytes_down % WORD_BYTES or self.bytes_up % WORD_BYTES:
            raise ValueError(f"byte counts must be multiples of {WORD_BYTES}")

    @property
    def bytes_total(self) -> int:
        return self.bytes_down + self.bytes_up

    @property
    def flops_total(self) -> int:
        return self.flops_forward + self.flops_backward

    def merge_max(self, other: "ResourceSample") -> "ResourceSample":
        return ResourceSample(*(max(a, b) for a, b in zip(astuple(self), astuple(other))))


@dataclass(frozen=True)
class ResourceFractions:
    memory_frac: float
    compute_frac: float
    comm_frac: float


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def fractions(sample: ResourceSample, baseline: ResourceSample) -> ResourceFractions:
    return ResourceFractions(
        memory_frac=_ratio(sample.peak_memory_words, baseline.peak_memory_words),
        compute_frac=_ratio(sample.flops_total, baseline.flops_total),
        comm_frac=_ratio(sample.bytes_total, baseline.bytes_total),
    )


# Closed-form per-layer costs

@dataclass(frozen=True)
class LayerCosts:
    """
    Per-layer costs of one local step over n_images (both views).

    `head_*` entries cover the projection head of the tap layer together with
    the pooling and the contrastive loss.
    """

    params: Tuple[int, ...]
    head_params: int
    forward_flops: Tuple[int, ...]
    head_forward_flops: int
    activation_words: Tuple[int, ...]
    head_activation_words: int

    @property
    def num_layers(self) -> int:
        return len(self.params)


def layer_costs(cfg: EncoderConfig, batch_size: int) -> LayerCosts:
    """Costs of one local step on `batch_size` images, i.e. 2 * batch_size views."""
    n = 2 * batch_size
    tokens, d, m, h, k = cfg.num_tokens, cfg.width, cfg.mlp_hidden, cfg.heads, cfg.head_dim_out

    stem_flops = 2 * n * tokens * cfg.patch_dim * d
    block_flops = (
        2 * n * tokens * d * 3 * d            # qkv
        + 2 * 2 * n * tokens * tokens * d     # scores, weighted values
        + 2 * n * tokens * d * d              # output projection
        + 2 * 2 * n * tokens * d * m          # mlp
    )
    head_flops = 2 * n * d * d + 2 * n * d * k + 2 * n * n * k

    stem_act = 3 * n * tokens * d
    block_act = 27 * n * tokens * d + 3 * n * h * tokens * tokens + 3 * n * tokens * m
    head_act = n * d + (3 * n * d + 3 * n * k) + (2 * n * k + 3 * n * n + 1)

    blocks = cfg.num_blocks
    return LayerCosts(
        params=(stem_param_count(cfg),) + (block_param_count(cfg),) * blocks,
        head_params=head_param_count(cfg),
        forward_flops=(stem_flops,) + (block_flops,) * blocks,
        head_forward_flops=head_flops,
        activation_words=(stem_act,) + (block_act,) * blocks,
        head_activation_words=head_act,
    )


def _forward_layers(kept: Sequence[int], tap_layer: int) -> List[int]:
    return [layer for layer in kept if layer <= tap_layer]


def analytic_comm(plan, costs: LayerCosts, accounting: str = "full") -> Tuple[int, int]:
    """
    (bytes_down, bytes_up) of one client in one round.

    Down ships every kept layer plus the tap layer's head; "cached" accounting
    charges only the trainable layers and head. Up returns trainable + head.
    """
    trainable_words = sum(costs.params[l] for l in plan.trainable) + costs.head_params
    if accounting == "cached":
        down_words = trainable_words
    else:
        down_words = sum(costs.params[l] for l in plan.kept) + costs.head_params
    return WORD_BYTES * down_words, WORD_BYTES * trainable_words


def analytic_compute(plan, costs: LayerCosts) -> Tuple[int, int]:
    """(forward, backward) FLOPs of one local step."""
    forward = sum(costs.forward_flops[l] for l in _forward_layers(plan.kept, plan.tap_layer))
    forward += costs.head_forward_flops
    taped = sum(costs.forward_flops[l] for l in plan.trainable) + costs.head_forward_flops
    return forward, BACKWARD_FLOP_FACTOR * taped


def analytic_memory(plan, costs: LayerCosts) -> int:
    """
    Peak words of one local step: shipped parameters, activations retained
    for backward (trainable layers onward), gradients and optimizer state.
    """
    params = sum(costs.params[l] for l in plan.kept) + costs.head_params
    activations = sum(costs.activation_words[l] for l in plan.trainable) + costs.head_activation_words
    trained = sum(costs.params[l] for l in plan.trainable) + costs.head_params
    return params + activations + trained + OPTIMIZER_STATE_WORDS * trained


def analytic_sample(plan, costs: LayerCosts, local_steps: int, accounting: str = "full") -> ResourceSample:
    down, up = analytic_comm(plan, costs, accounting)
    forward, backward = analytic_compute(plan, costs)
    return ResourceSample(
        bytes_down=down,
        bytes_up=up,
        flops_forward=local_steps * forward,
        flops_backward=local_steps * backward,
        peak_memory_words=analytic_memory(plan, costs) if local_steps else
        sum(costs.params[l] for l in plan.kept) + costs.head_params,
    )


@dataclass(frozen=True)
class _FullModel:
    kept: Tuple[int, ...]
    trainable: Tuple[int, ...]
    tap_layer: int


def end_to_end_view(num_layers: int) -> _FullModel:
    everything = tuple(range(num_layers))
    return _FullModel(kept=everything, trainable=everything, tap_layer=num_layers - 1)


def baseline_sample(costs: LayerCosts, local_steps: int) -> ResourceSample:
    """End-to-end reference: all layers shipped, trained and uploaded."""
    return analytic_sample(end_to_end_view(costs.num_layers), costs, local_steps, "full")


# Ledger

@dataclass(frozen=True)
class LedgerRow:
    round: int
    phase: int
    sample: ResourceSample
    fractions: ResourceFractions


class ResourceLedger:
    """Per-round resource rows plus running totals."""

    def __init__(self, baseline: ResourceSample):
        self.baseline = baseline
        self._rows: List[LedgerRow] = []

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def rows(self) -> List[LedgerRow]:
        return self._rows

    def record(self, round_index: int, phase: int, sample: ResourceSample) -> ResourceFractions:
        fracs = fractions(sample, self.baseline)
        self._rows.append(LedgerRow(round_index, phase, sample, fracs))
        return fracs

    def totals(self) -> ResourceSample:
        return ResourceSample(
            bytes_down=sum(r.sample.bytes_down for r in self._rows),
            bytes_up=sum(r.sample.bytes_up for r in self._rows),
            flops_forward=sum(r.sample.flops_forward for r in self._rows),
            flops_backward=sum(r.sample.flops_backward for r in self._rows),
            peak_memory_words=max((r.sample.peak_memory_words for r in self._rows), default=0),
        )

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "round": r.round,
                "phase": r.phase,
                **asdict(r.sample),
                **asdict(r.fractions),
            }
            for r in self._rows
        ])
