"""
Round planning: phase schedule, Depth Dropout and client sampling.

A round plan fixes everything the server decides before dispatching work:
which layer(s) train, which frozen layers ship, which clients participate and
the seed each of them uses. Plans are pure functions of (round, config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from fllsim.core.errors import InfeasibleBudgetError
from fllsim.io.schema import FedConfig
from fllsim.utils import SeedStreams, setup_logger

logger = setup_logger(__name__)


@dataclass(frozen=True)
class RoundPlan:
    """
    One communication round's decisions.

    Attributes
    ----------
    round : int
        Global round index, from 0.
    phase : int
        Schedule position; the active (tap) layer in layer-wise modes.
    kept : tuple of int
        Layers materialized on clients, ascending, always containing 0.
    trainable : tuple of int
        Layers whose parameters train and upload this round.
    tap_layer : int
        Layer whose head carries the loss.
    dropped : tuple of int
        Frozen blocks removed by Depth Dropout.
    clients : tuple of int
        Participating client ids, ascending.
    client_seeds : tuple of int
        Seed of each participating client, aligned with `clients`.
    """

    round: int
    phase: int
    kept: Tuple[int, ...]
    trainable: Tuple[int, ...]
    tap_layer: int
    dropped: Tuple[int, ...] = ()
    clients: Tuple[int, ...] = ()
    client_seeds: Tuple[int, ...] = ()

    def __post_init__(self):
        if not self.kept or self.kept[0] != 0:
            raise ValueError(f"round {self.round}: the stem must be kept (kept={self.kept})")
        if self.tap_layer not in self.kept or not set(self.trainable) <= set(self.kept):
            raise ValueError(f"round {self.round}: trainable/tap layers must be kept")
        if len(self.clients) != len(self.client_seeds):
            raise ValueError(f"round {self.round}: one seed per client is required")

    @property
    def kept_label(self) -> str:
        return ";".join(str(layer) for layer in self.kept)


# Phase schedule

def schedule_phase(round_index: int, cfg: FedConfig, num_blocks: int) -> int:
    """Phase of a round: min(round // rounds_per_layer, num_blocks)."""
    if round_index < 0:
        raise ValueError(f"round index must be >= 0 (got {round_index})")
    return min(round_index // cfg.rounds_per_layer, num_blocks)


def total_rounds(cfg: FedConfig, num_blocks: int) -> int:
    return (num_blocks + 1) * cfg.rounds_per_layer


def window_layers(phase: int, active_window: int = 1) -> Tuple[int, ...]:
    """Layers trained in a phase: the active layer and up to K-1 below it."""
    return tuple(range(max(0, phase - active_window + 1), phase + 1))


# Depth Dropout

def dropout_candidates(phase: int, active_window: int = 1) -> Tuple[int, ...]:
    """Frozen blocks that may be removed; the stem and trained layers are protected."""
    return tuple(range(1, max(1, phase - active_window + 1)))


def drop_count(phase: int, budget: int, drop_rate: float, active_window: int = 1) -> int:
    """
    Number of frozen blocks to remove in a phase.

    With a budget, enough to bring the model down to `budget` layers. Without
    one, `drop_rate` of all frozen layers (stem included), rounded half up
    and capped at the number of candidates.
    """
    if budget > 0:
        return max(0, (phase + 1) - budget)
    frozen = max(0, phase + 1 - active_window)
    wanted = int(math.floor(drop_rate * frozen + 0.5))
    return min(len(dropout_candidates(phase, active_window)), wanted)


def plan_dropout(
    phase: int,
    budget: int,
    drop_rate: float,
    rng: np.random.Generator,
    active_window: int = 1,
) -> Tuple[int, ...]:
    """
    Kept set for one round of a layer-wise phase.

    The dropped blocks are a uniform draw without replacement from the
    candidates; kept = {0..phase} minus the dropped blocks.
    """
    if phase < 0:
        raise ValueError(f"phase must be >= 0 (got {phase})")
    candidates = dropout_candidates(phase, active_window)
    n_drop = drop_count(phase, budget, drop_rate, active_window)
    if n_drop > len(candidates):
        message = (
            f"phase {phase}: budget {budget} requires dropping {n_drop} layers "
            f"but only {len(candidates)} frozen blocks may be removed"
        )
        logger.error(message)
        raise InfeasibleBudgetError(message)

    dropped = set()
    if n_drop:
        dropped = set(int(b) for b in rng.choice(np.asarray(candidates), size=n_drop, replace=False))
    return tuple(layer for layer in range(phase + 1) if layer not in dropped)


def validate_schedule(cfg: FedConfig, num_blocks: int, mode: str) -> None:
    """Check up front that every phase's dropout plan is feasible."""
    if mode != "layerwise-dropout":
        return
    for phase in range(num_blocks + 1):
        needed = drop_count(phase, cfg.budget, cfg.drop_rate, cfg.active_window)
        available = len(dropout_candidates(phase, cfg.active_window))
        if needed > available:
            message = (
                f"federation.budget {cfg.budget} is infeasible at phase {phase}: "
                f"{needed} drops needed, {available} candidates"
            )
            logger.error(message)
            raise InfeasibleBudgetError(message)


# Per-mode planners: (phase, cfg, num_blocks, rng) -> (kept, trainable, tap)

def plan_layerwise(phase: int, cfg: FedConfig, num_blocks: int, rng: np.random.Generator):
    return tuple(range(phase + 1)), window_layers(phase, cfg.active_window), phase


def plan_layerwise_dropout(phase: int, cfg: FedConfig, num_blocks: int, rng: np.random.Generator):
    kept = plan_dropout(phase, cfg.budget, cfg.drop_rate, rng, cfg.active_window)
    return kept, window_layers(phase, cfg.active_window), phase


def plan_end_to_end(phase: int, cfg: FedConfig, num_blocks: int, rng: np.random.Generator):
    everything = tuple(range(num_blocks + 1))
    return everything, everything, num_blocks


# Client sampling

def sample_clients(round_index: int, cfg: FedConfig, streams: SeedStreams) -> Tuple[int, ...]:
    """M distinct client ids, uniform without replacement, independent per round."""
    rng = streams.sampling(round_index)
    chosen = rng.choice(cfg.num_clients, size=cfg.clients_per_round, replace=False)
    return tuple(sorted(int(c) for c in chosen))


def make_round_plan(
    round_index: int,
    cfg: FedConfig,
    num_blocks: int,
    planner,
    streams: SeedStreams,
) -> RoundPlan:
    phase = schedule_phase(round_index, cfg, num_blocks)
    kept, trainable, tap = planner(phase, cfg, num_blocks, streams.dropout(round_index))
    clients = sample_clients(round_index, cfg, streams)
    return RoundPlan(
        round=round_index,
        phase=phase,
        kept=tuple(kept),
        trainable=tuple(trainable),
        tap_layer=tap,
        dropped=tuple(layer for layer in range(tap + 1) if layer not in kept),
        clients=clients,
        client_seeds=tuple(streams.client_seed(round_index, cid) for cid in clients),
    )
