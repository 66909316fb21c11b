"""
Server side of a round: federated averaging of the uploaded deltas.
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import numpy as np

from fllsim.core.encoder import LayeredEncoder
from fllsim.core.errors import ProtocolError
from fllsim.core.federation.client import ClientUpdate
from fllsim.core.tensor import ParamId
from fllsim.utils import setup_logger

logger = setup_logger(__name__)


def aggregate(updates: Sequence[ClientUpdate], server_lr: float = 1.0) -> Optional[Dict[ParamId, np.ndarray]]:
    """
    Example-weighted mean of the valid updates' deltas, scaled by server_lr.

    Failed updates are ignored. Returns None when no valid update remains
    (the caller skips the round). Clients that processed no examples all
    weigh the same.
    """
    valid = sorted((u for u in updates if not u.failed), key=lambda u: u.client_id)
    if not valid:
        logger.warning("No valid client update to aggregate")
        return None

    keys = list(valid[0].deltas)
    for update in valid[1:]:
        if set(update.deltas) != set(keys):
            message = (
                f"client {update.client_id} uploaded {sorted(update.deltas)}, "
                f"expected {sorted(keys)}"
            )
            logger.error(message)
            raise ProtocolError(message)

    weights = np.array([u.num_examples for u in valid], dtype=np.float64)
    if weights.sum() == 0:
        weights = np.ones_like(weights)
    weights /= weights.sum()

    applied: Dict[ParamId, np.ndarray] = {}
    for pid in keys:
        mean = sum(w * u.deltas[pid].astype(np.float64) for w, u in zip(weights, valid))
        applied[pid] = (server_lr * mean).astype(np.float32)
    return applied


def apply_delta(enc: LayeredEncoder, delta: Dict[ParamId, np.ndarray]) -> None:
    """Add `delta` to the matching global parameters in place; others stay bit-identical."""
    params = enc.parameters()
    for pid, d in delta.items():
        if pid not in params:
            raise ProtocolError(f"delta for unknown parameter {pid}")
        target = params[pid]
        if target.shape != d.shape:
            raise ProtocolError(f"delta for {pid} has shape {d.shape}, parameter has {target.shape}")
        target.data = (target.data + d).astype(target.data.dtype)
