"""
Deterministic seed streams.

Every random decision of a run (dropout plan, client sampling, each client's
batches and augmentations, parameter init) draws from its own numpy Generator
whose seed is a hash of the run seed and a stream name. Results therefore do
not depend on call order or on how clients are spread over worker processes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _hash_to_u64(text: str) -> int:
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def derive_seed(base_seed: int, *parts: object) -> int:
    """Map (base_seed, name parts...) to a stable 64-bit child seed."""
    tag = ":".join(str(p) for p in parts)
    return _hash_to_u64(f"{int(base_seed)}:{tag}")


@dataclass(frozen=True)
class SeedStreams:
    """Named, independent generators derived from one run seed."""

    base_seed: int

    def seed(self, *parts: object) -> int:
        if not parts:
            raise ValueError("stream name must be non-empty")
        return derive_seed(self.base_seed, *parts)

    def generator(self, *parts: object) -> np.random.Generator:
        return np.random.default_rng(self.seed(*parts))

    def dropout(self, round_index: int) -> np.random.Generator:
        return self.generator("dropout", round_index)

    def sampling(self, round_index: int) -> np.random.Generator:
        return self.generator("sampling", round_index)

    def client_seed(self, round_index: int, client_id: int) -> int:
        return self.seed("client", round_index, client_id)
