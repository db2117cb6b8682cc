"""Named random streams derived from one run seed."""

from __future__ import annotations

import numpy as np
import torch

STREAMS = ("init", "data", "mask", "drop", "mosaic", "augment")


class SeedStreams:
    """Independent RNG streams derived from one seed, one per named purpose.

    Streams are keyed by position in ``STREAMS`` so drawing from one never
    shifts another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def sequence(self, name: str) -> np.random.SeedSequence:
        if name not in STREAMS:
            raise KeyError(f"unknown seed stream {name!r}")
        return np.random.SeedSequence(self.seed, spawn_key=(STREAMS.index(name),))

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.sequence(name))

    def torch(self, name: str) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.sequence(name).generate_state(1, dtype=np.uint64)[0] >> 1))
        return g

    def int_seed(self, name: str) -> int:
        return int(self.sequence(name).generate_state(1)[0])
