import zlib
from dataclasses import dataclass

import numpy as np
import torch

STREAMS = ("shuffle", "init", "time", "modulation", "dropout")
"""Named randomness streams; each ablation or setting only touches its own."""


@dataclass(slots=True, frozen=True)
class SeedStreams:
    """Split one root seed into independent, reproducible named streams."""

    root: int

    def seed(self, name: str, *extra: int) -> int:
        """Derive a 63-bit seed for ``name`` (optionally keyed by e.g. an epoch)."""
        if name not in STREAMS:
            raise ValueError(
                f"Unknown seed stream {name!r}; expected one of {', '.join(STREAMS)}."
            )
        sequence = np.random.SeedSequence(
            [self.root, zlib.crc32(name.encode()), *extra]
        )
        return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

    def generator(self, name: str) -> torch.Generator:
        generator = torch.Generator()
        generator.manual_seed(self.seed(name))
        return generator
