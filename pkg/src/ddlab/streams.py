"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, index)`` with a per-purpose channel in the top counter word, so the
numbers used by path ``i`` never depend on how many other paths exist, on the
order in which they are produced, or on how many lanes produce them.
"""

from __future__ import annotations

import os

import numpy as np

MASK64 = (1 << 64) - 1

# channel ids (top 64-bit word of the Philox counter)
MU = 1
INIT = 2
NOISE = 3
MALA = 4


def stream(seed: int, index: int, channel: int) -> np.random.Generator:
    """Generator for item ``index`` of the run seeded with ``seed``."""
    bits = np.random.Philox(
        key=np.array([seed & MASK64, index & MASK64], dtype=np.uint64),
        counter=np.array([0, 0, 0, channel & MASK64], dtype=np.uint64),
    )
    return np.random.Generator(bits)


def resolve_lanes(lanes: int | None = None) -> int:
    """Lane count: explicit value, else ``DDLAB_LANES``, else available cores."""
    env = os.environ.get("DDLAB_LANES")
    if lanes is None and env:
        try:
            lanes = int(env)
        except ValueError:
            raise ValueError(f"DDLAB_LANES must be an integer, got {env!r}") from None
    if lanes is None:
        lanes = os.cpu_count() or 1
    if lanes < 1:
        raise ValueError(f"lane count must be >= 1, got {lanes}")
    return lanes
