"""Deterministic named random substreams.

All randomness in a run flows from one base seed; components draw from
named substreams so component-level reproducibility survives refactors.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the substream identified by the given names.

    Names may be strings (hashed stably) or integers (used directly).
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            entropy.append(zlib.crc32(name.encode("utf-8")))
        else:
            entropy.append(int(name) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))
