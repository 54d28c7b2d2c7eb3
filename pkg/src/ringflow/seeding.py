"""Named substreams from one experiment seed.

Every stochastic consumer (initial conditions, driver noise, cut-in/out
events, policy sampling, ...) gets its own PCG64 stream derived from the
root seed and a fixed purpose key. Streams therefore never alias, and
adding or removing draws in one consumer cannot shift another's sequence,
which is what makes trajectory comparisons across configurations (and the
byte-identical determinism guarantees) possible.
"""
from __future__ import annotations

import numpy as np

INIT = 0      # initial conditions (ring length, placement)
NOISE = 1     # per-step human acceleration noise
EVENTS = 2    # cut-in / cut-out sampling
POLICY = 3    # action sampling during rollouts
TRAIN = 4     # parameter init, batch shuffling
SPAWN = 5     # highway inflow


def substream(seed: int, key: int) -> np.random.Generator:
    """Independent generator for (root seed, purpose key)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def derive_seed(seed: int, *key: int) -> int:
    """Deterministic child seed for (root seed, purpose key, indices)."""
    return int(np.random.SeedSequence(
        seed, spawn_key=tuple(key)).generate_state(1)[0])
