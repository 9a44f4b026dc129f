"""Named random streams so runs are reproducible stream-by-stream.

Each consumer (data generation, weight init, transition noise, RL rollouts,
evaluation) gets its own generator derived from the run seed, so adding draws
to one stream never perturbs another.
"""

from __future__ import annotations

import numpy as np

STREAM_IDS = {"data": 0, "init": 1, "gumbel": 2, "rl": 3, "eval": 4}


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    if stream not in STREAM_IDS:
        raise ValueError(f"unknown rng stream {stream!r}; expected one of {sorted(STREAM_IDS)}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAM_IDS[stream],))
    return np.random.default_rng(ss)
