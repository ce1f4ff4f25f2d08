"""Seed splitting.

Every random stream is derived from the master seed as
``SeedSequence(master, spawn_key=(STREAMS[name], *index))``, so scenario
``v`` always gets the same generator regardless of batch size, worker count
or execution order.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"scenario": 0, "fold": 1, "init": 2, "mc": 3, "train": 4, "split": 5, "dropout": 6}


def seed_sequence(master: int, stream: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(STREAMS[stream], *map(int, index)))


def rng(master: int, stream: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, stream, *index))


def child_seed(master: int, stream: str, *index: int) -> int:
    return int(seed_sequence(master, stream, *index).generate_state(1, np.uint64)[0] >> np.uint64(1))
