"""Seed-domain separation.

Every random stream in the package is derived from a master seed plus a
domain tag, so training, evaluation and initialization draws can never
overlap even when they share the master seed.
"""

from __future__ import annotations

import numpy as np
import torch

DOMAINS = {
    "market": 1,
    "train": 2,
    "eval": 3,
    "init": 4,
    "factors": 5,
    "casualty": 6,
    "pricing": 7,
    "saa": 8,
    "nested": 9,
}


def seed_sequence(seed: int, domain: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(DOMAINS[domain], *map(int, keys)))


def rng(seed: int, domain: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, domain, *keys))


def torch_generator(seed: int, domain: str, *keys: int) -> torch.Generator:
    state = seed_sequence(seed, domain, *keys).generate_state(1, dtype=np.uint64)[0]
    g = torch.Generator()
    g.manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)
    return g
