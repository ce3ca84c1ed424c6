"""Seeded generator hierarchy: every random draw is keyed by (global seed, purpose)."""

import zlib

import numpy as np
import torch


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), purpose_key(purpose)])


def torch_seed_for(seed: int, purpose: str) -> int:
    return int(rng_for(seed, purpose).integers(0, 2**63 - 1))


def set_deterministic(num_threads: int | None = 1) -> None:
    if num_threads:
        torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)
