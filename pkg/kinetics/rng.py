"""
Seeded random streams for reproducible replicas.

Every replica draws from its own counter-based Philox stream, so a single
replica can be replayed without running the ones before it.
"""
import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MASK64 = 2 ** 64 - 1


def replica_seed(seed: int, replica: int) -> int:
    """seed XOR (replica * 0x9E3779B97F4A7C15 mod 2**64)."""
    if not 0 <= seed <= MASK64:
        raise ValueError("seed must fit in 64 bits")
    if replica < 0:
        raise ValueError("replica index cannot be negative")
    return seed ^ ((replica * GOLDEN_GAMMA) & MASK64)


def make_rng(seed: int, replica: int = None) -> np.random.Generator:
    """Philox generator for ``seed`` or for one replica of it."""
    if replica is not None:
        seed = replica_seed(seed, replica)
    return np.random.Generator(np.random.Philox(seed))
