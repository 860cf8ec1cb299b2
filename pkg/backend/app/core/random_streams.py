"""
Seeded random streams.

Every simulation draws from a Philox counter-based generator keyed by the
scenario seed. Stream ``k`` is the keyed generator advanced by ``k`` jumps
(2**128 draws each), so streams never overlap. Independent Monte Carlo
replicas use ``replica_seed(seed, k) = seed XOR k``.
"""

import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for stream ``stream`` of ``seed``"""
    if seed is None:
        raise ValueError("A seed is required for reproducible simulation")
    bit_generator = np.random.Philox(int(seed))
    if stream:
        bit_generator = bit_generator.jumped(int(stream))
    return np.random.Generator(bit_generator)


def replica_seed(seed: int, k: int) -> int:
    return int(seed) ^ int(k)
