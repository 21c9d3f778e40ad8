"""
RazorLab - Named random streams

All randomness flows from one integer seed. Each consumer draws from its
own named stream, so adding a consumer never shifts the others.
"""

import zlib

import numpy as np

INIT = 'init'
DATA = 'data'
NOISE = 'noise'


def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name"""
    return zlib.crc32(name.encode('utf-8'))


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name)"""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_key(name),))
    return np.random.default_rng(sequence)


def run_seed(seed: int, label: str) -> int:
    """Derived integer seed for an independent run inside a grid"""
    generator = stream(seed, f'run/{label}')
    return int(generator.integers(0, 2**31 - 1))
