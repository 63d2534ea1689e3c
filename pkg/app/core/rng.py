# app/core/rng.py
"""
Seeded randomness contract.

Stream layout (one family per chain, Philox counter-based bit generators):

    SeedSequence(seed, spawn_key=(chain,))            chain root
        spawn_key=(chain, 0)  particle   which particle moves
        spawn_key=(chain, 1)  batch      random-batch indices
        spawn_key=(chain, 2)  momentum   momentum draws / Langevin noise
        spawn_key=(chain, 3)  uniform    Metropolis uniforms
        spawn_key=(chain, 4)  init       initial configuration

The batch size only changes what the batch stream is asked for: particle
choices, momenta and uniforms are drawn identically, and a random-batch
sampler with a full batch reproduces its full-force counterpart bit for bit.
"""

from dataclasses import dataclass

import numpy as np

STREAM_NAMES = ("particle", "batch", "momentum", "uniform", "init")


@dataclass(frozen=True)
class ChainStreams:
    """The five generators owned by one chain."""

    particle: np.random.Generator
    batch: np.random.Generator
    momentum: np.random.Generator
    uniform: np.random.Generator
    init: np.random.Generator


def _generator(seed: int, *spawn_key: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(spawn_key))
    return np.random.Generator(np.random.Philox(sequence))


def chain_streams(seed: int, chain_index: int = 0) -> ChainStreams:
    """Build the stream family for chain `chain_index` of a run seeded with `seed`."""
    if chain_index < 0:
        raise ValueError("chain_index must be non-negative")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    generators = {
        name: _generator(seed, chain_index, position)
        for position, name in enumerate(STREAM_NAMES)
    }
    return ChainStreams(**generators)


def single_stream(seed: int, label: int = 0) -> np.random.Generator:
    """A standalone generator for work outside a chain (data generation, sweeps)."""
    return _generator(int(seed) & 0xFFFFFFFFFFFFFFFF, 1_000_000 + label)
