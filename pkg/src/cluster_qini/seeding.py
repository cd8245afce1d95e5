"""Deterministic seed derivation for repetitions and named RNG streams.

A master seed owns one 64-bit counter-hash seed per repetition, and each
repetition owns independent named streams (covariates, treatments, masks,
outcomes, policy noise, ...).  Toggling one source of randomness therefore
never shifts another, and results are independent of worker count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    """One output of the splitmix64 mixer for a given counter state."""
    z = (state + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def repetition_seed(master_seed: int, repetition: int) -> int:
    """Seed owned by one repetition: splitmix64 at counter `repetition`."""
    if repetition < 0:
        raise ValueError("repetition index must be nonnegative")
    return splitmix64((master_seed + repetition * _GOLDEN) & _MASK64)


def derive(seed: int, name: str) -> int:
    """A 64-bit stream seed for a named source of randomness."""
    return splitmix64((seed ^ _fnv1a64(name)) & _MASK64)


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named source under a repetition seed."""
    return np.random.default_rng(derive(seed, name))
