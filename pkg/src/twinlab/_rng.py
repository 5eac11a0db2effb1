"""Seed plumbing shared by every stochastic routine."""

import secrets

import numpy as np


def rng_for(seed, *path):
    """Generator for the stream addressed by ``(seed, *path)``.

    Streams with different paths are statistically independent, so grid
    cells and replicates can run in any order or process.
    """
    if seed is None:
        raise ValueError("a seed is required; use fresh_seed() to draw one")
    words = [int(seed)] + [int(p) for p in path]
    if any(w < 0 for w in words):
        raise ValueError(f"seed path entries must be non-negative, got {words}")
    return np.random.default_rng(np.random.SeedSequence(words))


def fresh_seed():
    return secrets.randbits(32)
