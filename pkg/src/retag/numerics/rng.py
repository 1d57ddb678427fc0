"""Counter-based, splittable random streams.

Every stochastic component of the pipeline draws from a named stream derived
from a root seed, so two runs with the same seed replay the same randomness
regardless of how unrelated components interleave their draws. Streams are
backed by Philox, a counter-based generator, and children are keyed by a hash
of (seed, path), so splitting never consumes state from the parent.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngStream:
    """A named random stream; ``child(name)`` derives an independent stream."""

    def __init__(self, seed: int, path: tuple[str, ...] = ("root",)):
        self.seed = int(seed)
        self.path = tuple(path)
        material = repr((self.seed, self.path)).encode("utf-8")
        key = int.from_bytes(hashlib.sha256(material).digest()[:16], "little")
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, self.path + (str(name),))

    # Thin delegation; callers needing more reach for .generator directly.
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, seq, size=None, replace=True, p=None):
        return self.generator.choice(seq, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path)})"
