"""Seeded, counter-based random streams.

Every stochastic draw in the package comes from an explicitly passed
:class:`Stream`. Streams are Philox generators keyed by ``(seed, path)``, so a
child stream is a pure function of its name and never depends on how much
randomness its parent has already consumed.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key_part(name: int | str) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError(f"stream key parts must be non-negative, got {name}")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


class Stream:
    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *names: int | str) -> "Stream":
        """Derive an independent stream addressed by ``names``."""
        return Stream(self.seed, self.key + tuple(_key_part(n) for n in names))

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, key={self.key})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, scale: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def torch_normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(shape)).to(dtype)
