"""Seedable, splittable random number generation.

Every stochastic component (parameter init, DropEdge masks, latent
sampling, negative sampling, synthetic data, search candidates) draws
from an `Rng` derived from a single 64-bit seed, so that a run is a
pure function of its seed.  Sub-streams are derived from a path of
(purpose, epoch, step, ...) parts via numpy's SeedSequence spawn keys
on top of the Philox counter-based generator: distinct paths give
statistically independent, non-overlapping streams, and the same
(seed, path) always gives the same stream.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["Rng"]


def _key_part(part: int | str) -> int:
    """Map a path part onto a spawn-key integer (strings via crc32)."""
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"rng path parts must be non-negative, got {part}")
        return int(part)
    raise TypeError(f"rng path parts must be int or str, got {type(part).__name__}")


class Rng:
    """A deterministic random stream identified by (seed, path)."""

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *parts: int | str) -> "Rng":
        """Derive an independent sub-stream for the given purpose path."""
        if not parts:
            raise ValueError("child() needs at least one path part")
        return Rng(self.seed, self.path + tuple(_key_part(p) for p in parts))

    # -- draws ------------------------------------------------------------

    def normal(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=(rows, cols))

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=(rows, cols))

    def bernoulli(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        """0/1 array with P(1) = p."""
        return (self._gen.random(size=shape) < p).astype(np.float64)

    def integers(self, low: int, high: int, size: int | None = None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n)."""
        return self._gen.choice(n, size=k, replace=False)

    def random(self, size=None):
        return self._gen.random(size=size)

    def lognormal(self, mean: float, sigma: float, size) -> np.ndarray:
        return self._gen.lognormal(mean, sigma, size=size)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, path={self.path})"
