"""Counter-based per-step randomness.

Each discrete step ``t`` of a run with seed ``seed`` owns one Philox4x64-10
block: the four doubles produced by ``Philox(key=seed)`` at counter ``t``.
A step's draws therefore depend only on ``(seed, t)``; they can be produced
one at a time or in bulk and are identical either way.

Slot usage for the bandit model: 0 = arriving user, 1 = recommended
product, 2 = reward noise, 3 = spare.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

from .errors import NumericError

DRAWS_PER_STEP = 4
_CHUNK = 1 << 14


def step_block(seed: int, t: int) -> np.ndarray:
    """The four uniforms owned by step ``t``."""
    return block_range(seed, t, 1)[0]


def block_range(seed: int, t0: int, n: int) -> np.ndarray:
    """Uniform blocks for steps ``t0 .. t0+n-1`` as an ``(n, 4)`` array."""
    gen = Generator(Philox(key=int(seed), counter=[int(t0), 0, 0, 0]))
    return gen.random(n * DRAWS_PER_STEP).reshape(n, DRAWS_PER_STEP)


class StepDraws:
    """Sequential reader over one step's four uniforms."""

    __slots__ = ("u", "_i")

    def __init__(self, u):
        self.u = u
        self._i = 0

    def random(self) -> float:
        if self._i >= DRAWS_PER_STEP:
            raise NumericError(f"a step may consume at most {DRAWS_PER_STEP} uniforms")
        x = self.u[self._i]
        self._i += 1
        return float(x)

    def slot(self, i: int) -> float:
        return float(self.u[i])

    def normal(self, i: int) -> float:
        """Standard normal via inverse CDF of slot ``i``."""
        return float(ndtri(self.u[i]))


class BlockStream:
    """Iterates ``StepDraws`` for consecutive steps, generating blocks in chunks."""

    def __init__(self, seed: int, t0: int):
        self.seed = int(seed)
        self._next_t = int(t0)
        self._buf = np.empty((0, DRAWS_PER_STEP))
        self._pos = 0

    def next(self) -> StepDraws:
        if self._pos >= len(self._buf):
            self._buf = block_range(self.seed, self._next_t, _CHUNK)
            self._next_t += _CHUNK
            self._pos = 0
        row = self._buf[self._pos]
        self._pos += 1
        return StepDraws(row)


def categorical(u: float, cdf: np.ndarray) -> int:
    """Inverse-CDF sample; ``cdf`` need not end exactly at 1."""
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, len(cdf) - 1)
