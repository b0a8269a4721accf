"""SplitMix64 random number generator.

The generator state is a plain counter advanced by a fixed odd constant, so a
block of ``n`` outputs can be produced with one vectorised numpy expression and
still be bit-identical to ``n`` scalar calls.
"""

from __future__ import annotations

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded 64-bit generator; one instance per owner, never shared."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            out = _mix(z)
        self.state = (self.state + n * _GAMMA) & _MASK
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller on pairs; 1 - u keeps the log argument in (0, 1].
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def trunc_normal(self, n: int, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Standard normal samples rejected outside ``[-bound, bound]``, scaled by ``std``."""
        kept: list[np.ndarray] = []
        have = 0
        while have < n:
            z = self.normal(max(n - have, 16) + 8)
            z = z[np.abs(z) <= bound]
            kept.append(z)
            have += z.size
        return np.concatenate(kept)[:n] * std

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in ``[0, high)``."""
        return (self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by one block of uniforms.
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
