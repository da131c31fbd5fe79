"""Deterministic counter-based random number generation.

Draws are produced by hashing a 64-bit counter with the splitmix64
finalizer, so a given seed yields one fixed stream regardless of platform,
process, thread count, or how the draws are batched into calls. numpy's own
Generator is deliberately not used here: its stream identity is a library
implementation detail, while this module's stream is part of the package's
reproducibility contract.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = 0xFFFFFFFFFFFFFFFF
# 2**-53; a 53-bit mantissa drawn from the top of the word maps to [0, 1).
_U53 = 2.0 ** -53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 stream over an incrementing counter.

    The word at counter position k is mix(seed + k * GAMMA) with all
    arithmetic mod 2**64. Instances track how many words they have handed
    out; two instances with the same seed produce identical streams.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def raw(self, count: int) -> np.ndarray:
        """Next `count` raw uint64 words."""
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        start = self._counter + 1
        idx = np.arange(start, start + count, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, count: int) -> np.ndarray:
        """float64 draws in [0, 1), one per requested slot."""
        return (self.raw(count) >> np.uint64(11)).astype(np.float64) * _U53

    def normal(self, count: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """float64 normal draws via Box-Muller on uniform pairs.

        std must be >= 0; std == 0 returns exactly `mean` in every slot.
        """
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        pairs = (count + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # in (0, 1], keeps log() finite
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return mean + std * z[:count]

    def index(self, bound: int) -> int:
        """One integer in [0, bound)."""
        if bound < 1:
            raise ValueError(f"bound must be >= 1, got {bound}")
        return int(self.uniform(1)[0] * bound)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.index(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "Rng":
        """Child generator seeded from the next word of this stream."""
        return Rng(int(self.raw(1)[0]))
