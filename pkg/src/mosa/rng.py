"""Deterministic counter-based random number generator.

The generator is SplitMix64 used in counter mode: draw k is the SplitMix64
finalizer applied to ``seed + k * GOLDEN`` (all arithmetic mod 2**64), where
GOLDEN = 0x9E3779B97F4A7C15.  The finalizer is

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

Uniform doubles take the top 53 bits: ``(raw >> 11) * 2**-53``, giving values
in [0, 1).  Normal draws are Box-Muller pairs over ``(1 - u1, u2)`` so the log
argument stays in (0, 1].  Because the state is a pure counter, the stream for
a given seed is identical on every platform and trivial to reproduce in any
language.

Independent streams are derived with :meth:`Rng.split`; the child seed is
``mix64(seed ^ mix64(key + GOLDEN))``.  Named stream keys used across the
toolkit live below so every module draws from a documented slot.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Stream keys.  split(key) yields the stream a module owns; fixed so that
# adding consumers never shifts existing streams.
STREAM_INIT = 1       # backbone weight initialization
STREAM_ADAPTERS = 2   # adapter weight initialization + mask splitting
STREAM_DATA = 3       # epoch shuffling
STREAM_EXPERTS = 4    # stochastic expert activation
STREAM_AUG = 5        # data augmentation
STREAM_EVAL = 6       # stochastic-mode inference
STREAM_PATTERNS = 7   # synthetic dataset class patterns
STREAM_TRAIN_SAMPLES = 8
STREAM_VAL_SAMPLES = 9
STREAM_PRUNE = 10     # prune-before-tune retain masks


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int, mod 2**64."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded deterministic generator; all draws advance a 64-bit counter."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 outputs."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        states = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
        return _mix_array(states)

    def uniform(self, shape=()) -> np.ndarray | float:
        """Uniform float64 draws in [0, 1)."""
        n = int(np.prod(shape)) if shape else 1
        vals = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if shape == ():
            return float(vals[0])
        return vals.reshape(shape)

    def normal(self, shape=()) -> np.ndarray | float:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = 1.0 - np.asarray(self.uniform((half,)))
        u2 = np.asarray(self.uniform((half,)))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        if shape == ():
            return float(z[0])
        return z.reshape(shape)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n); floor of a 53-bit uniform, bias < 2**-50."""
        if n < 1:
            raise ValueError("randint requires n >= 1")
        return int(self.uniform() * n)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n): stable argsort of n uniforms."""
        return np.argsort(self.uniform((n,)), kind="stable")

    def split(self, key: int) -> "Rng":
        """Independent child stream for ``key``; depends on seed only, not on
        how much of this stream has been consumed."""
        return Rng(mix64(self.seed ^ mix64((int(key) + _GOLDEN) & _MASK64)))


def kaiming_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    """Uniform draws in [-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return (np.asarray(rng.uniform(shape)) * 2.0 - 1.0) * bound
