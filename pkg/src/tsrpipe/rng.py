"""Fixed, documented pseudo-random generator for the synthetic corpus.

Synthetic slides and patches must be bit-identical across runs and across
reimplementations, so this module pins the exact algorithm instead of
deferring to a framework default:

* Stream: SplitMix64. State advances by the 64-bit odd constant
  0x9E3779B97F4A7C15; each output is the finalizer
  ``z ^= z>>30; z *= 0xBF58476D1CE4E5B9; z ^= z>>27; z *= 0x94D049BB133111EB;
  z ^= z>>31`` applied to the new state. All arithmetic is modulo 2**64.
* Floats: the top 53 bits of an output scaled by 2**-53, uniform in [0, 1).
* Substreams: ``derive_seed(root, *labels)`` folds each label (as UTF-8 via
  FNV-1a) into the state with the same finalizer, so per-slide / per-cell /
  per-patch streams are independent of evaluation order.

Cohort splitting and weight initialization use numpy's generators; only the
synthetic data generator needs this cross-implementation contract.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(root: int, *labels: object) -> int:
    """Deterministic child seed from a root seed and a label path."""
    s = root & _MASK64
    for label in labels:
        s = _mix(s ^ _fnv1a(str(label).encode("utf-8")))
    return s


class SplitMix64:
    """Sequential SplitMix64 stream; see module docstring for the contract."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        return _mix(self._state)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        """n uniform float64 draws in [0, 1), vectorized over the stream."""
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        z = np.uint64(self._state) + steps
        self._state = (self._state + _GAMMA * n) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi) via the float path (bias negligible at this scale)."""
        return lo + int(self.next_float() * (hi - lo))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def split(self, *labels: object) -> "SplitMix64":
        return SplitMix64(derive_seed(self._state, *labels))
