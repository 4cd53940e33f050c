"""Counter-based random numbers.

Every variate is a pure function of a key tuple, e.g. ``(seed, stream, x1, x2)``
for environment sites or ``(seed, walk, step)`` for walks.  Nothing depends on
call order, so enlarging a box or changing the number of workers never alters a
previously generated value.

The mixing function is the SplitMix64 finalizer, chained once per key word.
The same arithmetic is available as numba kernels (``hash2``/``hash3``) and as
vectorised numpy functions (``uniform``), and the two agree bit for bit.
"""
from __future__ import annotations

import numba as nb
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def _absorb(h, k):
    return mix64(h ^ (np.uint64(k) + GOLDEN))


@nb.njit(cache=True)
def hash2(seed, a, b):
    h = mix64(np.uint64(seed) + GOLDEN)
    h = _absorb(h, a)
    return _absorb(h, b)


@nb.njit(cache=True)
def hash3(seed, a, b, c):
    h = mix64(np.uint64(seed) + GOLDEN)
    h = _absorb(h, a)
    h = _absorb(h, b)
    return _absorb(h, c)


@nb.njit(cache=True, inline="always")
def to_unit(h):
    """Top 53 bits of ``h`` as a double in [0, 1)."""
    return np.float64(h >> _S11) * _INV53


@nb.njit(cache=True)
def uniform2(seed, a, b):
    return to_unit(hash2(seed, a, b))


@nb.njit(cache=True)
def uniform3(seed, a, b, c):
    return to_unit(hash3(seed, a, b, c))


def _as_u64(values) -> np.ndarray:
    return np.asarray(values, dtype=np.int64).view(np.uint64)


def _mix_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def hash_keys(seed: int, *keys) -> np.ndarray:
    """Vectorised chain hash of ``seed`` followed by broadcastable integer keys."""
    with np.errstate(over="ignore"):
        h = _mix_np(np.asarray(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + GOLDEN, dtype=np.uint64))
        for k in keys:
            h = _mix_np(h ^ (_as_u64(k) + GOLDEN))
    return h


def uniform(seed: int, *keys) -> np.ndarray:
    """Uniform variates in [0, 1), one per broadcast element of ``keys``."""
    h = hash_keys(seed, *keys)
    return (h >> _S11).astype(np.float64) * _INV53
