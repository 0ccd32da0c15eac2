"""Deterministic hashed randomness.

Projection coefficients are never stored: each one is recomputed on the
fly from the tuple (seed, t, k, j) with a splitmix64-style avalanche
mixer, mapped through Box-Muller to a standard normal. The mixer
constants below are part of the exported model format contract
(see FORMAT.md); changing any of them breaks every saved model.

Layout of one coefficient draw:

    h   = absorb(absorb(absorb(absorb(0, seed), t), k), j)
    w1  = mix64(h + GOLDEN)         w2 = mix64(h + 2*GOLDEN)
    u1  = ((w1 >> 11) + 1) * 2**-53     # uniform in (0, 1]
    u2  = ((w2 >> 11) + 1) * 2**-53
    z   = sqrt(-2 ln u1) * cos(2 pi u2)     # first Box-Muller output

where absorb(h, w) = mix64((h + GOLDEN + w) mod 2**64). All integer
arithmetic is modulo 2**64, so the result is identical on every
platform.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX_MULT_1 = 0xBF58476D1CE4E5B9
MIX_MULT_2 = 0x94D049BB133111EB

_INV_2_53 = 2.0**-53
_TWO_PI = 2.0 * math.pi

# uint64 copies for the vectorized path
_U_GOLDEN = np.uint64(GOLDEN)
_U_GOLDEN2 = np.uint64((2 * GOLDEN) & MASK64)
_U_M1 = np.uint64(MIX_MULT_1)
_U_M2 = np.uint64(MIX_MULT_2)
_U_30 = np.uint64(30)
_U_27 = np.uint64(27)
_U_31 = np.uint64(31)
_U_11 = np.uint64(11)
_U_ONE = np.uint64(1)


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int, exact 64-bit semantics."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX_MULT_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_MULT_2) & MASK64
    return z ^ (z >> 31)


def absorb(h: int, word: int) -> int:
    """Fold one 64-bit word into the running hash state."""
    return mix64((h + GOLDEN + word) & MASK64)


def coefficient(seed: int, t: int, k: int, j: int) -> float:
    """Standard-normal coefficient for projection row (t, k), feature j.

    Scalar reference implementation; the kernels in kernels.py compute
    the same value in bulk.
    """
    h = absorb(absorb(absorb(absorb(0, seed), t), k), j)
    w1 = mix64((h + GOLDEN) & MASK64)
    w2 = mix64((h + 2 * GOLDEN) & MASK64)
    u1 = ((w1 >> 11) + 1) * _INV_2_53
    u2 = ((w2 >> 11) + 1) * _INV_2_53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)


def mix64_np(z: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over a uint64 array (wraps mod 2**64)."""
    z = (z ^ (z >> _U_30)) * _U_M1
    z = (z ^ (z >> _U_27)) * _U_M2
    return z ^ (z >> _U_31)


def absorb_np(h: np.ndarray, words: np.ndarray) -> np.ndarray:
    return mix64_np(h + _U_GOLDEN + words)


def gaussian_from_state_np(h: np.ndarray) -> np.ndarray:
    """Map finished hash states to Box-Muller normals (vectorized)."""
    w1 = mix64_np(h + _U_GOLDEN)
    w2 = mix64_np(h + _U_GOLDEN2)
    u1 = ((w1 >> _U_11) + _U_ONE).astype(np.float64) * _INV_2_53
    u2 = ((w2 >> _U_11) + _U_ONE).astype(np.float64) * _INV_2_53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def row_states(seed: int, T: int, d: int) -> np.ndarray:
    """Hash state per projection bit, shape (T*d,), absorbed up to (seed, t, k)."""
    base = (absorb(0, seed) + GOLDEN) & MASK64  # scalar part kept in python ints
    t_states = mix64_np(np.uint64(base) + np.arange(T, dtype=np.uint64))
    tk = t_states[:, None] + _U_GOLDEN + np.arange(d, dtype=np.uint64)[None, :]
    return mix64_np(tk).reshape(T * d)


def hash_text(seed: int, data: bytes) -> int:
    """64-bit hash of a byte string; absorbs 8-byte little-endian chunks."""
    h = absorb(0, seed)
    h = absorb(h, len(data))
    for off in range(0, len(data), 8):
        h = absorb(h, int.from_bytes(data[off : off + 8], "little"))
    return h
