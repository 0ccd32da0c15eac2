"""Hot numeric kernels, in two interchangeable implementations.

The numba set (scalar loops, jitted) and the numpy set (vectorized)
compute the same quantities; backend.py decides which one the public
names point at. Both accumulate projection sums in ascending stored-entry
order and affine sums in ascending column order, so results are
reproducible and the two backends agree bit-for-bit on integer outputs.

Sparse inputs arrive as parallel (indices, values) arrays, batches as
CSR-style (indptr, indices, values). Bit outputs are packed
little-endian into uint64 words: bit i of a vector lives at
word i >> 6, position i & 63.
"""

import math

import numpy as np

from .backend import USING_NUMBA, njit
from .hashing import (
    GOLDEN,
    MASK64,
    _U_GOLDEN,
    absorb,
    gaussian_from_state_np,
    mix64_np,
    row_states,
)

_INV_2_53 = 2.0**-53
_TWO_PI = 2.0 * math.pi

_U_G = np.uint64(GOLDEN)
_U_G2 = np.uint64((2 * GOLDEN) & MASK64)
_U_M1 = np.uint64(0xBF58476D1CE4E5B9)
_U_M2 = np.uint64(0x94D049BB133111EB)
_U_30 = np.uint64(30)
_U_27 = np.uint64(27)
_U_31 = np.uint64(31)
_U_11 = np.uint64(11)
_U_1 = np.uint64(1)
_U_2 = np.uint64(2)
_U_4 = np.uint64(4)
_U_6 = np.uint64(6)
_U_56 = np.uint64(56)
_M55 = np.uint64(0x5555555555555555)
_M33 = np.uint64(0x3333333333333333)
_M0F = np.uint64(0x0F0F0F0F0F0F0F0F)
_M01 = np.uint64(0x0101010101010101)


def words_for(nbits: int) -> int:
    return (nbits + 63) >> 6


def pack_bool(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean vector into little-endian uint64 words."""
    nbits = bits.shape[0]
    nwords = words_for(nbits)
    raw = np.packbits(bits, bitorder="little")
    packed = np.zeros(nwords * 8, dtype=np.uint8)
    packed[: raw.shape[0]] = raw
    return packed.view("<u8").astype(np.uint64)


def unpack_words(words: np.ndarray, nbits: int) -> np.ndarray:
    """Inverse of pack_bool: uint64 words back to a boolean vector."""
    as_bytes = words.astype("<u8").view(np.uint8)
    return np.unpackbits(as_bytes, bitorder="little")[:nbits].astype(bool)


def unpack_rows(word_rows: np.ndarray, nbits: int) -> np.ndarray:
    """Unpack a (N, nwords) packed matrix to (N, nbits) float64 {0,1}."""
    as_bytes = word_rows.astype("<u8").view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :nbits]
    return bits.astype(np.float64)


# ---------------------------------------------------------------------------
# pure-numpy implementations

_COEFF_CHUNK = 512


def coeff_block(seed: int, T: int, d: int, feature_ids: np.ndarray) -> np.ndarray:
    """Coefficient matrix of shape (T*d, len(feature_ids)), vectorized."""
    states = row_states(seed, T, d)
    out = np.empty((T * d, feature_ids.shape[0]), dtype=np.float64)
    for s in range(0, feature_ids.shape[0], _COEFF_CHUNK):
        j = feature_ids[s : s + _COEFF_CHUNK].astype(np.uint64)
        h = mix64_np(states[:, None] + _U_GOLDEN + j[None, :])
        out[:, s : s + _COEFF_CHUNK] = gaussian_from_state_np(h)
    return out


def _project_accumulate_np(indices, values, seed, T, d):
    nbits = T * d
    states = row_states(seed, T, d)
    acc = np.zeros(nbits, dtype=np.float64)
    for s in range(0, indices.shape[0], _COEFF_CHUNK):
        j = indices[s : s + _COEFF_CHUNK].astype(np.uint64)
        h = mix64_np(states[:, None] + _U_GOLDEN + j[None, :])
        coeffs = gaussian_from_state_np(h)
        vals = values[s : s + _COEFF_CHUNK]
        # entry-at-a-time keeps the ascending accumulation order
        for e in range(vals.shape[0]):
            acc += coeffs[:, e] * vals[e]
    return acc


def _project_bits_np(indices, values, seed, T, d):
    return pack_bool(_project_accumulate_np(indices, values, seed, T, d) > 0.0)


def _project_many_np(indptr, indices, values, seed, T, d):
    n = indptr.shape[0] - 1
    out = np.zeros((n, words_for(T * d)), dtype=np.uint64)
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        out[i] = _project_bits_np(indices[lo:hi], values[lo:hi], seed, T, d)
    return out


def _affine_np(W, b, x):
    acc = np.zeros(W.shape[0], dtype=np.float64)
    for c in range(W.shape[1]):
        acc += W[:, c] * x[c]
    return acc + b


def _popcount_np(words):
    return int(np.bitwise_count(words).sum())


# ---------------------------------------------------------------------------
# numba implementations

if USING_NUMBA:

    @njit(inline="always")
    def _mix64_s(z):
        z = (z ^ (z >> _U_30)) * _U_M1
        z = (z ^ (z >> _U_27)) * _U_M2
        return z ^ (z >> _U_31)

    @njit(inline="always")
    def _absorb_s(h, w):
        return _mix64_s(h + _U_G + w)

    @njit(inline="always")
    def _gauss_s(h):
        w1 = _mix64_s(h + _U_G)
        w2 = _mix64_s(h + _U_G2)
        u1 = np.float64((w1 >> _U_11) + _U_1) * _INV_2_53
        u2 = np.float64((w2 >> _U_11) + _U_1) * _INV_2_53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    @njit(cache=True)
    def _project_core_nb(indices, values, seed, T, d, out_words):
        h_seed = _absorb_s(np.uint64(0), seed)
        bit = 0
        for t in range(T):
            h_t = _absorb_s(h_seed, np.uint64(t))
            for k in range(d):
                h_tk = _absorb_s(h_t, np.uint64(k))
                acc = 0.0
                for e in range(indices.shape[0]):
                    h = _absorb_s(h_tk, np.uint64(indices[e]))
                    acc += _gauss_s(h) * values[e]
                if acc > 0.0:
                    out_words[bit >> 6] |= _U_1 << np.uint64(bit & 63)
                bit += 1

    @njit(cache=True)
    def _project_many_core_nb(indptr, indices, values, seed, T, d, out):
        for i in range(indptr.shape[0] - 1):
            lo = indptr[i]
            hi = indptr[i + 1]
            _project_core_nb(indices[lo:hi], values[lo:hi], seed, T, d, out[i])

    def _project_bits_nb(indices, values, seed, T, d):
        out = np.zeros(words_for(T * d), dtype=np.uint64)
        _project_core_nb(indices, values, np.uint64(seed), T, d, out)
        return out

    def _project_many_nb(indptr, indices, values, seed, T, d):
        out = np.zeros((indptr.shape[0] - 1, words_for(T * d)), dtype=np.uint64)
        _project_many_core_nb(indptr, indices, values, np.uint64(seed), T, d, out)
        return out

    @njit(cache=True)
    def _affine_core_nb(W, b, x, out):
        for r in range(W.shape[0]):
            acc = 0.0
            for c in range(W.shape[1]):
                acc += W[r, c] * x[c]
            out[r] = acc + b[r]

    def _affine_nb(W, b, x):
        out = np.empty(W.shape[0], dtype=np.float64)
        _affine_core_nb(W, b, x, out)
        return out

    @njit(cache=True)
    def _popcount_core_nb(words):
        total = 0
        for i in range(words.shape[0]):
            x = words[i]
            x = x - ((x >> _U_1) & _M55)
            x = (x & _M33) + ((x >> _U_2) & _M33)
            x = (x + (x >> _U_4)) & _M0F
            total += int((x * _M01) >> _U_56)
        return total

    def _popcount_nb(words):
        return _popcount_core_nb(words)


# ---------------------------------------------------------------------------
# backend binding

if USING_NUMBA:
    project_bits_words = _project_bits_nb
    project_many_words = _project_many_nb
    affine = _affine_nb
    popcount_words = _popcount_nb
else:
    project_bits_words = _project_bits_np
    project_many_words = _project_many_np
    affine = _affine_np
    popcount_words = _popcount_np


def warmup():
    """Trigger jit compilation of every kernel (no-op on the numpy backend)."""
    idx = np.array([0, 3], dtype=np.int64)
    val = np.array([1.0, -0.5], dtype=np.float64)
    ptr = np.array([0, 2], dtype=np.int64)
    project_bits_words(idx, val, 1, 2, 3)
    project_many_words(ptr, idx, val, 1, 2, 3)
    affine(np.ones((2, 2)), np.zeros(2), np.ones(2))
    popcount_words(np.array([7], dtype=np.uint64))
