"""LSH sign projections: sparse inputs to packed bit vectors.

A ProjectionConfig (seed, T, d) fully determines T projection functions
of d bits each. Coefficients are standard normals recomputed on demand
from the hash in hashing.py, so projecting costs O(entries * T * d) and
is independent of the overall feature-space size. sgn(0) counts as 0 so
outputs are deterministic even at exact ties.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, EmptyInputError
from .hashing import coefficient as _coefficient

MAX_TOTAL_BITS = 1 << 20


@dataclass(frozen=True)
class ProjectionConfig:
    """Seed plus (T, d): everything needed to reproduce the projections."""

    seed: int
    T: int
    d: int

    def __post_init__(self):
        if not (0 <= self.seed < (1 << 64)):
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if self.T < 1 or self.d < 1:
            raise ConfigError(f"T and d must be >= 1, got T={self.T}, d={self.d}")
        if self.T * self.d > MAX_TOTAL_BITS:
            raise ConfigError(
                f"T*d = {self.T * self.d} exceeds the sanity bound {MAX_TOTAL_BITS}"
            )

    @property
    def nbits(self) -> int:
        return self.T * self.d


class SparseVector:
    """Observed-features-only vector: sorted indices with nonzero values."""

    __slots__ = ("indices", "values")

    def __init__(self, indices, values):
        indices = np.ascontiguousarray(indices, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if indices.shape != values.shape or indices.ndim != 1:
            raise DimensionError(
                f"indices shape {indices.shape} and values shape {values.shape} "
                "must be equal 1-d shapes"
            )
        if indices.size:
            if indices[0] < 0:
                raise ConfigError("feature indices must be >= 0")
            if np.any(np.diff(indices) <= 0):
                raise ConfigError("indices must be strictly increasing")
            if not np.all(np.isfinite(values)):
                raise ConfigError("values must be finite")
            if np.any(values == 0.0):
                raise ConfigError("zero-valued entries must not be stored")
        self.indices = indices
        self.values = values

    @classmethod
    def from_dense(cls, dense) -> "SparseVector":
        dense = np.asarray(dense, dtype=np.float64)
        idx = np.nonzero(dense)[0]
        return cls(idx.astype(np.int64), dense[idx])

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim, dtype=np.float64)
        out[self.indices] = self.values
        return out

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def scaled(self, c: float) -> "SparseVector":
        return SparseVector(self.indices, self.values * c)

    def __repr__(self):
        return f"SparseVector(nnz={self.nnz})"


class BitVector:
    """nbits packed little-endian into uint64 words; spare bits stay zero."""

    __slots__ = ("nbits", "words")

    def __init__(self, nbits: int, words):
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if words.shape != (kernels.words_for(nbits),):
            raise DimensionError(
                f"{nbits} bits need {kernels.words_for(nbits)} words, "
                f"got shape {words.shape}"
            )
        self.nbits = nbits
        self.words = words

    @classmethod
    def from_bools(cls, bits) -> "BitVector":
        bits = np.asarray(bits, dtype=bool)
        return cls(bits.shape[0], kernels.pack_bool(bits))

    def get(self, i: int) -> int:
        if not 0 <= i < self.nbits:
            raise IndexError(i)
        return int((self.words[i >> 6] >> np.uint64(i & 63)) & np.uint64(1))

    def to_bools(self) -> np.ndarray:
        return kernels.unpack_words(self.words, self.nbits)

    def count(self) -> int:
        return kernels.popcount_words(self.words)

    def __eq__(self, other):
        if not isinstance(other, BitVector):
            return NotImplemented
        return self.nbits == other.nbits and bool(
            np.array_equal(self.words, other.words)
        )

    def __repr__(self):
        return f"BitVector(nbits={self.nbits}, set={self.count()})"


def projection_coefficient(config: ProjectionConfig, t: int, k: int, j: int) -> float:
    """Coefficient of projection function t, bit k, for feature j."""
    if not 0 <= t < config.T:
        raise ConfigError(f"t must be in [0, {config.T}), got {t}")
    if not 0 <= k < config.d:
        raise ConfigError(f"k must be in [0, {config.d}), got {k}")
    if j < 0:
        raise ConfigError(f"feature index must be >= 0, got {j}")
    return _coefficient(config.seed, t, k, j)


def project_bits(x: SparseVector, config: ProjectionConfig) -> BitVector:
    """Sign-project x through all T*d rows into a packed bit vector.

    Bit t*d + k is set iff the inner product of x with row (t, k) is
    strictly positive. Cost is linear in x.nnz; absent features are
    never touched.
    """
    if x.nnz == 0:
        raise EmptyInputError(
            "cannot project an empty vector: it has no direction"
        )
    words = kernels.project_bits_words(
        x.indices, x.values, config.seed, config.T, config.d
    )
    return BitVector(config.nbits, words)


def bits_to_activation(b: BitVector, encoding: str = "zero_one") -> np.ndarray:
    """Bit vector as a dense activation: {0,1} or {-1,+1} floats."""
    acts = b.to_bools().astype(np.float64)
    if encoding == "zero_one":
        return acts
    if encoding == "signed":
        return 2.0 * acts - 1.0
    raise ConfigError(f"unknown bit encoding {encoding!r}")


def hamming_distance(a: BitVector, b: BitVector) -> int:
    if a.nbits != b.nbits:
        raise DimensionError(f"bit lengths differ: {a.nbits} vs {b.nbits}")
    return kernels.popcount_words(a.words ^ b.words)


def hamming_similarity(a: BitVector, b: BitVector) -> float:
    """1 - hamming/nbits, in [0, 1]."""
    return 1.0 - hamming_distance(a, b) / a.nbits


def angle_estimate(
    x: SparseVector, y: SparseVector, config: ProjectionConfig
) -> float:
    """Estimated angle between x and y in radians.

    The fraction of disagreeing sign bits is an unbiased estimator of
    angle/pi; standard error is at most pi / (2 sqrt(T*d)).
    """
    bx = project_bits(x, config)
    by = project_bits(y, config)
    return np.pi * hamming_distance(bx, by) / config.nbits


def block_ids(b: BitVector, d: int) -> np.ndarray:
    """Encode consecutive d-bit blocks as integers (sparse-lookup variant).

    Requires d <= 30 so each id fits comfortably in an int64 table index,
    and nbits divisible by d.
    """
    if d < 1 or d > 30:
        raise ConfigError(f"block width must be in [1, 30], got {d}")
    if b.nbits % d != 0:
        raise DimensionError(f"{b.nbits} bits do not split into blocks of {d}")
    bits = b.to_bools().astype(np.int64).reshape(-1, d)
    weights = (1 << np.arange(d, dtype=np.int64))
    return bits @ weights


def projection_matrix(config: ProjectionConfig, vocab: int) -> np.ndarray:
    """Materialize all coefficients for features [0, vocab) as (T*d, vocab).

    Intended for small vocabularies (tests, bulk preprocessing); the
    normal projection path never builds this.
    """
    return kernels.coeff_block(
        config.seed, config.T, config.d, np.arange(vocab, dtype=np.int64)
    )


# Above this many materialized coefficients (vocab * nbits), project_rows
# falls back to the per-entry kernel to keep memory flat.
_MATERIALIZE_BUDGET = 32 * (1 << 20)


def project_rows(indptr, indices, values, config: ProjectionConfig) -> np.ndarray:
    """Project N CSR rows at once; returns (N, nwords) packed words.

    Agrees with calling project_bits per row. When every feature index
    is small enough that the full coefficient matrix fits a modest
    budget, rows go through one BLAS product instead of the per-entry
    kernel, and a sample of rows is re-checked against the strict path
    as a tripwire. Rows must be nonempty.
    """
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = indptr.shape[0] - 1
    if n < 1:
        raise EmptyInputError("no rows to project")
    if np.any(np.diff(indptr) == 0):
        raise EmptyInputError("every row must have at least one entry")

    vocab = int(indices.max()) + 1 if indices.size else 0
    if vocab * config.nbits <= _MATERIALIZE_BUDGET:
        out = _project_rows_materialized(indptr, indices, values, config, vocab)
        _verify_sample(out, indptr, indices, values, config)
        return out
    return kernels.project_many_words(indptr, indices, values, config.seed,
                                      config.T, config.d)


def _project_rows_materialized(indptr, indices, values, config, vocab):
    coeffs = projection_matrix(config, vocab)  # (nbits, vocab)
    n = indptr.shape[0] - 1
    nwords = kernels.words_for(config.nbits)
    out = np.zeros((n, nwords), dtype=np.uint64)
    chunk = max(1, (1 << 22) // max(1, vocab))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        dense = np.zeros((hi - lo, vocab), dtype=np.float64)
        for r in range(lo, hi):
            s, e = indptr[r], indptr[r + 1]
            dense[r - lo, indices[s:e]] = values[s:e]
        dots = dense @ coeffs.T
        for r in range(lo, hi):
            out[r] = kernels.pack_bool(dots[r - lo] > 0.0)
    return out


def _verify_sample(out, indptr, indices, values, config, k: int = 3):
    n = indptr.shape[0] - 1
    for r in {0, n // 2, n - 1} if n > k else set(range(n)):
        s, e = indptr[r], indptr[r + 1]
        strict = kernels.project_bits_words(
            indices[s:e], values[s:e], config.seed, config.T, config.d
        )
        if not np.array_equal(out[r], strict):
            raise AssertionError(
                f"materialized projection disagrees with kernel at row {r}"
            )
