"""Compact on-disk form of a trained student and nothing else.

Layout, all little-endian:

    "PNJT"  magic
    u16     format version (currently 1)
    u64     projection seed
    u32     T   (projection functions)
    u32     d   (bits per function)
    u8      bit encoding (0 = zero_one, 1 = signed)
    u8      layer count
    per layer:
        u32         rows, u32 cols
        f32[r*c]    weights, row-major
        f32[r]      biases
    u32     class count
    per class:
        u16 + bytes UTF-8 label

Weights are stored float32; the trainer network is deliberately absent.
A file plus the hash function is everything inference needs.
"""

import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import kernels
from .errors import (
    BadMagicError,
    ConfigError,
    EmptyInputError,
    LayerShapeError,
    ModelFormatError,
    TruncatedModelError,
    UnsupportedVersionError,
)

MAGIC = b"PNJT"
FORMAT_VERSION = 1

_ENCODING_BYTE = {"zero_one": 0, "signed": 1}
_BYTE_ENCODING = {v: k for k, v in _ENCODING_BYTE.items()}

# parse-time sanity bounds so a corrupt header cannot demand gigabytes
_MAX_SIDE = 1 << 20
_MAX_LAYERS = 64


@dataclass
class ExportedModel:
    seed: int
    T: int
    d: int
    bit_encoding: str
    layers: List[Tuple[np.ndarray, np.ndarray]]  # (W f32 (r, c), b f32 (r,))
    labels: List[str]

    @property
    def nbits(self) -> int:
        return self.T * self.d

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def byte_size(self) -> int:
        return len(serialize(self))


def export(model, labels: Optional[List[str]] = None) -> ExportedModel:
    """Strip a JointModel down to its deployable student."""
    cfg = model.head_config
    layers = [(layer.W.astype(np.float32), layer.b.astype(np.float32))
              for layer in model.head.layers]
    if labels is None:
        labels = [f"class{i}" for i in range(model.head.output_dim)]
    if len(labels) != model.head.output_dim:
        raise ModelFormatError(
            f"{len(labels)} labels for {model.head.output_dim} classes"
        )
    return ExportedModel(cfg.projection.seed, cfg.projection.T,
                         cfg.projection.d, cfg.bit_encoding, layers,
                         list(labels))


def serialize(em: ExportedModel) -> bytes:
    if not em.layers:
        raise ModelFormatError("a model needs at least one layer")
    if len(em.layers) > _MAX_LAYERS:
        raise ModelFormatError(f"too many layers: {len(em.layers)}")
    out = [MAGIC, struct.pack("<HQII", FORMAT_VERSION, em.seed, em.T, em.d)]
    try:
        out.append(struct.pack("<BB", _ENCODING_BYTE[em.bit_encoding],
                               len(em.layers)))
    except KeyError:
        raise ModelFormatError(f"unknown bit encoding {em.bit_encoding!r}") from None
    for W, b in em.layers:
        W = np.ascontiguousarray(W, dtype=np.float32)
        b = np.ascontiguousarray(b, dtype=np.float32)
        out.append(struct.pack("<II", W.shape[0], W.shape[1]))
        out.append(W.tobytes())
        out.append(b.tobytes())
    out.append(struct.pack("<I", len(em.labels)))
    for name in em.labels:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ModelFormatError(f"label too long: {len(raw)} bytes")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedModelError(
                f"file ends inside {what}: wanted {n} bytes at offset "
                f"{self.pos}, have {len(self.blob) - self.pos}"
            )
        piece = self.blob[self.pos:self.pos + n]
        self.pos += n
        return piece

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt),
                                                  what))


def deserialize(blob: bytes) -> ExportedModel:
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(
            f"not a projection model file (magic {blob[:4]!r})"
        )
    (version,) = r.unpack("H", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"format version {version}, this build reads {FORMAT_VERSION}"
        )
    seed, T, d = r.unpack("QII", "projection header")
    if T < 1 or d < 1:
        raise LayerShapeError(f"bad projection shape T={T}, d={d}")
    enc_byte, n_layers = r.unpack("BB", "encoding and layer count")
    if enc_byte not in _BYTE_ENCODING:
        raise ModelFormatError(f"unknown bit encoding byte {enc_byte}")
    if n_layers < 1:
        raise LayerShapeError("zero layers")
    layers = []
    for i in range(n_layers):
        rows, cols = r.unpack("II", f"layer {i} shape")
        if not (1 <= rows <= _MAX_SIDE and 1 <= cols <= _MAX_SIDE):
            raise LayerShapeError(f"layer {i} shape {rows}x{cols} out of range")
        W = np.frombuffer(r.take(4 * rows * cols, f"layer {i} weights"),
                          dtype="<f4").reshape(rows, cols).copy()
        b = np.frombuffer(r.take(4 * rows, f"layer {i} biases"),
                          dtype="<f4").copy()
        layers.append((W, b))
    (n_labels,) = r.unpack("I", "label count")
    if n_labels > 0xFFFF:
        raise ModelFormatError(f"label count {n_labels} out of range")
    labels = []
    for i in range(n_labels):
        (ln,) = r.unpack("H", f"label {i} length")
        labels.append(r.take(ln, f"label {i}").decode("utf-8"))
    if r.pos != len(blob):
        raise ModelFormatError(
            f"{len(blob) - r.pos} trailing bytes after a complete model"
        )

    if layers[0][0].shape[1] != T * d:
        raise LayerShapeError(
            f"first layer reads {layers[0][0].shape[1]} inputs but the "
            f"projection makes {T * d} bits"
        )
    for i, ((W, _), (Wn, _)) in enumerate(zip(layers, layers[1:])):
        if Wn.shape[1] != W.shape[0]:
            raise LayerShapeError(
                f"layer {i} puts out {W.shape[0]}, layer {i + 1} "
                f"expects {Wn.shape[1]}"
            )
    if n_labels and n_labels != layers[-1][0].shape[0]:
        raise LayerShapeError(
            f"{n_labels} labels but the last layer has "
            f"{layers[-1][0].shape[0]} outputs"
        )
    return ExportedModel(seed, T, d, _BYTE_ENCODING[enc_byte], layers,
                         labels)


def save_model(em: ExportedModel, path):
    with open(path, "wb") as fh:
        fh.write(serialize(em))


def load_model(path) -> ExportedModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def infer_proba(em: ExportedModel, indices, values) -> np.ndarray:
    """Class probabilities for one sparse input, float32 end to end."""
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if indices.size == 0:
        raise EmptyInputError("cannot project an empty input")
    words = kernels.project_bits_words(indices, values, em.seed, em.T, em.d)
    a = kernels.unpack_words(words, em.nbits).astype(np.float32)
    if em.bit_encoding == "signed":
        a = 2.0 * a - np.float32(1.0)
    last = len(em.layers) - 1
    for i, (W, b) in enumerate(em.layers):
        a = W @ a + b
        if i != last:
            np.maximum(a, np.float32(0.0), out=a)
    a = a - a.max()
    e = np.exp(a, dtype=np.float32)
    return e / e.sum()


def top_k(em: ExportedModel, indices, values, k: int = 1):
    """Top-k (class_ids, probs); equal scores resolve to the lower id."""
    probs = infer_proba(em, indices, values)
    order = np.argsort(-probs, kind="stable")[:k]
    return order, probs[order]


def infer(em: ExportedModel, x, k: int = 1):
    """Top-k (label, probability) pairs for one sparse input, best first."""
    num_classes = len(em.labels)
    if not 1 <= k <= num_classes:
        raise ConfigError(f"k must be in [1, {num_classes}], got {k}")
    ids, probs = top_k(em, x.indices, x.values, k)
    return [(em.labels[i], float(p)) for i, p in zip(ids, probs)]


def infer_batch(em: ExportedModel, indptr, indices, values) -> np.ndarray:
    """Probabilities for many CSR rows at once, float32 math."""
    from .projection import ProjectionConfig, project_rows

    proj = ProjectionConfig(em.seed, em.T, em.d)
    words = project_rows(indptr, indices, values, proj)
    A = kernels.unpack_rows(words, em.nbits).astype(np.float32)
    if em.bit_encoding == "signed":
        A = 2.0 * A - np.float32(1.0)
    last = len(em.layers) - 1
    for i, (W, b) in enumerate(em.layers):
        A = A @ W.T + b
        if i != last:
            np.maximum(A, np.float32(0.0), out=A)
    A = A - A.max(axis=1, keepdims=True)
    e = np.exp(A, dtype=np.float32)
    return e / e.sum(axis=1, keepdims=True)
