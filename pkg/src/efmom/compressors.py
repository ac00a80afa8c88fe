"""Contractive compression operators applied to client update messages.

All compressors here satisfy the contraction property
``E||C(v) - v||^2 <= (1 - alpha) ||v||^2`` with ``alpha = k/d`` (1 for the
identity).  RandK is deliberately left unscaled: the scaled (unbiased) variant
would violate the contraction bound.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import RngStream

INDEX_BITS = 32
VALUE_BITS = 64

KINDS = ("identity", "topk", "randk")


class ZeroVectorError(ValueError):
    """Raised when a contraction ratio is requested for the zero vector."""


@dataclass(frozen=True)
class CompressorSpec:
    """A compressor choice: identity, top-k by magnitude, or random-k."""

    kind: str
    d: int
    k: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}; choose from {KINDS}")
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.kind == "identity":
            if self.k is not None:
                raise ValueError("identity compressor takes no k")
        else:
            if self.k is None or not 1 <= self.k <= self.d:
                raise ValueError(f"k must satisfy 1 <= k <= d, got k={self.k}, d={self.d}")

    @property
    def alpha(self) -> float:
        """Contraction factor: k/d for sparsifiers, 1 for identity."""
        if self.kind == "identity":
            return 1.0
        return self.k / self.d

    @property
    def is_random(self) -> bool:
        return self.kind == "randk"


def spec_from_fraction(kind: str, d: int, fraction: float | None = None) -> CompressorSpec:
    """Build a spec with ``k = max(1, floor(fraction * d))``."""
    if kind == "identity":
        return CompressorSpec("identity", d)
    if fraction is None or not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return CompressorSpec(kind, d, max(1, int(fraction * d)))


@dataclass(frozen=True)
class CompressedMessage:
    """Sparse message: values at strictly increasing coordinate indices.

    ``dense`` marks identity messages, which are transmitted without indices.
    """

    indices: np.ndarray
    values: np.ndarray
    d: int
    dense: bool = False

    def densify(self) -> np.ndarray:
        """Expand to a length-d vector with zeros off the stored indices."""
        out = np.zeros(self.d)
        out[self.indices] = self.values
        return out


def topk_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest-|v| entries, ties broken toward lower index.

    Returned sorted ascending.
    """
    order = np.argsort(-np.abs(v), kind="stable")
    idx = order[:k]
    idx.sort()
    return idx


def compress(spec: CompressorSpec, v: np.ndarray, rng: RngStream | None = None) -> CompressedMessage:
    """Apply the compressor to ``v``.  Only RandK consumes ``rng``."""
    if v.shape != (spec.d,):
        raise ValueError(f"vector has shape {v.shape}, compressor expects ({spec.d},)")
    if spec.kind == "identity":
        return CompressedMessage(np.arange(spec.d), v.copy(), spec.d, dense=True)
    if spec.kind == "topk":
        idx = topk_indices(v, spec.k)
    else:
        if rng is None:
            raise ValueError("randk compression needs an rng stream")
        idx = np.sort(rng.choice_without_replacement(spec.d, spec.k))
    return CompressedMessage(idx, v[idx], spec.d)


def compress_matrix(spec: CompressorSpec, rows: np.ndarray, rngs=None) -> tuple[np.ndarray, np.ndarray]:
    """Row-batched compression in matrix form: (indices, values), each (n, k).

    Row i holds the message ``compress(spec, rows[i])`` would produce, indices
    ascending; selection semantics (stable sort, lower index wins ties) match
    the per-call path bit for bit.  For the identity, k = d.
    """
    n = rows.shape[0]
    if rows.shape[1] != spec.d:
        raise ValueError(f"rows have width {rows.shape[1]}, compressor expects {spec.d}")
    if spec.kind == "identity":
        idx = np.tile(np.arange(spec.d), (n, 1))
        return idx, rows.copy()
    if spec.kind == "topk":
        idx = np.argsort(-np.abs(rows), axis=1, kind="stable")[:, : spec.k]
        idx.sort(axis=1)
    else:
        if rngs is None:
            raise ValueError("randk compression needs one rng stream per row")
        idx = np.empty((n, spec.k), dtype=np.int64)
        for i in range(n):
            idx[i] = np.sort(rngs[i].choice_without_replacement(spec.d, spec.k))
    return idx, rows[np.arange(n)[:, None], idx]


def compress_rows(spec: CompressorSpec, rows: np.ndarray, rngs=None) -> list[CompressedMessage]:
    """Compress each row of an (n, d) matrix; equivalent to n compress() calls."""
    idx, vals = compress_matrix(spec, rows, rngs)
    dense = spec.kind == "identity"
    return [
        CompressedMessage(idx[i], vals[i], spec.d, dense=dense)
        for i in range(rows.shape[0])
    ]


def contraction_gap(spec: CompressorSpec, v: np.ndarray, rng: RngStream | None = None) -> float:
    """One realization of ``||C(v) - v||^2 / ||v||^2``."""
    sq = float(v @ v)
    if sq == 0.0:
        raise ZeroVectorError("contraction gap is undefined for the zero vector")
    msg = compress(spec, v, rng)
    kept = float(msg.values @ msg.values)
    # ||C(v) - v||^2 = ||v||^2 - ||kept||^2 for sparsifiers (exact coordinates kept)
    return max(sq - kept, 0.0) / sq


def payload_bits(msg: CompressedMessage) -> int:
    """Transmitted size: values only for dense messages, index+value pairs otherwise."""
    if msg.dense:
        return msg.d * VALUE_BITS
    return len(msg.indices) * (INDEX_BITS + VALUE_BITS)


def serialize(msg: CompressedMessage) -> bytes:
    """Framed little-endian record: d u32, count u32, then u32 indices, f64 values."""
    head = struct.pack("<II", msg.d, len(msg.indices))
    return (
        head
        + np.ascontiguousarray(msg.indices, dtype="<u4").tobytes()
        + np.ascontiguousarray(msg.values, dtype="<f8").tobytes()
    )


def deserialize(buf: bytes, offset: int = 0) -> tuple[CompressedMessage, int]:
    """Parse one framed record starting at ``offset``; return (message, next offset)."""
    d, count = struct.unpack_from("<II", buf, offset)
    offset += 8
    idx = np.frombuffer(buf, dtype="<u4", count=count, offset=offset).astype(np.int64)
    offset += 4 * count
    vals = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).copy()
    offset += 8 * count
    return CompressedMessage(idx, vals, d), offset
