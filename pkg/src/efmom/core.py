"""Dense float64 vector helpers and reproducible hierarchical random streams.

Vectors are plain 1-D ``numpy.ndarray`` objects with dtype float64; every other
module treats them as immutable values unless it exclusively owns the buffer.

Randomness is organized as an address space: a stream is identified by a
64-bit master seed plus a path of labels (ints or strings), e.g.
``("client", 3, "grad")``.  The path is folded into a 128-bit Philox key with
BLAKE2, so streams with different paths are independent and a stream is a pure
function of its address.  Within one stream, :meth:`RngStream.seek` addresses
disjoint counter blocks of the (counter-based) Philox generator; the engine
uses block ``t`` of a ``("client", i, purpose)`` stream for iteration ``t``,
which makes per-iteration draws replayable and independent of execution order.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


class DimensionMismatchError(ValueError):
    """Raised when vector operands have incompatible lengths."""


def norm(v: np.ndarray) -> float:
    """Euclidean norm of a vector."""
    return math.sqrt(v @ v)


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y`` as a new vector."""
    if x.shape != y.shape:
        raise DimensionMismatchError(
            f"axpy operands differ in shape: {x.shape} vs {y.shape}"
        )
    return a * x + y


def ensure_finite(v: np.ndarray, what: str = "vector") -> np.ndarray:
    """Raise ValueError if ``v`` contains NaN or Inf; return ``v`` unchanged."""
    if not np.isfinite(v).all():
        raise ValueError(f"{what} contains non-finite entries")
    return v


def _encode_label(h, label) -> None:
    # Injective encoding: tag byte + fixed-width int or length-prefixed utf-8.
    if isinstance(label, (int, np.integer)):
        h.update(b"i")
        h.update(int(label).to_bytes(16, "little", signed=True))
    elif isinstance(label, str):
        raw = label.encode("utf-8")
        h.update(b"s")
        h.update(len(raw).to_bytes(4, "little"))
        h.update(raw)
    else:
        raise TypeError(f"stream path labels must be int or str, got {type(label)!r}")


class RngStream:
    """Deterministic random stream addressed by ``(master_seed, path)``.

    Streams form a hierarchy: :meth:`child` extends the path.  The Philox key
    is derived lazily from an incrementally-updated hash of the path, so
    derivation chains are cheap.  A stream owns its generator; do not share one
    instance across threads.
    """

    __slots__ = ("master_seed", "path", "_hasher", "_philox", "_gen", "_template")

    def __init__(self, master_seed: int, path: tuple = (), _hasher=None):
        self.master_seed = int(master_seed)
        self.path = tuple(path)
        if _hasher is None:
            _hasher = hashlib.blake2b(digest_size=16)
            _encode_label(_hasher, self.master_seed)
            for label in self.path:
                _encode_label(_hasher, label)
        self._hasher = _hasher
        self._philox = None
        self._gen = None
        self._template = None

    def child(self, *labels) -> "RngStream":
        """Derive the stream whose path extends this one by ``labels``."""
        h = self._hasher.copy()
        for label in labels:
            _encode_label(h, label)
        return RngStream(self.master_seed, self.path + labels, _hasher=h)

    def _materialize(self):
        key = np.frombuffer(self._hasher.digest(), dtype=np.uint64).copy()
        self._philox = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._philox)
        self._template = self._philox.state
        return self._gen

    @property
    def generator(self) -> np.random.Generator:
        """The underlying numpy Generator (position continues across calls)."""
        if self._gen is None:
            self._materialize()
        return self._gen

    def seek(self, block: int) -> "RngStream":
        """Reposition at counter block ``block`` (blocks are 2^128 draws apart).

        Block 0 is the fresh-stream position.  Returns self.
        """
        if self._gen is None:
            self._materialize()
        st = self._template
        st["state"]["counter"][2] = block
        self._philox.state = st
        return self

    # draw helpers -----------------------------------------------------

    def normal(self, size=None) -> np.ndarray:
        gen = self._gen
        if gen is None:
            gen = self._materialize()
        return gen.standard_normal(size)

    def normal_into(self, out: np.ndarray) -> None:
        """Fill ``out`` with standard normals (same draws as ``normal(len(out))``)."""
        gen = self._gen
        if gen is None:
            gen = self._materialize()
        gen.standard_normal(out=out)

    def uniform(self, low: float = 0.0, high: float = 1.0):
        gen = self._gen
        if gen is None:
            gen = self._materialize()
        return low + (high - low) * gen.random()

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self.generator.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, path={self.path})"


def derive_stream(master_seed: int, path=()) -> RngStream:
    """Build the stream addressed by ``(master_seed, path)``.

    Repeated calls with identical arguments yield streams with identical
    draws, byte-for-byte, across processes and platforms.
    """
    return RngStream(master_seed, tuple(path))


class OracleStreams:
    """Per-client randomness for one momentum update.

    Bundles the purpose-tagged streams of one client and exposes them
    re-positioned at the current iteration block.  Because every accessor
    seeks back to the block start, all oracle calls within one update see the
    same draws, which realizes the same-minibatch semantics of the momentum
    corrections.  Reuse one instance per client for a whole run and set
    :attr:`t` each iteration.
    """

    __slots__ = ("_grad", "_hvp", "_q", "_indep", "t")

    def __init__(self, base: RngStream, t: int = 0):
        self._grad = base.child("grad")
        self._hvp = base.child("hvp")
        self._q = base.child("q")
        self._indep = base.child("indep")
        self.t = t

    def grad(self) -> RngStream:
        """Gradient-noise stream, rewound to this iteration's start."""
        return self._grad.seek(self.t)

    def hvp(self) -> RngStream:
        """Hessian-noise stream, rewound to this iteration's start."""
        return self._hvp.seek(self.t)

    def q(self) -> RngStream:
        """Interpolation-coefficient stream, rewound to this iteration's start."""
        return self._q.seek(self.t)

    def indep_grad(self) -> RngStream:
        """Independent gradient-noise stream (a distinct minibatch)."""
        return self._indep.seek(self.t)


def client_oracle_streams(master_seed: int, client: int, t: int = 0) -> OracleStreams:
    """Standard per-client oracle stream layout shared by engine and reference."""
    return OracleStreams(derive_stream(master_seed, ("client", client)), t=t)
