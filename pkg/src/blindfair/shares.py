"""Additive secret sharing over Z_{2^64} and dealer-supplied triples.

The functions that take *both* parties' shares (``beaver_mul``,
``reconstruct``) model an interaction in a single process; the networked
runtime in :mod:`blindfair.engine` calls the per-party halves
(``beaver_masks`` / ``beaver_combine``) on either side of a real exchange.

Triples come from a trusted dealer.  Every triple is derived from the
dealer seed and its position in a fixed chunk grid, so a lazily streamed
store and a materialized one (``dealer_generate`` / triple files) hand out
identical values.
"""

from __future__ import annotations

import hashlib
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import fxp
from .errors import IntegrityError, TripleExhausted

U64 = np.uint64
CHUNK = 4096

TRIPLE_MAGIC = b"BFTR"
TRIPLE_VERSION = 1


@dataclass
class Share:
    """One party's additive share (scalar or array) of a ring value."""

    party: int
    value: np.ndarray

    def __post_init__(self):
        if self.party not in (1, 2):
            raise ValueError("party index must be 1 or 2")
        self.value = np.asarray(self.value, dtype=U64)


def reconstruct(s1: Share, s2: Share) -> np.ndarray:
    return fxp.add(s1.value, s2.value)


def share_secret(x, rng: np.random.Generator, r=None) -> tuple[Share, Share]:
    """Split ``x`` into ``(x - r, r)`` with ``r`` uniform on Z_{2^64}."""
    x = np.asarray(x, dtype=U64)
    if r is None:
        r = random_ring(rng, x.shape)
    r = np.asarray(r, dtype=U64)
    return Share(1, fxp.sub(x, r)), Share(2, r)


def random_ring(rng: np.random.Generator, shape=()) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    return rng.bit_generator.random_raw(n).astype(U64).reshape(shape)


# --------------------------------------------------------------------------
# Triples
# --------------------------------------------------------------------------


@dataclass
class Triple:
    """One party's half of a multiplication triple (elementwise or matrix)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


def beaver_masks(x, y, t: Triple):
    """Local step: the masked values ``e_i = x_i - a_i`` and ``f_i = y_i - b_i``."""
    return fxp.sub(x, t.a), fxp.sub(y, t.b)


def beaver_combine(party: int, e, f, t: Triple, matmul: bool = False):
    """Local step after ``e`` and ``f`` have been opened.

    Elementwise: ``z_i = (i-1) e f + f a_i + e b_i + c_i``.  The matrix
    variant keeps operand order: ``Z_i = (i-1) E F + E B_i + A_i F + C_i``.
    """
    if matmul:
        z = fxp.add(fxp.add(fxp.ring_matmul(e, t.b), fxp.ring_matmul(t.a, f)), t.c)
        if party == 1:
            z = fxp.add(z, fxp.ring_matmul(e, f))
    else:
        z = fxp.add(fxp.add(fxp.ring_mul(f, t.a), fxp.ring_mul(e, t.b)), t.c)
        if party == 1:
            z = fxp.add(z, fxp.ring_mul(e, f))
    return z


def beaver_mul(x1: Share, y1: Share, x2: Share, y2: Share,
               t: tuple[Triple, Triple]) -> tuple[Share, Share]:
    """Both parties' view of one elementwise Beaver multiplication.

    ``t`` holds each party's half of the triple.  The result is the raw ring
    product; fixed-point callers truncate afterwards.
    """
    return _beaver(x1, y1, x2, y2, t, matmul=False)


def beaver_matmul(x1: Share, y1: Share, x2: Share, y2: Share,
                  t: tuple[Triple, Triple]) -> tuple[Share, Share]:
    return _beaver(x1, y1, x2, y2, t, matmul=True)


def _beaver(x1, y1, x2, y2, t, matmul):
    t1, t2 = t
    if t1.c.size == 0 and np.size(x1.value) > 0:
        raise TripleExhausted("empty triple")
    e1, f1 = beaver_masks(x1.value, y1.value, t1)
    e2, f2 = beaver_masks(x2.value, y2.value, t2)
    e, f = fxp.add(e1, e2), fxp.add(f1, f2)
    return (
        Share(1, beaver_combine(1, e, f, t1, matmul=matmul)),
        Share(2, beaver_combine(2, e, f, t2, matmul=matmul)),
    )


def and_combine(party: int, d, e, t: Triple):
    """Boolean (XOR-shared) analogue of ``beaver_combine`` on packed 64-bit words."""
    z = np.bitwise_xor(np.bitwise_xor(t.c, np.bitwise_and(d, t.b)), np.bitwise_and(e, t.a))
    if party == 1:
        z = np.bitwise_xor(z, np.bitwise_and(d, e))
    return z


# --------------------------------------------------------------------------
# Truncation
# --------------------------------------------------------------------------


def truncate_share(party: int, x, bits: int):
    """Local probabilistic truncation of one party's share.

    Party 1 shifts its share arithmetically; party 2 negates, shifts and
    negates back.  For a secret of magnitude well below 2^63 the two results
    sum to ``floor(x / 2^bits)`` or one more (stochastic rounding), and are
    off by roughly 2^(64-bits) with probability about ``|x| / 2^63``.
    """
    if party == 1:
        return fxp.shift_divide(x, bits)
    return fxp.neg(fxp.shift_divide(fxp.neg(x), bits))


def prob_truncate(s: Share, frac_bits: int) -> Share:
    return Share(s.party, truncate_share(s.party, s.value, frac_bits))


# --------------------------------------------------------------------------
# Dealer
# --------------------------------------------------------------------------


def run_id_from_seed(seed: bytes) -> bytes:
    return hashlib.sha256(b"blindfair/run-id/" + bytes(seed)).digest()[:16]


def _rng(seed: bytes, *label) -> np.random.Generator:
    h = hashlib.sha256(bytes(seed))
    for part in label:
        h.update(b"/")
        h.update(str(part).encode())
    words = np.frombuffer(h.digest(), dtype="<u4").astype(np.uint32)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))


def _raw(rng: np.random.Generator, shape) -> np.ndarray:
    return random_ring(rng, shape)


def _scalar_chunk(seed: bytes, k: int):
    rng = _rng(seed, "scalar", k)
    a, b, a1, b1, c1 = (_raw(rng, (CHUNK,)) for _ in range(5))
    c = fxp.ring_mul(a, b)
    return (a1, b1, c1), (fxp.sub(a, a1), fxp.sub(b, b1), fxp.sub(c, c1))


def _and_chunk(seed: bytes, k: int):
    rng = _rng(seed, "and", k)
    a, b, a1, b1, c1 = (_raw(rng, (CHUNK,)) for _ in range(5))
    c = a & b
    return (a1, b1, c1), (a ^ a1, b ^ b1, c ^ c1)


def _matrix_triple(seed: bytes, shape: tuple[int, int, int], idx: int):
    n, k, m = shape
    rng = _rng(seed, "matrix", n, k, m, idx)
    a, a1 = _raw(rng, (n, k)), _raw(rng, (n, k))
    b, b1 = _raw(rng, (k, m)), _raw(rng, (k, m))
    c1 = _raw(rng, (n, m))
    c = fxp.ring_matmul(a, b)
    return Triple(a1, b1, c1), Triple(fxp.sub(a, a1), fxp.sub(b, b1), fxp.sub(c, c1))


class _Stream:
    """One party's half of a triple sequence, either materialized or streamed.

    A streamed sequence generates fixed-size chunks on demand and forgets
    chunks once the cursor has moved past them.
    """

    def __init__(self, party: int, make_chunk=None, arrays=None):
        self.party = party
        self.make_chunk = make_chunk
        self.fixed = arrays
        self.limit = None if arrays is None else len(arrays[0])
        self.chunks: dict[int, tuple] = {}
        self.cursor = 0

    def _chunk(self, k: int):
        if k not in self.chunks:
            self.chunks[k] = self.make_chunk(k)[self.party - 1]
        return self.chunks[k]

    def arrays(self, count: int):
        """The first ``count`` entries, without moving the cursor."""
        if self.fixed is not None:
            return tuple(arr[:count] for arr in self.fixed)
        nchunks = -(-count // CHUNK)
        parts = [self.make_chunk(k)[self.party - 1] for k in range(nchunks)]
        if not parts:
            return (np.empty(0, U64),) * 3
        return tuple(np.concatenate([p[i] for p in parts])[:count] for i in range(3))

    def take(self, count: int, what: str) -> Triple:
        start, end = self.cursor, self.cursor + count
        if self.fixed is not None:
            if end > self.limit:
                raise TripleExhausted(f"{what} triples exhausted: need {end}, have {self.limit}")
            self.cursor = end
            return Triple(*(arr[start:end] for arr in self.fixed))
        if count == 0:
            return Triple(*(np.empty(0, U64),) * 3)
        first, last = start // CHUNK, (end - 1) // CHUNK
        pieces = []
        for k in range(first, last + 1):
            lo = max(start, k * CHUNK) - k * CHUNK
            hi = min(end, (k + 1) * CHUNK) - k * CHUNK
            pieces.append(tuple(arr[lo:hi] for arr in self._chunk(k)))
        for k in [k for k in self.chunks if k < end // CHUNK]:
            del self.chunks[k]
        self.cursor = end
        if len(pieces) == 1:
            return Triple(*pieces[0])
        return Triple(*(np.concatenate([p[i] for p in pieces]) for i in range(3)))


@dataclass
class TripleStore:
    """One party's supply of preprocessed correlated randomness.

    ``limit`` values of ``None`` mean the store streams triples on demand
    from ``seed`` (used for in-process runs); otherwise it is bounded and
    raises ``TripleExhausted`` when overdrawn.  Both parties must draw in the
    same order, which the protocols guarantee by construction.
    """

    party: int
    run_id: bytes
    scalar: _Stream
    and_words: _Stream
    matrix: dict = field(default_factory=dict)
    matrix_cursor: Counter = field(default_factory=Counter)
    seed: Optional[bytes] = None
    streaming: bool = False

    @classmethod
    def streaming_from_seed(cls, party: int, seed: bytes) -> "TripleStore":
        return cls(
            party=party,
            run_id=run_id_from_seed(seed),
            scalar=_Stream(party, make_chunk=lambda k: _scalar_chunk(seed, k)),
            and_words=_Stream(party, make_chunk=lambda k: _and_chunk(seed, k)),
            seed=bytes(seed),
            streaming=True,
        )

    def take_scalar(self, count: int) -> Triple:
        return self.scalar.take(count, "scalar")

    def take_and(self, count: int) -> Triple:
        return self.and_words.take(count, "AND")

    def take_matrix(self, n: int, k: int, m: int) -> Triple:
        shape = (n, k, m)
        idx = self.matrix_cursor[shape]
        if self.streaming:
            t = _matrix_triple(self.seed, shape, idx)[self.party - 1]
        else:
            pool = self.matrix.get(shape, [])
            if idx >= len(pool):
                raise TripleExhausted(f"matrix triples of shape {shape} exhausted after {len(pool)}")
            t = pool[idx]
        self.matrix_cursor[shape] += 1
        return t

    def usage(self) -> "TripleBudget":
        return TripleBudget(self.scalar.cursor, self.and_words.cursor, Counter(self.matrix_cursor))


@dataclass
class TripleBudget:
    """Triple counts for one protocol run.  ``and_words`` counts 64-bit words."""

    scalar: int = 0
    and_words: int = 0
    matrix: Counter = field(default_factory=Counter)

    def __add__(self, other: "TripleBudget") -> "TripleBudget":
        return TripleBudget(self.scalar + other.scalar, self.and_words + other.and_words,
                            self.matrix + other.matrix)

    def __mul__(self, k: int) -> "TripleBudget":
        return TripleBudget(self.scalar * k, self.and_words * k,
                            Counter({s: c * k for s, c in self.matrix.items()}))

    __rmul__ = __mul__

    def shapes(self) -> list[tuple[int, int, int]]:
        out = []
        for shape in sorted(self.matrix):
            out.extend([shape] * self.matrix[shape])
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripleBudget):
            return NotImplemented
        clean = lambda c: {k: v for k, v in c.items() if v}
        return (self.scalar, self.and_words, clean(self.matrix)) == (
            other.scalar, other.and_words, clean(other.matrix))


def dealer_generate(count_scalar: int, count_and: int, shapes: Iterable[Sequence[int]],
                    seed: bytes) -> tuple[TripleStore, TripleStore]:
    """Materialize bounded triple stores for both parties.

    ``count_and`` is a number of 64-bit words, i.e. 64 independent bit
    triples each.  Output is a deterministic function of ``seed``.
    """
    seed = bytes(seed)
    shape_counts = Counter(tuple(int(v) for v in s) for s in shapes)
    stores = []
    for party in (1, 2):
        scalar = _Stream(party, make_chunk=lambda k: _scalar_chunk(seed, k)).arrays(count_scalar)
        and_words = _Stream(party, make_chunk=lambda k: _and_chunk(seed, k)).arrays(count_and)
        matrix = {
            shape: [_matrix_triple(seed, shape, i)[party - 1] for i in range(cnt)]
            for shape, cnt in sorted(shape_counts.items())
        }
        stores.append(TripleStore(
            party=party,
            run_id=run_id_from_seed(seed),
            scalar=_Stream(party, arrays=scalar),
            and_words=_Stream(party, arrays=and_words),
            matrix=matrix,
            seed=None,
        ))
    return stores[0], stores[1]


# --------------------------------------------------------------------------
# Triple files
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHHH16sQQQ")


def save_store(store: TripleStore, path) -> None:
    """Write a bounded store: header, scalar records, AND records, matrix records."""
    if store.streaming:
        raise ValueError("a streaming store has no finite contents to save")
    sa, sb, sc = store.scalar.arrays(store.scalar.limit)
    aa, ab, ac = store.and_words.arrays(store.and_words.limit)
    n_matrix = sum(len(v) for v in store.matrix.values())
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TRIPLE_MAGIC, TRIPLE_VERSION, fxp.RING_BITS, store.party,
                              store.run_id, len(sa), len(aa), n_matrix))
        fh.write(np.stack([sa, sb, sc], axis=1).astype("<u8").tobytes())
        fh.write(np.stack([aa, ab, ac], axis=1).astype("<u8").tobytes())
        for shape in sorted(store.matrix):
            for t in store.matrix[shape]:
                fh.write(struct.pack("<III", *shape))
                for arr in (t.a, t.b, t.c):
                    fh.write(np.ascontiguousarray(arr).astype("<u8").tobytes())


def load_store(path) -> TripleStore:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated triple file")
    magic, version, ring_bits, party, run_id, n_s, n_a, n_m = _HEADER.unpack_from(data)
    if magic != TRIPLE_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != TRIPLE_VERSION or ring_bits != fxp.RING_BITS:
        raise IntegrityError(f"{path}: unsupported version {version} / ring {ring_bits}")
    off = _HEADER.size
    try:
        recs = []
        for count in (n_s, n_a):
            nbytes = 24 * count
            if off + nbytes > len(data):
                raise IntegrityError(f"{path}: truncated records")
            recs.append(np.frombuffer(data, dtype="<u8", count=3 * count, offset=off)
                        .astype(U64).reshape(count, 3))
            off += nbytes
        matrix: dict = {}
        for _ in range(n_m):
            n, k, m = struct.unpack_from("<III", data, off)
            off += 12
            parts = []
            for shp in ((n, k), (k, m), (n, m)):
                cnt = shp[0] * shp[1]
                if off + 8 * cnt > len(data):
                    raise IntegrityError(f"{path}: truncated matrix record")
                parts.append(np.frombuffer(data, dtype="<u8", count=cnt, offset=off)
                             .astype(U64).reshape(shp))
                off += 8 * cnt
            matrix.setdefault((n, k, m), []).append(Triple(*parts))
    except struct.error as exc:
        raise IntegrityError(f"{path}: truncated matrix header") from exc
    if off != len(data):
        raise IntegrityError(f"{path}: {len(data) - off} trailing bytes")
    s, a = recs
    return TripleStore(
        party=party,
        run_id=run_id,
        scalar=_Stream(party, arrays=(s[:, 0].copy(), s[:, 1].copy(), s[:, 2].copy())),
        and_words=_Stream(party, arrays=(a[:, 0].copy(), a[:, 1].copy(), a[:, 2].copy())),
        matrix=matrix,
    )
