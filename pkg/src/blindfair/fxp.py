"""Fixed-point numbers embedded in the ring Z_{2^64}.

A real ``x`` is stored as ``round(x * 2^f) mod 2^64`` and read back through
the two's-complement interpretation of the residue.  All ring arithmetic is
done on ``numpy.uint64`` arrays, whose native wraparound is exactly
reduction mod 2^64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import FixedPointOverflow

RING_BITS = 64
U64 = np.uint64

# Public constants (learning rates, schedule weights) are encoded with this
# many fractional bits before being multiplied into a shared value.
PUBLIC_FRAC_BITS = 32


@dataclass(frozen=True)
class FxConfig:
    frac_bits: int = 16
    int_bits: int = 16
    total_bits: int = RING_BITS

    def __post_init__(self):
        if self.total_bits != RING_BITS:
            raise ValueError(f"only a {RING_BITS}-bit ring is supported")
        if self.frac_bits < 1:
            raise ValueError("frac_bits must be >= 1")
        if self.int_bits < 1 or self.frac_bits + self.int_bits > self.total_bits:
            raise ValueError("frac_bits + int_bits must fit in total_bits")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def one(self) -> np.uint64:
        return U64(self.scale)

    @property
    def half(self) -> np.uint64:
        return U64(self.scale >> 1)

    @property
    def limit(self) -> float:
        return float(1 << self.int_bits)


DEFAULT_FX = FxConfig()


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def encode(x, cfg: FxConfig = DEFAULT_FX):
    """Encode reals onto the fixed-point grid.

    Ties round half away from zero.  Raises ``FixedPointOverflow`` (an
    ``OverflowError``) for any ``|x| >= 2^int_bits``, reporting the first
    offending index for array input.
    """
    arr = np.asarray(x, dtype=np.float64)
    bad = ~(np.abs(arr) < cfg.limit)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0]) if arr.ndim else None
        raise FixedPointOverflow(f"value outside +-2^{cfg.int_bits}", idx)
    out = _round_half_away(arr * cfg.scale).astype(np.int64).view(U64)
    return out[()] if out.ndim == 0 else out


def decode(e, cfg: FxConfig = DEFAULT_FX):
    signed = np.asarray(e, dtype=U64).view(np.int64)
    out = signed.astype(np.float64) / cfg.scale
    return float(out) if out.ndim == 0 else out


def to_signed(e) -> np.ndarray:
    return np.asarray(e, dtype=U64).view(np.int64)


def from_signed(v) -> np.ndarray:
    return np.asarray(v, dtype=np.int64).view(U64)


def shift_divide(a, s: int):
    """Arithmetic right shift by ``s`` bits: division by 2^s rounding toward -inf."""
    if s < 0:
        raise ValueError("shift must be non-negative")
    out = (np.asarray(a, dtype=U64).view(np.int64) >> np.int64(s)).view(U64)
    return out[()] if out.ndim == 0 else out


class DitherRounding:
    """Unbiased division by 2^s driven by a public random stream.

    ``floor((x + u) / 2^s)`` with ``u`` uniform on ``[0, 2^s)`` rounds up with
    probability equal to the discarded fraction, which is the same law as
    local share truncation.  Every call consumes ``x.size`` draws, so two
    parties (or a party and a reference run) that truncate the same shapes
    in the same order stay in lockstep.
    """

    def __init__(self, seed: bytes):
        digest = hashlib.sha256(b"blindfair/rounding/" + bytes(seed)).digest()
        self.rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))

    def __call__(self, a, s: int):
        a = np.asarray(a, dtype=U64)
        if s == 0:
            return a.copy()
        u = self.rng.integers(0, 1 << s, size=a.shape, dtype=U64)
        return shift_divide(add(a, u), s)


def add(a, b):
    with np.errstate(over="ignore"):
        return np.add(np.asarray(a, dtype=U64), np.asarray(b, dtype=U64))


def sub(a, b):
    with np.errstate(over="ignore"):
        return np.subtract(np.asarray(a, dtype=U64), np.asarray(b, dtype=U64))


def neg(a):
    with np.errstate(over="ignore"):
        return np.subtract(U64(0), np.asarray(a, dtype=U64))


def ring_mul(a, b):
    """Elementwise product mod 2^64 (no rescaling)."""
    with np.errstate(over="ignore"):
        return np.multiply(np.asarray(a, dtype=U64), np.asarray(b, dtype=U64))


def ring_matmul(a, b):
    """Matrix product mod 2^64 (no rescaling)."""
    with np.errstate(over="ignore"):
        return np.matmul(np.asarray(a, dtype=U64), np.asarray(b, dtype=U64))


def fx_mul_trunc(a, b, cfg: FxConfig = DEFAULT_FX):
    """Fixed-point product with exact truncation of the wide product.

    The signed product is formed in unbounded integer arithmetic, shifted
    right by ``frac_bits`` and checked against the representable range.
    """
    sa = np.asarray(a, dtype=U64).view(np.int64)
    sb = np.asarray(b, dtype=U64).view(np.int64)
    wide = sa.astype(object) * sb.astype(object)
    shifted = np.vectorize(lambda v: v >> cfg.frac_bits, otypes=[object])(wide)
    bound = 1 << (cfg.int_bits + cfg.frac_bits)
    over = np.vectorize(lambda v: abs(v) >= bound, otypes=[bool])(shifted)
    if np.any(over):
        idx = tuple(int(i) for i in np.argwhere(over)[0]) if over.ndim else None
        raise FixedPointOverflow("fixed-point product out of range", idx)
    out = shifted.astype(np.int64).view(U64)
    return out[()] if out.ndim == 0 else out


def encode_public(c: float, frac_bits: int = PUBLIC_FRAC_BITS) -> np.uint64:
    """Encode a public scalar with extra precision for ``scale_public``."""
    v = float(_round_half_away(np.float64(c) * (1 << frac_bits)))
    if abs(v) >= 2.0**62:
        raise FixedPointOverflow("public constant too large")
    return U64(np.int64(v).view(U64))


def scale_public(x, c: float, frac_bits: int = PUBLIC_FRAC_BITS):
    """Multiply fixed-point values by a public real, rescaling exactly once.

    ``c`` is carried with ``frac_bits`` fractional bits, which keeps small
    learning rates (1e-4 is only ~6.6 ulp at 16 fractional bits) accurate.
    The result has the input's scale.
    """
    return shift_divide(ring_mul(x, encode_public(c, frac_bits)), frac_bits)


def to_bytes(e) -> bytes:
    """Canonical serialization: 8 bytes little-endian per element, index order."""
    return np.ascontiguousarray(np.asarray(e, dtype=U64).ravel()).astype("<u8").tobytes()


def from_bytes(buf: bytes, shape=None) -> np.ndarray:
    out = np.frombuffer(buf, dtype="<u8").astype(U64)
    return out.reshape(shape) if shape is not None else out
