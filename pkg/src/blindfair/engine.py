"""Two-party runtime: party contexts and secure arithmetic on shares.

Every function in this module runs inside *one* party.  Both parties call
the same sequence of functions with their own ``PartyContext``; values are
plain ``numpy.uint64`` arrays holding that party's additive share (or, for
Boolean values, its XOR share packed into 64-bit words).

Truncation runs in one of two modes:

``prob``
    local share truncation (the protocol proper);
``exact``
    reconstruct, round with public dither (:class:`blindfair.fxp.DitherRounding`),
    re-share from a PRG both parties know.  This leaks
    every truncated intermediate to both parties and exists only so test
    runs can be compared bit-for-bit against the cleartext reference.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import fxp, shares
from .errors import (BlindFairError, BlockSizeError, ConfigMismatch, DimensionMismatch,
                     ProtocolAbort, StaleRunError, VersionMismatch)
from .fxp import DEFAULT_FX, FxConfig, U64
from .shares import TripleStore
from .transport import PROTOCOL_VERSION, Channel, ChannelStats, InProcChannel, Role, Tag

log = logging.getLogger(__name__)

MODES = ("prob", "exact")
ALL_ONES = U64(0xFFFFFFFFFFFFFFFF)

SharedMatrix = np.ndarray  # this party's shares, row-major, dtype uint64


class RunRegistry:
    """Run ids this party has already executed (guards against triple reuse)."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self._seen: set[bytes] = set()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().split():
                self._seen.add(bytes.fromhex(line))

    def __contains__(self, run_id: bytes) -> bool:
        return bytes(run_id) in self._seen

    def add(self, run_id: bytes) -> None:
        self._seen.add(bytes(run_id))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(bytes(run_id).hex() + "\n")


@dataclass
class PartyContext:
    role: Role
    channel: Channel
    triples: TripleStore
    fx: FxConfig = DEFAULT_FX
    public_seed: bytes = b"blindfair"
    run_id: Optional[bytes] = None
    mode: str = "prob"
    private_seed: Optional[int] = None
    registry: RunRegistry = field(default_factory=RunRegistry)
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        self.role = Role.parse(self.role)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.run_id is None:
            self.run_id = self.triples.run_id
        self.rng = np.random.default_rng(self.private_seed)
        digest = hashlib.sha256(b"exact-reshare/" + bytes(self.public_seed) + bytes(self.run_id)).digest()
        self._exact_rng = np.random.default_rng(list(np.frombuffer(digest, dtype="<u4")))
        self.rounding = fxp.DitherRounding(self.public_seed)

    @property
    def party(self) -> int:
        return int(self.role)

    @property
    def stats(self) -> ChannelStats:
        return self.channel.stats


# --------------------------------------------------------------------------
# Messaging
# --------------------------------------------------------------------------

_HS = struct.Struct("<HHHHB16s32s")


def handshake(ctx: PartyContext) -> None:
    """Agree on version, fixed-point format, run id, public seed and mode."""
    if ctx.run_id in ctx.registry:
        raise StaleRunError(f"run id {ctx.run_id.hex()} was already used by this party")
    mode = MODES.index(ctx.mode)
    mine = _HS.pack(ctx.version, ctx.fx.frac_bits, ctx.fx.int_bits, ctx.fx.total_bits, mode,
                    ctx.run_id, hashlib.sha256(bytes(ctx.public_seed)).digest())
    ctx.channel.send(Tag.HANDSHAKE, mine)
    theirs = ctx.channel.expect(Tag.HANDSHAKE)
    if len(theirs) != _HS.size:
        raise VersionMismatch("peer handshake has an unexpected layout")
    v, frac, intb, total, pmode, run_id, seed_digest = _HS.unpack(theirs)
    if v != ctx.version:
        raise VersionMismatch(f"protocol version {ctx.version} vs peer {v}")
    if (frac, intb, total) != (ctx.fx.frac_bits, ctx.fx.int_bits, ctx.fx.total_bits):
        raise ConfigMismatch(f"fixed point {ctx.fx.int_bits}.{ctx.fx.frac_bits} vs peer {intb}.{frac}")
    if run_id != ctx.run_id:
        raise ConfigMismatch("peers disagree on the run id (different triple files?)")
    if seed_digest != hashlib.sha256(bytes(ctx.public_seed)).digest():
        raise ConfigMismatch("peers disagree on the public seed")
    if pmode != mode:
        raise ConfigMismatch(f"truncation mode {ctx.mode} vs peer {MODES[pmode]}")
    ctx.registry.add(ctx.run_id)


def exchange(ctx: PartyContext, tag: int, *arrays: np.ndarray) -> list[np.ndarray]:
    """Send this party's arrays and receive the peer's arrays of equal shapes."""
    arrays = [np.asarray(a, dtype=U64) for a in arrays]
    ctx.channel.send(tag, b"".join(fxp.to_bytes(a) for a in arrays))
    return _split(ctx.channel.expect(tag), arrays)


def _split(payload: bytes, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    total = sum(a.size for a in like)
    if len(payload) != 8 * total:
        raise DimensionMismatch(f"peer sent {len(payload) // 8} words, expected {total}")
    flat = fxp.from_bytes(payload)
    out, off = [], 0
    for a in like:
        out.append(flat[off:off + a.size].reshape(a.shape))
        off += a.size
    return out


def open_shares(ctx: PartyContext, *xs: np.ndarray, tag: int = Tag.SHARE_BATCH) -> list[np.ndarray]:
    """Reveal shared values to both parties."""
    peer = exchange(ctx, tag, *xs)
    return [fxp.add(x, p) for x, p in zip(xs, peer)]


def open_bits(ctx: PartyContext, *bits: np.ndarray) -> list[np.ndarray]:
    peer = exchange(ctx, Tag.BIT_BATCH, *bits)
    return [np.bitwise_xor(np.asarray(b, U64), p) for b, p in zip(bits, peer)]


def input_share_matrix(ctx: PartyContext, owner, M=None, shape=None) -> SharedMatrix:
    """Secret-share a ring matrix held in the clear by ``owner``.

    The owner samples the mask from its private RNG and sends ``M - r``
    together with the shape.  The receiver may pass the ``shape`` it
    expects; a disagreement raises ``DimensionMismatch``.
    """
    owner = Role.parse(owner)
    if ctx.role == owner:
        if M is None:
            raise ValueError("the owner must supply the matrix")
        M = np.asarray(M, dtype=U64)
        if shape is not None and tuple(shape) != M.shape:
            raise DimensionMismatch(f"matrix shape {M.shape} differs from declared {tuple(shape)}")
        r = shares.random_ring(ctx.rng, M.shape)
        header = struct.pack("<B", M.ndim) + struct.pack(f"<{M.ndim}Q", *M.shape)
        ctx.channel.send(Tag.SHARE_BATCH, header + fxp.to_bytes(fxp.sub(M, r)))
        return r
    payload = ctx.channel.expect(Tag.SHARE_BATCH)
    ndim = payload[0]
    dims = struct.unpack_from(f"<{ndim}Q", payload, 1)
    if shape is not None and tuple(shape) != tuple(dims):
        raise DimensionMismatch(f"peer shared shape {dims}, expected {tuple(shape)}")
    body = payload[1 + 8 * ndim:]
    if len(body) != 8 * int(np.prod(dims, dtype=np.int64)):
        raise DimensionMismatch("share payload does not match its declared shape")
    return fxp.from_bytes(body, dims)


def reconstruct_to(ctx: PartyContext, target, S: SharedMatrix) -> Optional[np.ndarray]:
    """Reveal ``S`` to ``target`` only; the other party sends and learns nothing."""
    target = Role.parse(target)
    S = np.asarray(S, dtype=U64)
    if ctx.role == target:
        (peer,) = _split(ctx.channel.expect(Tag.RECONSTRUCT), [S])
        return fxp.add(S, peer)
    ctx.channel.send(Tag.RECONSTRUCT, fxp.to_bytes(S))
    return None


# --------------------------------------------------------------------------
# Linear (local) operations
# --------------------------------------------------------------------------


def add_public(ctx: PartyContext, x, c) -> np.ndarray:
    """Add a public ring constant (only party 1 adds it)."""
    x = np.asarray(x, dtype=U64)
    return fxp.add(x, c) if ctx.party == 1 else x.copy()


def public_value(ctx: PartyContext, c, shape=()) -> np.ndarray:
    """A trivial sharing of a public ring value."""
    c = np.broadcast_to(np.asarray(c, dtype=U64), shape)
    return c.copy() if ctx.party == 1 else np.zeros(shape, dtype=U64)


# --------------------------------------------------------------------------
# Truncation and multiplication
# --------------------------------------------------------------------------


def truncate(ctx: PartyContext, x, bits: int) -> np.ndarray:
    """Divide a shared fixed-point value by 2^bits."""
    x = np.asarray(x, dtype=U64)
    if bits == 0:
        return x.copy()
    if ctx.mode == "prob":
        return shares.truncate_share(ctx.party, x, bits)
    (full,) = open_shares(ctx, x, tag=Tag.RECONSTRUCT)
    shifted = ctx.rounding(full, bits)
    r = shares.random_ring(ctx._exact_rng, x.shape)
    return fxp.sub(shifted, r) if ctx.party == 1 else r


def truncate_many(ctx: PartyContext, items: Sequence[tuple[np.ndarray, int]]) -> list[np.ndarray]:
    """Truncate several values in one round (exact mode) or locally (prob mode)."""
    if ctx.mode == "prob" or not items:
        return [truncate(ctx, x, b) for x, b in items]
    opened = open_shares(ctx, *[x for x, _ in items], tag=Tag.RECONSTRUCT)
    out = []
    for full, (x, bits) in zip(opened, items):
        shifted = ctx.rounding(full, bits)
        r = shares.random_ring(ctx._exact_rng, np.shape(x))
        out.append(fxp.sub(shifted, r) if ctx.party == 1 else r)
    return out


def scale_public(ctx: PartyContext, x, c: float) -> np.ndarray:
    """Multiply by a public real (see :func:`blindfair.fxp.scale_public`)."""
    raw = fxp.ring_mul(x, fxp.encode_public(c))
    return truncate(ctx, raw, fxp.PUBLIC_FRAC_BITS)


def mul(ctx: PartyContext, x, y) -> np.ndarray:
    """Elementwise product of shared values, without rescaling."""
    return mul_many(ctx, [(x, y)])[0]


def mul_many(ctx: PartyContext, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    """Several elementwise Beaver multiplications sharing one round."""
    pairs = [(np.asarray(x, U64), np.asarray(y, U64)) for x, y in pairs]
    for x, y in pairs:
        if x.shape != y.shape:
            raise DimensionMismatch(f"elementwise product of {x.shape} and {y.shape}")
    sizes = [x.size for x, _ in pairs]
    t = ctx.triples.take_scalar(sum(sizes))
    xs = np.concatenate([x.ravel() for x, _ in pairs]) if pairs else np.empty(0, U64)
    ys = np.concatenate([y.ravel() for _, y in pairs]) if pairs else np.empty(0, U64)
    e_i, f_i = shares.beaver_masks(xs, ys, t)
    e_p, f_p = exchange(ctx, Tag.BEAVER_EF, e_i, f_i)
    z = shares.beaver_combine(ctx.party, fxp.add(e_i, e_p), fxp.add(f_i, f_p), t)
    out, off = [], 0
    for (x, _), n in zip(pairs, sizes):
        out.append(z[off:off + n].reshape(x.shape))
        off += n
    return out


def _as2d(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, 1) if a.ndim == 1 else a


def matmul_raw_many(ctx: PartyContext, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    """Several matrix Beaver products in one round, each with its own triple."""
    triples, masks = [], []
    shapes = []
    for A, B in pairs:
        A, B = np.asarray(A, U64), np.asarray(B, U64)
        A2, B2 = (A.reshape(1, -1) if A.ndim == 1 else A), _as2d(B)
        if A2.shape[1] != B2.shape[0]:
            raise DimensionMismatch(f"cannot multiply {A.shape} by {B.shape}")
        t = ctx.triples.take_matrix(A2.shape[0], A2.shape[1], B2.shape[1])
        triples.append(t)
        masks.extend(shares.beaver_masks(A2, B2, t))
        shapes.append((A.ndim, B.ndim, A2.shape[0], B2.shape[1]))
    peer = exchange(ctx, Tag.BEAVER_EF, *masks)
    out = []
    for i, t in enumerate(triples):
        E = fxp.add(masks[2 * i], peer[2 * i])
        F = fxp.add(masks[2 * i + 1], peer[2 * i + 1])
        Z = shares.beaver_combine(ctx.party, E, F, t, matmul=True)
        a_nd, b_nd, rows, cols = shapes[i]
        if a_nd == 1 and b_nd == 1:
            Z = Z.reshape(())
        elif a_nd == 1:
            Z = Z.reshape(cols)
        elif b_nd == 1:
            Z = Z.reshape(rows)
        out.append(Z)
    return out


def secure_matmul(ctx: PartyContext, A, B, extra_shift: int = 0) -> np.ndarray:
    """Fixed-point product ``A @ B``: one Beaver round, then one truncation per entry.

    ``extra_shift`` folds an additional power-of-two division into that same
    truncation.
    """
    (Z,) = matmul_raw_many(ctx, [(A, B)])
    return truncate(ctx, Z, ctx.fx.frac_bits + extra_shift)


def _log2_exact(v: int, what: str) -> int:
    if v < 1 or v & (v - 1):
        raise BlockSizeError(f"{what} must be a power of two, got {v}")
    return v.bit_length() - 1


def blocked_mult_shift_avg(ctx: PartyContext, Zt, X, block: int) -> np.ndarray:
    """``(1/n) Zt @ X`` without ever forming an un-normalized sum over all rows.

    The ``n`` columns of ``Zt`` (rows of ``X``) are cut into blocks of ``b``;
    each block product is divided by ``b`` as part of its rescaling, the
    block results are summed and the sum is divided by ``n / b``.  All
    divisions are shifts.
    """
    Zt, X = np.asarray(Zt, U64), np.asarray(X, U64)
    n = Zt.shape[1]
    if X.shape[0] != n:
        raise DimensionMismatch(f"cannot multiply {Zt.shape} by {X.shape}")
    log_b = _log2_exact(block, "block size")
    log_n = _log2_exact(n, "n")
    if n % block:
        raise BlockSizeError(f"n={n} is not a multiple of block size {block}")
    if block >= (1 << ctx.fx.int_bits):
        raise BlockSizeError("block size must stay below 2^int_bits")
    pairs = [(Zt[:, k:k + block], X[k:k + block, :]) for k in range(0, n, block)]
    raws = matmul_raw_many(ctx, pairs)
    parts = truncate_many(ctx, [(r, ctx.fx.frac_bits + log_b) for r in raws])
    total = parts[0]
    for p in parts[1:]:
        total = fxp.add(total, p)
    return truncate(ctx, total, log_n - log_b)


# --------------------------------------------------------------------------
# Boolean sharing
# --------------------------------------------------------------------------


def and_words(ctx: PartyContext, x, y) -> np.ndarray:
    """AND of XOR-shared 64-bit words using dealer AND triples (one round)."""
    return and_words_many(ctx, [(x, y)])[0]


def and_words_many(ctx: PartyContext, pairs) -> list[np.ndarray]:
    pairs = [(np.asarray(x, U64), np.asarray(y, U64)) for x, y in pairs]
    sizes = [x.size for x, _ in pairs]
    xs = np.concatenate([x.ravel() for x, _ in pairs])
    ys = np.concatenate([y.ravel() for _, y in pairs])
    t = ctx.triples.take_and(xs.size)
    d_i, e_i = xs ^ t.a, ys ^ t.b
    d_p, e_p = exchange(ctx, Tag.BIT_BATCH, d_i, e_i)
    z = shares.and_combine(ctx.party, d_i ^ d_p, e_i ^ e_p, t)
    out, off = [], 0
    for (x, _), n in zip(pairs, sizes):
        out.append(z[off:off + n].reshape(x.shape))
        off += n
    return out


def not_bits(ctx: PartyContext, bits) -> np.ndarray:
    bits = np.asarray(bits, U64)
    return bits ^ U64(1) if ctx.party == 1 else bits.copy()


def b2a(ctx: PartyContext, bits) -> np.ndarray:
    """Convert XOR-shared bits (in the low bit of each word) to additive shares.

    Uses ``b = b1 + b2 - 2 b1 b2`` with one Beaver product per bit.
    """
    bits = np.asarray(bits, U64) & U64(1)
    zero = np.zeros_like(bits)
    x, y = (bits, zero) if ctx.party == 1 else (zero, bits)
    prod = mul(ctx, x, y)
    return fxp.sub(bits, fxp.ring_mul(prod, U64(2)))


# --------------------------------------------------------------------------
# Running both parties in one process
# --------------------------------------------------------------------------


def run_party(ctx: PartyContext, fn: Callable, *args, **kwargs):
    """Run one party's protocol function; on failure tell the peer and re-raise."""
    try:
        return fn(ctx, *args, **kwargs)
    except ProtocolAbort:
        raise
    except BaseException as exc:
        ctx.channel.abort(f"{type(exc).__name__}: {exc}")
        raise


@dataclass
class LoopbackResult:
    modeler: object
    regulator: object
    stats: dict


def make_contexts(seed: bytes = b"blindfair-test", mode: str = "prob", fx: FxConfig = DEFAULT_FX,
                  public_seed: bytes = b"blindfair", channels=None, triples=None,
                  run_id: Optional[bytes] = None) -> tuple[PartyContext, PartyContext]:
    """A pair of contexts over an in-process channel with streamed triples."""
    cm, cr = channels if channels is not None else InProcChannel.pair()
    tm, tr = triples if triples is not None else (TripleStore.streaming_from_seed(1, seed),
                                                 TripleStore.streaming_from_seed(2, seed))
    digest = hashlib.sha256(b"private/" + bytes(seed)).digest()
    pm, pr = int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:16], "little")
    return (PartyContext(Role.MODELER, cm, tm, fx, public_seed, run_id, mode, pm),
            PartyContext(Role.REGULATOR, cr, tr, fx, public_seed, run_id, mode, pr))


def run_pair(ctx_m: PartyContext, ctx_r: PartyContext, fn_m: Callable, fn_r: Callable,
             args_m=(), args_r=(), kwargs_m=None, kwargs_r=None) -> LoopbackResult:
    """Run the two parties concurrently (threads) and collect both outputs."""
    results: dict = {}
    errors: dict = {}

    def target(key, ctx, fn, args, kwargs):
        try:
            results[key] = run_party(ctx, fn, *args, **(kwargs or {}))
        except BaseException as exc:  # re-raised in the caller's thread
            errors[key] = exc

    threads = [
        threading.Thread(target=target, args=("m", ctx_m, fn_m, args_m, kwargs_m), daemon=True),
        threading.Thread(target=target, args=("r", ctx_r, fn_r, args_r, kwargs_r), daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = [e for e in errors.values() if not isinstance(e, ProtocolAbort)]
        raise (primary or list(errors.values()))[0]
    return LoopbackResult(results["m"], results["r"],
                          {"modeler": ctx_m.stats.copy(), "regulator": ctx_r.stats.copy()})


def loopback(fn: Callable, args_m=(), args_r=(), **ctx_kwargs) -> LoopbackResult:
    """Convenience: same function at both parties, fresh contexts, handshake first."""
    ctx_m, ctx_r = make_contexts(**ctx_kwargs)

    def wrapped(ctx, *args):
        handshake(ctx)
        return fn(ctx, *args)

    return run_pair(ctx_m, ctx_r, wrapped, wrapped, args_m, args_r)
