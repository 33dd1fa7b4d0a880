"""Comparison and piecewise-linear gadgets on shared fixed-point values.

The sign bit of a shared value is extracted by adding the two parties'
shares inside a Boolean circuit.  Each party's 64-bit share is one packed
word, so the circuit works on whole words: a single AND gives the bitwise
generate signals, and six Kogge-Stone levels (offsets 1, 2, ..., 32)
propagate carries.  The result costs 12 AND words and 7 rounds per value,
independent of the inputs.

Bits returned by these gadgets are XOR shares stored in the low bit of a
``uint64`` word.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine, fxp
from .engine import PartyContext
from .fxp import U64
from .transport import ChannelStats

AND_WORDS_PER_MSB = 12
ROUNDS_PER_MSB = 7
_LEVELS = (1, 2, 4, 8, 16, 32)


@dataclass(frozen=True)
class GadgetTranscript:
    rounds: int
    bytes_sent: int

    @classmethod
    def between(cls, before: ChannelStats, after: ChannelStats) -> "GadgetTranscript":
        d = after - before
        return cls(d.rounds, d.bytes_sent)


def a2b_msb(ctx: PartyContext, x) -> np.ndarray:
    """XOR shares of the most significant bit of the shared value ``x``."""
    x = np.asarray(x, dtype=U64)
    shape = x.shape
    s = x.ravel()
    zero = np.zeros_like(s)
    # Party 1's share is the first addend, party 2's the second; each addend
    # is XOR-shared trivially as (word, 0).
    own_a, own_b = (s, zero) if ctx.party == 1 else (zero, s)
    p0 = s  # a XOR b: each party's share is just its own word
    g = engine.and_words(ctx, own_a, own_b)
    p = p0
    for k in _LEVELS:
        sk = U64(k)
        if k == _LEVELS[-1]:
            (pg,) = engine.and_words_many(ctx, [(p, g << sk)])
            g = g ^ pg
        else:
            pg, pp = engine.and_words_many(ctx, [(p, g << sk), (p, p << sk)])
            g, p = g ^ pg, pp
    msb = ((p0 ^ (g << U64(1))) >> U64(63)) & U64(1)
    return msb.reshape(shape)


def secure_less_than(ctx: PartyContext, x, y) -> np.ndarray:
    """Shares of ``I(x < y)``; needs ``|x - y| < 2^63``."""
    return a2b_msb(ctx, fxp.sub(x, y))


def secure_select(ctx: PartyContext, c, a, b) -> np.ndarray:
    """``a`` where the shared bit ``c`` is 1, else ``b``: ``b + c (a - b)``."""
    ca = engine.b2a(ctx, c)
    return fxp.add(b, engine.mul(ctx, ca, fxp.sub(a, b)))


def positive_bit(ctx: PartyContext, x) -> np.ndarray:
    """Shares of ``I(x > 0)``, i.e. the sign bit of ``-x``."""
    return a2b_msb(ctx, fxp.neg(x))


def secure_relu(ctx: PartyContext, x) -> np.ndarray:
    """``max(x, 0)``; exact, and 0 at ``x = 0``."""
    pos = engine.b2a(ctx, positive_bit(ctx, x))
    return engine.mul(ctx, pos, x)


def secure_abs(ctx: PartyContext, x) -> tuple[np.ndarray, np.ndarray]:
    """``|x|`` together with the arithmetic share of the sign bit of ``x``."""
    neg_a = engine.b2a(ctx, a2b_msb(ctx, x))
    # |x| = x - 2 * msb * x
    flip = engine.mul(ctx, neg_a, x)
    return fxp.sub(x, fxp.ring_mul(flip, U64(2))), neg_a


def secure_sigmoid_approx(ctx: PartyContext, x) -> np.ndarray:
    """Piecewise-linear sigmoid: 0 for x <= -1/2, x + 1/2 inside, 1 for x >= 1/2.

    With ``t = x + 1/2`` the branch bits are ``t <= 0`` (sign of ``t - 1 ulp``)
    and ``t < 1``; both comparisons share one sign-extraction pass.  Since
    ``t <= 0`` implies ``t < 1``, the middle branch is their XOR and the top
    branch is the negation of the second, so no AND is needed.
    """
    x = np.asarray(x, dtype=U64)
    one = ctx.fx.one
    t = engine.add_public(ctx, x, ctx.fx.half)
    probes = np.concatenate([engine.add_public(ctx, t, fxp.neg(U64(1))).ravel(),
                             engine.add_public(ctx, t, fxp.neg(one)).ravel()])
    bits = a2b_msb(ctx, probes)
    low, below_one = bits[: x.size], bits[x.size:]
    mid = low ^ below_one
    top = engine.not_bits(ctx, below_one)
    arith = engine.b2a(ctx, np.concatenate([mid, top]))
    mid_a, top_a = arith[: x.size], arith[x.size:]
    sig = fxp.add(engine.mul(ctx, mid_a, t.ravel()), fxp.ring_mul(top_a, one))
    return sig.reshape(x.shape)
