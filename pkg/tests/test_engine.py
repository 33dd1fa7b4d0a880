from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blindfair import engine, fxp
from blindfair.engine import PartyContext, RunRegistry
from blindfair.errors import (BlockSizeError, ConfigMismatch, DimensionMismatch, ProtocolAbort, StaleRunError,
                              TripleExhausted)
from blindfair.fxp import U64
from blindfair.shares import dealer_generate
from blindfair.transport import InProcChannel, Role

from util import run_both, shared_op, split

ulp = 1.0 / (1 << 16)


def _handshake_pair(cm, cr):
    return engine.run_pair(cm, cr, engine.handshake, engine.handshake)


def test_handshake_ok_and_stale_run():
    reg = RunRegistry()
    cm, cr = engine.make_contexts(seed=b"hs")
    cm.registry = reg
    _handshake_pair(cm, cr)
    cm2, cr2 = engine.make_contexts(seed=b"hs")
    cm2.registry = reg
    with pytest.raises(StaleRunError):
        _handshake_pair(cm2, cr2)


def test_run_registry_persists(tmp_path):
    path = tmp_path / "runs.txt"
    RunRegistry(path).add(b"\x01" * 16)
    assert b"\x01" * 16 in RunRegistry(path)


@pytest.mark.parametrize("field,value", [("mode", "exact"), ("public_seed", b"other")])
def test_handshake_detects_config_mismatch(field, value):
    cm, cr = engine.make_contexts(seed=b"hs2")
    cr = PartyContext(cr.role, cr.channel, cr.triples, **{field: value})
    with pytest.raises(ConfigMismatch):
        _handshake_pair(cm, cr)


def test_handshake_detects_different_triple_files():
    a1, _ = dealer_generate(1, 0, [], b"one")
    _, b2 = dealer_generate(1, 0, [], b"two")
    cm_, cr_ = InProcChannel.pair()
    cm = PartyContext(Role.MODELER, cm_, a1)
    cr = PartyContext(Role.REGULATOR, cr_, b2)
    with pytest.raises(ConfigMismatch, match="run id"):
        _handshake_pair(cm, cr)


def test_input_share_and_reconstruct_to():
    M = np.arange(12, dtype=U64).reshape(3, 4)

    def fm(ctx):
        s = engine.input_share_matrix(ctx, Role.MODELER, M)
        return engine.reconstruct_to(ctx, Role.REGULATOR, s)

    def fr(ctx):
        s = engine.input_share_matrix(ctx, Role.MODELER, shape=(3, 4))
        return engine.reconstruct_to(ctx, Role.REGULATOR, s)

    m, r = run_both(fm, fr)
    assert m is None
    np.testing.assert_array_equal(r, M)


def test_input_share_shape_mismatch():
    def fm(ctx):
        return engine.input_share_matrix(ctx, "modeler", np.zeros((2, 2), U64))

    def fr(ctx):
        return engine.input_share_matrix(ctx, "modeler", shape=(2, 3))

    with pytest.raises(DimensionMismatch):
        run_both(fm, fr)


def test_abort_reaches_peer():
    def fm(ctx):
        raise DimensionMismatch("modeler refuses")

    def fr(ctx):
        return ctx.channel.expect(2)

    cm, cr = engine.make_contexts()
    with pytest.raises(DimensionMismatch):
        engine.run_pair(cm, cr, fm, fr)
    cm, cr = engine.make_contexts()
    with pytest.raises(ProtocolAbort):
        engine.run_party(cr, lambda ctx: (cm.channel.abort("x"), fr(ctx)))


@settings(max_examples=15)
@given(st.lists(st.integers(0, (1 << 64) - 1), min_size=1, max_size=40), st.integers(0, 100))
def test_mul_is_ring_product(values, seed):
    x = np.array(values, dtype=U64)
    y = x[::-1].copy()
    got = shared_op(engine.mul, x, y, seed=bytes([seed]))
    np.testing.assert_array_equal(got, fxp.ring_mul(x, y))


def test_mul_many_and_shape_check(rng):
    x, y = rng.integers(0, 1 << 63, (2, 5), dtype=np.uint64), rng.integers(0, 1 << 63, (2, 5), dtype=np.uint64)
    got = shared_op(lambda ctx, a, b: engine.mul_many(ctx, [(a, b), (b, a)])[1], x, y)
    np.testing.assert_array_equal(got, fxp.ring_mul(x, y))
    with pytest.raises(DimensionMismatch):
        shared_op(engine.mul, x, y[:, :3])


@pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (4, 2)), ((4,), (4, 2)), ((3, 4), (4,)), ((4,), (4,))])
def test_matmul_shapes(rng, shape_a, shape_b):
    A = rng.integers(0, 1 << 63, shape_a, dtype=np.uint64)
    B = rng.integers(0, 1 << 63, shape_b, dtype=np.uint64)
    got = shared_op(lambda ctx, a, b: engine.matmul_raw_many(ctx, [(a, b)])[0], A, B)
    np.testing.assert_array_equal(got, fxp.ring_matmul(A, B))


@pytest.mark.parametrize("mode", ["prob", "exact"])
def test_secure_matmul_fixed_point(rng, mode):
    A, B = rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
    got = fxp.decode(shared_op(engine.secure_matmul, fxp.encode(A), fxp.encode(B), mode=mode))
    want = fxp.decode(fxp.encode(A)) @ fxp.decode(fxp.encode(B))
    assert np.max(np.abs(got - want)) <= 2 * ulp


def test_exact_truncation_matches_dither_reference(rng):
    x = fxp.from_signed(rng.integers(-(1 << 40), 1 << 40, 64))
    got = shared_op(lambda ctx, v: engine.truncate(ctx, v, 16), x, mode="exact")
    want = fxp.DitherRounding(b"blindfair")(x, 16)
    np.testing.assert_array_equal(got, want)


def test_scale_public(rng):
    x = rng.normal(size=20) * 100
    got = fxp.decode(shared_op(lambda ctx, v: engine.scale_public(ctx, v, 1e-3), fxp.encode(x)))
    assert np.max(np.abs(got - fxp.decode(fxp.encode(x)) * 1e-3)) <= 2 * ulp


def test_public_helpers():
    x = fxp.encode(np.array([1.0, -2.0]))
    got = shared_op(lambda ctx, v: engine.add_public(ctx, v, fxp.encode(0.5)), x)
    np.testing.assert_array_equal(fxp.decode(got), [1.5, -1.5])
    m, r = run_both(lambda ctx: engine.public_value(ctx, U64(7), (3,)))
    np.testing.assert_array_equal(fxp.add(m, r), [7, 7, 7])


@pytest.mark.parametrize("mode", ["prob", "exact"])
@pytest.mark.parametrize("n,block", [(64, 16), (64, 64), (32, 1)])
def test_blocked_average(rng, mode, n, block):
    Z = rng.integers(0, 2, (2, n)).astype(float) - 0.3
    X = rng.normal(size=(n, 3))
    got = fxp.decode(shared_op(lambda ctx, a, b: engine.blocked_mult_shift_avg(ctx, a, b, block),
                               fxp.encode(Z), fxp.encode(X), mode=mode))
    want = fxp.decode(fxp.encode(Z)) @ fxp.decode(fxp.encode(X)) / n
    assert np.max(np.abs(got - want)) <= 3 * ulp


@pytest.mark.parametrize("n,block", [(48, 16), (64, 24), (64, 128)])
def test_blocked_average_rejects_bad_sizes(n, block):
    Z, X = np.zeros((1, n), U64), np.zeros((n, 2), U64)
    with pytest.raises((BlockSizeError, DimensionMismatch)):
        shared_op(lambda ctx, a, b: engine.blocked_mult_shift_avg(ctx, a, b, block), Z, X)


def test_and_words_not_and_b2a(rng):
    x, y = rng.integers(0, 1 << 63, 10, dtype=np.uint64), rng.integers(0, 1 << 63, 10, dtype=np.uint64)
    xm, ym = rng.integers(0, 1 << 63, 10, dtype=np.uint64), rng.integers(0, 1 << 63, 10, dtype=np.uint64)
    parts = {1: (xm, ym), 2: (x ^ xm, y ^ ym)}
    m, r = run_both(lambda ctx: engine.and_words(ctx, *parts[ctx.party]))
    np.testing.assert_array_equal(m ^ r, x & y)
    m, r = run_both(lambda ctx: engine.not_bits(ctx, parts[ctx.party][0]))
    np.testing.assert_array_equal((m ^ r) & U64(1), (x & U64(1)) ^ U64(1))
    m, r = run_both(lambda ctx: engine.b2a(ctx, parts[ctx.party][0]))
    np.testing.assert_array_equal(fxp.add(m, r), x & U64(1))


def test_bounded_store_exhaustion_surfaces():
    s1, s2 = dealer_generate(3, 0, [], b"few")
    cm, cr = engine.make_contexts(triples=(s1, s2))
    x1, x2 = split(np.arange(5, dtype=U64))
    with pytest.raises(TripleExhausted):
        engine.run_pair(cm, cr, lambda ctx: engine.mul(ctx, x1, x1), lambda ctx: engine.mul(ctx, x2, x2))


def test_loopback_counts_rounds():
    res = engine.loopback(lambda ctx: engine.mul(ctx, np.zeros(3, U64), np.zeros(3, U64)))
    assert res.stats["modeler"].rounds == 2  # handshake, one Beaver round
