"""Helpers shared by the test modules."""

from __future__ import annotations

import numpy as np

from blindfair import engine, fxp
from blindfair.shares import share_secret


def run_both(fn_m, fn_r=None, mode="prob", seed=b"unit-test", **kw):
    """Run two party functions in loopback and return (modeler_out, regulator_out)."""
    cm, cr = engine.make_contexts(seed=seed, mode=mode, **kw)
    res = engine.run_pair(cm, cr, fn_m, fn_r or fn_m)
    return res.modeler, res.regulator


def split(x, seed=0):
    """Additive shares of ring values for parties 1 and 2."""
    s1, s2 = share_secret(np.asarray(x, dtype=fxp.U64), np.random.default_rng(seed))
    return s1.value, s2.value


def shared_op(op, *secrets, mode="prob", seed=b"unit-test"):
    """Apply ``op(ctx, *shares)`` to secret-shared ring inputs; return the reconstructed output."""
    parts = [split(s, i) for i, s in enumerate(secrets)]
    a, b = run_both(lambda ctx: op(ctx, *[p[ctx.party - 1] for p in parts]), mode=mode, seed=seed)
    return fxp.add(a, b)


def shared_bit_op(op, *secrets, mode="prob", seed=b"unit-test"):
    """Like :func:`shared_op` for gadgets that return XOR-shared bits."""
    parts = [split(s, i) for i, s in enumerate(secrets)]
    a, b = run_both(lambda ctx: op(ctx, *[p[ctx.party - 1] for p in parts]), mode=mode, seed=seed)
    return (a ^ b) & fxp.U64(1)
