from __future__ import annotations

import numpy as np
import pytest

from blindfair import engine, fxp
from blindfair.clearref import TrainingConfig, constraint_matrix, train
from blindfair.errors import ConfigMismatch, DimensionMismatch, IntegrityError, NoCertificate
from blindfair.fairmpc import (Certificate, cleartext_certify, model_digest, protocol_certify, protocol_train,
                               protocol_verify, share_sensitive, training_budget)
from blindfair.fxp import U64

CFG = TrainingConfig(c=(1e-3,), epochs=2, arithmetic="fixed", eta_theta=0.01)


def _train(D, cfg, mode, seed=b"fm"):
    Z1, Z2 = share_sensitive(D.Z, np.random.default_rng(0))
    cm, cr = engine.make_contexts(seed=seed, mode=mode)
    res = engine.run_pair(cm, cr, lambda ctx: protocol_train(ctx, cfg, Z1, D.X, D.y),
                          lambda ctx: protocol_train(ctx, cfg, Z2))
    return res, cm


def _certify(D, theta, c, mode="exact", seed=b"cert", timestamp=0.0):
    Z1, Z2 = share_sensitive(D.Z, np.random.default_rng(1))
    cm, cr = engine.make_contexts(seed=seed, mode=mode)
    return engine.run_pair(
        cm, cr,
        lambda ctx: protocol_certify(ctx, c, Z1, theta=theta, timestamp=timestamp),
        lambda ctx: protocol_certify(ctx, c, Z2, X=D.X, whitening=D.whitening, timestamp=timestamp))


def _verify(theta, cert, x, seed=b"ver"):
    cm, cr = engine.make_contexts(seed=seed)
    return engine.run_pair(cm, cr, lambda ctx: protocol_verify(ctx, theta=theta),
                           lambda ctx: protocol_verify(ctx, certificate=cert, x=x))


def test_share_sensitive_reconstructs(small_data):
    tr, _ = small_data
    a, b = share_sensitive(tr.Z, np.random.default_rng(3))
    np.testing.assert_array_equal(fxp.decode(fxp.add(a, b)), tr.Z)


def test_exact_protocol_equals_reference(small_data):
    tr, _ = small_data
    res, cm = _train(tr, CFG, "exact")
    ref = train(tr, CFG, trace=False)
    assert res.regulator is None
    np.testing.assert_array_equal(res.modeler, ref.params.theta_ring)
    assert cm.triples.usage() == training_budget(tr.n, tr.d, tr.p, CFG)


def test_prob_protocol_close_to_reference(small_data):
    tr, _ = small_data
    res, cm = _train(tr, CFG, "prob")
    ref = train(tr, CFG, trace=False)
    assert np.max(np.abs(fxp.decode(res.modeler) - ref.params.theta)) < 1e-3
    assert cm.triples.usage() == training_budget(tr.n, tr.d, tr.p, CFG)


def test_protocol_rejects_unsupported_config(small_data):
    tr, _ = small_data
    for bad in (CFG.with_(optimizer="projected"), CFG.with_(sigmoid="exact")):
        with pytest.raises(ValueError):
            _train(tr, bad, "prob")


def test_protocol_detects_config_disagreement(small_data):
    tr, _ = small_data
    Z1, Z2 = share_sensitive(tr.Z, np.random.default_rng(0))
    cm, cr = engine.make_contexts(seed=b"dis")
    with pytest.raises(ConfigMismatch):
        engine.run_pair(cm, cr, lambda ctx: protocol_train(ctx, CFG, Z1, tr.X, tr.y),
                        lambda ctx: protocol_train(ctx, CFG.with_(c=(0.5,)), Z2))


def test_certify_pass_and_fail(small_data):
    tr, _ = small_data
    A = constraint_matrix(tr)
    theta = np.array([0.3, -0.2, 0.05, 0.1])
    u = abs(float((A @ theta)[0]))
    ok = _certify(tr, theta, [u + 0.01])
    bad = _certify(tr, theta, [max(u - 0.01, 0.0)])
    assert ok.modeler.passed and ok.regulator.passed
    assert ok.regulator.digest == model_digest(fxp.encode(theta))
    assert ok.modeler.to_bytes() == ok.regulator.to_bytes()
    assert not bad.regulator.passed and bad.regulator.signature is None
    # the transcript does not depend on the verdict
    assert ok.stats["modeler"].bytes_sent == bad.stats["modeler"].bytes_sent
    assert ok.stats["regulator"].bytes_sent == bad.stats["regulator"].bytes_sent


def test_certify_agrees_with_cleartext(small_data):
    tr, _ = small_data
    rng = np.random.default_rng(9)
    for _ in range(5):
        theta = rng.normal(size=tr.d) * 0.5
        c = [abs(float((constraint_matrix(tr) @ theta)[0])) * rng.uniform(0.5, 1.5)]
        got = _certify(tr, theta, c).regulator.passed
        assert got == cleartext_certify(tr.X, tr.Z, theta, c)


def test_certify_dimension_checks(small_data):
    tr, _ = small_data
    with pytest.raises(DimensionMismatch):
        _certify(tr, np.zeros(tr.d + 1), [0.1])
    with pytest.raises(DimensionMismatch):
        _certify(tr, np.zeros(tr.d), [0.1, 0.1])


def test_certificate_file_roundtrip_and_tamper(small_data, tmp_path):
    tr, _ = small_data
    cert = _certify(tr, np.zeros(tr.d), [0.1], timestamp=1234.5).regulator
    path = tmp_path / "c.bfct"
    cert.save(path)
    back = Certificate.load(path)
    assert back.to_bytes() == cert.to_bytes()
    assert back.timestamp == 1234.5 and back.verdict == "pass" and back.p == 1 and back.d == tr.d
    np.testing.assert_array_equal(back.whitening.mean, tr.whitening.mean)
    data = bytearray(path.read_bytes())
    data[30] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        Certificate.load(path)
    with pytest.raises(IntegrityError):
        Certificate.from_bytes(b"short")
    with pytest.raises(NoCertificate):
        Certificate.load(tmp_path / "missing.bfct")


def test_verify_match_and_mismatch(small_data):
    tr, te = small_data
    theta = np.array([1.0, 1.0, 0.0, 0.2])
    cert = _certify(tr, theta, [10.0]).regulator
    raw = te.X[0] * tr.whitening.scale + tr.whitening.mean
    good = _verify(theta, cert, raw)
    assert good.modeler is None
    assert good.regulator.signature_match
    assert good.regulator.prediction == int(te.X[0] @ fxp.decode(fxp.encode(theta)) >= 0)
    tampered = fxp.encode(theta)
    tampered[0] = fxp.add(tampered[0], U64(1))
    bad = _verify(tampered, cert, raw)
    assert not bad.regulator.signature_match and bad.regulator.prediction is None
    assert good.stats["modeler"].bytes_sent == bad.stats["modeler"].bytes_sent
    assert good.stats["regulator"].bytes_sent == bad.stats["regulator"].bytes_sent


def test_verify_requires_passing_certificate(small_data):
    tr, _ = small_data
    failed = _certify(tr, np.ones(tr.d), [0.0]).regulator
    assert not failed.passed
    with pytest.raises(NoCertificate):
        _verify(np.ones(tr.d), failed, np.zeros(tr.d))
    with pytest.raises(NoCertificate):
        _verify(np.ones(tr.d), None, np.zeros(tr.d))


def test_budget_scales_with_epochs():
    a = training_budget(1024, 4, 1, CFG.with_(epochs=1))
    b = training_budget(1024, 4, 1, CFG.with_(epochs=3))
    per_epoch = (b.scalar - a.scalar) // 2
    # 16 minibatches of 64; scalar products per step are 8 per constraint plus 3 per row
    assert per_epoch == 16 * (8 * 1 + 3 * 64)
    assert a.scalar == per_epoch  # the constraint matrix uses matrix triples only
    assert b.matrix[(1, 1024, 4)] == 1
