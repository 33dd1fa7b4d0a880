"""The three two-party workflows: fair training, certification, verification.

All three run inside one party: the Modeler and the Regulator each call the
same function with their own ``PartyContext`` and their own inputs.  The
sensitive matrix ``Z`` is never seen in the clear by either party; each
holds one additive share of its fixed-point encoding.
"""

from __future__ import annotations

import hashlib
import struct
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine, fxp
from .boolgadget import AND_WORDS_PER_MSB, a2b_msb, secure_abs, secure_relu
from .clearref.optimizers import TrainingConfig, fixed_constraint_matrix, minibatch_order, xi_bce, xi_con
from .dataset import Whitening
from .engine import PartyContext, _log2_exact
from .errors import (ConfigMismatch, DimensionMismatch, IntegrityError, NoCertificate)
from .fxp import DEFAULT_FX, FxConfig, U64
from .shares import TripleBudget, random_ring
from .transport import Role, Tag

CERT_MAGIC = b"BFCT"
CERT_VERSION = 1
DIGEST_BYTES = 32


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------


def share_sensitive(Z, rng: np.random.Generator, fx: FxConfig = DEFAULT_FX) -> tuple[np.ndarray, np.ndarray]:
    """How a data subject splits the sensitive matrix: ``(Modeler share, Regulator share)``."""
    Ze = fxp.encode(np.asarray(Z, dtype=np.float64), fx)
    r = random_ring(rng, Ze.shape)
    return fxp.sub(Ze, r), r


def model_digest(theta_ring) -> bytes:
    """SHA-256 over the canonical little-endian serialization of ``theta``."""
    return hashlib.sha256(fxp.to_bytes(np.asarray(theta_ring, dtype=U64))).digest()


def _as_ring(theta, fx: FxConfig) -> np.ndarray:
    theta = np.asarray(theta)
    if theta.dtype == U64:
        return theta
    return np.asarray(fxp.encode(theta.astype(np.float64), fx), dtype=U64).reshape(theta.shape)


def _agree(ctx: PartyContext, label: bytes, *public) -> None:
    """Both parties check they hold the same public parameters."""
    h = hashlib.sha256(label)
    for v in public:
        h.update(np.ascontiguousarray(v).tobytes() if isinstance(v, np.ndarray) else repr(v).encode())
    ctx.channel.send(Tag.HANDSHAKE, h.digest())
    if ctx.channel.expect(Tag.HANDSHAKE) != h.digest():
        raise ConfigMismatch(f"peers disagree on the public parameters of {label.decode()}")


def _shared_constraint_matrix(ctx: PartyContext, X_sh, Z_sh, block: int) -> np.ndarray:
    """Shares of ``(1/n)(Z - zbar)^T X`` (``Z`` and ``X`` already shared)."""
    n = Z_sh.shape[0]
    log_n = _log2_exact(n, "n")
    zbar = engine.truncate(ctx, Z_sh.sum(axis=0, dtype=U64), log_n)
    Zhat = fxp.sub(Z_sh, zbar)
    return engine.blocked_mult_shift_avg(ctx, np.ascontiguousarray(Zhat.T), X_sh, block)


def _check_rows(Z_sh, n: int) -> None:
    if Z_sh.shape[0] != n:
        raise DimensionMismatch(f"sensitive share has {Z_sh.shape[0]} rows, peer data has {n}")


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def training_budget(n: int, d: int, p: int, cfg: TrainingConfig) -> TripleBudget:
    """Exact triple consumption of :func:`protocol_train` (per party)."""
    b = cfg.batch
    block = cfg.resolved_block(n)
    steps = cfg.resolved_epochs(n) * (n // b)
    m = Counter({(p, block, d): n // block})
    per_step = TripleBudget(
        scalar=8 * p + 3 * b,
        and_words=AND_WORDS_PER_MSB * (3 * p + 2 * b),
        matrix=Counter({(p, d, 1): 1, (b, d, 1): 1, (d, b, 1): 1, (d, p, 1): 1}),
    )
    return TripleBudget(0, 0, m) + per_step * steps


def _check_train_cfg(cfg: TrainingConfig) -> None:
    if cfg.optimizer != "lagrange":
        raise ValueError("the secure protocol implements the Lagrangian optimizer only")
    if cfg.sigmoid != "secureml":
        raise ValueError("the secure protocol evaluates the piecewise-linear sigmoid only")


def protocol_train(ctx: PartyContext, cfg: TrainingConfig, Z_share, X=None, y=None) -> Optional[np.ndarray]:
    """Fair logistic regression on shares; the Modeler alone receives ``theta``.

    The Modeler passes its whitened ``X`` and labels ``y`` (floats) and its
    share of ``Z``; the Regulator passes only its share of ``Z``.  Returns
    the ring encoding of ``theta`` at the Modeler and ``None`` at the
    Regulator.
    """
    _check_train_cfg(cfg)
    fx = ctx.fx
    f, s = fx.frac_bits, cfg.batch_exp
    Z_sh = np.asarray(Z_share, dtype=U64)
    if Z_sh.ndim == 1:
        Z_sh = Z_sh[:, None]
    modeler = ctx.role == Role.MODELER
    if modeler:
        Xe, ye = fxp.encode(np.asarray(X, dtype=np.float64), fx), fxp.encode(np.asarray(y, dtype=np.float64).ravel(), fx)
        _check_rows(Z_sh, len(Xe))
    X_sh = engine.input_share_matrix(ctx, Role.MODELER, Xe if modeler else None)
    y_sh = engine.input_share_matrix(ctx, Role.MODELER, ye if modeler else None)
    n, d = X_sh.shape
    p = Z_sh.shape[1]
    _check_rows(Z_sh, n)
    if y_sh.shape != (n,):
        raise DimensionMismatch(f"labels of shape {y_sh.shape} for {n} rows")
    if n % cfg.batch:
        raise DimensionMismatch(f"batch size {cfg.batch} does not divide n={n}")
    _agree(ctx, b"train", n, d, p, cfg.c, cfg.eta_theta, cfg.eta_lambda, cfg.batch_exp,
           cfg.resolved_epochs(n), cfg.resolved_block(n), cfg.public_seed)

    A = _shared_constraint_matrix(ctx, X_sh, Z_sh, cfg.resolved_block(n))
    At = np.ascontiguousarray(A.T)
    neg_c = fxp.neg(fxp.encode(np.asarray(cfg.c), fx))
    k_lam = fxp.encode_public(cfg.eta_lambda)
    two, one = U64(2), fx.one
    theta = np.zeros(d, dtype=U64)
    lam = np.zeros(p, dtype=U64)
    epochs = cfg.resolved_epochs(n)
    for j in range(epochs):
        k1 = fxp.encode_public(cfg.eta_theta * xi_bce(j, epochs))
        k2 = fxp.encode_public(cfg.eta_theta * xi_con(j, epochs))
        for idx in minibatch_order(cfg.public_seed, n, cfg.batch, j):
            Xi, yi = X_sh[idx], y_sh[idx]
            au, xv = engine.matmul_raw_many(ctx, [(A, theta), (Xi, theta)])
            u, v = engine.truncate_many(ctx, [(au, f), (xv, f)])
            # sign of A theta and both sigmoid branch tests in one pass
            t = engine.add_public(ctx, v, fx.half)
            bits = a2b_msb(ctx, np.concatenate([u, engine.add_public(ctx, t, fxp.neg(U64(1))),
                                                engine.add_public(ctx, t, fxp.neg(one))]))
            neg_b, low, below = bits[:p], bits[p:p + len(t)], bits[p + len(t):]
            arith = engine.b2a(ctx, np.concatenate([neg_b, low ^ below, engine.not_bits(ctx, below)]))
            neg_a, mid_a, top_a = arith[:p], arith[p:p + len(t)], arith[p + len(t):]
            nu, nl, mt = engine.mul_many(ctx, [(neg_a, u), (neg_a, lam), (mid_a, t)])
            F = engine.add_public(ctx, fxp.sub(u, fxp.ring_mul(two, nu)), neg_c)
            diff = fxp.sub(fxp.add(mt, fxp.ring_mul(top_a, one)), yi)
            pos_a = engine.b2a(ctx, a2b_msb(ctx, fxp.neg(F)))
            q = fxp.sub(lam, fxp.ring_mul(two, nl))
            g_lam, w = engine.mul_many(ctx, [(pos_a, F), (pos_a, q)])
            gb_raw, gc_raw = engine.matmul_raw_many(ctx, [(np.ascontiguousarray(Xi.T), diff), (At, w)])
            g_bce, g_con = engine.truncate_many(ctx, [(gb_raw, f + s), (gc_raw, f)])
            upd = fxp.add(fxp.ring_mul(g_bce, k1), fxp.ring_mul(g_con, k2))
            step, lam_inc = engine.truncate_many(ctx, [(upd, fxp.PUBLIC_FRAC_BITS),
                                                       (fxp.ring_mul(g_lam, k_lam), fxp.PUBLIC_FRAC_BITS)])
            theta = fxp.sub(theta, step)
            lam = secure_relu(ctx, fxp.add(lam, lam_inc))
    return engine.reconstruct_to(ctx, Role.MODELER, theta)


# --------------------------------------------------------------------------
# Certificates
# --------------------------------------------------------------------------

_CERT_HEAD = struct.Struct("<4sH16sIIHHHB32s")


@dataclass
class Certificate:
    run_id: bytes
    c: np.ndarray
    passed: bool
    digest: bytes
    whitening: Whitening
    fx: FxConfig = DEFAULT_FX
    timestamp: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).ravel()
        if not self.passed and self.digest != bytes(DIGEST_BYTES):
            raise ValueError("a failed certificate carries no signature")

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    @property
    def signature(self) -> Optional[bytes]:
        return self.digest if self.passed else None

    @property
    def d(self) -> int:
        return self.whitening.d

    @property
    def p(self) -> int:
        return len(self.c)

    def to_bytes(self) -> bytes:
        """Fixed binary layout, followed by a timestamp and a SHA-256 of everything before it."""
        body = _CERT_HEAD.pack(CERT_MAGIC, CERT_VERSION, bytes(self.run_id), self.d, self.p,
                               self.fx.frac_bits, self.fx.int_bits, self.fx.total_bits,
                               1 if self.passed else 0, self.digest)
        body += np.asarray(self.whitening.mean, "<f8").tobytes() + np.asarray(self.whitening.scale, "<f8").tobytes()
        body += self.c.astype("<f8").tobytes() + struct.pack("<d", self.timestamp)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Certificate":
        if len(buf) < _CERT_HEAD.size + 8 + DIGEST_BYTES:
            raise IntegrityError("certificate is truncated")
        body, check = buf[:-DIGEST_BYTES], buf[-DIGEST_BYTES:]
        if hashlib.sha256(body).digest() != check:
            raise IntegrityError("certificate checksum does not match its contents")
        magic, version, run_id, d, p, frac, intb, total, verdict, digest = _CERT_HEAD.unpack_from(body)
        if magic != CERT_MAGIC:
            raise IntegrityError("not a certificate file")
        if version != CERT_VERSION:
            raise IntegrityError(f"unsupported certificate version {version}")
        if len(body) != _CERT_HEAD.size + 8 * (2 * d + p) + 8:
            raise IntegrityError("certificate length does not match its dimensions")
        off = _CERT_HEAD.size
        vec = np.frombuffer(body, "<f8", count=2 * d + p + 1, offset=off).astype(np.float64)
        if verdict not in (0, 1):
            raise IntegrityError("bad verdict byte")
        return cls(run_id, vec[2 * d:2 * d + p], bool(verdict), digest,
                   Whitening(vec[:d].copy(), vec[d:2 * d].copy()), FxConfig(frac, intb, total), float(vec[-1]))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Certificate":
        path = Path(path)
        if not path.exists():
            raise NoCertificate(f"no certificate at {path}")
        return cls.from_bytes(path.read_bytes())


@dataclass
class VerificationResult:
    signature_match: bool
    prediction: Optional[int] = None

    def __post_init__(self):
        if (self.prediction is not None) != self.signature_match:
            raise ValueError("a prediction is present exactly when the signature matches")


def _all_bits(ctx: PartyContext, bits: np.ndarray) -> np.ndarray:
    """AND of XOR-shared bits by a balanced tree (``ceil(log2 len)`` rounds)."""
    bits = np.asarray(bits, U64) & U64(1)
    while len(bits) > 1:
        if len(bits) % 2:
            bits = np.concatenate([bits, engine.public_value(ctx, U64(1), (1,))])
        half = len(bits) // 2
        bits = engine.and_words(ctx, bits[:half], bits[half:]) & U64(1)
    return bits


def protocol_certify(ctx: PartyContext, c, Z_share, theta=None, X=None, whitening: Optional[Whitening] = None,
                     block: Optional[int] = None, timestamp: Optional[float] = None) -> Certificate:
    """Check ``|A theta| <= c`` on shares and sign ``theta`` if it holds.

    Modeler: ``theta`` (floats or ring values).  Regulator: whitened ``X``
    and the ``whitening`` that produced it.  Both: their ``Z`` share and the
    public ``c``.  Only the pass/fail bit is revealed.  The Modeler always
    sends a 32-byte signature frame (zeros on failure) and the Regulator
    always sends the whitening vectors, so the transcript length does not
    depend on the outcome.
    """
    fx = ctx.fx
    c = np.asarray(c, dtype=np.float64).ravel()
    Z_sh = np.asarray(Z_share, dtype=U64)
    if Z_sh.ndim == 1:
        Z_sh = Z_sh[:, None]
    if Z_sh.shape[1] != len(c):
        raise DimensionMismatch(f"{len(c)} constraint values for {Z_sh.shape[1]} sensitive columns")
    modeler = ctx.role == Role.MODELER
    if modeler:
        theta_ring = _as_ring(theta, fx).ravel()
    else:
        Xe = fxp.encode(np.asarray(X, dtype=np.float64), fx)
        _check_rows(Z_sh, len(Xe))
        if whitening is None:
            whitening = Whitening.identity(Xe.shape[1])
    th_sh = engine.input_share_matrix(ctx, Role.MODELER, theta_ring if modeler else None)
    X_sh = engine.input_share_matrix(ctx, Role.REGULATOR, None if modeler else Xe)
    n, d = X_sh.shape
    if th_sh.shape != (d,):
        raise DimensionMismatch(f"model has {th_sh.shape[0]} weights, data has {d} features")
    _check_rows(Z_sh, n)
    block = block if block is not None else min(n, 1 << 10)
    _agree(ctx, b"certify", n, d, c, block)

    A = _shared_constraint_matrix(ctx, X_sh, Z_sh, block)
    (au,) = engine.matmul_raw_many(ctx, [(A, th_sh)])
    u = engine.truncate(ctx, au, fx.frac_bits)
    absu, _ = secure_abs(ctx, u)
    F = engine.add_public(ctx, absu, fxp.neg(fxp.encode(c, fx)))
    ok_bits = a2b_msb(ctx, fxp.neg(F))  # 1 where F > 0
    ok = _all_bits(ctx, engine.not_bits(ctx, ok_bits))
    (verdict,) = engine.open_bits(ctx, ok)
    passed = bool(int(verdict[0]) & 1)

    if modeler:
        digest = model_digest(theta_ring) if passed else bytes(DIGEST_BYTES)
        ts = time.time() if timestamp is None else float(timestamp)
        ctx.channel.send(Tag.CERTIFICATE, digest + struct.pack("<d", ts))
        peer = ctx.channel.expect(Tag.CERTIFICATE)
        if len(peer) != 16 * d:
            raise DimensionMismatch("whitening frame has the wrong length")
        vec = np.frombuffer(peer, "<f8").astype(np.float64)
        whitening = Whitening(vec[:d].copy(), vec[d:].copy())
    else:
        if whitening.d != d:
            raise DimensionMismatch(f"whitening for {whitening.d} columns, data has {d}")
        ctx.channel.send(Tag.CERTIFICATE, np.asarray(whitening.mean, "<f8").tobytes()
                         + np.asarray(whitening.scale, "<f8").tobytes())
        peer = ctx.channel.expect(Tag.CERTIFICATE)
        if len(peer) != DIGEST_BYTES + 8:
            raise DimensionMismatch("signature frame has the wrong length")
        digest, (ts,) = peer[:DIGEST_BYTES], struct.unpack("<d", peer[DIGEST_BYTES:])
        if not passed:
            digest = bytes(DIGEST_BYTES)
    return Certificate(bytes(ctx.run_id), c, passed, digest, whitening, fx, ts)


def protocol_verify(ctx: PartyContext, theta=None, certificate: Optional[Certificate] = None,
                    x=None) -> Optional[VerificationResult]:
    """Check a deployed model against its certificate and classify one input.

    Modeler: the deployed ``theta``.  Regulator: the stored ``certificate``
    and the user's raw feature vector ``x`` (length ``d``, intercept entry
    included), which is whitened with the certificate's parameters.  The
    prediction ``I(x . theta >= 0)`` is always computed on shares; on a
    signature mismatch the Modeler reveals a random bit instead of its
    share, so both outcomes produce the same transcript.
    """
    fx = ctx.fx
    modeler = ctx.role == Role.MODELER
    if modeler:
        theta_ring = _as_ring(theta, fx).ravel()
        ctx.channel.send(Tag.CERTIFICATE, model_digest(theta_ring))
    else:
        if certificate is None:
            raise NoCertificate("no certificate for this model")
        if not certificate.passed:
            raise NoCertificate("the stored certificate records a failed check")
        xw = certificate.whitening.apply(np.asarray(x, dtype=np.float64).ravel())
        if len(xw) != certificate.d:
            raise DimensionMismatch(f"input has {len(xw)} features, certificate expects {certificate.d}")
        claimed = ctx.channel.expect(Tag.CERTIFICATE)
        match = claimed == certificate.digest
        ctx.channel.send(Tag.CERTIFICATE, bytes([1 if match else 0]))
    if modeler:
        flag = ctx.channel.expect(Tag.CERTIFICATE)
        match = flag == b"\x01"
    th_sh = engine.input_share_matrix(ctx, Role.MODELER, theta_ring if modeler else None)
    x_sh = engine.input_share_matrix(ctx, Role.REGULATOR, None if modeler else fxp.encode(xw, fx))
    if th_sh.shape != x_sh.shape:
        raise DimensionMismatch(f"model has {th_sh.size} weights, input has {x_sh.size} features")
    (raw,) = engine.matmul_raw_many(ctx, [(x_sh, th_sh)])
    score = engine.truncate(ctx, np.atleast_1d(raw), fx.frac_bits)
    pred = engine.not_bits(ctx, a2b_msb(ctx, score))
    if modeler:
        share = pred if match else random_ring(ctx.rng, pred.shape) & U64(1)
        ctx.channel.send(Tag.RECONSTRUCT, fxp.to_bytes(share))
        return None
    (peer,) = engine._split(ctx.channel.expect(Tag.RECONSTRUCT), [pred])
    if not match:
        return VerificationResult(False, None)
    return VerificationResult(True, int((pred[0] ^ peer[0]) & U64(1)))


def cleartext_certify(X, Z, theta, c, block: Optional[int] = None, public_seed: bytes = b"blindfair",
                      fx: FxConfig = DEFAULT_FX) -> bool:
    """The certification predicate evaluated on cleartext ring values.

    Uses the same rescaling rule as exact-mode truncation, so it agrees
    bit-for-bit with :func:`protocol_certify` run in exact mode.
    """
    Xe, Ze = fxp.encode(np.asarray(X, dtype=np.float64), fx), fxp.encode(np.asarray(Z, dtype=np.float64), fx)
    if Ze.ndim == 1:
        Ze = Ze[:, None]
    rnd = fxp.DitherRounding(public_seed)
    n = len(Xe)
    A = fixed_constraint_matrix(Xe, Ze, block if block is not None else min(n, 1 << 10), rnd, fx)
    u = fxp.to_signed(rnd(fxp.ring_matmul(A, _as_ring(theta, fx).ravel()), fx.frac_bits))
    return bool(np.all(np.abs(u) <= fxp.to_signed(fxp.encode(np.asarray(c, dtype=np.float64).ravel(), fx))))
