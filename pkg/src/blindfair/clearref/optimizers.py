"""Cleartext training: Lagrangian, projected-gradient and log-barrier optimizers.

The fixed-point Lagrangian run performs, operation for operation, the ring
arithmetic of the secure training protocol with exact truncation, so the
two produce bit-identical parameters.  Every rescaling is dithered rounding
from the public seed, drawn in the order the protocol truncates.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .. import fxp
from ..dataset import Dataset, is_power_of_two
from ..errors import (BarrierDomainError, BlockSizeError, FixedPointOverflow, NonFiniteError,
                      SingularProjection)
from ..fxp import DEFAULT_FX, FxConfig, U64
from . import sigmoid as sg
from .metrics import evaluate

OPTIMIZERS = ("lagrange", "projected", "iplb")
ARITHMETIC = ("float", "fixed")
TOTAL_UPDATES = 15000
COND_LIMIT = 1e12
DEFAULT_BLOCK = 1 << 10


@dataclass(frozen=True)
class TrainingConfig:
    eta_theta: float = 1e-4
    eta_lambda: float = 0.05
    batch_exp: int = 6
    epochs: Optional[int] = None
    c: tuple = (1.0,)
    optimizer: str = "lagrange"
    sigmoid: str = "secureml"
    arithmetic: str = "float"
    public_seed: bytes = b"blindfair"
    block: Optional[int] = None
    fx: FxConfig = DEFAULT_FX
    t0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(v) for v in np.atleast_1d(self.c)))
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.arithmetic not in ARITHMETIC:
            raise ValueError(f"arithmetic must be one of {ARITHMETIC}")
        if self.sigmoid not in sg.KINDS:
            raise ValueError(f"sigmoid must be one of {sg.KINDS}")
        if any(v < 0 for v in self.c):
            raise ValueError("constraint values must be non-negative")
        if self.batch_exp < 0:
            raise ValueError("batch_exp must be non-negative")

    @property
    def batch(self) -> int:
        return 1 << self.batch_exp

    def resolved_epochs(self, n: int) -> int:
        if self.epochs is not None:
            return int(self.epochs)
        return math.ceil(TOTAL_UPDATES / (n // self.batch))

    def resolved_block(self, n: int) -> int:
        return self.block if self.block is not None else min(n, DEFAULT_BLOCK)

    def with_(self, **kw) -> "TrainingConfig":
        return replace(self, **kw)


@dataclass
class ModelParams:
    theta: np.ndarray
    lam: np.ndarray
    theta_ring: Optional[np.ndarray] = None  # fixed-point runs only

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64)


@dataclass
class TrainResult:
    params: ModelParams
    trace: list = field(default_factory=list)
    steps: int = 0
    lam_min: float = 0.0  # smallest multiplier seen at any step


def xi_bce(j: int, epochs: int) -> float:
    return epochs / (epochs + j)


def xi_con(j: int, epochs: int) -> float:
    return (epochs + 10 * j) / epochs


def minibatch_order(public_seed: bytes, n: int, batch: int, epoch: int) -> np.ndarray:
    """Row indices for each minibatch of one epoch, shape ``(n / batch, batch)``."""
    if n % batch:
        raise BlockSizeError(f"batch size {batch} does not divide n={n}")
    digest = hashlib.sha256(b"blindfair/minibatch/" + bytes(public_seed) + epoch.to_bytes(8, "little")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
    return rng.permutation(n).reshape(n // batch, batch)


# --------------------------------------------------------------------------
# Objective pieces (float)
# --------------------------------------------------------------------------


def constraint_matrix(D: Dataset) -> np.ndarray:
    """``(1/n) (Z - zbar)^T X``, p x d."""
    Zc = D.Z - D.Z.mean(axis=0)
    return Zc.T @ D.X / D.n


def fairness_value(A, theta, c) -> np.ndarray:
    return np.abs(np.asarray(A) @ np.asarray(theta)) - np.asarray(c, dtype=np.float64)


def bce_loss(X, y, theta) -> float:
    s = np.asarray(X) @ np.asarray(theta)
    # log(1 + e^s) - y s, written stably
    return float(np.mean(np.logaddexp(0.0, s) - np.asarray(y) * s))


def bce_grad(X, y, theta, kind: str = "exact") -> np.ndarray:
    X = np.asarray(X)
    return X.T @ (sg.sigmoid_variants(X @ theta, kind) - y) / len(X)


def barrier(A, theta, c, t: float) -> float:
    u = np.asarray(A) @ theta
    c = np.asarray(c, dtype=np.float64)
    if np.any(np.abs(u) >= c):
        raise BarrierDomainError("barrier evaluated outside |A theta| < c")
    return float(-(np.log(c + u) + np.log(c - u)).sum() / t)


def barrier_grad(A, theta, c, t: float) -> np.ndarray:
    A = np.asarray(A)
    u = A @ theta
    c = np.asarray(c, dtype=np.float64)
    return -(A.T @ (1.0 / (c + u) - 1.0 / (c - u))) / t


def project_gradient(g, A_hat) -> np.ndarray:
    """Remove from ``g`` its component in the row space of ``A_hat``."""
    A_hat = np.atleast_2d(A_hat)
    if A_hat.shape[0] == 0:
        return np.array(g, dtype=np.float64)
    M = A_hat @ A_hat.T
    if not np.isfinite(M).all() or np.linalg.cond(M) > COND_LIMIT:
        raise SingularProjection(f"active constraint Gram matrix has condition {np.linalg.cond(M):.3g}")
    return g - A_hat.T @ np.linalg.solve(M, A_hat @ g)


# --------------------------------------------------------------------------
# Fixed-point building blocks shared with the protocol
# --------------------------------------------------------------------------


def _log2(v: int, what: str) -> int:
    if not is_power_of_two(v):
        raise BlockSizeError(f"{what} must be a power of two, got {v}")
    return v.bit_length() - 1


def _msb(x) -> np.ndarray:
    return (np.asarray(x, U64) >> U64(63)) & U64(1)


def fixed_constraint_matrix(Xe: np.ndarray, Ze: np.ndarray, block: int, rnd, fx: FxConfig = DEFAULT_FX) -> np.ndarray:
    """Ring version of :func:`constraint_matrix` with per-block normalization.

    ``rnd(x, bits)`` is the rescaling rule (a :class:`blindfair.fxp.DitherRounding`).
    """
    n = len(Xe)
    log_n, log_b = _log2(n, "n"), _log2(block, "block size")
    if block > n or block >= (1 << fx.int_bits):
        raise BlockSizeError(f"block size {block} must divide n={n} and stay below 2^{fx.int_bits}")
    zbar = rnd(Ze.sum(axis=0, dtype=U64), log_n)
    Zt = fxp.sub(Ze, zbar).T
    total = np.zeros((Ze.shape[1], Xe.shape[1]), dtype=U64)
    for k in range(0, n, block):
        raw = fxp.ring_matmul(Zt[:, k:k + block], Xe[k:k + block])
        total = fxp.add(total, rnd(raw, fx.frac_bits + log_b))
    return rnd(total, log_n - log_b)


def fixed_sigmoid(v: np.ndarray, kind: str, fx: FxConfig) -> np.ndarray:
    if kind == "secureml":
        return sg.secureml_fixed(v, fx)
    return fxp.encode(sg.sigmoid_variants(fxp.decode(v, fx), kind), fx)


# --------------------------------------------------------------------------
# Trace
# --------------------------------------------------------------------------


def _trace_row(D: Dataset, A: np.ndarray, theta: np.ndarray, lam: np.ndarray, c, epoch: int,
               kind: str) -> dict:
    rep = evaluate(D.X, D.y, D.Z, theta, kind)
    row = {
        "epoch": epoch,
        "loss": bce_loss(D.X, D.y, theta),
        "accuracy": rep.accuracy,
        "max_F": float(np.max(fairness_value(A, theta, c))),
        "lambda_norm": float(np.linalg.norm(lam)),
    }
    for j, att in enumerate(rep.attributes):
        row[f"ar_z0_{j}"] = att.z0.ar
        row[f"ar_z1_{j}"] = att.z1.ar
    return row


def write_trace(rows: Sequence[dict], path) -> None:
    if not rows:
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------


def _check_batch(D: Dataset, cfg: TrainingConfig) -> None:
    if D.n % cfg.batch:
        raise BlockSizeError(f"batch size {cfg.batch} does not divide n={D.n}")
    if len(cfg.c) != D.p:
        raise ValueError(f"{len(cfg.c)} constraint values for {D.p} sensitive columns")


def _finite(theta: np.ndarray, step: int) -> None:
    if not np.isfinite(theta).all():
        raise NonFiniteError(f"parameters became non-finite at step {step}")


def train_lagrange(D: Dataset, cfg: TrainingConfig, trace: bool = True) -> TrainResult:
    _check_batch(D, cfg)
    if cfg.arithmetic == "fixed":
        return _lagrange_fixed(D, cfg, trace)
    A = constraint_matrix(D)
    c = np.asarray(cfg.c)
    theta, lam = np.zeros(D.d), np.zeros(D.p)
    epochs = cfg.resolved_epochs(D.n)
    rows, step, lam_min = [], 0, 0.0
    for j in range(epochs):
        k_bce = cfg.eta_theta * xi_bce(j, epochs)
        k_con = cfg.eta_theta * xi_con(j, epochs)
        for idx in minibatch_order(cfg.public_seed, D.n, cfg.batch, j):
            Xi, yi = D.X[idx], D.y[idx]
            u = A @ theta
            F = np.abs(u) - c
            active = F > 0
            g_lam = np.maximum(F, 0.0)
            g_bce = Xi.T @ (sg.sigmoid_variants(Xi @ theta, cfg.sigmoid) - yi) / cfg.batch
            sign = np.where(u < 0, -1.0, 1.0)
            g_con = A.T @ (active * sign * lam)
            theta = theta - (k_bce * g_bce + k_con * g_con)
            lam = np.maximum(lam + cfg.eta_lambda * g_lam, 0.0)
            lam_min = min(lam_min, float(lam.min(initial=0.0)))
            step += 1
            _finite(theta, step)
        if trace:
            rows.append(_trace_row(D, A, theta, lam, c, j, cfg.sigmoid))
    return TrainResult(ModelParams(theta, lam), rows, step, lam_min)


def _lagrange_fixed(D: Dataset, cfg: TrainingConfig, trace: bool) -> TrainResult:
    fx = cfg.fx
    f, s = fx.frac_bits, cfg.batch_exp
    Xe, ye, Ze = fxp.encode(D.X, fx), fxp.encode(D.y, fx), fxp.encode(D.Z, fx)
    ce = fxp.encode(np.asarray(cfg.c), fx)
    rnd = fxp.DitherRounding(cfg.public_seed)
    A = fixed_constraint_matrix(Xe, Ze, cfg.resolved_block(D.n), rnd, fx)
    A_float = fxp.decode(A, fx)
    k_lam = fxp.encode_public(cfg.eta_lambda)
    theta = np.zeros(D.d, dtype=U64)
    lam = np.zeros(D.p, dtype=U64)
    epochs = cfg.resolved_epochs(D.n)
    bound = 1 << (fx.int_bits + fx.frac_bits)
    rows, step = [], 0
    for j in range(epochs):
        k1 = fxp.encode_public(cfg.eta_theta * xi_bce(j, epochs))
        k2 = fxp.encode_public(cfg.eta_theta * xi_con(j, epochs))
        for idx in minibatch_order(cfg.public_seed, D.n, cfg.batch, j):
            theta, lam = fixed_lagrange_step(A, Xe[idx], ye[idx], ce, theta, lam, k1, k2, k_lam,
                                             f, s, lambda v: fixed_sigmoid(v, cfg.sigmoid, fx), rnd)
            step += 1
        if np.any(np.abs(fxp.to_signed(theta)) >= bound):
            raise FixedPointOverflow(f"parameters left the {fx.int_bits}.{fx.frac_bits} range in epoch {j}")
        if trace:
            rows.append(_trace_row(D, A_float, fxp.decode(theta, fx), fxp.decode(lam, fx),
                                   np.asarray(cfg.c), j, cfg.sigmoid))
    params = ModelParams(fxp.decode(theta, fx), fxp.decode(lam, fx), theta)
    return TrainResult(params, rows, step, float(fxp.decode(lam, fx).min(initial=0.0)))


def fixed_lagrange_step(A, Xi, yi, ce, theta, lam, k1, k2, k_lam, f: int, s: int, sigmoid_fn, rnd):
    """One minibatch update on ring values, as the protocol performs it.

    Rescalings happen in three groups, in this order: ``(A theta, X_i theta)``,
    ``(BCE gradient, constraint gradient)``, ``(theta step, lambda step)``.
    """
    two = U64(2)
    u = rnd(fxp.ring_matmul(A, theta), f)
    v = rnd(fxp.ring_matmul(Xi, theta), f)
    neg = _msb(u)
    F = fxp.sub(fxp.sub(u, fxp.ring_mul(two, fxp.ring_mul(neg, u))), ce)
    pos = _msb(fxp.neg(F))
    g_lam = fxp.ring_mul(pos, F)
    diff = fxp.sub(sigmoid_fn(v), yi)
    q = fxp.sub(lam, fxp.ring_mul(two, fxp.ring_mul(neg, lam)))
    g_bce = rnd(fxp.ring_matmul(Xi.T, diff), f + s)
    g_con = rnd(fxp.ring_matmul(A.T, fxp.ring_mul(pos, q)), f)
    upd = fxp.add(fxp.ring_mul(g_bce, k1), fxp.ring_mul(g_con, k2))
    step = rnd(upd, fxp.PUBLIC_FRAC_BITS)
    lam = fxp.add(lam, rnd(fxp.ring_mul(g_lam, k_lam), fxp.PUBLIC_FRAC_BITS))
    theta = fxp.sub(theta, step)
    lam = fxp.ring_mul(_msb(fxp.neg(lam)), lam)
    return theta, lam


def _float_only(cfg: TrainingConfig) -> None:
    if cfg.arithmetic != "float":
        raise ValueError(f"{cfg.optimizer} is implemented in floating point only")


def train_projected(D: Dataset, cfg: TrainingConfig, trace: bool = True) -> TrainResult:
    """Projected minibatch gradient descent.

    A constraint row is active when it is violated already or would be
    violated by the unprojected step; the gradient is projected onto the
    orthogonal complement of the active rows.
    """
    _check_batch(D, cfg)
    _float_only(cfg)
    A = constraint_matrix(D)
    c = np.asarray(cfg.c)
    theta = np.zeros(D.d)
    epochs = cfg.resolved_epochs(D.n)
    rows, step = [], 0
    for j in range(epochs):
        for idx in minibatch_order(cfg.public_seed, D.n, cfg.batch, j):
            Xi, yi = D.X[idx], D.y[idx]
            g = Xi.T @ (sg.sigmoid_variants(Xi @ theta, cfg.sigmoid) - yi) / cfg.batch
            active = (fairness_value(A, theta, c) > 0) | (fairness_value(A, theta - cfg.eta_theta * g, c) > 0)
            if active.any():
                g = project_gradient(g, A[active])
            theta = theta - cfg.eta_theta * g
            step += 1
            _finite(theta, step)
        if trace:
            rows.append(_trace_row(D, A, theta, np.zeros(D.p), c, j, cfg.sigmoid))
    return TrainResult(ModelParams(theta, np.zeros(D.p)), rows, step)


def train_iplb(D: Dataset, cfg: TrainingConfig, trace: bool = True,
               theta0: Optional[np.ndarray] = None) -> TrainResult:
    """Minibatch SGD on mean BCE plus the log barrier; ``t`` doubles every epoch."""
    _check_batch(D, cfg)
    _float_only(cfg)
    A = constraint_matrix(D)
    c = np.asarray(cfg.c)
    theta = np.zeros(D.d) if theta0 is None else np.array(theta0, dtype=np.float64)
    if np.any(np.abs(A @ theta) >= c):
        raise BarrierDomainError("initial parameters are not strictly feasible")
    epochs = cfg.resolved_epochs(D.n)
    rows, step = [], 0
    for j in range(epochs):
        t = cfg.t0 * 2.0 ** j
        for idx in minibatch_order(cfg.public_seed, D.n, cfg.batch, j):
            Xi, yi = D.X[idx], D.y[idx]
            g = Xi.T @ (sg.sigmoid_variants(Xi @ theta, cfg.sigmoid) - yi) / cfg.batch
            theta = theta - cfg.eta_theta * (g + barrier_grad(A, theta, c, t))
            step += 1
            _finite(theta, step)
            if np.any(np.abs(A @ theta) >= c):
                raise BarrierDomainError(f"left the barrier domain at step {step} (epoch {j}, t={t:g})")
        if trace:
            rows.append(_trace_row(D, A, theta, np.zeros(D.p), c, j, cfg.sigmoid))
    return TrainResult(ModelParams(theta, np.zeros(D.p)), rows, step)


def train(D: Dataset, cfg: TrainingConfig, trace: bool = True) -> TrainResult:
    fn = {"lagrange": train_lagrange, "projected": train_projected, "iplb": train_iplb}[cfg.optimizer]
    return fn(D, cfg, trace)
