"""Logistic function and its two piecewise-linear stand-ins."""

from __future__ import annotations

import numpy as np

from .. import fxp
from ..fxp import U64, FxConfig

KINDS = ("exact", "secureml", "chebyshev")

CHEB_LO, CHEB_HI = -5, 5


def exact(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def secureml(x):
    """0 for x <= -1/2, x + 1/2 in between, 1 for x >= 1/2."""
    return np.clip(np.asarray(x, dtype=np.float64) + 0.5, 0.0, 1.0)


def _minimax_line(a: float, b: float) -> tuple[float, float]:
    """Best uniform linear fit of the sigmoid on ``[a, b]``.

    The sigmoid is convex or concave on each unit interval used here, so the
    optimal line has the secant slope and touches the error extremum where
    the derivative equals that slope; the intercept splits the error evenly.
    """
    fa, fb = float(exact(a)), float(exact(b))
    m = (fb - fa) / (b - a)
    root = np.sqrt(max(0.0, 1.0 - 4.0 * m))
    s = 0.5 * (1.0 + root) if a >= 0 else 0.5 * (1.0 - root)
    xi = float(np.log(s / (1.0 - s)))
    q = 0.5 * (fa - m * a + float(exact(xi)) - m * xi)
    return m, q


CHEB_COEFFS = np.array([_minimax_line(a, a + 1.0) for a in range(CHEB_LO, CHEB_HI)])


def chebyshev(x):
    """Per-unit-interval minimax lines on [-5, 5], constant 0 / 1 outside."""
    x = np.asarray(x, dtype=np.float64)
    k = np.clip(np.floor(x).astype(np.int64) - CHEB_LO, 0, CHEB_HI - CHEB_LO - 1)
    m, q = CHEB_COEFFS[k, 0], CHEB_COEFFS[k, 1]
    out = m * x + q
    out = np.where(x < CHEB_LO, 0.0, out)
    return np.where(x > CHEB_HI, 1.0, out)


def sigmoid_variants(x, kind: str = "exact"):
    try:
        fn = {"exact": exact, "secureml": secureml, "chebyshev": chebyshev}[kind]
    except KeyError:
        raise ValueError(f"unknown sigmoid {kind!r}; choose from {KINDS}") from None
    return fn(x)


def secureml_fixed(v: np.ndarray, cfg: FxConfig) -> np.ndarray:
    """Ring-level evaluation of the piecewise sigmoid, mirroring the secure gadget.

    Branch bits: ``low = (t - 1 ulp) < 0`` and ``below = (t - 1) < 0`` with
    ``t = v + 1/2``; output ``(low xor below) * t + (not below) * 1``.
    """
    t = fxp.add(v, cfg.half)
    low = fxp.to_signed(fxp.sub(t, U64(1))) < 0
    below = fxp.to_signed(fxp.sub(t, cfg.one)) < 0
    mid = (low ^ below).astype(U64)
    top = (~below).astype(U64)
    return fxp.add(fxp.ring_mul(mid, t), fxp.ring_mul(top, cfg.one))
