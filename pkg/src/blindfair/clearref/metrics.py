"""Group fairness measurements for a linear classifier.

Rates whose conditioning event never occurs are reported as ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import UndefinedMetric
from .sigmoid import sigmoid_variants

RATES = ("acc", "tpr", "tnr", "ppv", "npv", "ar")


def _rate(hit: np.ndarray, cond: np.ndarray) -> Optional[float]:
    k = int(cond.sum())
    return None if k == 0 else float(hit[cond].mean())


@dataclass
class GroupRates:
    count: int
    acc: Optional[float]
    tpr: Optional[float]
    tnr: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]
    ar: Optional[float]

    @classmethod
    def of(cls, y: np.ndarray, yhat: np.ndarray) -> "GroupRates":
        correct = y == yhat
        return cls(
            count=len(y),
            acc=_rate(correct, np.ones_like(correct)),
            tpr=_rate(correct, y == 1),
            tnr=_rate(correct, y == 0),
            ppv=_rate(correct, yhat == 1),
            npv=_rate(correct, yhat == 0),
            ar=_rate(yhat == 1, np.ones_like(correct)),
        )


@dataclass
class AttributeReport:
    """Both groups of one binary sensitive attribute."""

    z0: GroupRates
    z1: GroupRates
    gaps: dict = field(default_factory=dict)
    p_ratio: Optional[float] = None

    @property
    def ar_gap(self) -> Optional[float]:
        return self.gaps.get("ar")


@dataclass
class FairnessReport:
    accuracy: float
    attributes: list

    def metric(self, name: str, attribute: int = 0) -> float:
        """A gap (``acc``, ``tpr``, ...) or ``p_ratio``; raises if undefined."""
        rep = self.attributes[attribute]
        value = rep.p_ratio if name == "p_ratio" else rep.gaps.get(name)
        if value is None:
            raise UndefinedMetric(f"{name} is undefined for attribute {attribute}")
        return value


def predict(X, theta, kind: str = "exact") -> np.ndarray:
    """``1`` iff the sigmoid variant of ``x . theta`` is at least 1/2."""
    return (sigmoid_variants(np.asarray(X) @ np.asarray(theta, dtype=np.float64), kind) >= 0.5).astype(int)


def p_percent_ratio(ar0: Optional[float], ar1: Optional[float]) -> Optional[float]:
    if ar0 is None or ar1 is None:
        return None
    if ar0 == 0 and ar1 == 0:
        return None
    if ar0 == 0 or ar1 == 0:
        return 0.0
    return min(ar1 / ar0, ar0 / ar1)


def report_from_predictions(y, yhat, Z) -> FairnessReport:
    y = np.asarray(y).astype(int).ravel()
    yhat = np.asarray(yhat).astype(int).ravel()
    Z = np.asarray(Z)
    if Z.ndim == 1:
        Z = Z[:, None]
    if len(y) == 0:
        raise UndefinedMetric("empty evaluation set")
    attrs = []
    for j in range(Z.shape[1]):
        z = Z[:, j].astype(int)
        g0 = GroupRates.of(y[z == 0], yhat[z == 0])
        g1 = GroupRates.of(y[z == 1], yhat[z == 1])
        gaps = {}
        for name in RATES:
            a, b = getattr(g0, name), getattr(g1, name)
            gaps[name] = None if a is None or b is None else abs(a - b)
        attrs.append(AttributeReport(g0, g1, gaps, p_percent_ratio(g0.ar, g1.ar)))
    return FairnessReport(float(np.mean(y == yhat)), attrs)


def evaluate(X, y, Z, theta, kind: str = "exact") -> FairnessReport:
    return report_from_predictions(y, predict(X, theta, kind), Z)
