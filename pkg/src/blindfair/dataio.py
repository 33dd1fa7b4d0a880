"""Dataset ingestion, preprocessing and the synthetic generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import fxp
from .dataset import Dataset, Whitening, is_power_of_two
from .errors import DataError, EmptyDataset, NonBinaryColumn, ParseError
from .fxp import DEFAULT_FX, FxConfig, FixedPointOverflow

ROLES = ("feature", "sensitive", "label", "ignore")


@dataclass
class DatasetSpec:
    """Where a CSV lives and what each column means.

    ``roles`` maps column names to one of ``feature``, ``sensitive``,
    ``label`` or ``ignore``; unlisted columns are features.  ``positive``
    maps the label column (and optionally sensitive columns) to the raw
    value that becomes 1.
    """

    path: Path
    roles: dict = field(default_factory=dict)
    positive: dict = field(default_factory=dict)
    seed: int = 0
    test_fraction: float = 0.2
    intercept: bool = True

    @classmethod
    def from_sidecar(cls, csv_path, config_path) -> "DatasetSpec":
        """Parse ``key=value`` lines.

        Recognised keys: ``label``, ``sensitive`` (comma separated),
        ``ignore`` (comma separated), ``positive`` (label value), ``positive.<col>``,
        ``seed``, ``test_fraction`` and ``intercept`` (0/1).
        """
        roles, positive = {}, {}
        seed, test_fraction, intercept = 0, 0.2, True
        for lineno, raw in enumerate(Path(config_path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{config_path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "label":
                roles[value] = "label"
            elif key in ("sensitive", "ignore"):
                for col in filter(None, (c.strip() for c in value.split(","))):
                    roles[col] = key
            elif key == "positive":
                positive["__label__"] = value
            elif key.startswith("positive."):
                positive[key[len("positive."):]] = value
            elif key == "seed":
                seed = int(value)
            elif key == "test_fraction":
                test_fraction = float(value)
            elif key == "intercept":
                intercept = value not in ("0", "false", "no")
            else:
                raise DataError(f"{config_path}:{lineno}: unknown key {key!r}")
        return cls(Path(csv_path), roles, positive, seed, test_fraction, intercept)


@dataclass
class SyntheticSpec:
    """Two Gaussian classes in 2-d; the sensitive bit follows a rotated direction.

    ``z ~ Bernoulli(sigmoid(w_phi . x))`` with ``w_phi`` the class-separation
    direction ``(1, 1) / sqrt 2`` rotated by ``phi``.  At ``phi = pi/2`` the
    direction is orthogonal to the class means, so ``z`` and ``y`` are
    uncorrelated; smaller angles correlate them more strongly.
    ``noise_features`` appends standard normal columns unrelated to anything.
    """

    n: int = 1 << 12
    phi: float = math.pi / 8
    seed: int = 0
    mean1: tuple = (2.0, 2.0)
    cov1: tuple = ((5.0, 1.0), (1.0, 5.0))
    mean0: tuple = (-2.0, -2.0)
    cov0: tuple = ((10.0, 1.0), (1.0, 3.0))
    noise_features: int = 1
    intercept: bool = True

    def __post_init__(self):
        if not is_power_of_two(self.n):
            raise ValueError(f"n must be a power of two, got {self.n}")
        if not 0 < self.phi <= math.pi / 2:
            raise ValueError("phi must lie in (0, pi/2]")


def _add_intercept(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((len(X), 1))])


def _whiten(X: np.ndarray, intercept: bool) -> tuple[np.ndarray, Whitening]:
    if intercept:
        X = _add_intercept(X)
        w = Whitening.fit(X, passthrough=(X.shape[1] - 1,))
    else:
        w = Whitening.fit(X)
    return w.apply(X), w


def split_whiten(X, y, Z, *, seed: int, test_fraction: float, intercept: bool = True,
                 names=()) -> tuple[Dataset, Dataset]:
    """Shuffle, split, fit whitening on the training part and subsample it to 2^k rows.

    The test part keeps its natural size and is whitened with the training
    parameters.
    """
    rng = np.random.default_rng(seed)
    n = len(y)
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if len(train_idx) == 0:
        raise EmptyDataset("no training rows left after the split")
    k = 1 << (len(train_idx).bit_length() - 1)
    train_idx = np.sort(rng.choice(train_idx, size=k, replace=False))
    Xtr, w = _whiten(X[train_idx], intercept)
    names = list(names) + (["intercept"] if intercept else [])
    train = Dataset(Xtr, y[train_idx], Z[train_idx], w, names)
    Xte = w.apply(_add_intercept(X[test_idx]) if intercept else X[test_idx])
    test = Dataset(Xte, y[test_idx], Z[test_idx], w, names)
    return train, test


def gen_synthetic(spec: SyntheticSpec, test_n: Optional[int] = None) -> Dataset | tuple[Dataset, Dataset]:
    """Draw ``spec.n`` whitened examples (plus a test set of ``test_n`` if given).

    Classes are balanced exactly.  Whitening is fitted on the first ``spec.n``
    rows and reused for the test rows.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.n + (test_n or 0)
    y = rng.permutation(np.arange(total) % 2)
    X1 = rng.multivariate_normal(spec.mean1, spec.cov1, total)
    X0 = rng.multivariate_normal(spec.mean0, spec.cov0, total)
    X = np.where(y[:, None] == 1, X1, X0)
    sep = np.array([1.0, 1.0]) / math.sqrt(2.0)
    c, s = math.cos(spec.phi), math.sin(spec.phi)
    w = np.array([[c, -s], [s, c]]) @ sep
    z = (rng.random(total) < 1.0 / (1.0 + np.exp(-(X @ w)))).astype(np.float64)
    if spec.noise_features:
        X = np.hstack([X, rng.standard_normal((total, spec.noise_features))])
    names = ["x1", "x2"] + [f"noise{i}" for i in range(spec.noise_features)]
    Xtr, wh = _whiten(X[: spec.n], spec.intercept)
    names += ["intercept"] if spec.intercept else []
    train = Dataset(Xtr, y[: spec.n], z[: spec.n], wh, names)
    if not test_n:
        return train
    Xte = X[spec.n:]
    Xte = wh.apply(_add_intercept(Xte) if spec.intercept else Xte)
    return train, Dataset(Xte, y[spec.n:], z[spec.n:], wh, names)


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path} is empty") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", lineno)
            rows.append([v.strip() for v in row])
    if not rows:
        raise EmptyDataset(f"{path} has a header but no rows")
    return [h.strip() for h in header], rows


def _binary(values: list[str], name: str, positive: Optional[str]) -> np.ndarray:
    levels = sorted(set(values))
    if len(levels) > 2:
        raise NonBinaryColumn(f"column {name!r} has {len(levels)} distinct values: {levels[:5]}")
    if positive is None:
        if set(levels) <= {"0", "1"}:
            positive = "1"
        else:
            positive = levels[-1]
    elif positive not in levels and len(levels) == 2:
        raise NonBinaryColumn(f"column {name!r} has no value {positive!r}")
    return np.array([v == positive for v in values], dtype=np.float64)


def _parses(v: str) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def _is_numeric(values: list[str]) -> bool:
    return all(_parses(v) for v in values)


def load_csv(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Read, encode, split and whiten a CSV; returns ``(train, test)``.

    Numeric features are used as is; other feature columns are one-hot
    encoded (one column per level, in sorted order).  The training part is
    subsampled without replacement to the largest power of two.
    """
    header, rows = _read_rows(Path(spec.path))
    for col in spec.roles:
        if col not in header:
            raise DataError(f"column {col!r} not found in {spec.path}")
    for col, role in spec.roles.items():
        if role not in ROLES:
            raise DataError(f"unknown role {role!r} for column {col!r}")
    labels = [c for c in header if spec.roles.get(c) == "label"]
    sensitive = [c for c in header if spec.roles.get(c) == "sensitive"]
    if len(labels) != 1:
        raise DataError(f"exactly one label column required, found {len(labels)}")
    if not sensitive:
        raise DataError("at least one sensitive column is required")
    columns = {name: [r[j] for r in rows] for j, name in enumerate(header)}

    y = _binary(columns[labels[0]], labels[0], spec.positive.get("__label__"))
    Z = np.column_stack([_binary(columns[c], c, spec.positive.get(c)) for c in sensitive])

    feats, names = [], []
    for j, name in enumerate(header):
        if spec.roles.get(name, "feature") != "feature":
            continue
        values = columns[name]
        if _is_numeric(values):
            feats.append(np.array([float(v) for v in values]))
            names.append(name)
            continue
        bad = [i for i, v in enumerate(values) if not _parses(v)]
        if len(bad) < len(values) / 2:
            # mostly numbers: the stray cells are errors, not categories
            i = bad[0]
            raise ParseError(f"non-numeric value {values[i]!r} in numeric column {name!r}", i + 2, name)
        for level in sorted(set(values)):
            feats.append(np.array([v == level for v in values], dtype=np.float64))
            names.append(f"{name}={level}")
    if not feats and not spec.intercept:
        raise DataError("no feature columns")
    X = np.column_stack(feats) if feats else np.zeros((len(rows), 0))
    return split_whiten(X, y, Z, seed=spec.seed, test_fraction=spec.test_fraction,
                        intercept=spec.intercept, names=names)


@dataclass
class QuantizedDataset:
    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    fx: FxConfig
    max_error: float


def fx_quantize(D: Dataset, cfg: FxConfig = DEFAULT_FX) -> QuantizedDataset:
    """Encode every entry; overflow reports ``(array, row, col)``."""
    out, err = {}, 0.0
    for name in ("X", "y", "Z"):
        arr = getattr(D, name)
        try:
            enc = fxp.encode(arr, cfg)
        except FixedPointOverflow as exc:
            raise FixedPointOverflow(f"{name}{exc.index}: value outside +-2^{cfg.int_bits}",
                                     (name,) + tuple(exc.index or ())) from None
        err = max(err, float(np.max(np.abs(fxp.decode(enc, cfg) - arr), initial=0.0)))
        out[name] = enc
    return QuantizedDataset(out["X"], out["y"], out["Z"], cfg, err)
