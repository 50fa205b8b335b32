"""Discrete measures: the empirical sample, the quantile-level grid and the
couplings between them."""
import hashlib
import itertools
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
WEIGHT_SUM_TOL = 1e-12
CENTERED_TOL = 1e-12
MAX_GRID_SIZE = 250_000

WEIGHT_COLUMNS = ("w", "weight")


class ParseError(ValueError):
    pass


class GridSizeError(ValueError):
    pass


def _frozen(a, ndim, name):
    a = np.array(a, dtype=np.float64)
    if a.ndim == 1 and ndim == 2:
        a = a.reshape(-1, 1)
    if a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    a.setflags(write=False)
    return a


def _digest(*arrays):
    h = hashlib.sha1()
    for a in arrays:
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:12]


@dataclass(frozen=True)
class DiscreteSample:
    """Weighted atoms (x_j, y_j) of the joint law of covariates and outcomes.

    x is n x N (N may be 0), y is n x d, w sums to one. x_mean records the
    shift subtracted by `center`.
    """

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    x_mean: np.ndarray = None

    def __post_init__(self):
        y = _frozen(self.y, 2, "y")
        n, d = y.shape
        if n < 1 or d < 1:
            raise ValueError(f"sample needs n >= 1 atoms and d >= 1 outcomes, got {y.shape}")
        x = np.array(self.x, dtype=np.float64)
        if x.size == 0:
            x = np.zeros((n, 0))
        x = _frozen(x, 2, "x")
        if x.shape[0] != n:
            raise ValueError(f"x has {x.shape[0]} rows but y has {n}")
        w = _frozen(self.w, 1, "w")
        if w.shape[0] != n:
            raise ValueError(f"w has {w.shape[0]} entries but y has {n} rows")
        if np.any(w <= 0):
            raise ValueError("atom weights must be strictly positive")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"atom weights sum to {w.sum()!r}, not 1")
        x_mean = np.zeros(x.shape[1]) if self.x_mean is None else self.x_mean
        x_mean = _frozen(np.atleast_1d(x_mean), 1, "x_mean")
        if x_mean.shape[0] != x.shape[1]:
            raise ValueError("x_mean length does not match the number of covariates")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x_mean", x_mean)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def n_covariates(self):
        return self.x.shape[1]

    @property
    def d(self):
        return self.y.shape[1]

    @property
    def ref(self):
        return "sample:" + _digest(self.x, self.y, self.w)

    @property
    def y_bar(self):
        """Barycenter of the outcomes"""
        return self.w @ self.y

    def centering_error(self):
        if self.n_covariates == 0:
            return 0.0
        return float(np.max(np.abs(self.w @ self.x)))

    def is_centered(self, tol=CENTERED_TOL):
        scale = max(1.0, float(np.max(np.abs(self.x), initial=0.0)))
        return self.centering_error() <= tol * scale

    def permuted(self, order):
        order = np.asarray(order)
        return DiscreteSample(
            x=self.x[order], y=self.y[order], w=self.w[order], x_mean=self.x_mean
        )

    def to_dict(self):
        return {
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "w": self.w.tolist(),
            "x_mean": self.x_mean.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        y = np.asarray(data["y"], dtype=float)
        x = np.asarray(data["x"], dtype=float)
        if x.ndim != 2:
            x = x.reshape(y.shape[0], -1 if x.size else 0)
        return cls(x=x, y=y, w=data["w"], x_mean=data.get("x_mean"))


@dataclass(frozen=True)
class UGrid:
    """Quantile levels u_i in [0,1]^d carrying uniform weights mu_i = 1/m."""

    u: np.ndarray
    mu: np.ndarray
    per_axis: tuple = field(default=())

    def __post_init__(self):
        u = _frozen(self.u, 2, "u")
        mu = _frozen(self.mu, 1, "mu")
        m = u.shape[0]
        if m < 1 or mu.shape[0] != m:
            raise ValueError("grid levels and weights must be nonempty and aligned")
        if np.any(u < 0) or np.any(u > 1):
            raise ValueError("grid levels must lie in [0, 1]")
        if not np.allclose(mu, mu[0], rtol=0, atol=1e-15) or abs(mu.sum() - 1) > 1e-12:
            raise ValueError("grid weights must be uniform and sum to one")
        if len(np.unique(u, axis=0)) != m:
            raise ValueError("grid levels must be distinct")
        if u.shape[1] == 1 and np.any(np.diff(u[:, 0]) <= 0):
            raise ValueError("one-dimensional grid levels must be strictly increasing")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "per_axis", tuple(int(p) for p in self.per_axis))

    @property
    def m(self):
        return self.u.shape[0]

    @property
    def d(self):
        return self.u.shape[1]

    @property
    def ref(self):
        return "grid:" + _digest(self.u)

    def axes(self):
        """Per-axis level vectors of a tensor grid"""
        return [np.unique(self.u[:, k]) for k in range(self.d)]

    def is_tensor(self):
        if len(self.per_axis) != self.d or int(np.prod(self.per_axis)) != self.m:
            return False
        axes = self.axes()
        if tuple(len(a) for a in axes) != self.per_axis:
            return False
        mesh = np.meshgrid(*axes, indexing="ij")
        expected = np.stack([g.ravel() for g in mesh], axis=1)
        return bool(np.array_equal(expected, self.u))

    def to_dict(self):
        return {"u": self.u.tolist(), "mu": self.mu.tolist(), "per_axis": list(self.per_axis)}

    @classmethod
    def from_dict(cls, data):
        return cls(u=data["u"], mu=data["mu"], per_axis=tuple(data.get("per_axis", ())))


@dataclass(frozen=True)
class Coupling:
    """Joint law pi(i, j) of a grid atom and a sample atom"""

    pi: np.ndarray
    grid_ref: str = ""
    sample_ref: str = ""

    def __post_init__(self):
        pi = np.array(self.pi, dtype=np.float64)
        if pi.ndim != 2:
            raise ValueError("coupling must be an m x n matrix")
        if not np.all(np.isfinite(pi)):
            raise ValueError("coupling contains non-finite mass")
        if np.any(pi < -FEASIBILITY_TOL):
            raise ValueError(f"coupling has negative mass {pi.min()!r}")
        pi = np.maximum(pi, 0.0)
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)

    @property
    def shape(self):
        return self.pi.shape

    def marginal_residuals(self, grid, sample):
        """Sup-norm violation of the grid and sample marginals"""
        return (
            float(np.max(np.abs(self.pi.sum(axis=1) - grid.mu))),
            float(np.max(np.abs(self.pi.sum(axis=0) - sample.w))),
        )

    def triplets(self, floor=0.0):
        i, j = np.nonzero(self.pi > floor)
        return [(int(a), int(b), float(self.pi[a, b])) for a, b in zip(i, j)]

    def to_dict(self):
        return {"pi": self.pi.tolist(), "grid_ref": self.grid_ref, "sample_ref": self.sample_ref}

    @classmethod
    def from_dict(cls, data):
        return cls(pi=data["pi"], grid_ref=data.get("grid_ref", ""), sample_ref=data.get("sample_ref", ""))

    @classmethod
    def from_triplets(cls, triplets, shape, grid_ref="", sample_ref=""):
        pi = np.zeros(shape)
        for i, j, mass in triplets:
            pi[int(i), int(j)] = mass
        return cls(pi=pi, grid_ref=grid_ref, sample_ref=sample_ref)


@dataclass(frozen=True)
class Schema:
    """Maps CSV header names to roles"""

    covariates: tuple = ()
    outcomes: tuple = ()
    weight: str = None

    @classmethod
    def infer(cls, header):
        """x<k> columns are covariates, y<k> outcomes, w/weight the weight.

        A bare x or y header counts as the first column of its kind.
        """

        def numbered(prefix):
            cols = [h for h in header if re.fullmatch(prefix + r"\d*", h)]
            return tuple(sorted(cols, key=lambda h: int(h[1:] or 0)))

        weight = next((h for h in header if h.lower() in WEIGHT_COLUMNS), None)
        return cls(covariates=numbered("x"), outcomes=numbered("y"), weight=weight)

    def check(self, header):
        missing = [c for c in self.covariates + self.outcomes if c not in header]
        if self.weight and self.weight not in header:
            missing.append(self.weight)
        if missing:
            raise ValueError(f"columns not found in header: {', '.join(missing)}")
        if not self.outcomes:
            raise ValueError("schema names no outcome column")


def _numeric_column(df, column, path):
    values = pd.to_numeric(df[column], errors="coerce")
    bad = values.isna().to_numpy() | ~np.isfinite(values.to_numpy(dtype=float))
    if bad.any():
        row = int(np.argmax(bad))
        # header is line 1
        raise ParseError(
            f"{path}, line {row + 2}: column {column!r} value {df[column].iloc[row]!r} is not a finite number"
        )
    return df[column].astype(np.float64).to_numpy()


def load_sample(path, schema=None):
    """Read a CSV with header into an uncentered DiscreteSample.

    Without a weight column the atoms get uniform weights 1/n; weights that do
    not sum to one are normalized.
    """
    try:
        df = pd.read_csv(
            path, dtype=str, keep_default_na=False, skipinitialspace=True, encoding="utf-8"
        )
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path} is empty")
    except pd.errors.ParserError as e:
        raise ParseError(f"{path}: {e}") from e
    header = [str(c).strip() for c in df.columns]
    df.columns = header
    if len(df) == 0:
        raise ValueError(f"{path} has a header but no data rows")
    schema = schema or Schema.infer(header)
    schema.check(header)

    y = np.column_stack([_numeric_column(df, c, path) for c in schema.outcomes])
    if schema.covariates:
        x = np.column_stack([_numeric_column(df, c, path) for c in schema.covariates])
    else:
        x = np.zeros((len(df), 0))
    if schema.weight:
        w = _numeric_column(df, schema.weight, path)
        if np.any(w <= 0):
            row = int(np.argmax(w <= 0))
            raise ValueError(f"{path}, line {row + 2}: weight {w[row]!r} is not positive")
        total = w.sum()
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            log.debug(f"Normalizing weights of {path} (sum {total})")
            w = w / total
    else:
        w = np.full(len(df), 1.0 / len(df))
    log.info(f"Loaded {len(df)} atoms from {path} ({x.shape[1]} covariates, {y.shape[1]} outcomes)")
    return DiscreteSample(x=x, y=y, w=w)


def save_sample(sample, path):
    """Write a sample as CSV so that load_sample reads back identical atoms"""
    columns = {}
    for k in range(sample.n_covariates):
        columns[f"x{k + 1}"] = sample.x[:, k]
    for k in range(sample.d):
        columns[f"y{k + 1}"] = sample.y[:, k]
    columns["weight"] = sample.w
    pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")
    log.debug(f"Wrote {sample.n} atoms to {path}")
    return path


def center(sample):
    """Shift covariates to weighted mean zero, recording the shift in x_mean"""
    if sample.centering_error() <= CENTERED_TOL:
        return sample
    x, x_mean = sample.x, sample.x_mean
    # second pass takes out the rounding left by the first
    for _ in range(2):
        shift = sample.w @ x
        x, x_mean = x - shift, x_mean + shift
    return DiscreteSample(x=x, y=sample.y, w=sample.w, x_mean=x_mean)


def make_grid(d, per_axis, max_size=None):
    """Tensor grid of cell midpoints (k - 1/2)/per_axis with weights 1/m"""
    if d < 1 or per_axis < 1:
        raise ValueError(f"grid needs d >= 1 and per_axis >= 1, got d={d}, per_axis={per_axis}")
    if max_size is None:
        max_size = int(os.environ.get("VQR_MAX_GRID", MAX_GRID_SIZE))
    m = per_axis**d
    if m > max_size:
        raise GridSizeError(f"grid of {per_axis}^{d} = {m} levels exceeds the cap of {max_size}")
    levels = (np.arange(per_axis) + 0.5) / per_axis
    u = np.array(list(itertools.product(levels, repeat=d)))
    return UGrid(u=u, mu=np.full(m, 1.0 / m), per_axis=(per_axis,) * d)
