"""Discrete Legendre transforms, convex envelopes and the contact-set check
for fitted mean-independence potentials."""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from vqr.vqr_solver import ENTROPIC

log = logging.getLogger(__name__)

MASS_FLOOR_FACTOR = 1e-10
CONTACT_TOL_FACTOR = 1e-6
CONTACT_RTOL = 1e-12
SLOPES_PER_AXIS = 16


@dataclass(frozen=True)
class GridFunction:
    grid: object
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        if values.shape[0] != self.grid.m:
            raise ValueError(f"{values.shape[0]} values for a grid of {self.grid.m} levels")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def grid_ref(self):
        return self.grid.ref


@dataclass(frozen=True)
class ContactRecord:
    i: int
    j: int
    mass: float
    envelope_gap: float
    young_gap: float


@dataclass(frozen=True)
class ContactReport:
    records: list
    max_envelope_gap: float
    max_young_gap: float
    tol: float
    mass_floor: float
    resolution: float = 0.0
    passed: bool = field(default=False)

    def to_dict(self):
        return {
            "passed": self.passed,
            "tol": self.tol,
            "mass_floor": self.mass_floor,
            "resolution": self.resolution,
            "max_envelope_gap": self.max_envelope_gap,
            "max_young_gap": self.max_young_gap,
            "records": [
                {"i": r.i, "j": r.j, "mass": r.mass, "envelope_gap": r.envelope_gap, "young_gap": r.young_gap}
                for r in self.records
            ],
        }


def _slopes(slopes, d):
    slopes = np.asarray(slopes, dtype=float)
    if slopes.ndim == 1:
        slopes = slopes.reshape(-1, d)
    if slopes.shape[0] == 0:
        raise ValueError("slope set is empty")
    return slopes


def legendre(f, slopes):
    """f*(y) = max_i (u_i . y - f(u_i)) for each slope y"""
    slopes = _slopes(slopes, f.grid.d)
    return np.max(slopes @ f.grid.u.T - f.values[None, :], axis=1)


def convex_envelope_1d(t, values):
    """Lower convex hull of (t, values) evaluated at t, with contact flags"""
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    if t.shape != values.shape or t.ndim != 1:
        raise ValueError("abscissae and values must be aligned vectors")
    if np.any(np.diff(t) <= 0):
        raise ValueError("abscissae must be strictly increasing")
    hull = []
    for k in range(len(t)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b when it lies on or above the chord from a to k
            cross = (t[b] - t[a]) * (values[k] - values[a]) - (values[b] - values[a]) * (t[k] - t[a])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    envelope = np.interp(t, t[hull], values[hull])
    contact = np.abs(envelope - values) <= CONTACT_RTOL * np.maximum(1.0, np.abs(values))
    return envelope, contact


def default_slopes(f, extra=None, per_axis=SLOPES_PER_AXIS):
    """Bounding grid over the divided-difference range on each axis, plus extra
    slopes; in d = 1 the consecutive chord slopes are added as well"""
    u, values = f.grid.u, f.values
    d = f.grid.d
    lows, highs = [], []
    chords = []
    for k in range(d):
        # sort by the other axes first so that neighbours differ along axis k only
        order = np.lexsort([u[:, k]] + [u[:, a] for a in range(d) if a != k])
        du = np.diff(u[order, k])
        dv = np.diff(values[order])
        ok = du > 0
        ratios = dv[ok] / du[ok] if ok.any() else np.zeros(1)
        lows.append(ratios.min())
        highs.append(ratios.max())
        if d == 1:
            chords = ratios
    axes = [np.linspace(lo, hi, per_axis) if hi > lo else np.array([lo]) for lo, hi in zip(lows, highs)]
    mesh = np.meshgrid(*axes, indexing="ij")
    slopes = np.stack([g.ravel() for g in mesh], axis=1)
    parts = [slopes]
    if d == 1 and len(chords):
        parts.append(np.asarray(chords).reshape(-1, 1))
    if extra is not None:
        parts.append(_slopes(extra, d))
    spacing = max(((hi - lo) / (per_axis - 1) if per_axis > 1 else hi - lo) for lo, hi in zip(lows, highs))
    return np.unique(np.vstack(parts), axis=0), np.sqrt(d) * spacing


def _diameter(grid):
    return float(np.linalg.norm(grid.u.max(axis=0) - grid.u.min(axis=0)))


def envelope_via_double_transform(f, slopes=None, extra=None):
    """u -> max_y (u.y - f*(y)) over a finite slope set.

    Returns the envelope and a resolution bound: slope spacing times the grid
    diameter (zero when the slope set is given explicitly).
    """
    if slopes is None:
        slopes, spacing = default_slopes(f, extra=extra)
        resolution = spacing * _diameter(f.grid)
    else:
        slopes = _slopes(slopes, f.grid.d)
        resolution = 0.0
    conjugate = legendre(f, slopes)
    values = np.max(f.grid.u @ slopes.T - conjugate[None, :], axis=1)
    # minorant of f up to rounding
    values = np.minimum(values, f.values)
    return GridFunction(grid=f.grid, values=values), resolution


def potential_at(sol, x):
    """Phi_x(u_i) = phi_i + b_i . x"""
    return sol.phi + sol.b @ np.atleast_1d(np.asarray(x, dtype=float))


def check_relaxed_spec(sol, sample, grid, tol=None, mass_floor=None):
    """Envelope and Young gaps of Phi_x = phi + b.x at every support entry.

    Violations are reported in the returned flag.
    """
    if mass_floor is None:
        mass_floor = MASS_FLOOR_FACTOR / (grid.m * sample.n)
    if tol is None:
        tol = CONTACT_TOL_FACTOR * (1 + abs(sol.value))
        if sol.backend == ENTROPIC:
            tol += sol.epsilon * np.log(1.0 / mass_floor)
    pi = sol.coupling.pi
    records = []
    resolution = 0.0
    for j in np.flatnonzero((pi > mass_floor).any(axis=0)):
        f = GridFunction(grid=grid, values=potential_at(sol, sample.x[j]))
        if grid.d == 1:
            envelope, _ = convex_envelope_1d(grid.u[:, 0], f.values)
        else:
            env, res = envelope_via_double_transform(f, extra=sample.y)
            envelope, resolution = env.values, max(resolution, res)
        y = sample.y[j]
        conjugate = legendre(f, y.reshape(1, -1))[0]
        for i in np.flatnonzero(pi[:, j] > mass_floor):
            records.append(
                ContactRecord(
                    i=int(i),
                    j=int(j),
                    mass=float(pi[i, j]),
                    envelope_gap=float(f.values[i] - envelope[i]),
                    young_gap=float(abs(grid.u[i] @ y - conjugate - envelope[i])),
                )
            )
    max_env = max((r.envelope_gap for r in records), default=0.0)
    max_young = max((r.young_gap for r in records), default=0.0)
    passed = max_env <= tol and max_young <= tol
    if not passed:
        log.warning(f"Contact check failed: envelope gap {max_env:.3g}, Young gap {max_young:.3g}, tol {tol:.3g}")
    return ContactReport(
        records=records,
        max_envelope_gap=max_env,
        max_young_gap=max_young,
        tol=float(tol),
        mass_floor=float(mass_floor),
        resolution=resolution,
        passed=bool(passed),
    )


def write_contact_csv(path, sol, grid, x_query):
    """u, Phi_x(u) and its envelope per queried covariate point"""
    frames = []
    for q, x in enumerate(x_query):
        f = GridFunction(grid=grid, values=potential_at(sol, x))
        if grid.d == 1:
            envelope, _ = convex_envelope_1d(grid.u[:, 0], f.values)
        else:
            envelope = envelope_via_double_transform(f)[0].values
        frame = pd.DataFrame({f"u{k + 1}": grid.u[:, k] for k in range(grid.d)})
        frame.insert(0, "x_index", q)
        frame["phi_x"] = f.values
        frame["envelope"] = envelope
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
    log.debug(f"Wrote contact curves for {len(frames)} covariate points to {path}")
    return path
