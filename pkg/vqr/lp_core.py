"""Dense revised simplex for bounded-variable linear programs in equality form

    maximize c.z  subject to  A z = b,  lower <= z <= upper

Phase 1 drives an artificial basis out of the objective, phase 2 optimizes c.
The basis inverse is kept explicitly, updated by rank-one pivots and
refactorized periodically.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
PIVOT_TOL = 1e-11
DUAL_ZERO = 1e-12
REFACTOR_EVERY = 64
STALL_LIMIT = 50
GUIDE_WEIGHT = 1e-3

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"

PIVOT_RULES = ("dantzig", "bland")

# nonbasic states
AT_LOWER, AT_UPPER, FREE_ZERO, BASIC = 0, 1, 2, 3


class SolverError(Exception):
    """A solve that did not reach an optimal, feasible answer"""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class LinearProgram:
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    name: str = "lp"

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64).ravel()
        nvar = c.shape[0]
        A = np.asarray(self.A, dtype=np.float64)
        if A.size == 0:
            A = A.reshape(0, nvar)
        if A.ndim != 2 or A.shape[1] != nvar:
            raise ValueError(f"{self.name}: A has shape {A.shape}, expected (rows, {nvar})")
        b = np.asarray(self.b, dtype=np.float64).ravel()
        if b.shape[0] != A.shape[0]:
            raise ValueError(f"{self.name}: b has {b.shape[0]} entries for {A.shape[0]} rows")
        lower = np.broadcast_to(np.asarray(self.lower, dtype=np.float64), (nvar,)).copy()
        upper = np.broadcast_to(np.asarray(self.upper, dtype=np.float64), (nvar,)).copy()
        for name, a in (("c", c), ("A", A), ("b", b)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{self.name}: {name} contains non-finite values")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise ValueError(f"{self.name}: bounds contain NaN")
        if np.any(lower > upper) or np.any(lower == np.inf) or np.any(upper == -np.inf):
            raise ValueError(f"{self.name}: inconsistent variable bounds")
        for name, a in (("c", c), ("A", A), ("b", b), ("lower", lower), ("upper", upper)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def shape(self):
        return self.A.shape


@dataclass(frozen=True)
class LPSolution:
    z: np.ndarray
    y_dual: np.ndarray
    reduced_costs: np.ndarray
    value: float
    status: str
    iterations: int
    farkas: np.ndarray = None

    def require_optimal(self, what="linear program"):
        if self.status != OPTIMAL:
            raise SolverError(f"{what} ended with status {self.status}", status=self.status)
        return self


class _Simplex:
    def __init__(self, lp, tol, max_iter, pivot_rule, guide=None):
        self.lp = lp
        self.guide = guide
        self.tol = tol
        self.max_iter = max_iter
        self.pivot_rule = pivot_rule
        self.iterations = 0
        m, n = lp.shape
        self.m, self.n = m, n

        lower, upper = lp.lower, lp.upper
        x = np.where(np.isfinite(lower), lower, np.where(np.isfinite(upper), upper, 0.0))
        state = np.where(
            np.isfinite(lower), AT_LOWER, np.where(np.isfinite(upper), AT_UPPER, FREE_ZERO)
        )
        r = lp.b - lp.A @ x
        sign = np.where(r >= 0, 1.0, -1.0)
        self.A = np.hstack([lp.A, np.diag(sign)])
        # pricing runs on the sparse transpose; columns are read from the dense copy
        self.At = sparse.csr_matrix(self.A.T)
        self.lower = np.concatenate([lower, np.zeros(m)])
        self.upper = np.concatenate([upper, np.full(m, np.inf)])
        self.x = np.concatenate([x, np.abs(r)])
        self.state = np.concatenate([state, np.full(m, BASIC)])
        self.basis = np.arange(n, n + m)
        self.Binv = np.diag(sign)
        self.since_refactor = 0

    def refactor(self):
        if self.m == 0:
            return
        self.Binv = np.linalg.inv(self.A[:, self.basis])
        nonbasic = self.state != BASIC
        rhs = self.lp.b - self.A[:, nonbasic] @ self.x[nonbasic]
        self.x[self.basis] = self.Binv @ rhs
        self.since_refactor = 0

    def duals(self, cost):
        y = cost[self.basis] @ self.Binv
        if self.m == 0:
            return y, cost.copy()
        return y, cost - self.At @ y

    def entering(self, d, rule, dtol, movable):
        up = ((self.state == AT_LOWER) & movable) | (self.state == FREE_ZERO)
        down = ((self.state == AT_UPPER) & movable) | (self.state == FREE_ZERO)
        eligible = (up & (d > dtol)) | (down & (d < -dtol))
        if not eligible.any():
            return None
        if rule == "bland":
            return int(np.argmax(eligible))
        return int(np.argmax(np.where(eligible, np.abs(d), -1.0)))

    def ratio_test(self, alpha, direction, rule):
        """Largest step before a basic variable hits a bound: (theta, row)"""
        delta = direction * alpha
        xb = self.x[self.basis]
        lb, ub = self.lower[self.basis], self.upper[self.basis]
        limits = np.full(self.m, np.inf)
        dec = delta > PIVOT_TOL
        inc = delta < -PIVOT_TOL
        with np.errstate(invalid="ignore"):
            limits[dec] = (xb[dec] - lb[dec]) / delta[dec]
            limits[inc] = (ub[inc] - xb[inc]) / -delta[inc]
        limits = np.where(np.isnan(limits), np.inf, np.maximum(limits, 0.0))
        if self.m == 0 or not np.isfinite(limits).any():
            return np.inf, None
        theta = limits.min()
        ties = np.flatnonzero(limits <= theta + 1e-12)
        if rule == "bland" or len(ties) == 1:
            row = ties[np.argmin(self.basis[ties])]
        else:
            mag = np.abs(alpha[ties])
            best = ties[mag >= mag.max() - 1e-12]
            row = best[np.argmin(self.basis[best])]
        return theta, int(row)

    def iterate(self, cost):
        rule = self.pivot_rule
        dtol = self.tol * max(1.0, float(np.max(np.abs(cost), initial=0.0)))
        stalled = 0
        movable = self.upper > self.lower
        while True:
            if self.iterations >= self.max_iter:
                return ITERATION_LIMIT
            if self.since_refactor >= REFACTOR_EVERY:
                self.refactor()
            y, d = self.duals(cost)
            q = self.entering(d, rule, dtol, movable)
            if q is None:
                return OPTIMAL
            self.iterations += 1
            direction = 1.0 if d[q] > 0 else -1.0
            alpha = self.Binv @ self.A[:, q]
            span = self.upper[q] - self.lower[q]
            theta, row = self.ratio_test(alpha, direction, rule)
            if not np.isfinite(theta) and not np.isfinite(span):
                return UNBOUNDED

            if span <= theta:
                # bound flip, basis unchanged
                theta = span
                self.x[self.basis] -= theta * direction * alpha
                self.x[q] = self.upper[q] if direction > 0 else self.lower[q]
                self.state[q] = AT_UPPER if direction > 0 else AT_LOWER
            else:
                self.x[self.basis] -= theta * direction * alpha
                self.x[q] += direction * theta
                leaving = self.basis[row]
                if direction * alpha[row] > 0:
                    self.x[leaving], self.state[leaving] = self.lower[leaving], AT_LOWER
                else:
                    self.x[leaving], self.state[leaving] = self.upper[leaving], AT_UPPER
                if not np.isfinite(self.x[leaving]):
                    self.x[leaving], self.state[leaving] = 0.0, FREE_ZERO
                self.basis[row] = q
                self.state[q] = BASIC
                pivot_row = self.Binv[row] / alpha[row]
                self.Binv -= np.outer(alpha, pivot_row)
                self.Binv[row] = pivot_row
                self.since_refactor += 1

            gain = theta * abs(d[q])
            if gain <= 1e-12:
                stalled += 1
                if stalled >= STALL_LIMIT and rule != "bland":
                    log.debug(f"{self.lp.name}: {stalled} degenerate pivots, switching to Bland's rule")
                    rule = "bland"
            else:
                stalled = 0
                rule = self.pivot_rule

    def solve(self):
        n, m = self.n, self.m
        phase1 = np.concatenate([np.zeros(n), -np.ones(m)])
        scale = 1.0 + float(np.max(np.abs(self.lp.b), initial=0.0))
        feasible = False
        g_max = 0.0 if self.guide is None else float(np.max(np.abs(self.guide), initial=0.0))
        if g_max > 0:
            # infeasibility dominates; the guide steers the choice among phase 1 pivots
            guide = phase1 + (GUIDE_WEIGHT / g_max) * np.concatenate([self.guide, np.zeros(m)])
            status = self.iterate(guide)
            self.refactor()
            if status == ITERATION_LIMIT:
                return self.result(status, phase1)
            feasible = float(np.sum(self.x[n:])) <= self.tol * scale
        if not feasible:
            status = self.iterate(phase1)
            self.refactor()
            if status == ITERATION_LIMIT:
                return self.result(status, phase1)
        infeasibility = float(np.sum(self.x[n:]))
        if infeasibility > self.tol * scale:
            y, _ = self.duals(phase1)
            log.info(f"{self.lp.name}: infeasible, phase 1 residual {infeasibility:.3g}")
            return self.result(INFEASIBLE, phase1, farkas=-y)

        # artificials stay at zero from here on
        self.upper[n:] = 0.0
        self.x[n:] = np.where(self.state[n:] == BASIC, self.x[n:], 0.0)
        self.state[n:] = np.where(self.state[n:] == BASIC, BASIC, AT_LOWER)
        cost = np.concatenate([self.lp.c, np.zeros(m)])
        status = self.iterate(cost)
        self.refactor()
        return self.result(status, cost)

    def result(self, status, cost, farkas=None):
        y, d = self.duals(cost)
        z = self.x[: self.n].copy()
        if status == OPTIMAL:
            z = np.clip(z, self.lp.lower, self.lp.upper)
        return LPSolution(
            z=z,
            y_dual=y,
            reduced_costs=d[: self.n],
            value=float(self.lp.c @ z),
            status=status,
            iterations=self.iterations,
            farkas=farkas,
        )


def solve_lp(lp, tol=FEASIBILITY_TOL, max_iter=None, pivot_rule="dantzig", guide=None):
    """Solve a LinearProgram, returning primal, duals and status.

    Dantzig pricing falls back to Bland's rule after a run of degenerate
    pivots, so the method terminates on degenerate programs. A guide vector
    (one entry per variable) is priced next to the phase 1 infeasibility with a
    small weight; a guide that orders vertices like c shortens phase 2.
    """
    if pivot_rule not in PIVOT_RULES:
        raise ValueError(f"pivot_rule must be one of {PIVOT_RULES}, got {pivot_rule!r}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    m, n = lp.shape
    if guide is not None:
        guide = np.asarray(guide, dtype=np.float64).ravel()
        if guide.shape != (n,) or not np.all(np.isfinite(guide)):
            raise ValueError(f"{lp.name}: guide needs {n} finite entries")
    if max_iter is None:
        max_iter = 50 * (m + n) + 1000
    solver = _Simplex(lp, tol, max_iter, pivot_rule, guide)
    solution = solver.solve()
    log.debug(
        f"{lp.name}: {solution.status} after {solution.iterations} pivots ({m} rows, {n} columns)"
    )
    return solution


def lp_duality_gap(lp, solution):
    """|dual bound - primal value| for the duals carried by an optimal solution"""
    if solution.status != OPTIMAL:
        raise ValueError(f"duality gap is undefined for status {solution.status}")
    y = np.asarray(solution.y_dual, dtype=float)
    d = lp.c - lp.A.T @ y
    scale = max(1.0, float(np.max(np.abs(lp.c), initial=0.0)))
    d = np.where(np.abs(d) <= DUAL_ZERO * scale, 0.0, d)
    with np.errstate(invalid="ignore"):
        box = np.where(d > 0, d * lp.upper, np.where(d < 0, d * lp.lower, 0.0))
    dual_bound = float(y @ lp.b + np.sum(box))
    return abs(dual_bound - float(lp.c @ solution.z))


def dump_lp(lp, path):
    """Write the program as plain text: dimensions, A, then c, b, lower, upper"""
    m, n = lp.shape
    with open(path, "w") as f:
        f.write(f"{m} {n}\n")
        if m:
            np.savetxt(f, lp.A, fmt="%.17g")
        for vector in (lp.c, lp.b, lp.lower, lp.upper):
            np.savetxt(f, vector.reshape(1, -1), fmt="%.17g")
    log.info(f"Wrote {lp.name} ({m} x {n}) to {path}")
    return path
