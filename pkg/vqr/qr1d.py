"""Scalar-outcome quantile regression: level-by-level fits, the
quasi-specification scan, the rank variable U^QR, the monotone global LP and
its comparison with the mean-independence transport LP."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from vqr.lp_core import FEASIBILITY_TOL, INFEASIBLE, LinearProgram, solve_lp
from vqr.measures import make_grid
from vqr.transport import generalized_inverse, max_correlation
from vqr.vqr_solver import (
    InternalError,
    active_covariates,
    conditional_model,
    dual_objective,
    require_centered,
    solve_vqr_exact,
)

log = logging.getLogger(__name__)

QUASI_SPEC_SLACK = 1e-9
MOMENT_TOL = 1e-6


def _require_scalar(sample):
    if sample.d != 1:
        raise ValueError(f"scalar outcomes required, sample has d={sample.d}")
    require_centered(sample)


def _check_levels(levels, low_open=True):
    levels = np.asarray(levels, dtype=float).ravel()
    if levels.size == 0:
        raise ValueError("level grid is empty")
    if np.any(np.diff(levels) <= 0):
        raise ValueError("levels must be strictly increasing")
    if levels[-1] >= 1 or (levels[0] <= 0 if low_open else levels[0] < 0):
        interval = "(0, 1)" if low_open else "[0, 1)"
        raise ValueError(f"levels must lie in {interval}")
    return levels


def pinball_loss(z, t):
    """t z+ + (1 - t) z-, minimized in expectation by the t-quantile"""
    z = np.asarray(z, dtype=float)
    return t * np.maximum(z, 0.0) + (1 - t) * np.maximum(-z, 0.0)


def kb_objective(sample, t, alpha, beta=None):
    """Weighted check-function risk of the line alpha + beta.x at level t"""
    fitted = alpha
    if sample.n_covariates:
        fitted = alpha + sample.x @ np.atleast_1d(beta)
    return float(sample.w @ pinball_loss(sample.y[:, 0] - fitted, t))


def level_grid(K):
    """Midpoint levels (k - 1/2)/K with equal quadrature weights"""
    if K < 1:
        raise ValueError("need at least one level")
    return (np.arange(K) + 0.5) / K, np.full(K, 1.0 / K)


def quadrature_weights(levels):
    """Midpoint rule: cell boundaries halfway between levels, clipped to [0, 1]"""
    levels = np.asarray(levels, dtype=float)
    edges = np.concatenate([[0.0], (levels[:-1] + levels[1:]) / 2, [1.0]])
    return np.diff(edges)


def matched_levels(grid):
    """Left-endpoint levels (i - 1)/m whose cumulative weights are the grid midpoints"""
    if grid.d != 1:
        raise ValueError("matched levels exist for one-dimensional grids only")
    m = grid.m
    delta = np.full(m, 1.0 / m)
    delta[0] = 0.5 / m
    return np.arange(m) / m, delta


@dataclass(frozen=True)
class QuantileModel1D:
    t: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    ut: np.ndarray
    residuals: np.ndarray = None

    def curve(self, x):
        """alpha(t) + beta(t).x for one covariate point"""
        return self.alpha + self.beta @ np.atleast_1d(np.asarray(x, dtype=float))

    def to_dict(self):
        return {
            "t": self.t.tolist(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "ut": self.ut.tolist(),
            "residuals": None if self.residuals is None else self.residuals.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        t = np.asarray(data["t"], dtype=float)
        residuals = data.get("residuals")
        return cls(
            t=t,
            alpha=np.asarray(data["alpha"], dtype=float),
            beta=np.asarray(data["beta"], dtype=float).reshape(len(t), len(data["beta"][0]) if data["beta"] else 0),
            ut=np.asarray(data["ut"], dtype=float),
            residuals=None if residuals is None else np.asarray(residuals, dtype=float),
        )


def moment_residuals(ut, t, sample):
    """Per level: |sum_j w_j u_j - (1 - t)| and |sum_j w_j u_j x_j|"""
    mass = np.abs(ut @ sample.w - (1 - np.asarray(t)))
    moments = np.abs((ut * sample.w) @ sample.x)
    return np.column_stack([mass, moments])


def kb_fit_t(sample, t, tol=FEASIBILITY_TOL, pivot_rule="dantzig"):
    """Level-t quantile regression through its dual program.

    Maximizes sum_j w_j u_j y_j over u in [0,1]^n with sum_j w_j u_j = 1 - t and
    sum_j w_j u_j x_j = 0; (alpha, beta) are the multipliers of those rows.
    """
    _require_scalar(sample)
    if not 0 < t < 1:
        raise ValueError(f"level t must lie in (0, 1), got {t}")
    active = active_covariates(sample)
    x = sample.x[:, active]
    w = sample.w
    A = np.vstack([w, (w[:, None] * x).T])
    rhs = np.concatenate([[1 - t], np.zeros(x.shape[1])])
    lp = LinearProgram(c=w * sample.y[:, 0], A=A, b=rhs, lower=0.0, upper=1.0, name=f"kb_t{t:.6g}")
    solution = solve_lp(lp, tol=tol, pivot_rule=pivot_rule).require_optimal(f"quantile program at t={t:.6g}")
    beta = np.zeros(sample.n_covariates)
    beta[active] = solution.y_dual[1:]
    return float(solution.y_dual[0]), beta, solution.z


def kb_scan(sample, levels, tol=FEASIBILITY_TOL, pivot_rule="dantzig", workers=1):
    """kb_fit_t over an increasing level grid"""
    _require_scalar(sample)
    levels = _check_levels(levels)

    def fit(t):
        return kb_fit_t(sample, t, tol=tol, pivot_rule=pivot_rule)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            fits = list(executor.map(fit, levels))
    else:
        fits = [fit(t) for t in levels]
    alpha = np.array([f[0] for f in fits])
    beta = np.array([f[1] for f in fits]).reshape(len(levels), sample.n_covariates)
    ut = np.array([f[2] for f in fits])
    residuals = moment_residuals(ut, levels, sample)
    log.info(f"Fitted {len(levels)} levels on {sample.n} atoms; max moment residual {residuals.max():.3g}")
    return QuantileModel1D(t=levels, alpha=alpha, beta=beta, ut=ut, residuals=residuals)


@dataclass(frozen=True)
class QuasiSpecReport:
    passed: bool
    violations: list = field(default_factory=list)

    def to_dict(self):
        return {"passed": self.passed, "violations": [list(v) for v in self.violations]}


def quasi_spec_check(model, sample, slack=QUASI_SPEC_SLACK):
    """Fitted curves at every sample covariate must increase from level to level"""
    curves = model.alpha[:, None] + model.beta @ sample.x.T
    steps = np.diff(curves, axis=0)
    bad = np.argwhere(steps <= slack)
    violations = [(int(k), int(j)) for k, j in bad]
    if violations:
        log.info(f"Quasi-specification fails at {len(violations)} (level, atom) pairs")
    return QuasiSpecReport(passed=not violations, violations=violations)


@dataclass(frozen=True)
class UqrReport:
    u: np.ndarray
    kolmogorov: float
    bound: float
    uniform: bool
    mean_indep: np.ndarray
    mean_indep_max: float
    passed: bool

    def to_dict(self):
        return {
            "u": self.u.tolist(),
            "kolmogorov": self.kolmogorov,
            "bound": self.bound,
            "uniform": self.uniform,
            "mean_indep": self.mean_indep.tolist(),
            "mean_indep_max": self.mean_indep_max,
            "passed": self.passed,
        }


def kolmogorov_uniform(u, w):
    """sup_s |F(s) - s| for the weighted empirical law of u against U[0, 1]"""
    values, inverse = np.unique(u, return_inverse=True)
    mass = np.bincount(inverse, weights=w)
    after = np.cumsum(mass)
    before = after - mass
    return float(max(np.max(after - values), np.max(values - before), 0.0))


def build_uqr(model, sample, delta=None, tol=MOMENT_TOL):
    """U^QR_j = sum_k delta_k u_t[k][j] with uniformity and mean-independence
    diagnostics.

    The uniformity check compares the Kolmogorov distance with 1/K + 1/n and
    needs at least two levels. Mean independence is checked on the indicator
    of each level cell.
    """
    K = len(model.t)
    if delta is None:
        delta = quadrature_weights(model.t)
    u = np.clip(np.asarray(delta) @ model.ut, 0.0, 1.0)
    ks = kolmogorov_uniform(u, sample.w)
    bound = 1.0 / K + 1.0 / sample.n
    uniform = K >= 2 and ks <= bound
    edges = np.concatenate([[0.0], (model.t[:-1] + model.t[1:]) / 2, [1.0]])
    cell = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, K - 1)
    mean_indep = np.zeros((K, sample.n_covariates))
    for k in range(K):
        inside = cell == k
        mean_indep[k] = np.abs((sample.w[inside]) @ sample.x[inside])
    worst = float(mean_indep.max(initial=0.0))
    log.info(f"U^QR: Kolmogorov distance {ks:.4g} (bound {bound:.4g}), mean-independence residual {worst:.3g}")
    return UqrReport(
        u=u,
        kolmogorov=ks,
        bound=bound,
        uniform=bool(uniform),
        mean_indep=mean_indep,
        mean_indep_max=worst,
        passed=bool(uniform and worst <= tol),
    )


@dataclass(frozen=True)
class MonotoneQrSolution:
    t: np.ndarray
    delta: np.ndarray
    v: np.ndarray
    value: float
    alpha: np.ndarray
    beta: np.ndarray
    duals: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "t": self.t.tolist(),
            "delta": self.delta.tolist(),
            "v": self.v.tolist(),
            "value": self.value,
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
        }


def assemble_monotone_lp(sample, levels, delta=None):
    """The monotone quantile program over all levels as a LinearProgram.

    Variables are v[k][j] in [0,1] followed by slacks s[k][j] >= 0 for
    v[k][j] - v[k+1][j] - s[k][j] = 0. Rows are the monotone links, then one
    mass row per level, then the moment rows of the active covariates.
    Levels may start at 0. Returns (lp, levels, delta, active).
    """
    _require_scalar(sample)
    levels = _check_levels(levels, low_open=False)
    K, n = len(levels), sample.n
    delta = quadrature_weights(levels) if delta is None else np.asarray(delta, dtype=float)
    if delta.shape != (K,) or np.any(delta <= 0):
        raise ValueError("quadrature weights must be positive, one per level")
    active = active_covariates(sample)
    x = sample.x[:, active]
    Na = x.shape[1]
    w = sample.w
    ns = (K - 1) * n

    monotone = np.hstack([np.kron(np.eye(K - 1, K), np.eye(n)) - np.kron(np.eye(K - 1, K, 1), np.eye(n)), -np.eye(ns)])
    mass = np.hstack([np.kron(np.eye(K), w[None, :]), np.zeros((K, ns))])
    moments = np.hstack([np.kron(np.eye(K), (w[:, None] * x).T), np.zeros((K * Na, ns))])
    A = np.vstack([monotone, mass, moments])
    rhs = np.concatenate([np.zeros(ns), 1 - levels, np.zeros(K * Na)])
    c = np.concatenate([np.kron(delta, w * sample.y[:, 0]), np.zeros(ns)])
    lp = LinearProgram(c=c, A=A, b=rhs, lower=0.0, upper=1.0, name="monotone_kb")
    return lp, levels, delta, active


def monotone_kb_lp(sample, levels, delta=None, tol=FEASIBILITY_TOL, pivot_rule="dantzig"):
    """All levels at once with u_t nonincreasing in t"""
    lp, levels, delta, active = assemble_monotone_lp(sample, levels, delta)
    K, n = len(levels), sample.n
    Na = int(np.sum(active))
    nv, ns = K * n, (K - 1) * n

    solution = solve_lp(lp, tol=tol, pivot_rule=pivot_rule)
    if solution.status == INFEASIBLE:
        raise InternalError("monotone quantile LP reported infeasible", status=INFEASIBLE)
    solution.require_optimal("monotone quantile program")
    y = solution.y_dual
    alpha = y[ns : ns + K] / delta
    beta = np.zeros((K, sample.n_covariates))
    beta[:, active] = y[ns + K :].reshape(K, Na) / delta[:, None]
    v = solution.z[:nv].reshape(K, n)
    log.info(f"Monotone quantile LP over {K} levels: value {solution.value:.10g}")
    return MonotoneQrSolution(
        t=levels,
        delta=delta,
        v=v,
        value=solution.value,
        alpha=alpha,
        beta=beta,
        duals={"monotone": y[:ns].reshape(max(K - 1, 0), n)},
    )


def sup_over_nonincreasing(q, delta):
    """max over nonincreasing v in [0,1]^K of sum_k delta_k v_k q_k"""
    partial = np.cumsum(np.asarray(delta) * np.asarray(q))
    return float(max(0.0, np.max(partial, initial=0.0)))


def threshold_coupling(coupling, sample, grid, levels):
    """v[k][j] = P(V > t_k | atom j) for the grid index V drawn from the coupling"""
    above = grid.u[:, 0][None, :] > np.asarray(levels)[:, None]
    return (above @ coupling.pi) / sample.w[None, :]


def _monotone_feasibility(v, levels, sample):
    residuals = [np.max(moment_residuals(v, levels, sample))]
    residuals.append(max(0.0, float(np.max(v[1:] - v[:-1], initial=0.0))))
    residuals.append(max(0.0, float(-v.min()), float(v.max() - 1)))
    return max(residuals)


@dataclass(frozen=True)
class EquivalenceReport:
    value_transport: float
    value_monotone_kb: float
    value_unconstrained: float
    gap: float
    threshold_residual: float
    dual_value: float
    tol: float
    passed: bool

    def to_dict(self):
        return {
            "value_transport": self.value_transport,
            "value_monotone_kb": self.value_monotone_kb,
            "value_unconstrained": self.value_unconstrained,
            "gap": self.gap,
            "threshold_residual": self.threshold_residual,
            "dual_value": self.dual_value,
            "tol": self.tol,
            "pass": self.passed,
        }


def equivalence_report(sample, grid_size, tol=1e-6, pivot_rule="dantzig"):
    """Compare the mean-independence transport LP with the monotone quantile LP
    on matched discretizations of the level axis"""
    _require_scalar(sample)
    grid = make_grid(1, grid_size)
    vqr = solve_vqr_exact(sample, grid, pivot_rule=pivot_rule)
    levels, delta = matched_levels(grid)
    mono = monotone_kb_lp(sample, levels, delta=delta, pivot_rule=pivot_rule)
    unconstrained = max_correlation(sample, grid, pivot_rule=pivot_rule).value

    v = threshold_coupling(vqr.coupling, sample, grid, levels)
    threshold_value = float(np.sum(delta[:, None] * v * (sample.w * sample.y[:, 0])[None, :]))
    threshold_residual = max(_monotone_feasibility(v, levels, sample), abs(threshold_value - vqr.value))

    phi = np.cumsum(delta * mono.alpha)
    b = np.cumsum(delta[:, None] * mono.beta, axis=0)
    dual_value = dual_objective(phi, b, sample, grid)

    gap = abs(vqr.value - mono.value)
    passed = gap <= tol and threshold_residual <= tol and unconstrained >= vqr.value - tol
    log.info(
        f"Equivalence on {grid_size} levels: transport {vqr.value:.10g}, monotone {mono.value:.10g}, gap {gap:.3g}"
    )
    if not passed:
        log.warning(f"Equivalence check failed (gap {gap:.3g}, threshold residual {threshold_residual:.3g})")
    return EquivalenceReport(
        value_transport=vqr.value,
        value_monotone_kb=mono.value,
        value_unconstrained=unconstrained,
        gap=gap,
        threshold_residual=threshold_residual,
        dual_value=dual_value,
        tol=tol,
        passed=bool(passed),
    )


@dataclass(frozen=True)
class QuantileCurves:
    t: np.ndarray
    x: np.ndarray
    q: np.ndarray
    non_monotone: list = field(default_factory=list)


def conditional_quantile_curves(sol, sample, grid, x_query):
    """t -> d/du (phi + b.x) along a one-dimensional grid for each queried x.

    x_query is in centered coordinates. The derivative is a finite difference
    of phi, so without covariates the curve need not equal vector_quantile_1d
    at each level; the value at u_k lies between the vector_quantile_1d values
    at the neighbouring levels u_(k-1) and u_(k+1), clamped at the grid ends.
    """
    if grid.d != 1:
        raise ValueError("conditional quantile curves need a one-dimensional grid")
    model = conditional_model(sol, grid)
    x_query = np.asarray(x_query, dtype=float)
    if x_query.ndim != 2:
        x_query = x_query.reshape(-1, sample.n_covariates) if sample.n_covariates else np.zeros((1, 0))
    if sample.n_covariates and sample.n:
        low, high = sample.x.min(axis=0), sample.x.max(axis=0)
        for x in x_query:
            if np.any(x < low) or np.any(x > high):
                log.warning(f"Query point {x.tolist()} lies outside the sample's covariate box")
    q = np.array([model.quantile(x)[:, 0] for x in x_query]).reshape(len(x_query), grid.m)
    non_monotone = [(int(a), int(k)) for a, k in np.argwhere(np.diff(q, axis=1) < -QUASI_SPEC_SLACK)]
    if non_monotone:
        log.warning(f"Estimated quantile curves decrease at {len(non_monotone)} points")
    return QuantileCurves(t=grid.u[:, 0].copy(), x=x_query, q=q, non_monotone=non_monotone)


@dataclass(frozen=True)
class PolarFactorization:
    levels: np.ndarray
    x_values: np.ndarray
    curves: np.ndarray
    u: np.ndarray
    group: np.ndarray


def conditional_polar_factorization(sample, grid):
    """Y = Q(X, U) with U independent of X, for covariates with finitely many values.

    Each distinct x gets the grid quantile of Y given X = x; U_j is the
    mid-rank level of y_j within its group.
    """
    if sample.d != 1 or grid.d != 1:
        raise ValueError("polar factorization needs scalar outcomes and a one-dimensional grid")
    x_values, group = np.unique(sample.x, axis=0, return_inverse=True)
    group = np.asarray(group).ravel()
    y = sample.y[:, 0]
    curves = np.zeros((len(x_values), grid.m))
    u = np.zeros(sample.n)
    for g in range(len(x_values)):
        members = np.flatnonzero(group == g)
        w = sample.w[members] / sample.w[members].sum()
        curves[g] = generalized_inverse(y[members], w, grid.u[:, 0])
        below = np.array([w[y[members] < v].sum() for v in y[members]])
        same = np.array([w[y[members] == v].sum() for v in y[members]])
        u[members] = below + same / 2
    return PolarFactorization(levels=grid.u[:, 0].copy(), x_values=x_values, curves=curves, u=u, group=group)
