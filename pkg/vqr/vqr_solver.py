"""Correlation maximization under a fixed level law and mean independence.

The exact backend solves the transport LP with an extra block of rows
sum_j pi(i, j) x_j = 0 per grid atom. The entropic backend solves the same
problem plus an entropy penalty by alternating projections in the log domain.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from vqr.lp_core import (
    FEASIBILITY_TOL,
    INFEASIBLE,
    LinearProgram,
    SolverError,
    lp_duality_gap,
    solve_lp,
)
from vqr.measures import Coupling
from vqr.transport import check_dims, correlation_cost, marginal_rows, maybe_dump, split_marginal_duals

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 200
MAX_REJECTIONS = 40
DAMPING_FLOOR = 1e-12

EXACT = "exact"
ENTROPIC = "entropic"


class InternalError(SolverError):
    pass


class ConvergenceError(SolverError):
    pass


@dataclass(frozen=True)
class VqrSolution:
    coupling: Coupling
    phi: np.ndarray
    b: np.ndarray
    psi: np.ndarray
    value: float
    backend: str = EXACT
    epsilon: float = 0.0
    residuals: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "value": self.value,
            "backend": self.backend,
            "epsilon": self.epsilon,
            "phi": self.phi.tolist(),
            "b": self.b.tolist(),
            "psi": self.psi.tolist(),
            "coupling": self.coupling.triplets(),
            "residuals": self.residuals,
        }

    @classmethod
    def from_dict(cls, data, grid, sample):
        coupling = Coupling.from_triplets(
            data["coupling"], (grid.m, sample.n), grid_ref=grid.ref, sample_ref=sample.ref
        )
        return cls(
            coupling=coupling,
            phi=np.asarray(data["phi"], dtype=float),
            b=np.asarray(data["b"], dtype=float).reshape(grid.m, sample.n_covariates),
            psi=np.asarray(data["psi"], dtype=float),
            value=float(data["value"]),
            backend=data.get("backend", EXACT),
            epsilon=float(data.get("epsilon", 0.0)),
            residuals=dict(data.get("residuals", {})),
        )


@dataclass(frozen=True)
class DualCheck:
    feasibility: float
    slackness: float
    psi_hat: np.ndarray
    passed: bool

    def to_dict(self):
        return {"feasibility": self.feasibility, "slackness": self.slackness, "passed": self.passed}


def require_centered(sample):
    if not sample.is_centered():
        raise ValueError(
            f"sample covariates are not centered (|E x| = {sample.centering_error():.3g}); call center() first"
        )


def active_covariates(sample):
    """Mask of covariate columns that are not identically zero"""
    active = np.max(np.abs(sample.x), axis=0, initial=0.0) > DEGENERATE_TOL
    for k in np.flatnonzero(~active):
        log.warning(f"Covariate column {k + 1} is identically zero after centering; dropping it")
    return active


def assemble_vqr_lp(sample, grid, active=None):
    """Transport LP plus one mean-independence row per grid atom and covariate"""
    check_dims(sample, grid)
    require_centered(sample)
    if active is None:
        active = np.ones(sample.n_covariates, dtype=bool)
    x = sample.x[:, active]
    A, b = marginal_rows(grid, sample)
    if x.shape[1]:
        A = np.vstack([A, np.kron(np.eye(grid.m), x.T)])
        b = np.concatenate([b, np.zeros(grid.m * x.shape[1])])
    return LinearProgram(
        c=correlation_cost(sample, grid).ravel(), A=A, b=b, lower=0.0, upper=np.inf, name="vqr"
    )


def feasibility_residuals(pi, sample, grid):
    residuals = {
        "grid": float(np.max(np.abs(pi.sum(axis=1) - grid.mu))),
        "sample": float(np.max(np.abs(pi.sum(axis=0) - sample.w))),
    }
    if sample.n_covariates:
        moments = np.abs(pi @ sample.x) / grid.mu[:, None]
        residuals["mean_indep"] = float(moments.max())
    else:
        residuals["mean_indep"] = 0.0
    return residuals


def _normalize(phi, b, psi, x):
    """phi and b vanish at the first grid atom; psi absorbs the shift"""
    psi = psi + phi[0] + x @ b[0]
    return phi - phi[0], b - b[0], psi


def solve_vqr_exact(sample, grid, tol=FEASIBILITY_TOL, max_iter=None, pivot_rule="dantzig", dump_dir=None):
    """Vertex solution of the mean-independence transport LP with its duals"""
    active = active_covariates(sample)
    lp = assemble_vqr_lp(sample, grid, active)
    maybe_dump(lp, dump_dir)
    m, n, N = grid.m, sample.n, sample.n_covariates
    solution = solve_lp(lp, tol=tol, max_iter=max_iter, pivot_rule=pivot_rule)
    if solution.status == INFEASIBLE:
        raise InternalError("mean-independence LP reported infeasible on a centered sample", status=INFEASIBLE)
    solution.require_optimal("mean-independence program")

    phi, psi = split_marginal_duals(solution.y_dual, m, n)
    b = np.zeros((m, N))
    b[:, active] = solution.y_dual[m + n - 1 :].reshape(m, int(active.sum()))
    phi, b, psi = _normalize(phi, b, psi, sample.x)

    pi = solution.z.reshape(m, n)
    residuals = feasibility_residuals(pi, sample, grid)
    residuals["duality_gap"] = lp_duality_gap(lp, solution)
    residuals["iterations"] = solution.iterations
    log.info(
        f"Exact VQR on {m} levels x {n} atoms ({N} covariates): value {solution.value:.10g}, "
        f"{solution.iterations} pivots"
    )
    return VqrSolution(
        coupling=Coupling(pi=pi, grid_ref=grid.ref, sample_ref=sample.ref),
        phi=phi,
        b=b,
        psi=psi,
        value=solution.value,
        backend=EXACT,
        epsilon=0.0,
        residuals=residuals,
    )


def objective_scale(sample, grid):
    """Spread of u.y over grid and sample, the unit for epsilon"""
    cost = correlation_cost(sample, grid)
    spread = float(cost.max() - cost.min())
    return spread if spread > 0 else 1.0


def _row_projection(i, a, x, mu_i, lam, epsilon, tol):
    """Scale row i to mass mu_i and tilt it to zero x-moment.

    Minimizes the convex f(lam) = logsumexp(a - x @ lam), whose gradient is
    minus the tilted mean of x, by Levenberg-Marquardt damped Newton. A trial
    step is kept when it lowers f; the damping then shrinks tenfold, otherwise
    it grows tenfold. Rows that start with all their mass on one atom have a
    vanishing Hessian, and the damping keeps those first steps bounded.
    """

    def tilted(lam):
        logits = a - x @ lam
        lse = logsumexp(logits)
        p = np.exp(logits - lse)
        return lse, p, p @ x

    scale = max(float(np.max(np.abs(x), initial=0.0)), 1.0)
    tol = tol * scale
    eye = np.eye(x.shape[1])
    damping_floor = DAMPING_FLOOR * scale**2
    lse, p, mean = tilted(lam)
    resid = float(np.max(np.abs(mean), initial=0.0))
    damping = resid * scale
    rejected = 0
    for _ in range(NEWTON_MAX_ITER):
        if resid <= tol:
            break
        centered = x - mean
        hessian = (centered * p[:, None]).T @ centered
        step = np.linalg.lstsq(hessian + damping * eye, mean, rcond=None)[0]
        trial = tilted(lam + step)
        trial_resid = float(np.max(np.abs(trial[2]), initial=0.0))
        # f is flat to rounding near its minimum; a smaller gradient decides there
        slack = 4 * np.finfo(float).eps * (1.0 + abs(lse))
        if trial[0] < lse or (trial[0] <= lse + slack and trial_resid < resid):
            lam = lam + step
            lse, p, mean = trial
            resid = trial_resid
            damping = max(0.1 * damping, damping_floor)
            rejected = 0
        else:
            damping = 10.0 * max(damping, damping_floor)
            rejected += 1
            if rejected > MAX_REJECTIONS:
                raise ConvergenceError(
                    f"Newton solve for grid row {i} stalled at residual {resid:.3g}", status="iteration-limit"
                )
    else:
        if resid > tol:
            raise ConvergenceError(
                f"Newton solve for grid row {i} did not converge (residual {resid:.3g})",
                status="iteration-limit",
            )
    phi_i = epsilon * (lse - np.log(mu_i))
    return phi_i, lam


def solve_vqr_entropic(
    sample,
    grid,
    epsilon,
    max_iter=10000,
    tol=FEASIBILITY_TOL,
    workers=1,
    newton_tol=NEWTON_TOL,
):
    """Entropy-regularized solve by alternating log-domain projections.

    pi = exp((c - phi - psi - b.x) / epsilon). Each sweep sets psi in closed
    form for the sample marginal, then for every grid row solves for
    (phi_i, b_i) so that the row has mass mu_i and zero x-moment. Stops when
    the sample marginal is met within tol.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be at least 1, got {max_iter}")
    check_dims(sample, grid)
    require_centered(sample)
    active = active_covariates(sample)
    x = sample.x[:, active]
    m, n, N = grid.m, sample.n, sample.n_covariates
    cost = correlation_cost(sample, grid)
    log_w = np.log(sample.w)

    phi = np.zeros(m)
    lam = np.zeros((m, x.shape[1]))
    psi = np.zeros(n)
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def row(i):
        a = (cost[i] - psi) / epsilon
        return _row_projection(i, a, x, grid.mu[i], lam[i], epsilon, newton_tol)

    def log_plan():
        return (cost - phi[:, None] - psi[None, :]) / epsilon - lam @ x.T

    try:
        for iteration in range(1, max_iter + 1):
            # sample marginal
            psi = epsilon * (logsumexp((cost - phi[:, None]) / epsilon - lam @ x.T, axis=0) - log_w)
            results = executor.map(row, range(m)) if executor else map(row, range(m))
            for i, (phi_i, lam_i) in enumerate(results):
                phi[i], lam[i] = phi_i, lam_i
            error = float(np.max(np.abs(np.exp(logsumexp(log_plan(), axis=0)) - sample.w)))
            log.debug(f"Entropic sweep {iteration}: sample marginal error {error:.3g}")
            if error <= tol:
                break
        else:
            log.warning(f"Entropic solve stopped after {max_iter} sweeps with marginal error {error:.3g}")
    finally:
        if executor:
            executor.shutdown()

    pi = np.exp(log_plan())
    b = np.zeros((m, N))
    b[:, active] = epsilon * lam
    phi, b, psi = _normalize(phi, b, psi, sample.x)
    value = float(np.sum(cost * pi))
    residuals = feasibility_residuals(pi, sample, grid)
    residuals["iterations"] = iteration
    log.info(f"Entropic VQR (epsilon={epsilon:.3g}) on {m} x {n}: value {value:.10g} after {iteration} sweeps")
    return VqrSolution(
        coupling=Coupling(pi=pi, grid_ref=grid.ref, sample_ref=sample.ref),
        phi=phi,
        b=b,
        psi=psi,
        value=value,
        backend=ENTROPIC,
        epsilon=float(epsilon),
        residuals=residuals,
    )


def _slack(phi, b, psi, sample, grid):
    """phi_i + psi_j + b_i.x_j - u_i.y_j, m x n"""
    return phi[:, None] + psi[None, :] + b @ sample.x.T - correlation_cost(sample, grid)


def dual_objective(phi, b, sample, grid):
    """sum_i mu_i phi_i + sum_j w_j max_i (u_i.y_j - phi_i - b_i.x_j)"""
    phi = np.asarray(phi, dtype=float)
    b = np.asarray(b, dtype=float).reshape(grid.m, sample.n_covariates)
    psi_hat = np.max(correlation_cost(sample, grid) - phi[:, None] - b @ sample.x.T, axis=0)
    return float(grid.mu @ phi + sample.w @ psi_hat)


def verify_duals(sol, sample, grid, tol=None, mass_floor=None):
    """Recompute psi as the smallest feasible value and compare with the solver's"""
    if tol is None:
        tol = 1e-6 * (1 + abs(sol.value))
    if mass_floor is None:
        mass_floor = 1e-10 / (grid.m * sample.n)
    psi_hat = np.max(correlation_cost(sample, grid) - sol.phi[:, None] - sol.b @ sample.x.T, axis=0)
    feasibility = float(max(0.0, np.max(psi_hat - sol.psi)))
    slack = _slack(sol.phi, sol.b, sol.psi, sample, grid)
    support = sol.coupling.pi > mass_floor
    slackness = float(np.max(np.abs(slack[support]), initial=0.0))
    if sol.backend == ENTROPIC:
        tol = tol + sol.epsilon * np.log(1.0 / mass_floor)
    passed = feasibility <= tol and slackness <= tol
    return DualCheck(feasibility=feasibility, slackness=slackness, psi_hat=psi_hat, passed=bool(passed))


@dataclass(frozen=True)
class ConditionalModel:
    """Finite-difference derivatives of the potentials along the grid axes"""

    u: np.ndarray
    grad_phi: np.ndarray
    grad_b: np.ndarray

    def quantile(self, x):
        """Estimated Q(x, u_i) for every grid atom, m x d"""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.grad_phi + np.einsum("mkd,k->md", self.grad_b, x)

    @property
    def alpha(self):
        return self.grad_phi[:, 0]

    @property
    def beta(self):
        return self.grad_b[:, :, 0]


def _axis_gradients(values, grid):
    shape = grid.per_axis
    axes = grid.axes()
    grads = np.gradient(values.reshape(shape), *axes)
    if grid.d == 1:
        grads = [grads]
    return np.stack([g.ravel() for g in grads], axis=1)


def conditional_model(sol, grid):
    """Q(x, u) ~ grad phi(u) + Db(u)^T x at the grid atoms"""
    if not grid.is_tensor():
        raise ValueError("conditional_model needs a tensor-structured grid")
    if min(grid.per_axis) < 2:
        raise ValueError("conditional_model needs at least two levels per axis")
    grad_phi = _axis_gradients(sol.phi, grid)
    N = sol.b.shape[1]
    grad_b = np.zeros((grid.m, N, grid.d))
    for k in range(N):
        grad_b[:, k, :] = _axis_gradients(sol.b[:, k], grid)
    return ConditionalModel(u=grid.u, grad_phi=grad_phi, grad_b=grad_b)
