"""Maximal-correlation transport between the level grid and the sample"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vqr.lp_core import FEASIBILITY_TOL, LinearProgram, dump_lp, solve_lp
from vqr.measures import Coupling

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransportResult:
    coupling: Coupling
    phi: np.ndarray
    psi: np.ndarray
    value: float

    def to_dict(self):
        return {
            "value": self.value,
            "phi": self.phi.tolist(),
            "psi": self.psi.tolist(),
            "coupling": self.coupling.triplets(),
        }


def check_dims(sample, grid):
    if sample.d != grid.d:
        raise ValueError(f"sample outcomes have d={sample.d} but the grid has d={grid.d}")


def correlation_cost(sample, grid):
    """c_ij = u_i . y_j as an m x n matrix"""
    return grid.u @ sample.y.T


def marginal_rows(grid, sample):
    """Grid-marginal rows then sample-marginal rows with the last one dropped.

    Variables are pi flattened row-major, index i * n + j.
    """
    m, n = grid.m, sample.n
    A = np.vstack([np.kron(np.eye(m), np.ones((1, n))), np.kron(np.ones((1, m)), np.eye(n))[: n - 1]])
    b = np.concatenate([grid.mu, sample.w[: n - 1]])
    return A, b


def split_marginal_duals(y_dual, m, n):
    """(phi, psi) from the marginal-row duals, with psi_n = 0 for the dropped row"""
    phi = np.array(y_dual[:m], dtype=float)
    psi = np.concatenate([y_dual[m : m + n - 1], [0.0]])
    return phi, psi


def maybe_dump(lp, dump_dir):
    if dump_dir is None:
        return
    path = Path(dump_dir)
    path.mkdir(parents=True, exist_ok=True)
    dump_lp(lp, path / f"{lp.name}.txt")


def max_correlation(sample, grid, tol=FEASIBILITY_TOL, max_iter=None, pivot_rule="dantzig", dump_dir=None):
    """Coupling of the grid and the outcomes maximizing E[U . Y]"""
    check_dims(sample, grid)
    m, n = grid.m, sample.n
    A, b = marginal_rows(grid, sample)
    lp = LinearProgram(
        c=correlation_cost(sample, grid).ravel(), A=A, b=b, lower=0.0, upper=np.inf, name="transport"
    )
    maybe_dump(lp, dump_dir)
    # differs from c by a constant per grid row, so the optimal couplings are the same
    guide = grid.u @ (sample.y - sample.y.min(axis=0)).T
    solution = solve_lp(lp, tol=tol, max_iter=max_iter, pivot_rule=pivot_rule, guide=guide.ravel())
    solution.require_optimal("transport program")
    phi, psi = split_marginal_duals(solution.y_dual, m, n)
    shift = phi[0]
    phi, psi = phi - shift, psi + shift
    coupling = Coupling(pi=solution.z.reshape(m, n), grid_ref=grid.ref, sample_ref=sample.ref)
    log.info(f"Transport of {m} levels onto {n} atoms: value {solution.value:.10g}")
    return TransportResult(coupling=coupling, phi=phi, psi=psi, value=solution.value)


def barycentric_map(result, grid, sample):
    """Conditional mean of Y given U = u_i under the coupling"""
    return (result.coupling.pi @ sample.y) / grid.mu[:, None]


def generalized_inverse(y, w, levels):
    """inf{v : F(v) > t} for the weighted empirical law of scalar y"""
    order = np.argsort(y, kind="stable")
    cumulative = np.cumsum(np.asarray(w)[order])
    idx = np.searchsorted(cumulative, levels, side="right")
    return np.asarray(y)[order][np.minimum(idx, len(order) - 1)]


def vector_quantile_1d(sample, grid):
    """Monotone rearrangement in d = 1: the empirical quantile at each level"""
    if sample.d != 1 or grid.d != 1:
        raise ValueError("vector_quantile_1d needs scalar outcomes and a 1-d grid")
    return generalized_inverse(sample.y[:, 0], sample.w, grid.u[:, 0])
