import time

import numpy as np
import pytest

from oracles import best_permutation
from vqr.lp_core import FEASIBILITY_TOL
from vqr.measures import Coupling, DiscreteSample, make_grid
from vqr.transport import (
    TransportResult,
    barycentric_map,
    max_correlation,
    vector_quantile_1d,
)


def uniform_sample(y, x=None):
    y = np.asarray(y, dtype=float)
    return DiscreteSample(x=[] if x is None else x, y=y, w=np.full(len(y), 1 / len(y)))


def test_three_atoms_sorted():
    sample = uniform_sample([3.0, 1.0, 2.0])
    grid = make_grid(1, 3)
    result = max_correlation(sample, grid)
    assert barycentric_map(result, grid, sample)[:, 0] == pytest.approx([1.0, 2.0, 3.0])
    assert vector_quantile_1d(sample, grid).tolist() == [1.0, 2.0, 3.0]


def test_constant_outcome_value():
    sample = uniform_sample([2.0, 2.0, 2.0, 2.0])
    grid = make_grid(1, 3)
    result = max_correlation(sample, grid)
    assert result.value == pytest.approx(2.0 * grid.mu @ grid.u[:, 0])


def test_2d_matches_permutations():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(4, 2))
    sample = uniform_sample(y)
    grid = make_grid(2, 2)
    result = max_correlation(sample, grid)
    assert result.value == pytest.approx(best_permutation(grid.u, y), abs=1e-9)


def test_vector_quantile_1d_single_atom():
    sample = uniform_sample([5.0])
    assert vector_quantile_1d(sample, make_grid(1, 4)).tolist() == [5.0] * 4


def test_vector_quantile_1d_weighted():
    sample = DiscreteSample(x=[], y=[1.0, 2.0], w=[0.75, 0.25])
    assert vector_quantile_1d(sample, make_grid(1, 4)).tolist() == [1.0, 1.0, 1.0, 2.0]


def test_vector_quantile_1d_needs_scalar():
    sample = uniform_sample(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        vector_quantile_1d(sample, make_grid(2, 2))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        max_correlation(uniform_sample([1.0, 2.0]), make_grid(2, 2))


def test_barycentric_independent_coupling():
    sample = uniform_sample([0.0, 1.0, 5.0])
    grid = make_grid(1, 2)
    pi = np.outer(grid.mu, sample.w)
    result = TransportResult(coupling=Coupling(pi=pi), phi=np.zeros(2), psi=np.zeros(3), value=0.0)
    assert np.allclose(barycentric_map(result, grid, sample), sample.y_bar)


def test_1d_oracle_on_random_samples():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for _ in range(100):
        n = int(rng.integers(1, 65))
        y = rng.normal(size=n)
        sample = uniform_sample(y)
        grid = make_grid(1, n)
        result = max_correlation(sample, grid)
        ordered = np.sort(y)
        assert np.max(np.abs(barycentric_map(result, grid, sample)[:, 0] - ordered)) <= 1e-9
        assert result.value == pytest.approx(np.sum(grid.u[:, 0] * ordered) / n, abs=1e-9)
    assert time.perf_counter() - start < 10.0


def test_duals_and_cyclical_monotonicity():
    rng = np.random.default_rng(11)
    sample = uniform_sample(rng.normal(size=(6, 2)))
    grid = make_grid(2, 3)
    result = max_correlation(sample, grid)
    cost = grid.u @ sample.y.T
    tol = 1e-8
    # dual feasibility and complementary slackness
    slack = result.phi[:, None] + result.psi[None, :] - cost
    assert slack.min() >= -tol
    support = result.coupling.pi > FEASIBILITY_TOL
    assert np.max(np.abs(slack[support])) <= tol
    assert result.phi[0] == 0.0
    assert grid.mu @ result.phi + sample.w @ result.psi == pytest.approx(result.value, abs=tol)
    pairs = np.argwhere(support)
    for i, j in pairs:
        for k, l in pairs:
            assert cost[i, j] + cost[k, l] >= cost[i, l] + cost[k, j] - tol


def test_value_invariant_under_relabeling():
    rng = np.random.default_rng(8)
    sample = uniform_sample(rng.normal(size=(5, 1)))
    grid = make_grid(1, 4)
    order = rng.permutation(5)
    assert max_correlation(sample.permuted(order), grid).value == pytest.approx(
        max_correlation(sample, grid).value, abs=1e-12
    )


def test_to_dict_triplets():
    sample = uniform_sample([2.0, 1.0])
    result = max_correlation(sample, make_grid(1, 2))
    doc = result.to_dict()
    assert [(i, j) for i, j, _ in sorted(doc["coupling"])] == [(0, 1), (1, 0)]
    assert [mass for _, _, mass in doc["coupling"]] == pytest.approx([0.5, 0.5])
