import logging

import numpy as np
import pytest

from oracles import best_threshold, best_vertex
from vqr.measures import Coupling, DiscreteSample, center, make_grid
from vqr.qr1d import (
    QuantileModel1D,
    assemble_monotone_lp,
    build_uqr,
    conditional_polar_factorization,
    conditional_quantile_curves,
    equivalence_report,
    kb_fit_t,
    kb_objective,
    kb_scan,
    level_grid,
    matched_levels,
    monotone_kb_lp,
    pinball_loss,
    quadrature_weights,
    quasi_spec_check,
    sup_over_nonincreasing,
    threshold_coupling,
)
from vqr.synthetic import SyntheticSpec, gen_synthetic
from vqr.transport import vector_quantile_1d
from vqr.vqr_solver import assemble_vqr_lp, conditional_model, solve_vqr_exact

ONE_TWO_THREE = DiscreteSample(x=[], y=[1.0, 2.0, 3.0], w=[1 / 3] * 3)
LINEAR = DiscreteSample(x=[-1.5, -0.5, 0.5, 1.5], y=[-2.0, 0.0, 2.0, 4.0], w=[0.25] * 4)


def random_centered(rng, n, N):
    w = rng.uniform(0.5, 1.5, n)
    return center(DiscreteSample(x=rng.normal(size=(n, N)), y=rng.normal(size=n), w=w / w.sum()))


def test_pinball_loss():
    assert pinball_loss([2.0, -2.0], 0.25).tolist() == [0.5, 1.5]


def test_level_grid_and_weights():
    levels, delta = level_grid(4)
    assert levels.tolist() == [0.125, 0.375, 0.625, 0.875]
    assert delta.tolist() == [0.25] * 4
    assert quadrature_weights(levels) == pytest.approx(delta)
    assert quadrature_weights([0.2, 0.6]) == pytest.approx([0.4, 0.6])


def test_matched_levels():
    levels, delta = matched_levels(make_grid(1, 4))
    assert levels.tolist() == [0.0, 0.25, 0.5, 0.75]
    assert np.cumsum(delta) == pytest.approx(make_grid(1, 4).u[:, 0])


def test_kb_median_of_three():
    alpha, beta, u = kb_fit_t(ONE_TWO_THREE, 0.5)
    assert alpha == pytest.approx(2.0)
    assert beta.shape == (0,)
    assert u == pytest.approx([0.0, 0.5, 1.0])


def test_kb_tie_level_picks_an_optimizer():
    t = 1 / 3
    alpha, _, _ = kb_fit_t(ONE_TWO_THREE, t)
    assert 1.0 - 1e-9 <= alpha <= 2.0 + 1e-9
    scan = min(kb_objective(ONE_TWO_THREE, t, a) for a in np.linspace(0, 4, 4001))
    assert kb_objective(ONE_TWO_THREE, t, alpha) == pytest.approx(scan, abs=1e-9)


def test_kb_rejects_bad_levels():
    with pytest.raises(ValueError):
        kb_fit_t(ONE_TWO_THREE, 0.0)
    with pytest.raises(ValueError):
        kb_fit_t(ONE_TWO_THREE, 1.0)
    with pytest.raises(ValueError):
        kb_scan(ONE_TWO_THREE, [0.5, 0.25])


def test_kb_exact_line():
    for t in (0.1, 0.3, 0.5, 0.9):
        alpha, beta, _ = kb_fit_t(LINEAR, t)
        assert alpha == pytest.approx(1.0, abs=1e-9)
        assert beta[0] == pytest.approx(2.0, abs=1e-9)
        assert kb_objective(LINEAR, t, alpha, beta) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_kb_rank_scores_indicate_atoms_above_the_fit(seed):
    rng = np.random.default_rng(seed)
    sample = random_centered(rng, int(rng.integers(4, 11)), 2)
    t = float(rng.uniform(0.05, 0.95))
    alpha, beta, u = kb_fit_t(sample, t)
    residual = sample.y[:, 0] - alpha - sample.x @ beta
    off_fit = np.abs(residual) > 1e-7
    assert np.array_equal(u[off_fit], (residual[off_fit] > 0).astype(float))


def test_kb_scan_on_line_is_constant():
    model = kb_scan(LINEAR, level_grid(5)[0])
    assert np.allclose(model.alpha, 1.0, atol=1e-9)
    assert np.allclose(model.beta[:, 0], 2.0, atol=1e-9)
    assert model.residuals.max() <= 1e-9


def test_kb_scan_matches_pinball_scan():
    levels = [0.25, 0.5, 0.75]
    model = kb_scan(ONE_TWO_THREE, levels)
    grid = np.linspace(0, 4, 4001)
    for t, alpha in zip(levels, model.alpha):
        best = min(kb_objective(ONE_TWO_THREE, t, a) for a in grid)
        assert kb_objective(ONE_TWO_THREE, t, alpha) == pytest.approx(best, abs=1e-9)
    assert model.alpha.tolist() == pytest.approx([1.0, 2.0, 3.0])


def test_kb_scan_without_covariates_is_empirical_quantile():
    rng = np.random.default_rng(3)
    sample = DiscreteSample(x=[], y=rng.normal(size=9), w=np.full(9, 1 / 9))
    grid = make_grid(1, 9)
    model = kb_scan(sample, grid.u[:, 0])
    assert model.alpha == pytest.approx(vector_quantile_1d(sample, grid), abs=1e-12)


def test_kb_scan_workers_agree():
    data = gen_synthetic(SyntheticSpec.preset("specified", n=10, seed=2))
    levels = level_grid(6)[0]
    serial = kb_scan(data.sample, levels)
    threaded = kb_scan(data.sample, levels, workers=3)
    assert np.array_equal(serial.alpha, threaded.alpha)
    assert np.array_equal(serial.beta, threaded.beta)


def test_quasi_spec_passes_on_specified_data():
    data = gen_synthetic(SyntheticSpec.preset("specified", n=20, seed=7))
    model = kb_scan(data.sample, level_grid(8)[0])
    report = quasi_spec_check(model, data.sample)
    assert report.passed
    assert report.violations == []


def test_quasi_spec_fails_on_flat_curves():
    sample = LINEAR
    model = QuantileModel1D(t=np.array([0.25, 0.75]), alpha=np.zeros(2), beta=np.zeros((2, 1)), ut=np.zeros((2, 4)))
    report = quasi_spec_check(model, sample)
    assert not report.passed
    assert (0, 0) in report.violations


def test_quasi_spec_single_level_is_vacuous():
    model = kb_scan(LINEAR, [0.5])
    assert quasi_spec_check(model, LINEAR).passed


def test_uqr_on_specified_data():
    data = gen_synthetic(SyntheticSpec.preset("specified", n=64, seed=11))
    model = kb_scan(data.sample, level_grid(64)[0])
    report = build_uqr(model, data.sample)
    assert report.uniform
    assert report.kolmogorov <= report.bound == pytest.approx(1 / 64 + 1 / 128)
    assert report.mean_indep_max <= 1e-6
    assert report.passed


def test_uqr_is_rank_level_without_covariates():
    sample = DiscreteSample(x=[], y=[3.0, 1.0, 4.0, 1.5, 2.0], w=[0.2] * 5)
    model = kb_scan(sample, level_grid(5)[0])
    report = build_uqr(model, sample)
    assert report.u == pytest.approx([0.7, 0.1, 0.9, 0.3, 0.5])
    assert report.kolmogorov == pytest.approx(0.1)


def test_uqr_single_level_not_uniform():
    model = kb_scan(LINEAR, [0.5])
    report = build_uqr(model, LINEAR)
    assert not report.uniform
    assert not report.passed


def test_monotone_single_level_is_kb_value():
    sample = random_centered(np.random.default_rng(0), 6, 1)
    t = 0.4
    _, _, u = kb_fit_t(sample, t)
    mono = monotone_kb_lp(sample, [t], delta=[1.0])
    assert mono.value == pytest.approx(float(np.sum(sample.w * u * sample.y[:, 0])), abs=1e-9)


def test_monotone_without_covariates_is_sum_of_levels():
    sample = DiscreteSample(x=[], y=[0.5, -1.0, 2.0, 1.0], w=[0.1, 0.2, 0.3, 0.4])
    levels, delta = level_grid(3)
    mono = monotone_kb_lp(sample, levels)
    per_level = [np.sum(sample.w * kb_fit_t(sample, t)[2] * sample.y[:, 0]) for t in levels]
    assert mono.value == pytest.approx(float(np.dot(delta, per_level)), abs=1e-9)
    assert np.all(mono.v[:-1] >= mono.v[1:] - 1e-9)


def test_monotone_solution_feasible():
    sample = random_centered(np.random.default_rng(5), 7, 2)
    levels = level_grid(5)[0]
    mono = monotone_kb_lp(sample, levels)
    assert np.all(mono.v >= -1e-9) and np.all(mono.v <= 1 + 1e-9)
    assert np.all(mono.v[:-1] >= mono.v[1:] - 1e-9)
    assert np.allclose(mono.v @ sample.w, 1 - levels, atol=1e-9)
    assert np.allclose((mono.v * sample.w) @ sample.x, 0.0, atol=1e-9)
    assert mono.duals["monotone"].shape == (4, 7)


def test_monotone_rejects_bad_weights():
    with pytest.raises(ValueError):
        monotone_kb_lp(LINEAR, [0.25, 0.75], delta=[0.5, 0.0])
    with pytest.raises(ValueError):
        monotone_kb_lp(LINEAR, [0.25, 0.75], delta=[1.0])


def test_sup_over_nonincreasing_examples():
    assert sup_over_nonincreasing([1.0, -1.0], [0.5, 0.5]) == 0.5
    assert sup_over_nonincreasing([-1.0, -2.0, -0.5], [0.2, 0.3, 0.5]) == 0.0


def test_sup_over_nonincreasing_matches_threshold_enumeration():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        K = int(rng.integers(1, 13))
        q = rng.normal(size=K)
        delta = rng.uniform(0.01, 1, K)
        assert sup_over_nonincreasing(q, delta) == pytest.approx(best_threshold(q, delta), abs=1e-12)


def test_threshold_coupling():
    grid = make_grid(1, 2)
    sample = DiscreteSample(x=[], y=[0.0, 1.0], w=[0.5, 0.5])
    v = threshold_coupling(Coupling(pi=[[0.5, 0.0], [0.0, 0.5]]), sample, grid, [0.0, 0.5])
    assert v.tolist() == [[1.0, 1.0], [0.0, 1.0]]


def test_equivalence_on_random_instances():
    rng = np.random.default_rng(2718)
    for _ in range(50):
        n, N, m = int(rng.integers(2, 9)), int(rng.integers(0, 3)), int(rng.integers(1, 9))
        report = equivalence_report(random_centered(rng, n, N), m)
        assert report.gap <= 1e-6
        assert report.threshold_residual <= 1e-6
        assert report.value_unconstrained >= report.value_transport - 1e-9
        assert report.dual_value == pytest.approx(report.value_transport, abs=1e-6)
        assert report.passed


@pytest.mark.parametrize("n,N,m", [(2, 1, 2), (3, 1, 2), (2, 1, 3), (3, 1, 3), (3, 2, 2)])
def test_equivalence_matches_vertex_enumeration(n, N, m):
    sample = random_centered(np.random.default_rng(n * 100 + N * 10 + m), n, N)
    report = equivalence_report(sample, m)
    oracle = best_vertex(assemble_vqr_lp(sample, make_grid(1, m)))
    assert report.value_transport == pytest.approx(oracle, abs=1e-9)
    assert report.value_monotone_kb == pytest.approx(oracle, abs=1e-6)
    levels, delta = matched_levels(make_grid(1, m))
    monotone, _, _, _ = assemble_monotone_lp(sample, levels, delta)
    assert report.value_monotone_kb == pytest.approx(best_vertex(monotone), abs=1e-9)


def test_equivalence_without_covariates_closed_form():
    rng = np.random.default_rng(4)
    y = rng.normal(size=5)
    sample = DiscreteSample(x=[], y=y, w=np.full(5, 0.2))
    report = equivalence_report(sample, 5)
    expected = float(np.sum(make_grid(1, 5).u[:, 0] * np.sort(y)) / 5)
    assert report.value_transport == pytest.approx(expected, abs=1e-9)
    assert report.value_monotone_kb == pytest.approx(expected, abs=1e-9)
    assert report.to_dict()["pass"] is True


def test_equivalence_single_atom():
    sample = DiscreteSample(x=[], y=[2.5], w=[1.0])
    report = equivalence_report(sample, 4)
    assert report.value_transport == pytest.approx(1.25)
    assert report.value_monotone_kb == pytest.approx(1.25)


def test_pivot_rules_give_same_curves():
    data = gen_synthetic(SyntheticSpec.preset("specified", n=20, seed=13))
    levels = np.arange(1, 7) / 7
    dantzig = kb_scan(data.sample, levels)
    bland = kb_scan(data.sample, levels, pivot_rule="bland")
    assert np.max(np.abs(dantzig.alpha - bland.alpha)) <= 1e-6
    assert np.max(np.abs(dantzig.beta - bland.beta)) <= 1e-6


def test_curves_at_zero_are_potential_gradient():
    data = gen_synthetic(SyntheticSpec.preset("specified", n=8, seed=0))
    grid = make_grid(1, 8)
    sol = solve_vqr_exact(data.sample, grid)
    curves = conditional_quantile_curves(sol, data.sample, grid, [[0.0], [0.5]])
    model = conditional_model(sol, grid)
    assert np.allclose(curves.q[0], model.grad_phi[:, 0])
    assert curves.q.shape == (2, 8)
    assert curves.non_monotone == []


def test_curves_warn_outside_covariate_box(caplog):
    data = gen_synthetic(SyntheticSpec.preset("specified", n=4, seed=0))
    grid = make_grid(1, 4)
    sol = solve_vqr_exact(data.sample, grid)
    with caplog.at_level(logging.WARNING):
        conditional_quantile_curves(sol, data.sample, grid, [[5.0]])
    assert "outside" in caplog.text


def test_curves_without_covariates_bracket_sorted_outcomes():
    rng = np.random.default_rng(21)
    y = np.sort(rng.normal(size=6))
    sample = DiscreteSample(x=[], y=rng.permutation(y), w=np.full(6, 1 / 6))
    grid = make_grid(1, 6)
    curves = conditional_quantile_curves(solve_vqr_exact(sample, grid), sample, grid, np.zeros((1, 0)))
    reference = vector_quantile_1d(sample, grid)
    assert np.array_equal(reference, y)
    for k, q in enumerate(curves.q[0]):
        assert reference[max(k - 1, 0)] - 1e-9 <= q <= reference[min(k + 1, 5)] + 1e-9


def test_polar_factorization():
    sample = DiscreteSample(x=[-1.0, -1.0, 1.0, 1.0], y=[3.0, 1.0, 2.0, 5.0], w=[0.25] * 4)
    polar = conditional_polar_factorization(sample, make_grid(1, 2))
    assert polar.x_values[:, 0].tolist() == [-1.0, 1.0]
    assert polar.curves.tolist() == [[1.0, 3.0], [2.0, 5.0]]
    assert polar.u.tolist() == [0.75, 0.25, 0.25, 0.75]
    assert polar.group.tolist() == [0, 0, 1, 1]
