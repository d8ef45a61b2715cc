from itertools import islice

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import settings as hsettings
from hypothesis import strategies as st

from multifac.cp_model import (
    CpFactors,
    MultifacModel,
    classify_structure,
    component_weights,
    normalize,
)
from multifac.exceptions import MissingDataError, SingularSystemError
from multifac.simulation import SimulationSpec, gen_linked, structure_rses
from multifac.solver import (
    FactorState,
    SolverConfig,
    ZeroPattern,
    finalize_factors,
    fit_cp,
    fit_multifac,
    init_state,
    multi_start,
    penalized_objective,
    penalized_weight,
    rebalance,
    ridge_update,
    soft_threshold_svd,
    sweep,
    temper_schedule,
    unpenalized_objective,
    zero_threshold,
)
from multifac.tensor import LinkedTensorSet, khatri_rao_many, matricize, outer_sum

from .conftest import random_factors


def _objective_value(lam, lam_hat, sigma, order):
    return (lam - lam_hat) ** 2 + order * sigma * lam ** (2.0 / order)


def test_ridge_update_scalar_case():
    x = np.array([[6.0]])
    z = [np.array([[2.0]])]
    assert ridge_update(x, z, 0.0)[0, 0] == pytest.approx(3.0)
    assert ridge_update(x, z, 1.0)[0, 0] == pytest.approx(12.0 / 5.0)


def test_ridge_update_matches_the_normal_equations(rng):
    companions = [rng.standard_normal((4, 3)), rng.standard_normal((5, 3))]
    unfolded = rng.standard_normal((6, 20))
    z = khatri_rao_many(companions[::-1])
    expected = np.linalg.solve(z.T @ z + 0.7 * np.eye(3), z.T @ unfolded.T).T
    np.testing.assert_allclose(
        ridge_update(unfolded, companions, 0.7), expected, atol=1e-10
    )


def test_ridge_update_shrinks_to_zero_for_huge_sigma(rng):
    companions = [rng.standard_normal((4, 2))]
    out = ridge_update(rng.standard_normal((3, 4)), companions, 1e12)
    assert np.abs(out).max() < 1e-9


def test_singular_system_raises_unless_pinv_is_allowed(rng):
    companion = rng.standard_normal((4, 2))
    companion[:, 1] = 0.0
    unfolded = rng.standard_normal((3, 4))
    with pytest.raises(SingularSystemError, match="sigma > 0"):
        ridge_update(unfolded, [companion], 0.0)
    out = ridge_update(unfolded, [companion], 0.0, allow_pinv=True)
    assert np.all(np.isfinite(out))


def test_temper_schedule_ramps_then_holds():
    schedule = list(islice(temper_schedule(100.0, 2), 5))
    assert schedule == pytest.approx([1.0, 10.0, 100.0, 100.0, 100.0])
    assert list(islice(temper_schedule(3.0, 0), 2)) == [3.0, 3.0]
    assert list(islice(temper_schedule(0.0, 4), 2)) == [0.0, 0.0]
    with pytest.raises(ValueError):
        temper_schedule(1.0, -1)


def test_penalized_weight_for_matrices_is_soft_thresholding():
    assert penalized_weight(5.0, 1.0, 2) == pytest.approx(4.0)
    assert penalized_weight(5.0, 6.0, 2) == 0.0
    assert penalized_weight(0.0, 1.0, 3) == 0.0
    assert penalized_weight(2.0, 0.0, 4) == 2.0


@hsettings(max_examples=100, deadline=None)
@given(
    lam_hat=st.floats(min_value=0.05, max_value=2.0),
    sigma=st.floats(min_value=0.0, max_value=1.0),
    order=st.sampled_from([2, 3, 4]),
)
def test_penalized_weight_matches_a_fine_grid_search(lam_hat, sigma, order):
    grid = np.arange(0.0, lam_hat + 1e-6, 1e-6)
    values = _objective_value(grid, lam_hat, sigma, order)
    best = float(grid[np.argmin(values)])
    oracle = penalized_weight(lam_hat, sigma, order)
    zero_value = lam_hat**2
    # near-ties between zero and the interior minimum are ambiguous on a grid
    assume(
        abs(_objective_value(oracle, lam_hat, sigma, order) - zero_value) > 1e-6
        or oracle == 0.0
    )
    assume(abs(values.min() - zero_value) > 1e-6 or best == 0.0)
    assert _objective_value(oracle, lam_hat, sigma, order) <= values.min() + 1e-10
    assert oracle == pytest.approx(best, abs=1e-5)


@pytest.mark.parametrize("order", [2, 3, 4, 5])
@pytest.mark.parametrize("lam_hat", [0.3, 1.0, 7.5])
def test_zero_threshold_separates_zero_from_nonzero(order, lam_hat):
    sigma = zero_threshold(lam_hat, order)
    assert penalized_weight(lam_hat, sigma * 1.001, order) == 0.0
    assert penalized_weight(lam_hat, sigma * 0.999, order) > 0.0


def test_soft_threshold_svd_example():
    out = soft_threshold_svd(np.diag([3.0, 1.0]), 2.0)
    np.testing.assert_allclose(out, np.diag([1.0, 0.0]), atol=1e-12)
    x = np.diag([3.0, 1.0])
    np.testing.assert_allclose(soft_threshold_svd(x, 0.0), x, atol=1e-12)
    assert not soft_threshold_svd(x, 3.0).any()


def test_multi_start_keeps_the_best_and_is_deterministic():
    def fit(start, rng):
        return rng.random()

    best, index, objectives = multi_start(fit, 4, 11, lambda v: v)
    again = multi_start(fit, 4, 11, lambda v: v)
    assert again == (best, index, objectives)
    assert best == min(objectives)
    assert objectives[index] == best
    assert multi_start(fit, 3, 11, lambda v: 1.0)[1] == 0
    with pytest.raises(ValueError):
        multi_start(fit, 0, 11, lambda v: v)


def test_every_block_update_lowers_the_penalized_objective(rng):
    tensors = [rng.standard_normal((5, 4, 3)), rng.standard_normal((5, 6))]
    state = init_state(tensors, 3, rng)
    sigma = 0.5
    data = LinkedTensorSet(tuple(tensors))
    values = [penalized_objective(data, state.to_model(), sigma)]

    def record(k, i):
        values.append(penalized_objective(data, state.to_model(), sigma))

    for _ in range(5):
        sweep(tensors, state, sigma, on_block=record)
    steps = np.diff(values)
    assert np.all(steps <= 1e-10 * values[0])


def test_single_tensor_sweep_is_textbook_als(rng):
    x = rng.standard_normal((4, 5, 3))
    factors = random_factors(rng, x.shape, 2)
    state = FactorState(
        shared=factors[0].copy(), blocks=[[f.copy() for f in factors[1:]]]
    )
    sweep([x], state, 0.0)

    expected = [f.copy() for f in factors]
    for n in range(3):
        others = [f for m, f in enumerate(expected) if m != n]
        z = khatri_rao_many(others[::-1])
        expected[n] = np.linalg.lstsq(z, matricize(x, n).T, rcond=None)[0].T
    np.testing.assert_allclose(state.shared, expected[0], atol=1e-10)
    for got, want in zip(state.blocks[0], expected[1:]):
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_fit_cp_recovers_a_noiseless_low_rank_tensor(low_rank, tight_solver):
    x = low_rank((6, 5, 4), 2)
    factors, report = fit_cp(x, tight_solver(2))
    assert factors.rank == 2
    assert unpenalized_objective(
        LinkedTensorSet((x,)), MultifacModel.from_cp(factors)
    ) <= 1e-10 * np.sum(x**2)
    assert report.effective_ranks.total_rank == 2
    assert len(report.start_objectives) == 5


def test_fit_cp_rejects_missing_entries(tight_solver):
    x = np.ones((3, 3, 3))
    x[0, 0, 0] = np.nan
    with pytest.raises(MissingDataError, match="em_als"):
        fit_cp(x, tight_solver(1))


def test_fit_is_deterministic_for_a_seed(rng, tight_solver):
    x = rng.standard_normal((5, 4, 3))
    cfg = tight_solver(2, sigma=0.1, max_iterations=50, n_starts=2)
    first, _ = fit_cp(x, cfg)
    second, _ = fit_cp(x, cfg)
    for a, b in zip(first.factors, second.factors):
        np.testing.assert_array_equal(a, b)


def test_penalty_above_the_zero_threshold_zeroes_a_rank_one_fit(rng):
    a, b, c = (rng.standard_normal((d, 1)) for d in (5, 4, 3))
    x = outer_sum([a, b, c])
    lam_hat = float(np.linalg.norm(x))
    cfg = SolverConfig(
        rank=1, sigma=2.0 * zero_threshold(lam_hat, 3), n_starts=2, threads=1
    )
    factors, report = fit_cp(x, cfg)
    assert all(not f.any() for f in factors.factors)
    assert report.effective_ranks.total_rank == 0


def test_penalized_rank_one_weight_follows_the_closed_form(rng, tight_solver):
    a, b, c = (rng.standard_normal((d, 1)) for d in (5, 6, 7))
    x = outer_sum([a, b, c]) + 0.1 * rng.standard_normal((5, 6, 7))
    plain, _ = fit_cp(x, tight_solver(1))
    best = normalize(plain)
    lam_hat = float(best.weights[0])
    sigma = 0.5 * zero_threshold(lam_hat, 3)
    penalized, _ = fit_cp(x, tight_solver(1, sigma=sigma))
    fitted = normalize(penalized)
    assert fitted.weights[0] == pytest.approx(
        penalized_weight(lam_hat, sigma, 3), rel=1e-5
    )
    for u, v in zip(best.unit_factors, fitted.unit_factors):
        assert abs(float(u[:, 0] @ v[:, 0])) >= 1.0 - 1e-8


def test_penalized_matrix_fit_soft_thresholds_singular_values(rng, tight_solver):
    u, _ = np.linalg.qr(rng.standard_normal((6, 4)))
    v, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    m = (u * np.array([5.0, 3.0, 1.5, 0.5])) @ v.T
    factors, _ = fit_cp(m, tight_solver(4, sigma=1.0, tolerance=1e-15, n_starts=3))
    expected = soft_threshold_svd(m, 1.0)
    fitted = outer_sum(list(factors.factors))
    assert np.linalg.norm(fitted - expected) <= 1e-6 * np.linalg.norm(expected)


def test_single_tensor_linked_fit_equals_fit_cp(rng, tight_solver):
    x = rng.standard_normal((4, 3, 5))
    cfg = tight_solver(2, sigma=0.2, max_iterations=100, n_starts=2)
    factors, _ = fit_cp(x, cfg)
    model, _ = fit_multifac(LinkedTensorSet((x,)), cfg)
    for a, b in zip(factors.factors, model.factors_for(0)):
        np.testing.assert_array_equal(a, b)


def test_objectives_differ_by_the_penalty(rng):
    data = LinkedTensorSet(
        (rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 5)))
    )
    model = MultifacModel(
        rng.standard_normal((4, 2)),
        (
            (rng.standard_normal((3, 2)), rng.standard_normal((2, 2))),
            (rng.standard_normal((5, 2)),),
        ),
    )
    gap = penalized_objective(data, model, 0.3) - unpenalized_objective(data, model)
    assert gap == pytest.approx(0.3 * model.squared_norm())
    zeros = MultifacModel.zeros(data.shapes, 2)
    assert unpenalized_objective(data, zeros) == pytest.approx(data.observed_norm_sq())


def test_finalizing_never_raises_the_penalized_objective(rng):
    tensors = (rng.standard_normal((5, 4, 3)), rng.standard_normal((5, 3, 3)))
    data = LinkedTensorSet(tensors)
    sigma = 0.4
    state = init_state(list(tensors), 4, rng)
    for _ in range(3):
        sweep(list(tensors), state, sigma)
    model = state.to_model(sigma)
    final = finalize_factors(list(tensors), model, sigma)
    assert penalized_objective(data, final, sigma) <= penalized_objective(
        data, model, sigma
    ) + 1e-10


def test_rebalance_equalizes_column_norms(rng):
    factors = random_factors(rng, (4, 3, 5), 2)
    factors[0] *= 10.0
    model = MultifacModel.from_cp(CpFactors(tuple(factors)))
    balanced = rebalance(model)
    norms = np.stack([np.linalg.norm(f, axis=0) for f in balanced.factors_for(0)])
    np.testing.assert_allclose(norms, norms[[0]].repeat(3, axis=0), rtol=1e-3)
    np.testing.assert_allclose(
        balanced.reconstruct(0), model.reconstruct(0), atol=1e-10
    )


def test_rebalance_within_each_linked_tensor(rng):
    model = MultifacModel(
        rng.standard_normal((4, 2)),
        (
            (3.0 * rng.standard_normal((3, 2)), rng.standard_normal((5, 2))),
            (rng.standard_normal((2, 2)), 0.1 * rng.standard_normal((6, 2))),
        ),
    )
    balanced = rebalance(model)
    for k, blocks in enumerate(balanced.tensor_factors):
        norms = np.stack([np.linalg.norm(f, axis=0) for f in blocks])
        np.testing.assert_allclose(norms[0], norms[1], rtol=1e-3)
        np.testing.assert_allclose(
            balanced.reconstruct(k), model.reconstruct(k), atol=1e-10
        )
    assert balanced.squared_norm() <= model.squared_norm()


def test_pattern_fit_recovers_shared_and_individual_signals(tight_solver):
    spec = SimulationSpec(
        shapes=[(10, 8, 7), (10, 8, 7)],
        shared_rank=2,
        individual_ranks=[3, 3],
        snr=float("inf"),
        seed=3,
    )
    data, truth = gen_linked(spec)
    constrained = np.zeros((2, 8), dtype=bool)
    constrained[0, 5:] = True
    constrained[1, 2:5] = True
    cfg = tight_solver(8, n_starts=20)
    model, report = fit_multifac(data, cfg, ZeroPattern(constrained))
    assert report.effective_ranks.ranks == (2, 3, 3)
    for row in structure_rses(model, truth):
        assert row.rse_full <= 1e-6
        assert row.rse_share <= 1e-6
        assert row.rse_indiv <= 1e-6


def test_zero_pattern_from_structure_layout(rng):
    model = MultifacModel(
        rng.standard_normal((4, 3)),
        (
            (rng.standard_normal((3, 3)) * np.array([1.0, 1.0, 0.0]),),
            (rng.standard_normal((2, 3)) * np.array([1.0, 0.0, 1.0]),),
        ),
    )
    pattern = classify_structure(component_weights(model))
    zeros = ZeroPattern.from_structure(pattern)
    assert zeros.constrained.tolist() == [[False, False, True], [False, True, False]]
    assert zeros.effective_rank == 3
