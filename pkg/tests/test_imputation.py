from dataclasses import replace

import numpy as np
import pytest

from multifac.cp_model import (
    classify_structure,
    component_weights,
    reconstruct_structure,
)
from multifac.exceptions import DegenerateDataError
from multifac.imputation import (
    ImputeConfig,
    Preprocessor,
    em_als,
    imputation_summary,
    initial_impute,
)
from multifac.simulation import SimulationSpec, gen_linked
from multifac.solver import fit_multifac
from multifac.tensor import LinkedTensorSet, outer_sum, rse


def _hide(x, fraction, rng):
    values = np.array(x)
    picks = rng.choice(values.size, size=int(fraction * values.size), replace=False)
    values[np.unravel_index(picks, values.shape)] = np.nan
    return values


def test_initial_impute_fills_zero_or_the_observed_mean():
    x = np.full((3, 2), 4.0)
    x[1, 1] = np.nan
    data = LinkedTensorSet.from_arrays([x])
    np.testing.assert_array_equal(
        initial_impute(data).tensors[0], np.where(np.isnan(x), 0.0, x)
    )
    filled = initial_impute(data, Preprocessor.fit(data)).tensors[0]
    assert filled[1, 1] == pytest.approx(4.0)
    assert not initial_impute(data).has_missing


def test_initial_impute_leaves_complete_data_alone(rng):
    x = rng.standard_normal((3, 4))
    data = LinkedTensorSet((x,))
    np.testing.assert_array_equal(initial_impute(data).tensors[0], x)


def test_preprocessor_round_trip(rng):
    data = LinkedTensorSet((5.0 + 2.0 * rng.standard_normal((4, 3)),))
    pre = Preprocessor.fit(data)
    scaled = pre.transform(data).tensors[0]
    assert scaled.mean() == pytest.approx(0.0, abs=1e-12)
    assert np.linalg.norm(scaled) == pytest.approx(1.0)
    np.testing.assert_allclose(pre.inverse(0, scaled), data.tensors[0])


def test_without_missing_entries_em_als_is_plain_als(rng, tight_solver):
    data = LinkedTensorSet(
        (rng.standard_normal((5, 4, 3)), rng.standard_normal((5, 3)))
    )
    solver = tight_solver(2, sigma=0.3, max_iterations=60, n_starts=2)
    model, _ = fit_multifac(data, solver)
    result = em_als(data, ImputeConfig(solver=solver))
    for k in range(2):
        np.testing.assert_array_equal(result.model.reconstruct(k), model.reconstruct(k))
    assert result.counts == [(0, 0), (0, 0)]


def test_observed_entries_are_kept_bit_for_bit(rng):
    x = _hide(rng.standard_normal((6, 5, 4)), 0.2, rng)
    data = LinkedTensorSet.from_arrays([x])
    cfg = ImputeConfig.model_validate(
        {"solver": {"rank": 2, "n_starts": 1, "threads": 1}, "em_max_rounds": 20}
    )
    result = em_als(data, cfg)
    observed = ~np.isnan(x)
    completed = result.completed.tensors[0]
    np.testing.assert_array_equal(completed[observed], x[observed])
    assert np.all(np.isfinite(completed))
    assert not result.completed.has_missing


def test_noiseless_low_rank_tensor_is_completed(low_rank, rng, tight_solver):
    signal = low_rank((8, 7, 6), 2)
    x = _hide(signal, 0.1, rng)
    hidden = np.isnan(x)
    cfg = ImputeConfig(
        solver=tight_solver(2, n_starts=3),
        em_tolerance=1e-12,
        em_max_rounds=3000,
    )
    result = em_als(LinkedTensorSet.from_arrays([x]), cfg)
    assert rse(result.completed.tensors[0], signal, hidden) <= 1e-4


def _linked_with_slab(snr=float("inf")):
    spec = SimulationSpec(
        shapes=[(12, 6, 5), (12, 7, 4)],
        shared_rank=1,
        individual_ranks=[1, 1],
        snr=snr,
        entrywise_fraction=0.05,
        tensorwise_fraction=0.1,
        seed=5,
    )
    return gen_linked(spec)


def test_missing_slabs_are_imputed_from_shared_components_only():
    data, _ = _linked_with_slab()
    cfg = ImputeConfig.model_validate(
        {"solver": {"rank": 3, "n_starts": 1, "threads": 1}, "em_max_rounds": 30}
    )
    result = em_als(data, cfg)
    shared = classify_structure(component_weights(result.model)).shared
    for k, mask in enumerate(data.masks):
        slab = mask.slab_missing
        assert slab.any()
        np.testing.assert_allclose(
            result.estimates[k][slab],
            reconstruct_structure(result.model, k, shared)[slab],
        )
    assert all(t > 0 for _, t in result.counts)


def test_entry_only_imputation_uses_the_full_reconstruction():
    data, _ = _linked_with_slab()
    cfg = ImputeConfig.model_validate(
        {
            "solver": {"rank": 3, "n_starts": 1, "threads": 1},
            "em_max_rounds": 30,
            "shared_only_for_tensorwise": False,
        }
    )
    result = em_als(data, cfg)
    for k in range(2):
        np.testing.assert_allclose(result.estimates[k], result.model.reconstruct(k))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_em_objective_trace_never_increases(rng, seed):
    signal = outer_sum([rng.standard_normal((d, 2)) for d in (7, 6, 5)])
    x = _hide(signal + 0.1 * rng.standard_normal(signal.shape), 0.15, rng)
    cfg = ImputeConfig.model_validate(
        {
            "solver": {
                "rank": 3,
                "sigma": 0.1,
                "n_starts": 1,
                "temper_steps": 0,
                "threads": 1,
                "seed": seed,
            },
            "em_max_rounds": 60,
            "em_tolerance": 1e-12,
            "shared_only_for_tensorwise": False,
        }
    )
    trace = em_als(LinkedTensorSet.from_arrays([x]), cfg).report.objective_trace
    assert len(trace) > 1
    for before, after in zip(trace, trace[1:]):
        assert after <= before * (1.0 + 1e-9)


def test_linked_em_objective_trace_never_increases():
    data, _ = _linked_with_slab(snr=2.0)
    cfg = ImputeConfig.model_validate(
        {
            "solver": {
                "rank": 3,
                "sigma": 0.05,
                "n_starts": 1,
                "temper_steps": 0,
                "threads": 1,
            },
            "em_max_rounds": 40,
            "em_tolerance": 1e-12,
            "shared_only_for_tensorwise": False,
        }
    )
    trace = em_als(data, cfg).report.objective_trace
    for before, after in zip(trace, trace[1:]):
        assert after <= before * (1.0 + 1e-9)


def test_preprocessed_imputation_reports_original_scale(rng):
    x = _hide(100.0 + rng.standard_normal((5, 4, 3)), 0.1, rng)
    cfg = ImputeConfig.model_validate(
        {
            "solver": {"rank": 1, "n_starts": 1, "threads": 1},
            "em_max_rounds": 20,
            "preprocess": True,
        }
    )
    result = em_als(LinkedTensorSet.from_arrays([x]), cfg)
    assert result.preprocessor is not None
    gaps = result.completed.tensors[0][np.isnan(x)]
    assert np.all(np.abs(gaps - 100.0) < 10.0)


def test_tensor_without_observed_entries_is_rejected():
    data = LinkedTensorSet.from_arrays([np.ones((2, 2)), np.full((2, 3), np.nan)])
    cfg = ImputeConfig.model_validate({"solver": {"rank": 1}})
    with pytest.raises(DegenerateDataError, match="tensor 2"):
        em_als(data, cfg)


def test_imputation_summary_categories():
    data, truth = _linked_with_slab()
    cfg = ImputeConfig.model_validate(
        {"solver": {"rank": 3, "n_starts": 1, "threads": 1}, "em_max_rounds": 10}
    )
    result = em_als(data, cfg)
    rows = imputation_summary(result, truth.signal_set)
    assert [r.tensor for r in rows] == [1, 2]
    for row in rows:
        assert row.rse_entrywise is not None
        assert row.rse_tensorwise is not None

    blank = replace(result, estimates=tuple(np.zeros_like(e) for e in result.estimates))
    for row in imputation_summary(blank, truth.signal_set):
        assert row.rse_missing == pytest.approx(1.0)
        assert row.rse_observe == pytest.approx(1.0)


def test_summary_without_slabs_has_no_tensorwise_entry(rng):
    x = _hide(rng.standard_normal((6, 5, 4)), 0.1, rng)
    cfg = ImputeConfig.model_validate(
        {"solver": {"rank": 1, "n_starts": 1, "threads": 1}, "em_max_rounds": 5}
    )
    result = em_als(LinkedTensorSet.from_arrays([x]), cfg)
    (row,) = imputation_summary(result, LinkedTensorSet((np.nan_to_num(x),)))
    assert row.rse_tensorwise is None
    assert row.n_tensorwise == 0
    assert row.n_entrywise == int(np.isnan(x).sum())
    (plain,) = imputation_summary(result)
    assert plain.rse_missing is None
    assert plain.rse_observe is not None
