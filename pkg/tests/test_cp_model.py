import numpy as np
import pytest

from multifac.cp_model import (
    CpFactors,
    MultifacModel,
    canonicalize,
    classify_structure,
    component_weights,
    cp_reconstruct,
    denormalize,
    normalize,
    reconstruct_structure,
    variance_explained,
)
from multifac.exceptions import ShapeError
from multifac.tensor import LinkedTensorSet

from .conftest import random_factors


def _linked_model(rng, zero_in_second=(1, 2), zero_in_first=(2,)):
    """Two tensors of shape (5, 4, 3); column 0 shared, 1 only in tensor 1."""
    shared = rng.standard_normal((5, 3))
    blocks = []
    for zeros in (zero_in_first, zero_in_second):
        fs = [rng.standard_normal((4, 3)), rng.standard_normal((3, 3))]
        for f in fs:
            f[:, list(zeros)] = 0.0
        blocks.append(tuple(fs))
    return MultifacModel(shared, tuple(blocks))


def test_normalize_round_trip_keeps_the_reconstruction(rng):
    cp = CpFactors(tuple(random_factors(rng, (4, 3, 5), 2)))
    normalized = normalize(cp)
    for u in normalized.unit_factors:
        np.testing.assert_allclose(np.linalg.norm(u, axis=0), 1.0)
    np.testing.assert_allclose(
        cp_reconstruct(denormalize(normalized)), cp_reconstruct(cp), atol=1e-12
    )


def test_normalize_keeps_zero_columns_at_zero(rng):
    factors = random_factors(rng, (3, 3), 2)
    factors[1][:, 1] = 0.0
    normalized = normalize(CpFactors(tuple(factors)))
    assert normalized.weights[1] == 0.0
    assert not normalized.unit_factors[0][:, 1].any()


def test_model_rejects_mismatched_columns(rng):
    with pytest.raises(ShapeError, match="tensor 1, mode 2"):
        MultifacModel(np.ones((3, 2)), ((np.ones((4, 3)),),))


def test_classify_shared_individual_and_zero(rng):
    pattern = classify_structure(component_weights(_linked_model(rng)))
    assert pattern.shared == [0]
    assert pattern.individual == [[1], []]
    assert pattern.zero == [2]
    assert pattern.partial == []
    assert pattern.ranks == (1, 1, 0)
    assert pattern.total_rank == 2
    assert pattern.active_in(0) == [0, 1]


def test_partially_shared_components_among_three_tensors(rng):
    shared = rng.standard_normal((4, 1))
    blocks = [(rng.standard_normal((3, 1)),) for _ in range(3)]
    blocks[2] = (np.zeros((3, 1)),)
    pattern = classify_structure(
        component_weights(MultifacModel(shared, tuple(blocks)))
    )
    assert pattern.partial == [0]
    assert pattern.partial_groups() == {(0, 1): [0]}
    assert pattern.shared == [] and pattern.zero == []


def test_single_tensor_components_count_as_shared(rng):
    model = MultifacModel.from_cp(CpFactors(tuple(random_factors(rng, (3, 4), 2))))
    pattern = classify_structure(component_weights(model))
    assert pattern.shared == [0, 1]
    assert pattern.individual == [[]]


def test_activity_threshold_is_relative_to_the_largest_component(rng):
    model = MultifacModel(
        np.array([[1.0, 1e-8]]), ((np.array([[1.0, 1.0]]),),)
    )
    assert component_weights(model, 1e-6).activity.tolist() == [[True, False]]
    assert component_weights(model, 1e-9).activity.tolist() == [[True, True]]
    with pytest.raises(ValueError):
        component_weights(model, 1.5)


def test_all_zero_model_has_no_active_component():
    pattern = classify_structure(component_weights(MultifacModel.zeros([(3, 2)], 2)))
    assert pattern.zero == [0, 1]
    assert pattern.total_rank == 0


def test_structure_pieces_add_up_to_the_reconstruction(rng):
    model = _linked_model(rng)
    pattern = classify_structure(component_weights(model))
    for k in range(2):
        pieces = reconstruct_structure(
            model, k, pattern.shared
        ) + reconstruct_structure(model, k, pattern.individual[k])
        np.testing.assert_allclose(pieces, model.reconstruct(k), atol=1e-12)
    with pytest.raises(ShapeError):
        reconstruct_structure(model, 0, [5])


def test_variance_explained_of_an_exact_model(rng):
    model = _linked_model(rng)
    data = LinkedTensorSet(tuple(model.reconstruct(k) for k in range(2)))
    table = variance_explained(model, data)
    assert list(table.index) == [1, 2]
    np.testing.assert_allclose(table["total"], 1.0)
    assert table.loc[2, "individual"] == 0.0
    assert table.loc[1, "rank_total"] == 2
    assert table.loc[2, "rank_shared"] == 1


def test_canonicalize_orders_by_weight_and_fixes_signs(rng):
    model = _linked_model(rng, zero_in_second=(), zero_in_first=())
    shared = -model.shared_factor * np.array([1.0, 10.0, 0.1])
    model = MultifacModel(shared, model.tensor_factors)
    canonical = canonicalize(model)
    totals = component_weights(canonical).totals.sum(axis=0)
    assert np.all(np.diff(totals) <= 0)
    columns = canonical.shared_factor
    pivots = columns[np.argmax(np.abs(columns), axis=0), np.arange(columns.shape[1])]
    assert np.all(pivots > 0)
    for k in range(2):
        np.testing.assert_allclose(
            canonical.reconstruct(k), model.reconstruct(k), atol=1e-10
        )
