"""
Tests for the numerical kit: factorization, solves, parameter registry,
gradient contract, optimizer and clustering
"""

import numpy as np
import pytest
import torch

from errors import (
    DimensionMismatch, EmptyInput, InputError, NonFiniteGradient, NotPositiveDefinite
)
from services import numkit
from services.numkit import (
    AdamState, ParamVector, adam_step, as_tensor, chol_solve, cholesky, grad, kmeans, logdet,
    lower_from_parts, split_lower, symmetrize, tri_solve, value_and_grad
)


def _spd(n, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    return as_tensor(a @ a.T + n * np.eye(n))


# Cholesky

def test_cholesky_reconstructs_spd_matrix():
    a = _spd(5)
    factor = cholesky(a)
    assert factor.jitter == 0.0
    assert torch.allclose(factor.reconstruct(), a, rtol=1e-12, atol=1e-12)
    assert torch.equal(factor.lower, torch.tril(factor.lower))


def test_cholesky_escalates_jitter_on_singular_matrix():
    factor = cholesky(torch.ones(3, 3, dtype=torch.float64))
    assert factor.jitter == pytest.approx(1e-8)


def test_cholesky_rejects_negative_definite():
    with pytest.raises(NotPositiveDefinite):
        cholesky(-torch.eye(3, dtype=torch.float64))


def test_cholesky_rejects_non_finite():
    a = _spd(3)
    a[0, 1] = float("nan")
    with pytest.raises(NotPositiveDefinite):
        cholesky(a)


def test_cholesky_rejects_non_square():
    with pytest.raises(DimensionMismatch):
        cholesky(torch.zeros(2, 3, dtype=torch.float64))


def test_batched_cholesky():
    stack = torch.stack([_spd(4, seed) for seed in range(3)])
    factor = cholesky(stack)
    assert factor.lower.shape == (3, 4, 4)
    assert torch.allclose(factor.reconstruct(), stack, atol=1e-12)


# Solves

def test_triangular_and_cholesky_solves():
    a = _spd(6, seed=1)
    factor = cholesky(a)
    b = as_tensor(np.arange(6.0))
    lower = tri_solve(factor, b, side="lower")
    assert torch.allclose(factor.lower @ lower, b, atol=1e-12)
    upper = tri_solve(factor, b, side="upper")
    assert torch.allclose(factor.lower.T @ upper, b, atol=1e-12)
    assert torch.allclose(a @ chol_solve(factor, b), b, atol=1e-10)


def test_tri_solve_dimension_mismatch():
    factor = cholesky(_spd(3))
    with pytest.raises(DimensionMismatch):
        tri_solve(factor, torch.zeros(4, dtype=torch.float64))


def test_logdet_matches_torch():
    a = _spd(5, seed=2)
    assert float(logdet(cholesky(a))) == pytest.approx(float(torch.logdet(a)), rel=1e-12)


def test_symmetrize_mirrors_lower_triangle():
    a = as_tensor([[1.0, 9.0], [2.0, 3.0]])
    assert torch.equal(symmetrize(a), as_tensor([[1.0, 2.0], [2.0, 3.0]]))


def test_lower_parts_round_trip():
    lower = torch.tril(_spd(4))
    diag, off = split_lower(lower)
    assert torch.equal(lower_from_parts(diag, off), lower)


# Parameter registry and gradients

def test_param_vector_positive_blocks_and_floor():
    params = ParamVector.pack(
        {"a": as_tensor([1.0, -2.0]), "noise": as_tensor(0.5), "ls": as_tensor([0.3, 4.0])},
        positive=("noise", "ls"),
        floors={"noise": 1e-6},
    )
    assert params.size == 5
    assert torch.allclose(params.read("a"), as_tensor([1.0, -2.0]))
    assert float(params.read("noise")) == pytest.approx(0.5, rel=1e-12)
    assert torch.allclose(params.read("ls"), as_tensor([0.3, 4.0]), rtol=1e-12)
    assert float(params.raw("noise")) == pytest.approx(np.log(0.5 - 1e-6))
    assert params.block_mask(["noise"]).tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]


def test_value_and_grad_matches_closed_form():
    params = ParamVector.pack({"x": as_tensor([1.0, -3.0])})
    value, gradient = value_and_grad(lambda flat: (flat ** 2).sum(), params.values)
    assert value == pytest.approx(10.0)
    assert gradient.tolist() == pytest.approx([2.0, -6.0])
    assert grad(lambda flat: (flat ** 3).sum(), params).tolist() == pytest.approx([3.0, 27.0])


def test_value_and_grad_unused_input_gives_zero():
    _, gradient = value_and_grad(lambda flat: torch.tensor(1.0, dtype=torch.float64, requires_grad=True), as_tensor([1.0]))
    assert gradient.tolist() == [0.0]


def test_non_finite_gradient_raises():
    with pytest.raises(NonFiniteGradient):
        value_and_grad(lambda flat: torch.sqrt(flat).sum(), as_tensor([0.0, 1.0]))


# Adam

@pytest.mark.parametrize("maximize,direction", [(False, -1.0), (True, 1.0)])
def test_first_adam_step_moves_by_learning_rate(maximize, direction):
    state = AdamState(as_tensor([0.0, 0.0]), maximize=maximize, lr=1e-3)
    params, state = adam_step(state, as_tensor([2.0, -0.5]), lr=1e-3)
    assert state.steps == 1
    assert params.tolist() == pytest.approx([direction * 1e-3, -direction * 1e-3], rel=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    state = AdamState(as_tensor([1.0, 2.0]), lr=0.1)
    for _ in range(5):
        params, state = adam_step(state, as_tensor([0.0, 0.0]), lr=0.1)
    assert params.tolist() == [1.0, 2.0]


def test_adam_rejects_wrong_gradient_shape():
    state = AdamState(as_tensor([1.0, 2.0]))
    with pytest.raises(DimensionMismatch):
        adam_step(state, as_tensor([1.0]))


def test_adam_second_step_is_no_larger_than_the_first():
    state = AdamState(as_tensor([0.5, -1.0]), lr=0.01)
    start = state.params.detach().clone()
    first, state = adam_step(state, as_tensor([3.0, -0.2]), lr=0.01)
    second, state = adam_step(state, as_tensor([3.0, -0.2]), lr=0.01)
    assert torch.all((second - first).abs() <= (first - start).abs() + 1e-12)


def test_adam_minimizes_quadratic():
    state = AdamState(as_tensor([3.0, -2.0]), lr=0.05)
    for _ in range(2000):
        _, gradient = value_and_grad(lambda flat: ((flat - 1.0) ** 2).sum(), state.params)
        adam_step(state, gradient, lr=0.05)
    assert state.params.detach().tolist() == pytest.approx([1.0, 1.0], abs=1e-2)


# k-means

def test_kmeans_recovers_separated_clusters_deterministically():
    rng = np.random.default_rng(0)
    points = np.concatenate([rng.normal(c, 0.1, size=(30, 2)) for c in (-5.0, 0.0, 5.0)])
    first = kmeans(points, 3, seed=4)
    second = kmeans(points, 3, seed=4)
    assert np.array_equal(first, second)
    assert sorted(np.round(first[:, 0]).tolist()) == [-5.0, 0.0, 5.0]


def test_kmeans_input_errors():
    with pytest.raises(EmptyInput):
        kmeans(np.zeros((0, 2)), 1, seed=0)
    with pytest.raises(InputError):
        kmeans(np.zeros((3, 2)), 4, seed=0)
    with pytest.raises(InputError):
        kmeans(np.zeros((3, 2)), 0, seed=0)


def test_kmeans_single_center_is_the_mean():
    points = np.random.default_rng(1).standard_normal((20, 3))
    assert np.allclose(kmeans(points, 1, seed=0), points.mean(axis=0)[None, :])


def test_kmeans_with_one_center_per_point_returns_the_points():
    points = np.random.default_rng(2).standard_normal((8, 2))
    centers = kmeans(points, 8, seed=0)
    order = np.lexsort(centers.T[::-1])
    assert np.allclose(centers[order], points[np.lexsort(points.T[::-1])])


def _within_cluster_sum_of_squares(points, centers):
    distances = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return float(distances.min(axis=1).sum())


def test_kmeans_objective_does_not_increase_with_iterations(monkeypatch):
    rng = np.random.default_rng(3)
    points = np.concatenate([rng.normal(c, 1.0, size=(40, 2)) for c in (-2.0, 0.0, 2.0)])
    objective = []
    for iterations in range(1, 8):
        monkeypatch.setattr(numkit, "KMEANS_MAX_ITER", iterations)
        objective.append(_within_cluster_sum_of_squares(points, kmeans(points, 5, seed=6)))
    assert all(later <= earlier + 1e-9 for earlier, later in zip(objective, objective[1:]))
