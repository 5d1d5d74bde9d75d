"""
Tests for the fixed-mean variational family: predictive variance, KL terms,
auxiliary mean, prediction and class probabilities
"""

import math
import time

import numpy as np
import pytest
import torch

from errors import InputError, ModeMismatch
from services import fmgp
from services.exact_gp import fit_exact, predict_exact
from services.kernels import (
    ClassKernelParams, InducingPoints, RbfParams, class_kernel, inducing_gram, rbf_matrix
)
from services.metrics import predictive_entropy
from services.numkit import as_tensor


def _regression_state(rng, m=6, d=2, scale=0.5):
    lower = np.tril(scale * rng.standard_normal((m, m)), -1) + np.diag(rng.uniform(0.5, 1.5, m))
    return fmgp.VariationalState(
        inducing=InducingPoints(z=as_tensor(rng.standard_normal((m, d)))),
        chol_a_tilde=as_tensor(lower),
        qstar_coef=as_tensor(rng.standard_normal(m)),
        kernel=RbfParams.create(1.3, [0.8] * d),
        noise=as_tensor(0.1),
    )


def _classification_state(rng, m=5, d=2, e=3, c=3):
    inducing = InducingPoints(
        z=as_tensor(rng.standard_normal((m, d))),
        psi=as_tensor(0.5 * rng.standard_normal((m, e))),
        labels=torch.as_tensor(rng.integers(0, c, m)),
    )
    return fmgp.VariationalState(
        inducing=inducing,
        chol_a_tilde=as_tensor(np.diag(rng.uniform(0.5, 1.5, m))),
        qstar_coef=as_tensor(rng.standard_normal(m)),
        kernel=ClassKernelParams(rbf=RbfParams.create(1.0, [1.0] * d), b_chol=torch.eye(c, dtype=torch.float64)),
    )


def test_oracle_equivalence_with_exact_gp():
    """Z = X and A~ = I / s2 reproduce the exact posterior variance"""
    rng = np.random.default_rng(0)
    n, d, noise = 200, 3, 0.1
    x = rng.uniform(-2, 2, size=(n, d))
    y = rng.standard_normal(n)
    kernel = RbfParams.create(1.0, [1.0] * d)
    x_star = rng.uniform(-2, 2, size=(50, d))

    start = time.perf_counter()
    state = fmgp.VariationalState(
        inducing=InducingPoints(z=as_tensor(x)),
        chol_a_tilde=torch.eye(n, dtype=torch.float64) / noise ** 0.5,
        qstar_coef=torch.zeros(n, dtype=torch.float64),
        kernel=kernel,
        noise=as_tensor(noise),
    )
    variance = fmgp.predictive_variance(state, as_tensor(x_star))
    _, exact = predict_exact(fit_exact(x, y, kernel, noise), x_star)
    assert time.perf_counter() - start < 5.0

    relative = ((variance - exact).abs() / exact.abs()).max()
    assert float(relative) < 1e-8


def test_variance_is_contained_in_prior():
    rng = np.random.default_rng(1)
    for scale in (0.1, 1.0, 10.0):
        state = _regression_state(rng, scale=scale)
        variance = fmgp.predictive_variance(state, as_tensor(rng.standard_normal((40, 2))))
        assert torch.all(variance >= 0)
        assert torch.all(variance <= 1.3 + 1e-12)


def test_zero_factor_gives_prior_and_zero_kl():
    rng = np.random.default_rng(2)
    state = _regression_state(rng)
    state = fmgp.VariationalState(
        inducing=state.inducing, chol_a_tilde=torch.zeros(6, 6, dtype=torch.float64),
        qstar_coef=torch.zeros(6, dtype=torch.float64), kernel=state.kernel, noise=state.noise,
    )
    variance = fmgp.predictive_variance(state, as_tensor(rng.standard_normal((5, 2))))
    assert variance.tolist() == pytest.approx([1.3] * 5)
    assert float(fmgp.kl_q(state)) == pytest.approx(0.0, abs=1e-14)
    assert float(fmgp.kl_qstar(state)) == pytest.approx(0.0, abs=1e-14)


def test_kl_q_matches_explicit_form():
    rng = np.random.default_rng(3)
    state = _regression_state(rng)
    k_beta = inducing_gram(state.inducing, state.kernel)
    a_tilde = state.a_tilde
    a = -torch.linalg.inv(torch.linalg.inv(a_tilde) + k_beta)
    w = state.chol_a_tilde.T @ k_beta @ state.chol_a_tilde
    expected = 0.5 * torch.trace(k_beta @ a) + 0.5 * torch.logdet(torch.eye(6, dtype=torch.float64) + w)
    value = fmgp.kl_q(state)
    assert float(value) == pytest.approx(float(expected), rel=1e-9)
    assert float(value) >= 0


def test_kl_qstar_adds_mean_term():
    rng = np.random.default_rng(4)
    state = _regression_state(rng)
    k_beta = inducing_gram(state.inducing, state.kernel)
    a = state.qstar_coef
    gap = fmgp.kl_qstar(state) - fmgp.kl_q(state)
    assert float(gap) == pytest.approx(float(0.5 * a @ k_beta @ a), rel=1e-10)


def test_qstar_mean_is_kernel_expansion():
    rng = np.random.default_rng(5)
    state = _regression_state(rng)
    x = as_tensor(rng.standard_normal((7, 2)))
    expected = rbf_matrix(x, state.inducing.z, state.kernel) @ state.qstar_coef
    assert torch.allclose(fmgp.qstar_mean(state, x), expected)


def test_predict_copies_g_and_bounds_variance():
    rng = np.random.default_rng(6)
    state = _regression_state(rng)
    x = rng.standard_normal((30, 2))
    g = rng.standard_normal(30)
    predictive = fmgp.predict(state, x, g)
    assert predictive.mean is g
    assert np.all(predictive.variance >= 0)
    assert np.all(predictive.variance <= predictive.prior_variance)
    assert np.allclose(predictive.total_variance, predictive.variance + 0.1)


def test_predict_checks_row_counts():
    rng = np.random.default_rng(7)
    with pytest.raises(InputError):
        fmgp.predict(_regression_state(rng), rng.standard_normal((3, 2)), np.zeros(4))


def test_mode_mismatch():
    rng = np.random.default_rng(8)
    state = _classification_state(rng)
    with pytest.raises(ModeMismatch):
        fmgp.predictive_variance(state, as_tensor(rng.standard_normal((2, 2))))


def test_class_covariance_is_symmetric_and_contained():
    rng = np.random.default_rng(9)
    state = _classification_state(rng)
    x = as_tensor(rng.standard_normal((6, 2)))
    psi = as_tensor(0.5 * rng.standard_normal((6, 3)))
    cov = fmgp.predictive_cov_class(state, x, psi)
    assert cov.shape == (6, 3, 3)
    assert torch.allclose(cov, cov.transpose(-1, -2))
    assert torch.all(torch.linalg.eigvalsh(cov) > -1e-12)
    prior = torch.diagonal(fmgp.prior_class_block(psi, state.kernel), dim1=-2, dim2=-1)
    assert torch.all(torch.diagonal(cov, dim1=-2, dim2=-1) <= prior + 1e-12)


def test_class_probabilities_are_deterministic_distributions():
    rng = np.random.default_rng(10)
    state = _classification_state(rng)
    x = rng.standard_normal((8, 2))
    psi = 0.5 * rng.standard_normal((8, 3))
    g = rng.standard_normal((8, 3))
    predictive = fmgp.predict(state, x, g, psi)
    assert predictive.mean is g
    first = fmgp.class_probabilities(predictive, samples=256, seed=3)
    second = fmgp.class_probabilities(predictive, samples=256, seed=3)
    assert np.array_equal(first, second)
    assert np.allclose(first.sum(axis=1), 1.0)
    entropy = predictive_entropy(first)
    assert np.all((entropy >= 0) & (entropy <= np.log(3) + 1e-12))


def test_class_probabilities_need_classification():
    rng = np.random.default_rng(11)
    predictive = fmgp.predict(_regression_state(rng), rng.standard_normal((2, 2)), np.zeros(2))
    with pytest.raises(ModeMismatch):
        fmgp.class_probabilities(predictive, samples=4, seed=0)


def test_mean_approximation_error_is_small_for_kernel_expansions():
    rng = np.random.default_rng(12)
    kernel = RbfParams.create(1.0, [0.5])
    z = np.linspace(-3, 3, 15)[:, None]
    coefficients = rng.standard_normal(15)
    grid = np.linspace(-3, 3, 200)[:, None]
    g = (rbf_matrix(as_tensor(grid), as_tensor(z), kernel) @ as_tensor(coefficients)).numpy()
    approximation = fmgp.mean_approx_error(g, grid, z, kernel)
    assert approximation.sup_error < 1e-3


def test_state_rejects_mismatched_parameters():
    rng = np.random.default_rng(13)
    state = _regression_state(rng)
    with pytest.raises(InputError):
        fmgp.VariationalState(
            inducing=state.inducing, chol_a_tilde=torch.eye(3, dtype=torch.float64),
            qstar_coef=state.qstar_coef, kernel=state.kernel, noise=state.noise,
        )


def _joint_class_covariance(state, x, psi):
    """C x C predictive block from the full joint over (test classes, inducing points)"""
    kernel, inducing = state.kernel, state.inducing
    c, m = kernel.num_classes, inducing.count
    test = [(x, psi, k) for k in range(c)]
    points = [(inducing.z[i], inducing.psi[i], int(inducing.labels[i])) for i in range(m)]

    def block(left, right, same):
        return torch.stack([
            torch.stack([
                class_kernel(*a, *b, kernel, same_point=same(i, j)) for j, b in enumerate(right)
            ])
            for i, a in enumerate(left)
        ])

    k_tt = block(test, test, lambda i, j: True)
    k_tz = block(test, points, lambda i, j: False)
    k_zz = block(points, points, lambda i, j: i == j) + torch.linalg.inv(state.a_tilde)
    return k_tt - k_tz @ torch.linalg.solve(k_zz, k_tz.T)


def test_class_covariance_matches_joint_schur_complement():
    rng = np.random.default_rng(14)
    for _ in range(3):
        state = _classification_state(rng)
        x = as_tensor(rng.standard_normal((4, 2)))
        psi = as_tensor(0.5 * rng.standard_normal((4, 3)))
        cov = fmgp.predictive_cov_class(state, x, psi)
        for i in range(4):
            expected = _joint_class_covariance(state, x[i], psi[i])
            assert torch.allclose(cov[i], expected, rtol=1e-8, atol=1e-10)


def _scalar_state(a):
    return fmgp.VariationalState(
        inducing=InducingPoints(z=torch.zeros(1, 1, dtype=torch.float64)),
        chol_a_tilde=torch.ones(1, 1, dtype=torch.float64),
        qstar_coef=as_tensor([a]),
        kernel=RbfParams.create(1.0, [1.0]),
        noise=as_tensor(0.1),
    )


def test_kl_scalar_values():
    state = _scalar_state(2.0)
    assert float(fmgp.kl_q(state)) == pytest.approx(-0.25 + 0.5 * math.log(2.0), abs=1e-12)
    assert float(fmgp.kl_q(state)) == pytest.approx(0.09657, abs=1e-5)
    assert float(fmgp.kl_qstar(state)) == pytest.approx(2.09657, abs=1e-5)


def test_kl_terms_are_non_negative_and_ordered():
    rng = np.random.default_rng(15)
    for _ in range(1000):
        m = int(rng.integers(1, 6))
        state = _regression_state(rng, m=m, scale=float(rng.uniform(0.01, 3.0)))
        kl_q, kl_qstar = float(fmgp.kl_q(state)), float(fmgp.kl_qstar(state))
        assert kl_q >= -1e-10
        assert kl_qstar >= kl_q - 1e-10


def test_mean_approximation_of_a_constant():
    kernel = RbfParams.create(1.0, [0.05])
    grid = np.linspace(0, 1, 200)[:, None]
    z = np.linspace(0, 1, 64)[:, None]
    approximation = fmgp.mean_approx_error(np.full(200, -2.5), grid, z, kernel)
    assert approximation.sup_error < 0.01 * 2.5


def test_mean_approximation_improves_on_nested_centers():
    kernel = RbfParams.create(1.0, [0.01])
    grid = np.linspace(0, 1, 501)[:, None]
    g = np.sin(2 * np.pi * grid[:, 0]) + 0.5 * grid[:, 0]
    errors = [
        fmgp.mean_approx_error(g, grid, np.linspace(0, 1, k)[:, None], kernel, ridge=1e-4).sup_error
        for k in (17, 33, 65, 129, 257)
    ]
    assert all(later <= earlier + 1e-10 for earlier, later in zip(errors, errors[1:]))


def test_mean_approximation_recovers_expansions_without_ridge_bias():
    rng = np.random.default_rng(16)
    kernel = RbfParams.create(1.0, [0.5])
    z = np.linspace(-3, 3, 8)[:, None]
    grid = np.linspace(-3, 3, 200)[:, None]
    g = (rbf_matrix(as_tensor(grid), as_tensor(z), kernel) @ as_tensor(rng.standard_normal(8))).numpy()
    assert fmgp.mean_approx_error(g, grid, z, kernel, ridge=1e-12).sup_error < 1e-6


def test_mean_approximation_rejects_bad_inputs():
    kernel = RbfParams.create(1.0, [0.5])
    with pytest.raises(InputError):
        fmgp.mean_approx_error(np.zeros(3), np.zeros((4, 1)), np.zeros((2, 1)), kernel)
    with pytest.raises(InputError):
        fmgp.mean_approx_error(np.zeros(3), np.zeros((3, 1)), np.zeros((2, 1)), kernel, ridge=0.0)
