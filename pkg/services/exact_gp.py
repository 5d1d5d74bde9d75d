"""
Exact GP regression posterior in dual coordinates.

Serves as the brute-force oracle for the fixed-mean model and as the
baseline of the synthetic figure. Cubic in N, so capped.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import torch

from errors import InputError

from .kernels import RbfParams, kernel_diag, rbf_matrix
from .numkit import (
    AdamState, CholFactor, ParamVector, adam_step, as_tensor, chol_solve, cholesky,
    logdet, tri_solve, value_and_grad
)

logger = logging.getLogger(__name__)

EXACT_GP_MAX_POINTS = 5000


@dataclass(frozen=True)
class ExactGPState:
    x: torch.Tensor
    weights: torch.Tensor  # (K + s2 I)^{-1} y
    factor: CholFactor  # of K + s2 I
    kernel: RbfParams
    noise: torch.Tensor


def _system(x: torch.Tensor, kernel: RbfParams, noise: torch.Tensor) -> CholFactor:
    n = x.shape[0]
    k = rbf_matrix(x, x, kernel)
    return cholesky(k + noise * torch.eye(n, dtype=k.dtype))


def fit_exact(x, y, kernel: RbfParams, noise) -> ExactGPState:
    """Factor K(X,X) + s2 I and store the dual weights"""
    x = as_tensor(x)
    y = as_tensor(y).reshape(-1)
    noise = as_tensor(noise).reshape(())
    if x.dim() == 1:
        x = x[:, None]
    if x.shape[0] > EXACT_GP_MAX_POINTS:
        raise InputError(
            "exact GP is an oracle; too many points",
            detail={"N": x.shape[0], "cap": EXACT_GP_MAX_POINTS},
        )
    if x.shape[0] != y.shape[0]:
        raise InputError("x and y row counts differ")
    if not torch.isfinite(y).all():
        raise InputError("targets must be finite")
    if noise <= 0:
        raise InputError("noise variance must be positive")

    factor = _system(x, kernel, noise)
    weights = chol_solve(factor, y)
    return ExactGPState(x=x, weights=weights, factor=factor, kernel=kernel, noise=noise)


def predict_exact(state: ExactGPState, x_star) -> Tuple[torch.Tensor, torch.Tensor]:
    """Posterior mean k*^T weights and variance K** - k*^T (K+s2 I)^{-1} k*"""
    x_star = as_tensor(x_star)
    if x_star.dim() == 1:
        x_star = x_star[None, :] if x_star.shape[0] == state.kernel.input_dim else x_star[:, None]
    k_star = rbf_matrix(state.x, x_star, state.kernel)  # N x N*
    mean = k_star.T @ state.weights
    v = tri_solve(state.factor, k_star)
    variance = kernel_diag(x_star, state.kernel) - (v ** 2).sum(0)
    return mean, variance


def log_marginal_likelihood(state: ExactGPState, y) -> torch.Tensor:
    y = as_tensor(y).reshape(-1)
    n = y.shape[0]
    return (
        -0.5 * y @ state.weights
        - 0.5 * logdet(state.factor)
        - 0.5 * n * math.log(2.0 * math.pi)
    )


def optimize_hyperparameters(
    x, y, kernel: RbfParams, noise: float, steps: int = 300, lr: float = 0.05
) -> Tuple[RbfParams, torch.Tensor]:
    """Maximize the log marginal likelihood over (alpha, l, s2) in log-space"""
    x = as_tensor(x)
    if x.dim() == 1:
        x = x[:, None]
    y = as_tensor(y).reshape(-1)
    params = ParamVector.pack(
        {"amplitude": kernel.amplitude, "lengthscales": kernel.lengthscales, "noise": as_tensor(noise)},
        positive=("amplitude", "lengthscales", "noise"),
    )

    def objective(flat):
        hyper = RbfParams(params.read("amplitude", flat), params.read("lengthscales", flat))
        state = fit_exact(x, y, hyper, params.read("noise", flat))
        return log_marginal_likelihood(state, y)

    adam = AdamState(params.values, maximize=True, lr=lr)
    value = float("nan")
    for _ in range(steps):
        value, gradient = value_and_grad(objective, adam.params)
        adam_step(adam, gradient, lr=lr)
    logger.info(f"exact GP hyper-parameters fitted: lml={value:.4f} after {steps} steps")

    final = params.with_values(adam.params)
    fitted = RbfParams(final.read("amplitude").detach(), final.read("lengthscales").detach())
    return fitted, final.read("noise").detach()


__all__ = [
    'EXACT_GP_MAX_POINTS', 'ExactGPState', 'fit_exact', 'predict_exact',
    'log_marginal_likelihood', 'optimize_hyperparameters'
]
