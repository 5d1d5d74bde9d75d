"""
Fixed-mean variational family.

The posterior mean is the black-box predictor g; only the covariance is
learned. It is parameterized by the Cholesky factor L of A~ (PSD), with

    A = -(A~^{-1} + K_beta)^{-1}
    K*(x,x) = K(x,x) - u^T (I + W)^{-1} u,   u = L^T k_x,  W = L^T K_beta L

so posterior variances never exceed prior variances and A~^{-1} is never
formed. KL terms are routed through the same Cholesky of I + W.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from errors import InputError, ModeMismatch

from .kernels import (
    ClassKernelParams, InducingPoints, KernelParams, RbfParams, cross_kernel, inducing_gram,
    kernel_diag, prior_class_block, rbf_matrix
)
from .numkit import DTYPE, CholFactor, as_tensor, cholesky, logdet, symmetrize, tri_solve

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 2048


class Mode:
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


@dataclass(frozen=True)
class VariationalState:
    inducing: InducingPoints
    chol_a_tilde: torch.Tensor  # L, with A~ = L L^T
    qstar_coef: torch.Tensor  # a, mean coefficients of the auxiliary measure q*
    kernel: KernelParams
    noise: Optional[torch.Tensor] = None  # regression only
    kernel_input: str = "features"

    def __post_init__(self):
        m = self.inducing.count
        if m < 1:
            raise InputError("M_beta must be at least 1")
        if tuple(self.chol_a_tilde.shape) != (m, m) or tuple(self.qstar_coef.shape) != (m,):
            raise InputError(
                "variational parameters do not match the inducing set",
                detail={"M": m, "L": tuple(self.chol_a_tilde.shape), "a": tuple(self.qstar_coef.shape)},
            )
        if self.is_classification != self.inducing.is_classification:
            raise InputError("kernel family and inducing points disagree on the mode")

    @property
    def is_classification(self) -> bool:
        return isinstance(self.kernel, ClassKernelParams)

    @property
    def mode(self) -> str:
        return Mode.CLASSIFICATION if self.is_classification else Mode.REGRESSION

    @property
    def m_beta(self) -> int:
        return self.inducing.count

    @property
    def a_tilde(self) -> torch.Tensor:
        return self.chol_a_tilde @ self.chol_a_tilde.T

    def detach(self) -> "VariationalState":
        """Copy with every tensor cut from the autograd tape"""
        inducing = InducingPoints(
            z=self.inducing.z.detach(),
            psi=None if self.inducing.psi is None else self.inducing.psi.detach(),
            labels=self.inducing.labels,
        )
        if isinstance(self.kernel, ClassKernelParams):
            kernel = ClassKernelParams(
                rbf=RbfParams(self.kernel.rbf.amplitude.detach(), self.kernel.rbf.lengthscales.detach()),
                b_chol=self.kernel.b_chol.detach(),
            )
        else:
            kernel = RbfParams(self.kernel.amplitude.detach(), self.kernel.lengthscales.detach())
        return VariationalState(
            inducing=inducing,
            chol_a_tilde=self.chol_a_tilde.detach(),
            qstar_coef=self.qstar_coef.detach(),
            kernel=kernel,
            noise=None if self.noise is None else self.noise.detach(),
            kernel_input=self.kernel_input,
        )


@dataclass(frozen=True)
class InducingSystem:
    """Per-state quantities shared by predictions and KL terms"""
    k_beta: torch.Tensor
    w: torch.Tensor
    factor: CholFactor  # of I + W


def inducing_system(state: VariationalState) -> InducingSystem:
    k_beta = inducing_gram(state.inducing, state.kernel)
    lower = state.chol_a_tilde
    w = symmetrize(lower.T @ k_beta @ lower)
    eye = torch.eye(state.m_beta, dtype=DTYPE)
    return InducingSystem(k_beta=k_beta, w=w, factor=cholesky(eye + w))


def _require(state: VariationalState, mode: str):
    if state.mode != mode:
        raise ModeMismatch(f"operation needs a {mode} state, got {state.mode}")


def predictive_variance(
    state: VariationalState, x: torch.Tensor, system: Optional[InducingSystem] = None
) -> torch.Tensor:
    """Latent predictive variance at each row of x (regression)"""
    _require(state, Mode.REGRESSION)
    system = system or inducing_system(state)
    k_x = cross_kernel(x, state.inducing, state.kernel)  # N x M
    u = state.chol_a_tilde.T @ k_x.T  # M x N
    s = tri_solve(system.factor, u)
    variance = kernel_diag(x, state.kernel) - (s ** 2).sum(0)
    return torch.clamp(variance, min=0.0)


def predictive_cov_class(
    state: VariationalState,
    x: torch.Tensor,
    psi_x: torch.Tensor,
    system: Optional[InducingSystem] = None,
) -> torch.Tensor:
    """Latent C x C covariance at each row of x (classification)"""
    _require(state, Mode.CLASSIFICATION)
    system = system or inducing_system(state)
    k_x = cross_kernel(x, state.inducing, state.kernel, psi_x=psi_x)  # N x C x M
    n, c, m = k_x.shape
    u = k_x @ state.chol_a_tilde  # rows are (L^T k_{x,c})^T
    s = tri_solve(system.factor, u.reshape(n * c, m).T)  # M x NC
    s = s.T.reshape(n, c, m)
    correction = s @ s.transpose(-1, -2)
    return symmetrize(prior_class_block(psi_x, state.kernel) - correction)


def kl_q(state: VariationalState, system: Optional[InducingSystem] = None) -> torch.Tensor:
    """Parameter-dependent KL of the fixed-mean measure to the prior.

    1/2 tr(K_beta A) + 1/2 log|I + W| = -1/2 tr(W (I+W)^{-1}) + 1/2 log|I + W|
    """
    system = system or inducing_system(state)
    half = tri_solve(system.factor, system.w)  # L_f^{-1} W
    whitened = tri_solve(system.factor, half.T)  # L_f^{-1} W L_f^{-T}
    trace = torch.diagonal(whitened).sum()
    return -0.5 * trace + 0.5 * logdet(system.factor)


def kl_qstar(state: VariationalState, system: Optional[InducingSystem] = None) -> torch.Tensor:
    """KL of the auxiliary measure: the variance part plus 1/2 a^T K_beta a"""
    system = system or inducing_system(state)
    a = state.qstar_coef
    return kl_q(state, system) + 0.5 * a @ system.k_beta @ a


def qstar_mean(
    state: VariationalState, x: torch.Tensor, psi_x: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """sum_m a_m K(x, z_m); N values in regression, N x C in classification"""
    k_x = cross_kernel(x, state.inducing, state.kernel, psi_x=psi_x)
    return k_x @ state.qstar_coef


@dataclass(frozen=True)
class MeanApproximation:
    coefficients: torch.Tensor
    sup_error: float


def mean_approx_error(
    g_values, grid_x, z_alpha, kernel: RbfParams, ridge: Optional[float] = None
) -> MeanApproximation:
    """Fit g on a grid of points with a kernel expansion over Z_alpha.

    Returns the coefficients and the largest absolute residual, the empirical
    error with which the expansion reproduces g over the grid.
    """
    g = as_tensor(g_values).reshape(-1)
    grid_x = as_tensor(grid_x)
    z_alpha = as_tensor(z_alpha)
    if grid_x.dim() == 1:
        grid_x = grid_x[:, None]
    if z_alpha.dim() == 1:
        z_alpha = z_alpha[:, None]
    if grid_x.shape[0] != g.shape[0]:
        raise InputError("grid and g values differ in length")
    if ridge is None:
        ridge = 1e-8 * float(kernel.amplitude)
    if ridge <= 0:
        raise InputError("ridge must be positive")

    with torch.no_grad():
        k = rbf_matrix(grid_x, z_alpha, kernel)
        m = z_alpha.shape[0]
        design = torch.cat([k, ridge ** 0.5 * torch.eye(m, dtype=DTYPE)])
        target = torch.cat([g, torch.zeros(m, dtype=DTYPE)])
        coefficients = torch.linalg.lstsq(design, target[:, None]).solution[:, 0]
        sup_error = float((g - k @ coefficients).abs().max())
    logger.debug(f"mean approximation: M_alpha={m}, ridge={ridge:.2e}, sup error={sup_error:.3e}")
    return MeanApproximation(coefficients=coefficients, sup_error=sup_error)


# Prediction

@dataclass(frozen=True)
class PosteriorPredictive:
    """Per-row predictive: mean copied from g, latent variance or covariance"""
    mean: np.ndarray
    prior_variance: np.ndarray
    variance: Optional[np.ndarray] = None  # regression, latent
    covariance: Optional[np.ndarray] = None  # classification, N x C x C latent
    noise: Optional[float] = None

    @property
    def is_classification(self) -> bool:
        return self.covariance is not None

    @property
    def total_variance(self) -> np.ndarray:
        """Variance of y: latent variance plus likelihood noise"""
        return self.variance + (self.noise or 0.0)


def kernel_inputs(state: VariationalState, x: np.ndarray, psi: Optional[np.ndarray]) -> torch.Tensor:
    """Rows fed to the RBF factor: raw features or embeddings"""
    if state.kernel_input == "embeddings":
        if psi is None:
            raise InputError("kernel input is set to embeddings but none were supplied")
        return as_tensor(psi)
    return as_tensor(x)


def predict(
    state: VariationalState,
    x: np.ndarray,
    g: np.ndarray,
    psi: Optional[np.ndarray] = None,
) -> PosteriorPredictive:
    """Predictive distribution at every row; the mean is g itself"""
    state = state.detach()
    inputs = kernel_inputs(state, x, psi)
    n = inputs.shape[0]
    if g.shape[0] != n:
        raise InputError("g and inputs differ in row count")

    with torch.no_grad():
        system = inducing_system(state)
        if state.is_classification:
            if psi is None:
                raise InputError("classification prediction needs embeddings")
            psi_t = as_tensor(psi)
            blocks = [
                predictive_cov_class(state, inputs[i:i + PREDICT_CHUNK], psi_t[i:i + PREDICT_CHUNK], system)
                for i in range(0, n, PREDICT_CHUNK)
            ]
            covariance = torch.cat(blocks).numpy() if blocks else np.zeros((0, 0, 0))
            prior = kernel_diag(inputs, state.kernel, psi_x=psi_t).numpy()
            return PosteriorPredictive(mean=g, prior_variance=prior, covariance=covariance)

        chunks = [
            predictive_variance(state, inputs[i:i + PREDICT_CHUNK], system)
            for i in range(0, n, PREDICT_CHUNK)
        ]
        variance = torch.cat(chunks).numpy() if chunks else np.zeros(0)
        prior = kernel_diag(inputs, state.kernel).numpy()
        return PosteriorPredictive(
            mean=g, prior_variance=prior, variance=variance, noise=float(state.noise)
        )


def class_probabilities(
    predictive: PosteriorPredictive, samples: int, seed: int
) -> np.ndarray:
    """Monte Carlo average of softmax over the latent Gaussian, fixed seed"""
    if not predictive.is_classification:
        raise ModeMismatch("class probabilities need a classification predictive")
    generator = torch.Generator().manual_seed(seed)
    mean = as_tensor(predictive.mean)
    covariance = as_tensor(predictive.covariance)
    n, c = mean.shape
    probs = []
    with torch.no_grad():
        for i in range(0, n, PREDICT_CHUNK):
            factor = cholesky(covariance[i:i + PREDICT_CHUNK])
            rows = factor.lower.shape[0]
            noise = torch.randn(samples, rows, c, generator=generator, dtype=DTYPE)
            logits = mean[i:i + rows] + torch.einsum("ncd,snd->snc", factor.lower, noise)
            probs.append(torch.softmax(logits, dim=-1).mean(0))
    return torch.cat(probs).numpy() if probs else np.zeros((0, c))


__all__ = [
    'Mode', 'VariationalState', 'InducingSystem', 'inducing_system', 'predictive_variance',
    'predictive_cov_class', 'kl_q', 'kl_qstar', 'qstar_mean', 'MeanApproximation',
    'mean_approx_error', 'PosteriorPredictive', 'kernel_inputs', 'predict', 'class_probabilities'
]
