"""
Likelihood expectations, the regularized mini-batch objective and the
fitting loop.

The objective maximized per step is

    (N/|B|) sum_b log E_q[p(y_b|f)]  - KL(q|p)
  + (N/|B|) sum_b log E_q*[p(y_b|f)] - KL(q*|p)

where q has mean g and q* has the kernel-expansion mean K(x, Z_beta) a.
Both measures share the covariance. With objective="elbo" the expectation
moves outside the log.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from scipy.spatial.distance import pdist

from errors import (
    ClassOutOfRange, ConfigError, EmptyInput, InputError, ModeMismatch, NonFiniteGradient,
    NotPositiveDefinite
)
from models.bundle import PredictionBundle
from models.fit import FitConfig, JitterEvent, KernelInput, Objective, TraceRecord

from .exact_gp import fit_exact, log_marginal_likelihood, optimize_hyperparameters
from .kernels import ClassKernelParams, InducingPoints, RbfParams, rbf_matrix
from .numkit import (
    DTYPE, AdamState, ParamVector, adam_step, as_tensor, chol_solve, cholesky, kmeans,
    lower_from_parts, split_lower, symmetrize, value_and_grad
)
from . import fmgp
from .fmgp import VariationalState

logger = logging.getLogger(__name__)

NOISE_FLOOR = 1e-6
LENGTHSCALE_FLOOR = 1e-6

# exact-GP warm start of the regression kernel
WARM_START_POINTS = 500
WARM_START_STEPS = 100
WARM_START_LR = 0.05
LENGTHSCALE_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)

HYPER_BLOCKS = ("amplitude", "lengthscales", "noise", "b_diag", "b_offdiag")
INDUCING_BLOCKS = ("z", "z_psi")


# Likelihood expectations

def gaussian_log_expected_lik(y, mean, variance, noise) -> torch.Tensor:
    """log N(y | mean, noise + variance), elementwise"""
    y, mean, variance, noise = (as_tensor(v) for v in (y, mean, variance, noise))
    total = noise + variance
    return -0.5 * torch.log(2.0 * math.pi * total) - 0.5 * (y - mean) ** 2 / total


def gaussian_expected_log_lik(y, mean, variance, noise) -> torch.Tensor:
    """E_q[log N(y | f, noise)] = log N(y | mean, noise) - variance / (2 noise)"""
    y, mean, variance, noise = (as_tensor(v) for v in (y, mean, variance, noise))
    return (
        -0.5 * torch.log(2.0 * math.pi * noise)
        - 0.5 * (y - mean) ** 2 / noise
        - 0.5 * variance / noise
    )


def _latent_factor(cov: torch.Tensor) -> torch.Tensor:
    if not torch.any(cov):
        # point mass: no factorization needed
        return torch.zeros_like(cov)
    return cholesky(cov).lower


def _picked_log_softmax(labels, mean, cov, samples, generator, noise):
    labels = torch.as_tensor(labels, dtype=torch.long)
    mean = as_tensor(mean)
    cov = as_tensor(cov)
    single = mean.dim() == 1
    if single:
        labels, mean, cov = labels.reshape(1), mean[None], cov[None]
    n, c = mean.shape
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= c):
        raise ClassOutOfRange(f"labels outside [0, {c})")
    if noise is None:
        noise = torch.randn(samples, n, c, generator=generator, dtype=DTYPE)
    lower = _latent_factor(cov)
    logits = mean[None] + torch.einsum("ncd,snd->snc", lower, noise)
    log_probs = torch.log_softmax(logits, dim=-1)
    index = labels[None, :, None].expand(noise.shape[0], n, 1)
    return log_probs.gather(-1, index)[..., 0], single  # S x N


def categorical_log_expected_lik(
    labels, mean, cov, samples: int = 64,
    generator: Optional[torch.Generator] = None, noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """log((1/S) sum_s softmax(mean + L xi_s)_y), reparameterized through L.

    Accepts one point (C logits, C x C covariance) or a batch (N x C, N x C x C).
    Passing noise (S x N x C) fixes the draws.
    """
    picked, single = _picked_log_softmax(labels, mean, cov, samples, generator, noise)
    values = torch.logsumexp(picked, dim=0) - math.log(picked.shape[0])
    return values[0] if single else values


def categorical_expected_log_lik(
    labels, mean, cov, samples: int = 64,
    generator: Optional[torch.Generator] = None, noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """(1/S) sum_s log softmax(mean + L xi_s)_y"""
    picked, single = _picked_log_softmax(labels, mean, cov, samples, generator, noise)
    values = picked.mean(0)
    return values[0] if single else values


# Objective

@dataclass(frozen=True)
class ObjectiveTerms:
    value: torch.Tensor
    kl_q: torch.Tensor
    kl_qstar: torch.Tensor
    jitter: float


def _batch_inputs(state: VariationalState, bundle: PredictionBundle, batch: np.ndarray):
    psi = None if bundle.psi is None else bundle.psi[batch]
    inputs = fmgp.kernel_inputs(state, bundle.x[batch], psi)
    return inputs, (None if psi is None else as_tensor(psi))


def objective_terms(
    state: VariationalState,
    bundle: PredictionBundle,
    batch,
    config: FitConfig,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> ObjectiveTerms:
    """Every term of the mini-batch objective; noise fixes the MC draws (classification)"""
    batch = np.asarray(batch, dtype=np.int64)
    n = bundle.n_rows
    if batch.size == 0:
        raise EmptyInput("mini-batch is empty")
    if batch.min() < 0 or batch.max() >= n:
        raise InputError("batch indices outside the bundle", detail={"N": n})
    if state.is_classification != bundle.is_classification:
        raise ModeMismatch(f"{state.mode} state against a {bundle.mode} bundle")
    if not bundle.has_targets:
        raise InputError("training needs targets")

    scale = n / batch.size
    elbo = config.objective == Objective.ELBO
    system = fmgp.inducing_system(state)
    inputs, psi_b = _batch_inputs(state, bundle, batch)
    g_b = as_tensor(bundle.g[batch])
    jitter = system.factor.jitter

    if state.is_classification:
        cov = fmgp.predictive_cov_class(state, inputs, psi_b, system)
        labels = torch.as_tensor(bundle.labels[batch], dtype=torch.long)
        if noise is None:
            noise = torch.randn(config.mc_train, batch.size, cov.shape[-1], generator=generator, dtype=DTYPE)
        expectation = categorical_expected_log_lik if elbo else categorical_log_expected_lik
        data_q = expectation(labels, g_b, cov, noise=noise)
        data_qstar = None
        if config.use_qstar:
            data_qstar = expectation(labels, fmgp.qstar_mean(state, inputs, psi_b), cov, noise=noise)
    else:
        variance = fmgp.predictive_variance(state, inputs, system)
        y_b = as_tensor(bundle.y[batch])
        expectation = gaussian_expected_log_lik if elbo else gaussian_log_expected_lik
        data_q = expectation(y_b, g_b, variance, state.noise)
        data_qstar = None
        if config.use_qstar:
            data_qstar = expectation(y_b, fmgp.qstar_mean(state, inputs), variance, state.noise)

    kl_q = fmgp.kl_q(state, system)
    value = scale * data_q.sum() - kl_q
    kl_qstar = fmgp.kl_qstar(state, system)
    if data_qstar is not None:
        value = value + scale * data_qstar.sum() - kl_qstar
    return ObjectiveTerms(value=value, kl_q=kl_q, kl_qstar=kl_qstar, jitter=jitter)


def minibatch_objective(
    state: VariationalState,
    bundle: PredictionBundle,
    batch,
    config: FitConfig,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Value of the regularized objective on one batch, to be maximized"""
    return objective_terms(state, bundle, batch, config, noise=noise, generator=generator).value


# Parameter layout

@dataclass(frozen=True)
class StateLayout:
    """Maps a flat unconstrained vector to a VariationalState and back"""
    params: ParamVector
    labels: Optional[torch.Tensor]
    kernel_input: str

    @property
    def is_classification(self) -> bool:
        return self.labels is not None

    def unpack(self, flat: Optional[torch.Tensor] = None) -> VariationalState:
        p = self.params
        chol = lower_from_parts(p.read("chol_diag", flat), p.read("chol_offdiag", flat))
        rbf = RbfParams(p.read("amplitude", flat), p.read("lengthscales", flat))
        if self.is_classification:
            b_chol = lower_from_parts(p.read("b_diag", flat), p.read("b_offdiag", flat))
            return VariationalState(
                inducing=InducingPoints(z=p.read("z", flat), psi=p.read("z_psi", flat), labels=self.labels),
                chol_a_tilde=chol,
                qstar_coef=p.read("a", flat),
                kernel=ClassKernelParams(rbf=rbf, b_chol=b_chol),
                kernel_input=self.kernel_input,
            )
        return VariationalState(
            inducing=InducingPoints(z=p.read("z", flat)),
            chol_a_tilde=chol,
            qstar_coef=p.read("a", flat),
            kernel=rbf,
            noise=p.read("noise", flat),
            kernel_input=self.kernel_input,
        )

    def trainable_mask(self, config: FitConfig) -> torch.Tensor:
        frozen = set()
        if not config.train_inducing:
            frozen.update(INDUCING_BLOCKS)
        if not config.train_hyperparameters:
            frozen.update(HYPER_BLOCKS)
        names = [name for name in self.params.blocks if name not in frozen]
        return self.params.block_mask(names)


def _positive_diagonal(lower: torch.Tensor) -> torch.Tensor:
    """Same L L^T with a non-negative diagonal: flip the sign of columns"""
    signs = torch.where(torch.diagonal(lower) < 0, -1.0, 1.0).to(lower.dtype)
    return lower * signs[None, :]


def pack_state(state: VariationalState) -> StateLayout:
    """Flatten a state; positive quantities and both Cholesky diagonals go to log-space"""
    state = state.detach()
    chol_diag, chol_offdiag = split_lower(_positive_diagonal(state.chol_a_tilde))
    blocks = {
        "a": state.qstar_coef,
        "chol_diag": chol_diag,
        "chol_offdiag": chol_offdiag,
        "z": state.inducing.z,
    }
    positive = ["amplitude", "lengthscales", "chol_diag"]
    floors = {"lengthscales": LENGTHSCALE_FLOOR}
    if state.is_classification:
        b_diag, b_offdiag = split_lower(_positive_diagonal(state.kernel.b_chol))
        blocks.update({
            "z_psi": state.inducing.psi,
            "amplitude": state.kernel.rbf.amplitude,
            "lengthscales": state.kernel.rbf.lengthscales,
            "b_diag": b_diag,
            "b_offdiag": b_offdiag,
        })
        positive.append("b_diag")
    else:
        blocks.update({
            "amplitude": state.kernel.amplitude,
            "lengthscales": state.kernel.lengthscales,
            "noise": torch.clamp(state.noise, min=2.0 * NOISE_FLOOR),
        })
        positive.append("noise")
        floors["noise"] = NOISE_FLOOR
    blocks["lengthscales"] = torch.clamp(as_tensor(blocks["lengthscales"]), min=2.0 * LENGTHSCALE_FLOOR)
    params = ParamVector.pack(blocks, positive=positive, floors=floors)
    return StateLayout(params=params, labels=state.inducing.labels, kernel_input=state.kernel_input)


# Initialization

def residual_noise(g, y) -> float:
    """Sample variance (ddof=1) of y - g, floored; a single residual gives its square"""
    residuals = np.asarray(y, dtype=np.float64) - np.asarray(g, dtype=np.float64)
    if residuals.size == 0:
        raise EmptyInput("no residuals to estimate noise from")
    ddof = 1 if residuals.size > 1 else 0
    return max(float(np.var(residuals, ddof=ddof)), NOISE_FLOOR)


def _training_inputs(bundle: PredictionBundle, config: FitConfig) -> np.ndarray:
    if config.kernel_input == KernelInput.EMBEDDINGS:
        if bundle.psi is None:
            raise InputError("kernel input is set to embeddings but the bundle has none")
        return bundle.psi
    return bundle.x


def _subsample(n: int, size: int, seed: int) -> np.ndarray:
    if n <= size:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))


def median_lengthscales(inputs: np.ndarray, seed: int) -> np.ndarray:
    """Median squared pairwise difference per input dimension, on a subsample.

    The RBF divides squared distances by l, so l is on the squared scale.
    Degenerate dimensions fall back to 1.
    """
    x = inputs[_subsample(inputs.shape[0], WARM_START_POINTS, seed)]
    if x.shape[0] < 2:
        return np.ones(x.shape[1])
    medians = np.array([np.median(pdist(x[:, [j]], "sqeuclidean")) for j in range(x.shape[1])])
    return np.where(medians > 2.0 * LENGTHSCALE_FLOOR, medians, 1.0)


def warm_start_kernel(inputs: np.ndarray, y: np.ndarray, noise: float, seed: int) -> Tuple[RbfParams, float]:
    """Exact-GP evidence on a subsample: best length-scale on a grid, then Adam.

    Returns the kernel and the fitted observation noise of y.
    """
    rows = _subsample(inputs.shape[0], WARM_START_POINTS, seed)
    x, y = inputs[rows], np.asarray(y, dtype=np.float64)[rows]
    y_var = float(np.var(y))
    amplitude = y_var if y_var > NOISE_FLOOR else 1.0
    base = median_lengthscales(inputs, seed)

    best, best_lml = None, -math.inf
    with torch.no_grad():
        for factor in LENGTHSCALE_GRID:
            kernel = RbfParams.create(amplitude, base * factor)
            lml = float(log_marginal_likelihood(fit_exact(x, y, kernel, noise), y))
            if lml > best_lml:
                best, best_lml = kernel, lml
    kernel, fitted_noise = optimize_hyperparameters(
        x, y, best, noise=noise, steps=WARM_START_STEPS, lr=WARM_START_LR
    )
    logger.info(
        f"warm start on {rows.size} rows: amplitude={float(kernel.amplitude):.4g}, "
        f"lengthscales={kernel.lengthscales.tolist()}, noise={float(fitted_noise):.4g}"
    )
    return kernel, max(float(fitted_noise), NOISE_FLOOR)


def qstar_warm_start(inputs: np.ndarray, y: np.ndarray, centers: np.ndarray, kernel: RbfParams, noise: float) -> torch.Tensor:
    """Coefficients of K(X, Z) a ~ y penalized by noise * a^T K_beta a"""
    x, z = as_tensor(inputs), as_tensor(centers)
    with torch.no_grad():
        k_xz = rbf_matrix(x, z, kernel)
        system = symmetrize(k_xz.T @ k_xz + noise * rbf_matrix(z, z, kernel))
        return chol_solve(cholesky(system), k_xz.T @ as_tensor(y).reshape(-1))


def _regression_start(
    inputs: np.ndarray, bundle: PredictionBundle, centers: np.ndarray, noise: float, config: FitConfig
) -> Tuple[RbfParams, torch.Tensor]:
    """Kernel and q* coefficients for a regression fit"""
    m, d = centers.shape
    target_noise = noise
    if config.warm_start:
        try:
            kernel, target_noise = warm_start_kernel(inputs, bundle.y, noise, config.seed)
        except (NotPositiveDefinite, NonFiniteGradient) as e:
            logger.warning(f"warm start skipped: {e}")
            config = config.model_copy(update={"warm_start": False})
    if not config.warm_start:
        y_var = float(np.var(bundle.y))
        kernel = RbfParams.create(y_var if y_var > 0 else 1.0, median_lengthscales(inputs, config.seed))

    if config.init_amplitude is not None or config.init_lengthscale is not None:
        kernel = RbfParams.create(
            config.init_amplitude or float(kernel.amplitude),
            np.full(d, config.init_lengthscale) if config.init_lengthscale else kernel.lengthscales.numpy(),
        )
    if not config.warm_start:
        return kernel, torch.zeros(m, dtype=DTYPE)
    return kernel, qstar_warm_start(inputs, bundle.y, centers, kernel, target_noise)


def initial_state(bundle: PredictionBundle, config: FitConfig) -> VariationalState:
    """k-means inducing points, L = I, residual-variance noise.

    Regression with warm_start takes the kernel from the exact-GP evidence on
    a subsample and a from the penalized fit of y; otherwise a = 0 and the
    length-scales come from the median heuristic.
    """
    inputs = _training_inputs(bundle, config)
    n, d = inputs.shape
    m = config.m_beta
    if m > n:
        raise ConfigError("M_beta exceeds the number of training rows", detail={"M_beta": m, "N": n})
    chol = torch.eye(m, dtype=DTYPE)

    if bundle.is_classification:
        if bundle.psi is None:
            raise InputError("the class kernel needs embeddings psi")
        if config.init_lengthscale is not None:
            lengthscales = np.full(d, config.init_lengthscale)
        else:
            lengthscales = median_lengthscales(inputs, config.seed)
        centers = kmeans(np.concatenate([inputs, bundle.psi], axis=1), m, config.seed)
        rng = np.random.default_rng(config.seed)
        labels = torch.as_tensor(rng.integers(0, bundle.num_classes, size=m), dtype=torch.long)
        kernel = ClassKernelParams(
            rbf=RbfParams.create(config.init_amplitude or 1.0, lengthscales),
            b_chol=torch.eye(bundle.num_classes, dtype=DTYPE),
        )
        inducing = InducingPoints(
            z=as_tensor(centers[:, :d]), psi=as_tensor(centers[:, d:]), labels=labels
        )
        return VariationalState(
            inducing=inducing, chol_a_tilde=chol, qstar_coef=torch.zeros(m, dtype=DTYPE), kernel=kernel,
            kernel_input=config.kernel_input,
        )

    centers = kmeans(inputs, m, config.seed)
    noise = residual_noise(bundle.g, bundle.y)
    kernel, a = _regression_start(inputs, bundle, centers, noise, config)
    return VariationalState(
        inducing=InducingPoints(z=as_tensor(centers)),
        chol_a_tilde=chol,
        qstar_coef=a,
        kernel=kernel,
        noise=as_tensor(noise),
        kernel_input=config.kernel_input,
    )


# Fitting loop

def fit(
    bundle: PredictionBundle, config: FitConfig, init: Optional[VariationalState] = None
) -> Tuple[VariationalState, TraceRecord]:
    """Adam ascent on the mini-batch objective over every unfrozen block"""
    if bundle.mode != config.mode:
        raise ModeMismatch(f"bundle is {bundle.mode} but the configuration asks for {config.mode}")
    train = bundle.subset(bundle.training_rows())
    n = train.n_rows
    if n == 0:
        raise EmptyInput("bundle has no training rows")
    if not train.has_targets:
        raise InputError("training rows carry no targets")
    if config.batch_size > n:
        raise ConfigError(
            "batch size must not exceed the number of training rows",
            detail={"batch_size": config.batch_size, "N": n},
        )

    state = init if init is not None else initial_state(train, config)
    if state.is_classification != train.is_classification:
        raise ModeMismatch("initial state and bundle disagree on the mode")
    layout = pack_state(state)
    mask = layout.trainable_mask(config)

    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    adam = AdamState(layout.params.values, maximize=True, lr=config.learning_rate)
    trace = TraceRecord()
    logger.info(
        f"fitting {train.mode} FMGP: N={n}, M_beta={state.m_beta}, |B|={config.batch_size}, "
        f"steps={config.steps}, objective={config.objective}"
    )

    start = time.perf_counter()
    for step in range(config.steps):
        batch = np.sort(rng.choice(n, size=config.batch_size, replace=False))
        noise = None
        if train.is_classification:
            noise = torch.randn(
                config.mc_train, config.batch_size, train.num_classes, generator=generator, dtype=DTYPE
            )
        captured = {}

        def objective(flat):
            terms = objective_terms(layout.unpack(flat), train, batch, config, noise=noise)
            captured["terms"] = terms
            return terms.value

        try:
            value, gradient = value_and_grad(objective, adam.params)
            if not math.isfinite(value):
                raise NonFiniteGradient("objective is not finite")
        except NonFiniteGradient as e:
            trace.failed_step = step
            logger.error(f"minibatch_objective failed at step {step}: {e}")
            raise NonFiniteGradient(
                f"minibatch_objective: non-finite value or gradient at step {step}",
                step=step, detail=e.detail,
            ) from e
        except NotPositiveDefinite as e:
            trace.failed_step = step
            logger.error(f"minibatch_objective failed at step {step}: {e}")
            raise NotPositiveDefinite(
                f"minibatch_objective: factorization failed at step {step}", detail=e.detail
            ) from e

        terms = captured["terms"]
        adam_step(adam, gradient * mask, lr=config.learning_rate)
        trace.append(
            step=step,
            objective=value,
            kl_q=float(terms.kl_q.detach()),
            kl_qstar=float(terms.kl_qstar.detach()),
            wall_clock=time.perf_counter() - start,
        )
        if terms.jitter > 0:
            trace.jitter_events.append(JitterEvent(step=step, jitter=terms.jitter))
        if (step + 1) % config.log_every == 0:
            logger.info(f"step {step + 1}/{config.steps}: objective={value:.6g}, kl_q={trace.kl_q[-1]:.4g}")

    fitted = layout.unpack(adam.params.detach()).detach()
    logger.info(f"fit finished in {time.perf_counter() - start:.2f}s")
    return fitted, trace


__all__ = [
    'NOISE_FLOOR', 'gaussian_log_expected_lik', 'gaussian_expected_log_lik',
    'categorical_log_expected_lik', 'categorical_expected_log_lik', 'ObjectiveTerms',
    'objective_terms', 'minibatch_objective', 'StateLayout', 'pack_state', 'residual_noise',
    'median_lengthscales', 'warm_start_kernel', 'qstar_warm_start', 'initial_state', 'fit'
]
