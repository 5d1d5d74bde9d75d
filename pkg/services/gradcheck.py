"""
Finite-difference verification of the gradient contract.

Every loss and KL term, and the exact-GP evidence, is differentiated twice
at small random instances: once by the recorded tape and once by central
differences per parameter block. Classification losses reuse one fixed
draw of the MC noise for every evaluation.
"""

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np
import torch

from models.bundle import BundleMode, PredictionBundle
from models.fit import FitConfig, Objective
from models.reports import GradcheckReport, GradcheckResult

from . import fmgp, training
from .fmgp import VariationalState
from .exact_gp import fit_exact, log_marginal_likelihood
from .kernels import ClassKernelParams, InducingPoints, RbfParams
from .numkit import DTYPE, ParamVector, as_tensor, value_and_grad

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_REPEATS = 20
STEP_SCALE = 1e-5
NORM_FLOOR = 1e-8

_N, _D, _M, _C, _E, _BATCH, _SAMPLES = 8, 2, 4, 3, 2, 5, 16


def _random_lower(rng: np.random.Generator, size: int) -> torch.Tensor:
    lower = np.tril(0.3 * rng.standard_normal((size, size)), -1) + np.diag(rng.uniform(0.5, 1.5, size))
    return as_tensor(lower)


def _regression_instance(rng: np.random.Generator) -> Tuple[VariationalState, PredictionBundle]:
    x = rng.standard_normal((_N, _D))
    g = rng.standard_normal(_N)
    bundle = PredictionBundle(
        mode=BundleMode.REGRESSION, x=x, g=g, y=g + 0.3 * rng.standard_normal(_N)
    )
    state = VariationalState(
        inducing=InducingPoints(z=as_tensor(rng.standard_normal((_M, _D)))),
        chol_a_tilde=_random_lower(rng, _M),
        qstar_coef=as_tensor(0.5 * rng.standard_normal(_M)),
        kernel=RbfParams.create(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0, _D)),
        noise=as_tensor(rng.uniform(0.1, 0.5)),
    )
    return state, bundle


def _classification_instance(rng: np.random.Generator) -> Tuple[VariationalState, PredictionBundle]:
    x = rng.standard_normal((_N, _D))
    psi = 0.5 * rng.standard_normal((_N, _E))
    bundle = PredictionBundle(
        mode=BundleMode.CLASSIFICATION, x=x, psi=psi, g=rng.standard_normal((_N, _C)),
        labels=rng.integers(0, _C, _N),
    )
    inducing = InducingPoints(
        z=as_tensor(rng.standard_normal((_M, _D))),
        psi=as_tensor(0.5 * rng.standard_normal((_M, _E))),
        labels=torch.as_tensor(rng.integers(0, _C, _M), dtype=torch.long),
    )
    state = VariationalState(
        inducing=inducing,
        chol_a_tilde=_random_lower(rng, _M),
        qstar_coef=as_tensor(0.5 * rng.standard_normal(_M)),
        kernel=ClassKernelParams(
            rbf=RbfParams.create(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0, _D)),
            b_chol=_random_lower(rng, _C),
        ),
    )
    return state, bundle


def _cases(
    layout: training.StateLayout, bundle: PredictionBundle, batch: np.ndarray, noise
) -> Dict[str, Callable[[torch.Tensor], torch.Tensor]]:
    prefix = bundle.mode
    cases = {}
    for objective in (Objective.PREDICTIVE, Objective.ELBO):
        config = FitConfig(
            mode=bundle.mode, m_beta=_M, batch_size=batch.size, mc_train=_SAMPLES, objective=objective,
        )
        cases[f"{prefix}/{objective.value}"] = (
            lambda flat, config=config: training.minibatch_objective(
                layout.unpack(flat), bundle, batch, config, noise=noise
            )
        )
    cases[f"{prefix}/kl_q"] = lambda flat: fmgp.kl_q(layout.unpack(flat))
    cases[f"{prefix}/kl_qstar"] = lambda flat: fmgp.kl_qstar(layout.unpack(flat))
    return cases


def _exact_case(
    state: VariationalState, bundle: PredictionBundle
) -> Tuple[ParamVector, Callable[[torch.Tensor], torch.Tensor]]:
    """Exact-GP log marginal likelihood over log-amplitude, log-length-scales and log-noise"""
    params = ParamVector.pack(
        {"amplitude": state.kernel.amplitude, "lengthscales": state.kernel.lengthscales, "noise": state.noise},
        positive=("amplitude", "lengthscales", "noise"),
    )

    def objective(flat):
        kernel = RbfParams(params.read("amplitude", flat), params.read("lengthscales", flat))
        fitted = fit_exact(bundle.x, bundle.y, kernel, params.read("noise", flat))
        return log_marginal_likelihood(fitted, bundle.y)

    return params, objective


def block_errors(
    objective: Callable[[torch.Tensor], torch.Tensor], params: ParamVector
) -> Dict[str, float]:
    """Relative error ||fd - ad|| / max(||fd||, ||ad||, 1e-8) per parameter block"""
    flat = params.values
    _, analytic = value_and_grad(objective, flat)
    errors = {}
    with torch.no_grad():
        for name, block in params.blocks.items():
            if block.stop == block.start:
                continue
            numeric = torch.zeros(block.stop - block.start, dtype=DTYPE)
            for k, i in enumerate(range(block.start, block.stop)):
                h = STEP_SCALE * (1.0 + abs(float(flat[i])))
                up, down = flat.clone(), flat.clone()
                up[i] += h
                down[i] -= h
                numeric[k] = (objective(up) - objective(down)) / (2.0 * h)
            auto = analytic[block.start:block.stop]
            scale = max(float(numeric.norm()), float(auto.norm()), NORM_FLOOR)
            errors[name] = float((numeric - auto).norm()) / scale
    return errors


def run_gradcheck(
    seed: int, repeats: int = DEFAULT_REPEATS, tolerance: float = DEFAULT_TOLERANCE
) -> GradcheckReport:
    """Worst error per (case, block) over the repeats"""
    worst: Dict[Tuple[str, str], float] = {}
    for repeat in range(repeats):
        rng = np.random.default_rng([seed, repeat])
        for build in (_regression_instance, _classification_instance):
            state, bundle = build(rng)
            layout = training.pack_state(state)
            batch = np.sort(rng.choice(_N, size=_BATCH, replace=False))
            noise = None
            if bundle.is_classification:
                generator = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 31)))
                noise = torch.randn(_SAMPLES, _BATCH, _C, generator=generator, dtype=DTYPE)
            cases = {
                case: (objective, layout.params)
                for case, objective in _cases(layout, bundle, batch, noise).items()
            }
            if not bundle.is_classification:
                params, objective = _exact_case(state, bundle)
                cases["exact/lml"] = (objective, params)
            for case, (objective, params) in cases.items():
                for block, error in block_errors(objective, params).items():
                    key = (case, block)
                    worst[key] = max(worst.get(key, 0.0), error)

    results: List[GradcheckResult] = [
        GradcheckResult(case=case, block=block, relative_error=error, passed=error < tolerance)
        for (case, block), error in worst.items()
    ]
    top = max(results, key=lambda r: r.relative_error)
    report = GradcheckReport(
        seed=seed,
        repeats=repeats,
        tolerance=tolerance,
        passed=all(r.passed for r in results),
        worst_relative_error=top.relative_error,
        worst_case=top.case,
        worst_block=top.block,
        results=results,
    )
    for failure in report.failures:
        logger.error(
            f"gradient check failed: {failure.case} block {failure.block} "
            f"relative error {failure.relative_error:.3e}"
        )
    return report


__all__ = ['DEFAULT_TOLERANCE', 'DEFAULT_REPEATS', 'block_errors', 'run_gradcheck']
