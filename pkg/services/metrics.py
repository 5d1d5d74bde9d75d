"""
Evaluation suite: NLL, CRPS and CQM for regression; NLL, ECE, Brier and
entropy-based OOD AUC for classification.

All functions are pure and take numpy arrays.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import special, stats
from scipy.integrate import trapezoid
from sklearn.metrics import roc_auc_score

from errors import DomainError, EmptyInput, InputError
from models.reports import ClassificationEval, RegressionEval

logger = logging.getLogger(__name__)

CQM_GRID_POINTS = 101
ECE_BINS = 15
PROB_FLOOR = 1e-12
ROW_SUM_TOLERANCE = 1e-6


def gaussian_quantile(p):
    """Inverse standard-normal CDF on (0, 1)"""
    values = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(values)) or np.any(values <= 0.0) or np.any(values >= 1.0):
        raise DomainError("quantile needs 0 < p < 1")
    result = special.ndtri(values)
    return float(result) if result.ndim == 0 else result


def crps_gaussian(y, mean, sd):
    """Closed-form CRPS of N(mean, sd^2) at y"""
    y, mean, sd = (np.asarray(v, dtype=np.float64) for v in (y, mean, sd))
    if np.any(sd <= 0):
        raise DomainError("CRPS needs sd > 0")
    z = (y - mean) / sd
    value = sd * (z * (2.0 * stats.norm.cdf(z) - 1.0) + 2.0 * stats.norm.pdf(z) - 1.0 / np.sqrt(np.pi))
    return float(value) if value.ndim == 0 else value


def _check_pairs(y, mean, sd):
    y, mean, sd = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (y, mean, sd))
    if y.size == 0:
        raise EmptyInput("no test points")
    if not (y.shape == mean.shape == sd.shape):
        raise InputError("targets, means and sds differ in length")
    if np.any(sd <= 0):
        raise DomainError("predictive sds must be positive")
    return y, mean, sd


def coverage_curve(y, mean, sd, grid_points: int = CQM_GRID_POINTS) -> Tuple[np.ndarray, np.ndarray]:
    """Empirical coverage of the centered intervals at each level on a uniform grid.

    A point is covered at level alpha when its own centered level
    erf(|z|/sqrt 2) is strictly below alpha; boundary ties are not covered.
    """
    y, mean, sd = _check_pairs(y, mean, sd)
    levels = np.linspace(0.0, 1.0, grid_points)
    point_levels = special.erf(np.abs(y - mean) / sd / np.sqrt(2.0))
    coverage = (point_levels[None, :] < levels[:, None]).mean(axis=1)
    return levels, coverage


def cqm(y, mean, sd) -> float:
    """Integral over alpha of |coverage(alpha) - alpha|, trapezoid rule"""
    levels, coverage = coverage_curve(y, mean, sd)
    return float(trapezoid(np.abs(coverage - levels), levels))


def nll_regression(y, mean, variance, noise: float = 0.0) -> float:
    """-mean log N(y | mean, noise + variance)"""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise EmptyInput("no test points")
    total = np.asarray(variance, dtype=np.float64) + noise
    if np.any(total <= 0):
        raise DomainError("predictive variance must be positive")
    return float(-np.mean(stats.norm.logpdf(y, loc=mean, scale=np.sqrt(total))))


def _check_probabilities(labels, probs):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    probs = np.asarray(probs, dtype=np.float64)
    if labels.size == 0:
        raise EmptyInput("no test points")
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise InputError("probabilities must be N x C and match the labels")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE):
        raise DomainError("probability rows must sum to 1")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise InputError("labels outside the class range")
    return labels, probs


def nll_classification(labels, probs) -> Tuple[float, int]:
    """-mean log p(y|x), probabilities clamped at 1e-12; returns the clamp count"""
    labels, probs = _check_probabilities(labels, probs)
    picked = probs[np.arange(labels.size), labels]
    clamped = int(np.sum(picked < PROB_FLOOR))
    if clamped:
        logger.warning(f"{clamped} probabilities clamped at {PROB_FLOOR:g} in NLL")
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR)))), clamped


def ece(labels, probs, bins: int = ECE_BINS) -> float:
    """Equal-width bins on max probability, weighted |accuracy - confidence|"""
    labels, probs = _check_probabilities(labels, probs)
    confidence = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    # bins are (lo, hi]; confidence 0 joins the first bin
    index = np.clip(np.ceil(confidence * bins).astype(np.int64) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        in_bin = index == b
        count = in_bin.sum()
        if count:
            total += count / labels.size * abs(correct[in_bin].mean() - confidence[in_bin].mean())
    return float(total)


def brier(labels, probs) -> float:
    labels, probs = _check_probabilities(labels, probs)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(np.mean(((probs - onehot) ** 2).sum(axis=1)))


def predictive_entropy(probs) -> np.ndarray:
    """Entropy of each probability row, with 0 log 0 = 0"""
    return special.entr(np.asarray(probs, dtype=np.float64)).sum(axis=-1)


def ood_auc(in_entropies, out_entropies) -> float:
    """Rank AUC of entropy as an out-of-distribution score; ties count 1/2"""
    inside = np.asarray(in_entropies, dtype=np.float64).reshape(-1)
    outside = np.asarray(out_entropies, dtype=np.float64).reshape(-1)
    if inside.size == 0 or outside.size == 0:
        raise EmptyInput("OOD AUC needs both in- and out-of-distribution points")
    scores = np.concatenate([inside, outside])
    targets = np.concatenate([np.zeros(inside.size), np.ones(outside.size)])
    return float(roc_auc_score(targets, scores))


def evaluate_regression(y, mean, variance, noise: float) -> RegressionEval:
    """Regression suite on the noisy predictive N(mean, noise + variance)"""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    total = np.asarray(variance, dtype=np.float64) + noise
    sd = np.sqrt(total)
    return RegressionEval(
        nll=nll_regression(y, mean, variance, noise),
        crps=float(np.mean(crps_gaussian(y, mean, sd))),
        cqm=cqm(y, mean, sd),
        n=y.size,
    )


def evaluate_classification(labels, probs, ood_probs: Optional[np.ndarray] = None) -> ClassificationEval:
    labels, probs = _check_probabilities(labels, probs)
    nll, clamped = nll_classification(labels, probs)
    auc = None
    if ood_probs is not None:
        auc = ood_auc(predictive_entropy(probs), predictive_entropy(ood_probs))
    return ClassificationEval(
        nll=nll,
        ece=ece(labels, probs),
        brier=brier(labels, probs),
        accuracy=float(np.mean(probs.argmax(axis=1) == labels)),
        ood_auc=auc,
        nll_clamped=clamped,
        n=labels.size,
    )


__all__ = [
    'CQM_GRID_POINTS', 'ECE_BINS', 'gaussian_quantile', 'crps_gaussian', 'coverage_curve', 'cqm',
    'nll_regression', 'nll_classification', 'ece', 'brier', 'predictive_entropy', 'ood_auc',
    'evaluate_regression', 'evaluate_classification'
]
