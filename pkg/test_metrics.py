"""
Tests for the evaluation metrics
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import integrate
from scipy.stats import norm

from errors import DomainError, EmptyInput, InputError
from models.reports import ClassificationEval, RegressionEval
from services import metrics
from services.training import gaussian_log_expected_lik


# Quantile

def test_gaussian_quantile_examples():
    assert metrics.gaussian_quantile(0.5) == pytest.approx(0.0, abs=1e-15)
    assert metrics.gaussian_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)


def test_gaussian_quantile_inverts_cdf():
    grid = np.linspace(0.001, 0.999, 999)
    assert np.allclose(norm.cdf(metrics.gaussian_quantile(grid)), grid, rtol=0, atol=1e-9)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, float("nan")])
def test_gaussian_quantile_domain(p):
    with pytest.raises(DomainError):
        metrics.gaussian_quantile(p)


# CRPS

def test_crps_at_the_mean():
    assert metrics.crps_gaussian(0.0, 0.0, 1.0) == pytest.approx(0.2336949773, abs=1e-9)


@pytest.mark.parametrize("y,mean,sd", [(0.4, -0.3, 0.7), (3.0, 0.0, 1.2)])
def test_crps_matches_quadrature(y, mean, sd):
    below, _ = integrate.quad(lambda t: norm.cdf(t, mean, sd) ** 2, mean - 15 * sd, y)
    above, _ = integrate.quad(lambda t: (1 - norm.cdf(t, mean, sd)) ** 2, y, mean + 15 * sd)
    assert metrics.crps_gaussian(y, mean, sd) == pytest.approx(below + above, abs=1e-6)


def test_crps_scales_with_sd():
    assert metrics.crps_gaussian(3.0, 1.0, 2.0) == pytest.approx(2.0 * metrics.crps_gaussian(1.0, 0.0, 1.0), rel=1e-12)


def test_crps_far_tail_approaches_absolute_error():
    assert metrics.crps_gaussian(5.0, 0.0, 1.0) == pytest.approx(5.0 - 1 / math.sqrt(math.pi), abs=1e-3)


def test_crps_rejects_non_positive_sd():
    with pytest.raises(DomainError):
        metrics.crps_gaussian(0.0, 0.0, 0.0)


# CQM

def test_cqm_of_never_covering_model():
    y = np.full(50, 100.0)
    assert metrics.cqm(y, np.zeros(50), np.full(50, 1e-3)) == pytest.approx(0.5, abs=1e-6)


def test_cqm_of_calibrated_model_is_small():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(100000)
    assert metrics.cqm(y, np.zeros_like(y), np.ones_like(y)) < 0.01


def test_cqm_penalises_overconfidence():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(5000)
    calibrated = metrics.cqm(y, np.zeros_like(y), np.ones_like(y))
    narrow = metrics.cqm(y, np.zeros_like(y), np.full_like(y, 0.5))
    assert narrow > calibrated


def test_cqm_ignores_point_order():
    rng = np.random.default_rng(2)
    y, mean, sd = rng.standard_normal(300), rng.standard_normal(300), rng.uniform(0.5, 2.0, 300)
    order = rng.permutation(300)
    assert metrics.cqm(y, mean, sd) == metrics.cqm(y[order], mean[order], sd[order])


def test_coverage_curve_grid():
    levels, coverage = metrics.coverage_curve([0.0, 1.0], [0.0, 0.0], [1.0, 1.0])
    assert levels.size == metrics.CQM_GRID_POINTS
    assert coverage[0] == 0.0 and coverage[-1] == 1.0
    assert np.all(np.diff(coverage) >= 0)


def test_regression_metric_input_errors():
    with pytest.raises(EmptyInput):
        metrics.cqm([], [], [])
    with pytest.raises(InputError):
        metrics.cqm([0.0, 1.0], [0.0], [1.0, 1.0])


# NLL

def test_regression_nll_at_standard_normal_peak():
    assert metrics.nll_regression([0.0], [0.0], [1.0]) == pytest.approx(0.9189385, abs=1e-7)


def test_regression_nll_matches_objective_likelihood():
    rng = np.random.default_rng(3)
    y, mean, variance = rng.standard_normal(20), rng.standard_normal(20), rng.uniform(0.1, 1.0, 20)
    expected = -float(gaussian_log_expected_lik(y, mean, variance, 0.2).mean())
    assert metrics.nll_regression(y, mean, variance, 0.2) == pytest.approx(expected, rel=1e-12)


def test_classification_nll_saturation_and_clamping():
    value, clamped = metrics.nll_classification([0, 1], [[1.0, 0.0], [0.0, 1.0]])
    assert value == pytest.approx(0.0, abs=1e-15)
    assert clamped == 0
    value, clamped = metrics.nll_classification([0], [[0.0, 1.0]])
    assert value == pytest.approx(27.631021, abs=1e-6)
    assert clamped == 1


def test_probabilities_must_be_distributions():
    with pytest.raises(DomainError):
        metrics.brier([0], [[0.6, 0.6]])
    with pytest.raises(InputError):
        metrics.brier([2], [[0.5, 0.5]])


# ECE and Brier

def test_ece_examples():
    assert metrics.ece([0, 1], [[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.0)
    assert metrics.ece([0], [[0.8, 0.2]]) == pytest.approx(0.2)


def test_ece_of_calibrated_predictions_is_small():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.5, 1.0, 100000)
    labels = np.where(rng.uniform(size=p.size) < p, 0, 1)
    probs = np.stack([p, 1 - p], axis=1)
    assert metrics.ece(labels, probs) < 0.01


def test_brier_examples():
    assert metrics.brier([0, 1], [[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.0)
    assert metrics.brier([0], [[0.5, 0.5]]) == pytest.approx(0.5)
    assert metrics.brier([0], [[0.5, 0.3, 0.2]]) == pytest.approx(0.38)


# Entropy and OOD AUC

def test_entropy_of_uniform_and_one_hot():
    entropy = metrics.predictive_entropy([[0.25] * 4, [1.0, 0.0, 0.0, 0.0]])
    assert entropy.tolist() == pytest.approx([math.log(4), 0.0])


def test_ood_auc_examples():
    assert metrics.ood_auc([0.1, 0.2], [0.5, 0.9]) == 1.0
    assert metrics.ood_auc([0.3, 0.3], [0.3, 0.3]) == 0.5
    rng = np.random.default_rng(5)
    assert metrics.ood_auc(rng.standard_normal(5000), rng.standard_normal(5000)) == pytest.approx(0.5, abs=0.02)


def test_ood_auc_needs_both_sets():
    with pytest.raises(EmptyInput):
        metrics.ood_auc([], [0.5])


# Suites

def test_evaluate_regression_suite():
    report = metrics.evaluate_regression([0.0, 0.5], [0.0, 0.0], [0.5, 0.5], 0.5)
    assert report.n == 2
    assert report.crps > 0
    assert 0 <= report.cqm <= 0.5


def test_evaluate_classification_with_ood():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    ood = np.array([[0.5, 0.5], [0.6, 0.4]])
    report = metrics.evaluate_classification([0, 1], probs, ood_probs=ood)
    assert report.accuracy == 1.0
    assert report.ood_auc == 1.0
    assert metrics.evaluate_classification([0, 1], probs).ood_auc is None


def test_report_models_validate_ranges():
    with pytest.raises(ValidationError):
        RegressionEval(nll=0.1, crps=0.2, cqm=0.6, n=3)
    with pytest.raises(ValidationError):
        ClassificationEval(nll=0.1, ece=1.5, brier=0.2, accuracy=0.5, n=3)
