"""
FMGP command-line front end

Commands: fit, predict, eval, figure1, gradcheck, synth.
Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 verification failure.
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from dotenv import dotenv_values
from pydantic import ValidationError
from scipy.special import softmax

from config import configure_numerics, get_settings, setup_logging
from errors import ConfigError, EmptyInput, FMGPError, InputError, ModeMismatch, VerificationError
from models.bundle import PredictionBundle, SplitTag
from models.fit import FitConfig, RunConfig
from models.reports import EvalReport, Timings
from services import bundle_io, fmgp, gradcheck, metrics, training
from services.exact_gp import predict_exact
from services.numkit import as_tensor

logger = logging.getLogger(__name__)

FIT_FIELDS = set(FitConfig.model_fields)
RUN_FIELDS = set(RunConfig.model_fields) - {"fit"}

FIGURE_GRID = (-6.0, 6.0, 241)
FIGURE_COLUMNS = ["x", "g", "fmgp_lower", "fmgp_upper", "exact_mean", "exact_lower", "exact_upper"]
FIGURE_DEFAULTS = {
    "m_beta": 20, "batch_size": 60, "steps": 2000, "learning_rate": 0.01, "init_lengthscale": 1.0, "seed": 0,
}


# Configuration

def _normalize(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def load_config_file(path: Optional[str]) -> Dict[str, str]:
    """KEY=VALUE file; keys are FitConfig or RunConfig field names"""
    if not path:
        return {}
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {_normalize(k): v for k, v in dotenv_values(path).items() if v is not None}
    unknown = sorted(set(values) - FIT_FIELDS - RUN_FIELDS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return values


def _describe(error: ValidationError, model) -> str:
    parts = []
    for item in error.errors():
        field = ".".join(str(p) for p in item["loc"])
        info = model.model_fields.get(str(item["loc"][0])) if item["loc"] else None
        hint = f" ({info.description})" if info is not None and info.description else ""
        parts.append(f"{field}: {item['msg']}{hint}")
    return "; ".join(parts)


def build_run_config(
    args: argparse.Namespace, default_mode: Optional[str] = None, defaults: Optional[dict] = None
) -> RunConfig:
    """Merge command defaults, the config file and the flags; flags win"""
    merged = dict(defaults or {})
    merged.update(load_config_file(getattr(args, "config", None)))
    for key, value in vars(args).items():
        if key in FIT_FIELDS | RUN_FIELDS and value is not None:
            merged[key] = value

    fit_values = {k: v for k, v in merged.items() if k in FIT_FIELDS}
    if default_mode is not None:
        fit_values.setdefault("mode", default_mode)
    try:
        fit_config = FitConfig(**fit_values)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_describe(e, FitConfig)}")
    try:
        return RunConfig(fit=fit_config, **{k: v for k, v in merged.items() if k in RUN_FIELDS})
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_describe(e, RunConfig)}")


def _require(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise ConfigError(f"--{flag} is required")
    return path


def _evaluation_rows(bundle: PredictionBundle) -> np.ndarray:
    """Test rows when tagged, otherwise every row"""
    if bundle.split is None:
        return np.arange(bundle.n_rows)
    return bundle.rows(SplitTag.TEST)


# Commands

def cmd_fit(args) -> int:
    bundle_path = args.bundle or load_config_file(args.config).get("bundle")
    if not bundle_path:
        raise ConfigError("--bundle is required")
    bundle = bundle_io.read_bundle(bundle_path)
    run = build_run_config(args, default_mode=bundle.mode)
    state_path = _require(run.state, "state")

    state, trace = training.fit(bundle, run.fit)
    train = bundle.subset(bundle.training_rows())
    map_noise = None if bundle.is_classification else training.residual_noise(train.g, train.y)
    bundle_io.save_state(state, run.fit, state_path, map_noise=map_noise)
    trace_path = run.trace or state_path.with_suffix(".trace.jsonl")
    bundle_io.write_trace(trace, trace_path, seed=run.fit.seed, timing=run.timing)
    logger.info(f"state written to {state_path}, trace to {trace_path}")
    print(bundle_io.file_digest(state_path))
    return 0


def _predict(state_file, bundle: PredictionBundle, rows: np.ndarray, mc_eval: int, seed: int):
    state = state_file.state
    if state.mode != bundle.mode:
        raise ModeMismatch(f"{state.mode} state against a {bundle.mode} bundle")
    subset = bundle.subset(rows)
    predictive = fmgp.predict(state, subset.x, subset.g, subset.psi)
    probabilities = None
    if predictive.is_classification:
        probabilities = fmgp.class_probabilities(predictive, mc_eval, seed)
    return subset, predictive, probabilities


def cmd_predict(args) -> int:
    run = build_run_config(args)
    state_file = bundle_io.load_state(_require(run.state, "state"))
    bundle = bundle_io.read_bundle(_require(run.bundle, "bundle"))
    seed = args.seed if args.seed is not None else state_file.meta.seed
    mc_eval = args.mc_eval or state_file.meta.fit_config.mc_eval

    _, predictive, probabilities = _predict(state_file, bundle, np.arange(bundle.n_rows), mc_eval, seed)
    entropy = None if probabilities is None else metrics.predictive_entropy(probabilities)
    bundle_io.write_predictions(
        predictive, _require(run.output, "output"), seed=seed,
        probabilities=probabilities, entropy=entropy,
        mc_samples=mc_eval if probabilities is not None else None,
    )
    logger.info(f"predictions for {bundle.n_rows} rows written to {run.output}")
    return 0


def cmd_eval(args) -> int:
    run = build_run_config(args)
    state_file = bundle_io.load_state(_require(run.state, "state"))
    bundle = bundle_io.read_bundle(_require(run.bundle, "bundle"))
    if not bundle.has_targets:
        raise InputError("evaluation needs targets")
    seed = args.seed if args.seed is not None else state_file.meta.seed
    mc_eval = args.mc_eval or state_file.meta.fit_config.mc_eval
    rows = _evaluation_rows(bundle)
    if rows.size == 0:
        raise EmptyInput("bundle has no evaluation rows")

    start = time.perf_counter()
    subset, predictive, probabilities = _predict(state_file, bundle, rows, mc_eval, seed)
    predict_seconds = time.perf_counter() - start

    if bundle.is_classification:
        ood_probs = ood_softmax = None
        if run.ood_bundle is not None:
            ood = bundle_io.read_bundle(run.ood_bundle)
            _, _, ood_probs = _predict(state_file, ood, _evaluation_rows(ood), mc_eval, seed)
            ood_softmax = softmax(ood.subset(_evaluation_rows(ood)).g, axis=1)
        fmgp_eval = metrics.evaluate_classification(subset.labels, probabilities, ood_probs)
        baseline = metrics.evaluate_classification(subset.labels, softmax(subset.g, axis=1), ood_softmax)
    else:
        fmgp_eval = metrics.evaluate_regression(subset.y, subset.g, predictive.variance, predictive.noise)
        baseline = None
        if state_file.meta.map_noise is not None:
            baseline = metrics.evaluate_regression(
                subset.y, subset.g, np.zeros(subset.n_rows), state_file.meta.map_noise
            )

    timings = Timings()
    if run.trace is not None:
        trace, header = bundle_io.read_trace(run.trace)
        if header.get("timing") and trace.wall_clock:
            timings.fit_seconds = trace.wall_clock[-1]
    if run.timing:
        timings.predict_seconds = predict_seconds

    report = EvalReport(
        format_version=bundle_io.FORMAT_VERSION,
        mode=bundle.mode,
        seed=seed,
        mc_samples=mc_eval if bundle.is_classification else None,
        fmgp=fmgp_eval.model_dump(exclude_none=True),
        baseline=None if baseline is None else baseline.model_dump(exclude_none=True),
        timings=timings,
    )
    text = bundle_io.canonical_json(report.model_dump(mode="json"))
    if run.output is not None:
        run.output.write_text(text + "\n")
        logger.info(f"report written to {run.output}")
    else:
        print(text)
    return 0


def figure1_table(seed: int, config: FitConfig) -> pd.DataFrame:
    """Grid predictions of FMGP and the exact GP on the cluster data"""
    bundle, predictor = bundle_io.synth_clusters_with_predictor(seed)
    state, _ = training.fit(bundle, config)

    grid = np.linspace(*FIGURE_GRID)[:, None]
    with torch.no_grad():
        exact_mean, exact_var = predict_exact(predictor, as_tensor(grid))
    # the exact-GP mean plays the pre-trained predictor on the grid
    exact_mean = exact_mean.numpy()
    g_grid = exact_mean.copy()
    predictive = fmgp.predict(state, grid, g_grid)
    fmgp_sd = np.sqrt(predictive.total_variance)
    exact_sd = np.sqrt(np.maximum(exact_var.numpy(), 0.0) + float(predictor.noise))
    return pd.DataFrame({
        "x": grid[:, 0],
        "g": g_grid,
        "fmgp_lower": g_grid - 2.0 * fmgp_sd,
        "fmgp_upper": g_grid + 2.0 * fmgp_sd,
        "exact_mean": exact_mean,
        "exact_lower": exact_mean - 2.0 * exact_sd,
        "exact_upper": exact_mean + 2.0 * exact_sd,
    }, columns=FIGURE_COLUMNS)


def cmd_figure1(args) -> int:
    run = build_run_config(args, defaults=FIGURE_DEFAULTS)
    seed = run.fit.seed
    table = figure1_table(seed, run.fit)
    output = _require(run.output, "output")
    with open(output, "w") as handle:
        handle.write(f"# fmgp figure1 seed={seed} format_version={bundle_io.FORMAT_VERSION}\n")
        table.to_csv(handle, index=False, float_format="%.17g")
    logger.info(f"figure data written to {output}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else get_settings().default_seed
    report = gradcheck.run_gradcheck(seed, repeats=args.repeats)
    text = bundle_io.canonical_json(report.model_dump(mode="json"))
    if args.output:
        Path(args.output).write_text(text + "\n")
    summary = f"worst relative error {report.worst_relative_error:.3e} ({report.worst_case}, block {report.worst_block})"
    if not report.passed:
        failing = ", ".join(f"{r.case}[{r.block}]" for r in report.failures)
        raise VerificationError(f"gradient check failed: {summary}; failing: {failing}")
    print(f"gradient check passed: {summary}")
    return 0


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else get_settings().default_seed
    if args.kind == "blobs":
        bundle = bundle_io.synth_blobs(seed, n_per_class=args.n or 100, shift=args.shift)
    else:
        bundle = bundle_io.synth_clusters(seed, n_per_cluster=args.n or 20, test_fraction=args.test_fraction)
    output = Path(args.output)
    if output.suffix == ".csv":
        bundle_io.write_bundle_csv(bundle, output)
    else:
        bundle_io.write_bundle(bundle, output)
    print(bundle_io.bundle_digest(bundle))
    return 0


# Parser

def _add_fit_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("fit settings")
    group.add_argument("--mode", choices=["regression", "classification"])
    group.add_argument("--m-beta", dest="m_beta", type=int)
    group.add_argument("--batch-size", dest="batch_size", type=int)
    group.add_argument("--steps", type=int)
    group.add_argument("--learning-rate", dest="learning_rate", type=float)
    group.add_argument("--mc-train", dest="mc_train", type=int)
    group.add_argument("--mc-eval", dest="mc_eval", type=int)
    group.add_argument("--seed", type=int)
    group.add_argument("--objective", choices=["predictive", "elbo"])
    group.add_argument("--no-qstar", dest="use_qstar", action="store_const", const=False)
    group.add_argument("--freeze-inducing", dest="train_inducing", action="store_const", const=False)
    group.add_argument("--freeze-hyperparameters", dest="train_hyperparameters", action="store_const", const=False)
    group.add_argument("--no-warm-start", dest="warm_start", action="store_const", const=False)
    group.add_argument("--kernel-input", dest="kernel_input", choices=["features", "embeddings"])
    group.add_argument("--init-amplitude", dest="init_amplitude", type=float)
    group.add_argument("--init-lengthscale", dest="init_lengthscale", type=float)
    group.add_argument("--log-every", dest="log_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmgp", description="Fixed-mean Gaussian process uncertainty for pre-trained predictors")
    parser.add_argument("--log-level", dest="log_level", help="Override FMGP_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="Fit the variational covariance to a bundle")
    fit.add_argument("--bundle")
    fit.add_argument("--state", help="Output state file")
    fit.add_argument("--trace", help="Output trace file (default: <state>.trace.jsonl)")
    fit.add_argument("--config", help="KEY=VALUE configuration file")
    fit.add_argument("--timing", action="store_const", const=True, help="Record wall-clock in the trace")
    _add_fit_flags(fit)
    fit.set_defaults(handler=cmd_fit)

    predict = sub.add_parser("predict", help="Write per-row predictive distributions")
    predict.add_argument("--state")
    predict.add_argument("--bundle")
    predict.add_argument("--output")
    predict.add_argument("--config")
    predict.add_argument("--seed", type=int)
    predict.add_argument("--mc-eval", dest="mc_eval", type=int)
    predict.set_defaults(handler=cmd_predict)

    evaluate = sub.add_parser("eval", help="Compute the metric report")
    evaluate.add_argument("--state")
    evaluate.add_argument("--bundle")
    evaluate.add_argument("--ood-bundle", dest="ood_bundle")
    evaluate.add_argument("--output")
    evaluate.add_argument("--trace", help="Timed trace to read the fit wall-clock from")
    evaluate.add_argument("--config")
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--mc-eval", dest="mc_eval", type=int)
    evaluate.add_argument("--timing", action="store_const", const=True)
    evaluate.set_defaults(handler=cmd_eval)

    figure = sub.add_parser("figure1", help="Write plot data for the 1-D cluster figure")
    figure.add_argument("--output")
    figure.add_argument("--config")
    _add_fit_flags(figure)
    figure.set_defaults(handler=cmd_figure1)

    check = sub.add_parser("gradcheck", help="Finite-difference check of every gradient")
    check.add_argument("--seed", type=int)
    check.add_argument("--repeats", type=int, default=gradcheck.DEFAULT_REPEATS)
    check.add_argument("--output", help="Optional JSON report")
    check.set_defaults(handler=cmd_gradcheck)

    synth = sub.add_parser("synth", help="Write a synthetic bundle")
    synth.add_argument("--kind", choices=["clusters", "blobs"], default="clusters")
    synth.add_argument("--seed", type=int)
    synth.add_argument("--n", type=int, help="Points per cluster or per class")
    synth.add_argument("--shift", type=float, default=0.0, help="Input shift (blobs)")
    synth.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.0)
    synth.add_argument("--output", required=True)
    synth.set_defaults(handler=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    configure_numerics()
    try:
        return args.handler(args)
    except FMGPError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
