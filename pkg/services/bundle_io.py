"""
Persistence and synthetic data.

Container layout (little-endian regardless of host):

    FMGPB1\n
    <canonical JSON manifest>\n
    zero padding to an 8-byte boundary
    array payloads, each 8-byte aligned, offsets relative to the payload start

The manifest records every array's name, shape, dtype ("f64" | "i64") and
offset, the total payload size and free-form metadata. Readers reject bad
magic, malformed manifests, truncated payloads and trailing bytes.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import ValidationError
from sklearn.linear_model import LogisticRegression

from errors import FormatError, InputError, ShapeError
from models.bundle import BundleMode, PredictionBundle, SplitTag
from models.fit import FitConfig, JitterEvent, KernelConfig, KernelFamily, TraceRecord
from models.state import STATE_FORMAT_VERSION, StateMeta

from .exact_gp import ExactGPState, fit_exact, optimize_hyperparameters, predict_exact
from .fmgp import PosteriorPredictive, VariationalState
from .kernels import ClassKernelParams, InducingPoints, RbfParams
from .numkit import as_tensor

logger = logging.getLogger(__name__)

MAGIC = b"FMGPB1\n"
FORMAT_VERSION = 1
ALIGNMENT = 8

_DTYPES = {"f64": np.dtype("<f8"), "i64": np.dtype("<i8")}

PathLike = Union[str, Path]


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, shortest round-trip float text"""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _pad(size: int) -> int:
    return (-size) % ALIGNMENT


# Container

def encode_arrays(arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    entries = []
    payloads = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        if array.dtype.kind == "f":
            tag = "f64"
        elif array.dtype.kind in "iub":
            tag = "i64"
        else:
            raise InputError(f"array {name} has unsupported dtype {array.dtype}")
        data = np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": tag, "offset": offset})
        payloads.append(data + b"\0" * _pad(len(data)))
        offset += len(data) + _pad(len(data))

    manifest = canonical_json({
        "arrays": entries,
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "payload_bytes": offset,
    }).encode("utf-8") + b"\n"
    head = MAGIC + manifest
    return head + b"\0" * _pad(len(head)) + b"".join(payloads)


def decode_arrays(raw: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if not raw.startswith(MAGIC):
        raise FormatError("bad magic: not an FMGPB1 container")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise FormatError("manifest line is not terminated")
    try:
        manifest = json.loads(raw[len(MAGIC):end].decode("utf-8"))
        entries = manifest["arrays"]
        payload_bytes = int(manifest["payload_bytes"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed manifest: {e}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest.get('format_version')}")

    start = end + 1
    start += _pad(start)
    if len(raw) < start + payload_bytes:
        raise FormatError("truncated payload", detail={"expected": start + payload_bytes, "got": len(raw)})
    if len(raw) > start + payload_bytes:
        raise FormatError("trailing bytes after payload", detail={"extra": len(raw) - start - payload_bytes})

    arrays = {}
    for entry in entries:
        try:
            name, shape, dtype = entry["name"], tuple(int(s) for s in entry["shape"]), _DTYPES[entry["dtype"]]
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed array entry: {e}")
        if any(s < 0 for s in shape) or offset < 0 or offset % ALIGNMENT:
            raise FormatError(f"array {name} has an invalid shape or offset")
        size = math.prod(shape) * dtype.itemsize
        if offset + size > payload_bytes:
            raise FormatError(f"array {name} runs past the payload")
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=math.prod(shape), offset=start + offset).reshape(shape).copy()
    return arrays, manifest.get("meta", {})


def write_arrays(path: PathLike, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None):
    Path(path).write_bytes(encode_arrays(arrays, meta))


def read_arrays(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    return decode_arrays(path.read_bytes())


# Bundles

_BUNDLE_ARRAYS = ("x", "g", "y", "labels", "psi", "split")


def _bundle_payload(bundle: PredictionBundle) -> Tuple[Dict[str, np.ndarray], dict]:
    arrays = {name: getattr(bundle, name) for name in _BUNDLE_ARRAYS if getattr(bundle, name) is not None}
    meta = {"kind": "bundle", "mode": bundle.mode, "seed": bundle.seed}
    return arrays, meta


def _build_bundle(arrays: Dict[str, np.ndarray], meta: dict) -> PredictionBundle:
    if meta.get("kind") != "bundle":
        raise FormatError(f"expected a bundle, found {meta.get('kind')!r}")
    unknown = set(arrays) - set(_BUNDLE_ARRAYS)
    if unknown:
        raise FormatError(f"unknown bundle arrays: {sorted(unknown)}")
    try:
        return PredictionBundle(mode=meta.get("mode"), seed=meta.get("seed"), **arrays)
    except ValidationError as e:
        raise FormatError(f"invalid bundle: {e.errors()[0]['msg']}")


def write_bundle(bundle: PredictionBundle, path: PathLike):
    arrays, meta = _bundle_payload(bundle)
    write_arrays(path, arrays, meta)
    logger.debug(f"wrote {bundle.mode} bundle with {bundle.n_rows} rows to {path}")


def read_bundle(path: PathLike) -> PredictionBundle:
    arrays, meta = read_arrays(path)
    return _build_bundle(arrays, meta)


def bundle_digest(bundle: PredictionBundle) -> str:
    """sha256 over the encoded manifest and payload"""
    arrays, meta = _bundle_payload(bundle)
    return hashlib.sha256(encode_arrays(arrays, meta)).hexdigest()


def file_digest(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# CSV path

def _columns(prefix: str, frame: pd.DataFrame):
    names = [c for c in frame.columns if c.startswith(prefix + "_") and c[len(prefix) + 1:].isdigit()]
    return sorted(names, key=lambda c: int(c[len(prefix) + 1:]))


def write_bundle_csv(bundle: PredictionBundle, path: PathLike):
    """Column-tagged text export, 17 significant digits"""
    frame = {}
    for j in range(bundle.x.shape[1]):
        frame[f"x_{j}"] = bundle.x[:, j]
    if bundle.is_classification:
        for c in range(bundle.g.shape[1]):
            frame[f"g_{c}"] = bundle.g[:, c]
    else:
        frame["g"] = bundle.g
    if bundle.psi is not None:
        for j in range(bundle.psi.shape[1]):
            frame[f"psi_{j}"] = bundle.psi[:, j]
    if bundle.has_targets:
        frame["y"] = bundle.labels if bundle.is_classification else bundle.y
    if bundle.split is not None:
        frame["split"] = bundle.split
    pd.DataFrame(frame).to_csv(path, index=False, float_format="%.17g")


def read_bundle_csv(path: PathLike, seed: Optional[int] = None) -> PredictionBundle:
    """Mode follows the g columns: a single g is regression, g_0..g_{C-1} classification"""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"cannot parse CSV {path}: {e}")

    x_cols = _columns("x", frame)
    g_cols = _columns("g", frame)
    psi_cols = _columns("psi", frame)
    if not x_cols:
        raise FormatError("CSV has no x_i columns")
    if "g" in frame.columns and g_cols:
        raise FormatError("CSV mixes g and g_i columns")
    if "g" not in frame.columns and not g_cols:
        raise FormatError("CSV has no g column")
    known = set(x_cols) | set(g_cols) | set(psi_cols) | {"g", "y", "split"}
    unknown = [c for c in frame.columns if c not in known]
    if unknown:
        raise FormatError(f"unknown CSV columns: {unknown}")

    classification = bool(g_cols)
    fields = {
        "mode": BundleMode.CLASSIFICATION if classification else BundleMode.REGRESSION,
        "x": frame[x_cols].to_numpy(dtype=np.float64),
        "g": frame[g_cols].to_numpy(dtype=np.float64) if classification else frame["g"].to_numpy(dtype=np.float64),
        "seed": seed,
    }
    if psi_cols:
        fields["psi"] = frame[psi_cols].to_numpy(dtype=np.float64)
    if "y" in frame.columns:
        fields["labels" if classification else "y"] = frame["y"].to_numpy()
    if "split" in frame.columns:
        fields["split"] = frame["split"].to_numpy()
    try:
        return PredictionBundle(**fields)
    except ValidationError as e:
        raise FormatError(f"invalid CSV bundle: {e.errors()[0]['msg']}")


# Fitted state

@dataclass(frozen=True)
class StateFile:
    state: VariationalState
    meta: StateMeta


def kernel_config(state: VariationalState) -> KernelConfig:
    if isinstance(state.kernel, ClassKernelParams):
        rbf = state.kernel.rbf
        return KernelConfig(
            family=KernelFamily.CLASS, kernel_input=state.kernel_input,
            amplitude=float(rbf.amplitude), lengthscales=rbf.lengthscales.tolist(),
            b_matrix=state.kernel.b.tolist(),
        )
    return KernelConfig(
        family=KernelFamily.RBF, kernel_input=state.kernel_input,
        amplitude=float(state.kernel.amplitude), lengthscales=state.kernel.lengthscales.tolist(),
    )


def save_state(
    state: VariationalState, config: FitConfig, path: PathLike, map_noise: Optional[float] = None
) -> StateMeta:
    state = state.detach()
    arrays = {
        "z": state.inducing.z.numpy(),
        "chol_a_tilde": state.chol_a_tilde.numpy(),
        "qstar_coef": state.qstar_coef.numpy(),
        "amplitude": np.asarray(float(state.kernel.amplitude)),
    }
    if state.is_classification:
        arrays.update({
            "lengthscales": state.kernel.rbf.lengthscales.numpy(),
            "z_psi": state.inducing.psi.numpy(),
            "inducing_labels": state.inducing.labels.numpy().astype(np.int64),
            "b_chol": state.kernel.b_chol.numpy(),
        })
    else:
        arrays.update({
            "lengthscales": state.kernel.lengthscales.numpy(),
            "noise": np.asarray(float(state.noise)),
        })
    meta = StateMeta(
        seed=config.seed, m_beta=state.m_beta, kernel=kernel_config(state),
        fit_config=config, map_noise=map_noise,
    )
    write_arrays(path, arrays, {"kind": "state", **meta.model_dump(mode="json")})
    return meta


def load_state(path: PathLike) -> StateFile:
    arrays, meta = read_arrays(path)
    if meta.pop("kind", None) != "state":
        raise FormatError(f"{path} is not a state file")
    try:
        meta = StateMeta(**meta)
    except ValidationError as e:
        raise FormatError(f"invalid state metadata: {e.errors()[0]['msg']}")
    if meta.format_version != STATE_FORMAT_VERSION:
        raise FormatError(f"unsupported state version {meta.format_version}")

    try:
        amplitude = torch.as_tensor(arrays["amplitude"])
        rbf = RbfParams(amplitude=amplitude, lengthscales=torch.as_tensor(arrays["lengthscales"]))
        if meta.kernel.family == KernelFamily.CLASS:
            inducing = InducingPoints(
                z=torch.as_tensor(arrays["z"]),
                psi=torch.as_tensor(arrays["z_psi"]),
                labels=torch.as_tensor(arrays["inducing_labels"], dtype=torch.long),
            )
            kernel = ClassKernelParams(rbf=rbf, b_chol=torch.as_tensor(arrays["b_chol"]))
            noise = None
        else:
            inducing = InducingPoints(z=torch.as_tensor(arrays["z"]))
            kernel = rbf
            noise = torch.as_tensor(arrays["noise"])
        state = VariationalState(
            inducing=inducing,
            chol_a_tilde=torch.as_tensor(arrays["chol_a_tilde"]),
            qstar_coef=torch.as_tensor(arrays["qstar_coef"]),
            kernel=kernel,
            noise=noise,
            kernel_input=meta.kernel.kernel_input,
        )
    except KeyError as e:
        raise FormatError(f"state file is missing array {e}")
    return StateFile(state=state, meta=meta)


# Predictions and traces

def write_predictions(
    predictive: PosteriorPredictive, path: PathLike, seed: int,
    probabilities: Optional[np.ndarray] = None, entropy: Optional[np.ndarray] = None,
    mc_samples: Optional[int] = None,
):
    arrays = {"mean": predictive.mean, "prior_variance": predictive.prior_variance}
    if predictive.is_classification:
        arrays["covariance"] = predictive.covariance
        if probabilities is not None:
            arrays["probabilities"] = probabilities
            arrays["entropy"] = entropy
    else:
        arrays["variance"] = predictive.variance
        arrays["total_variance"] = predictive.total_variance
    meta = {"kind": "predictions", "seed": seed, "mc_samples": mc_samples, "noise": predictive.noise}
    write_arrays(path, arrays, meta)


def read_predictions(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "predictions":
        raise FormatError(f"{path} is not a predictions file")
    return arrays, meta


def write_trace(trace: TraceRecord, path: PathLike, seed: int, timing: bool = False):
    """One canonical JSON object per line; wall-clock only when timing"""
    jitter = {event.step: event.jitter for event in trace.jitter_events}
    lines = [canonical_json({"format_version": FORMAT_VERSION, "kind": "trace", "seed": seed, "timing": timing})]
    for i, step in enumerate(trace.steps):
        record = {
            "step": step,
            "objective": trace.objective[i],
            "kl_q": trace.kl_q[i],
            "kl_qstar": trace.kl_qstar[i],
        }
        if timing:
            record["wall_clock"] = trace.wall_clock[i]
        if step in jitter:
            record["jitter"] = jitter[step]
        lines.append(canonical_json(record))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path: PathLike) -> Tuple[TraceRecord, dict]:
    try:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except (OSError, IndexError, ValueError) as e:
        raise FormatError(f"cannot read trace {path}: {e}")
    if header.get("kind") != "trace":
        raise FormatError(f"{path} is not a trace file")
    trace = TraceRecord()
    for record in records:
        try:
            trace.append(
                step=record["step"], objective=record["objective"], kl_q=record["kl_q"],
                kl_qstar=record["kl_qstar"], wall_clock=record.get("wall_clock", 0.0),
            )
        except (KeyError, ValueError) as e:
            raise FormatError(f"bad trace record in {path}: {e}")
        if "jitter" in record:
            trace.jitter_events.append(JitterEvent(step=record["step"], jitter=record["jitter"]))
    return trace, header


# Synthetic data

CLUSTER_CENTERS = (-4.0, 0.0, 4.0)
CLUSTER_WIDTH = 1.0
CLUSTER_NOISE_SD = 0.1


def cluster_trend(x: np.ndarray) -> np.ndarray:
    return np.sin(1.5 * x) + 0.2 * x


def synth_clusters_with_predictor(
    seed: int,
    n_per_cluster: int = 20,
    test_fraction: float = 0.0,
    noise_sd: float = CLUSTER_NOISE_SD,
    holdout_cluster: Optional[int] = None,
) -> Tuple[PredictionBundle, ExactGPState]:
    """Three disjoint 1-D clusters with a smooth trend; g is an exact-GP mean fit on the train rows.

    With holdout_cluster the predictor never sees that cluster's rows, so g
    reverts to the prior mean there while the targets keep following the trend.
    """
    if n_per_cluster < 1:
        raise InputError("need at least one point per cluster")
    if not 0.0 <= test_fraction < 1.0:
        raise InputError("test fraction must lie in [0, 1)")
    if holdout_cluster is not None and not 0 <= holdout_cluster < len(CLUSTER_CENTERS):
        raise InputError(f"holdout cluster must lie in [0, {len(CLUSTER_CENTERS)})")
    rng = np.random.default_rng(seed)
    x = np.concatenate([
        center + CLUSTER_WIDTH * (rng.random(n_per_cluster) - 0.5) for center in CLUSTER_CENTERS
    ])
    cluster = np.repeat(np.arange(len(CLUSTER_CENTERS)), n_per_cluster)
    y = cluster_trend(x) + noise_sd * rng.standard_normal(x.size)
    split = np.where(rng.random(x.size) < test_fraction, SplitTag.TEST.value, SplitTag.TRAIN.value)
    seen = split == SplitTag.TRAIN.value
    if holdout_cluster is not None:
        seen &= cluster != holdout_cluster
    if not seen.any():
        raise InputError("the predictor has no rows to learn from")

    kernel, noise = optimize_hyperparameters(
        x[seen, None], y[seen], RbfParams.create(1.0, [1.0]), noise=0.01
    )
    predictor = fit_exact(x[seen, None], y[seen], kernel, noise)
    with torch.no_grad():
        g, _ = predict_exact(predictor, as_tensor(x[:, None]))
    bundle = PredictionBundle(
        mode=BundleMode.REGRESSION, x=x[:, None], g=g.numpy(), y=y,
        split=split if test_fraction > 0 else None, seed=seed,
    )
    return bundle, predictor


def synth_clusters(seed: int, n_per_cluster: int = 20, test_fraction: float = 0.0) -> PredictionBundle:
    bundle, _ = synth_clusters_with_predictor(seed, n_per_cluster, test_fraction)
    return bundle


BLOB_RADIUS = 2.0
BLOB_CLASSES = 3
BLOB_FEATURE_WIDTH = 1.5
BLOB_PRETRAIN_PER_CLASS = 20


def blob_centers() -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(BLOB_CLASSES) / BLOB_CLASSES
    return BLOB_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def blob_embedding(x: np.ndarray) -> np.ndarray:
    """RBF features around the blob centers; they vanish away from the blobs"""
    sq = ((np.asarray(x)[:, None, :] - blob_centers()[None, :, :]) ** 2).sum(-1)
    return np.exp(-0.5 * sq / BLOB_FEATURE_WIDTH ** 2)


def synth_blobs(seed: int, n_per_class: int = 100, shift: float = 0.0, test_fraction: float = 0.5) -> PredictionBundle:
    """Three 2-D Gaussian blobs scored by a pre-trained multinomial linear model.

    The model is fit on its own small sample and maps the embeddings psi to
    logits without an intercept. Model, points and split depend only on the
    seed, so a shifted copy shares them with the in-distribution bundle.
    """
    if n_per_class < 1:
        raise InputError("need at least one point per class")
    rng = np.random.default_rng(seed)
    centers = blob_centers()

    def draw(per_class: int) -> Tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(BLOB_CLASSES), per_class)
        return centers[labels] + rng.standard_normal((labels.size, 2)), labels

    pretrain_x, pretrain_labels = draw(BLOB_PRETRAIN_PER_CLASS)
    # weak regularization: an overconfident stand-in for a pre-trained network
    model = LogisticRegression(C=1e4, fit_intercept=False, max_iter=5000)
    model.fit(blob_embedding(pretrain_x), pretrain_labels)

    x, labels = draw(n_per_class)
    split = np.where(rng.random(labels.size) < test_fraction, SplitTag.TEST.value, SplitTag.TRAIN.value)
    x = x + shift
    psi = blob_embedding(x)
    return PredictionBundle(
        mode=BundleMode.CLASSIFICATION, x=x, g=model.decision_function(psi), labels=labels,
        psi=psi, split=split, seed=seed,
    )


__all__ = [
    'MAGIC', 'FORMAT_VERSION', 'canonical_json', 'encode_arrays', 'decode_arrays', 'write_arrays',
    'read_arrays', 'write_bundle', 'read_bundle', 'bundle_digest', 'file_digest', 'write_bundle_csv',
    'read_bundle_csv', 'StateFile', 'kernel_config', 'save_state', 'load_state', 'write_predictions',
    'read_predictions', 'write_trace', 'read_trace', 'synth_clusters_with_predictor', 'synth_clusters',
    'synth_blobs', 'blob_centers', 'blob_embedding', 'cluster_trend'
]
