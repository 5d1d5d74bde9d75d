"""
Numerical kit: dense linear algebra, the gradient contract, the optimizer
and clustering primitives the rest of the services build on.

Everything works on float64 torch tensors; gradients come from torch's
recorded-tape reverse differentiation.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.cluster import KMeans

from errors import (
    DimensionMismatch, EmptyInput, InputError, NonFiniteGradient, NotPositiveDefinite
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64

# Multiples of the mean diagonal tried in order until a factorization succeeds
JITTER_LADDER: Tuple[float, ...] = (0.0, 1e-8, 1e-6, 1e-4)

KMEANS_MAX_ITER = 50


def as_tensor(values) -> torch.Tensor:
    """Convert array-like input to a float64 tensor"""
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def symmetrize(a: torch.Tensor) -> torch.Tensor:
    """Mirror the lower triangle onto the upper one"""
    lower = torch.tril(a)
    return lower + torch.tril(a, diagonal=-1).transpose(-1, -2)


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular factor of an SPD matrix (or a stack of them)"""
    lower: torch.Tensor
    jitter: float = 0.0

    @property
    def size(self) -> int:
        return self.lower.shape[-1]

    def reconstruct(self) -> torch.Tensor:
        return self.lower @ self.lower.transpose(-1, -2)


def cholesky(a: torch.Tensor, jitter_ladder: Sequence[float] = JITTER_LADDER) -> CholFactor:
    """Factor a symmetric matrix, escalating diagonal jitter on failure.

    Jitter levels are multiples of the mean diagonal. A batched stack
    escalates together and records the largest jitter applied.
    """
    if a.dim() < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch("cholesky needs a square matrix", detail={"shape": tuple(a.shape)})
    if not torch.isfinite(a).all():
        raise NotPositiveDefinite("matrix has non-finite entries")

    n = a.shape[-1]
    eye = torch.eye(n, dtype=a.dtype)
    scale = torch.diagonal(a.detach(), dim1=-2, dim2=-1).mean(-1)
    scale = torch.where(scale > 0, scale, torch.ones_like(scale))

    for level in jitter_ladder:
        jitter = level * scale
        trial = a + jitter[..., None, None] * eye if level > 0 else a
        lower, info = torch.linalg.cholesky_ex(trial)
        if bool((info == 0).all()):
            applied = float(jitter.max()) if level > 0 else 0.0
            if applied > 0:
                logger.debug(f"cholesky needed jitter {applied:.3e} (n={n})")
            return CholFactor(lower=lower, jitter=applied)

    raise NotPositiveDefinite(
        "matrix is not positive definite after jitter escalation",
        detail={"n": n, "max_jitter": float(jitter_ladder[-1] * scale.max())},
    )


def tri_solve(factor: CholFactor, b: torch.Tensor, side: str = "lower") -> torch.Tensor:
    """Solve L x = b (side='lower') or L^T x = b (side='upper')"""
    if b.shape[0] != factor.size:
        raise DimensionMismatch(
            "right-hand side does not match factor",
            detail={"factor": factor.size, "rhs": tuple(b.shape)},
        )
    vector = b.dim() == 1
    rhs = b[:, None] if vector else b
    if side == "lower":
        x = torch.linalg.solve_triangular(factor.lower, rhs, upper=False)
    elif side == "upper":
        x = torch.linalg.solve_triangular(factor.lower.transpose(-1, -2), rhs, upper=True)
    else:
        raise InputError(f"unknown solve side: {side}")
    return x[:, 0] if vector else x


def chol_solve(factor: CholFactor, b: torch.Tensor) -> torch.Tensor:
    """Solve (L L^T) x = b"""
    return tri_solve(factor, tri_solve(factor, b, side="lower"), side="upper")


def logdet(factor: CholFactor) -> torch.Tensor:
    """log-determinant of L L^T"""
    return 2.0 * torch.log(torch.diagonal(factor.lower, dim1=-2, dim2=-1)).sum(-1)


def lower_from_parts(diagonal: torch.Tensor, offdiag: torch.Tensor) -> torch.Tensor:
    """Assemble a lower-triangular matrix from its diagonal and strict lower entries"""
    m = diagonal.shape[0]
    rows, cols = torch.tril_indices(m, m, offset=-1)
    lower = torch.zeros(m, m, dtype=diagonal.dtype)
    lower = lower.index_put((rows, cols), offdiag)
    return lower + torch.diag(diagonal)


def split_lower(lower: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Inverse of lower_from_parts"""
    m = lower.shape[0]
    rows, cols = torch.tril_indices(m, m, offset=-1)
    return torch.diagonal(lower).clone(), lower[rows, cols].clone()


# Parameter registry

@dataclass(frozen=True)
class ParamBlock:
    name: str
    start: int
    stop: int
    shape: Tuple[int, ...]
    positive: bool = False  # stored as log(value - floor)
    floor: float = 0.0


@dataclass
class ParamVector:
    """Flat vector of unconstrained trainable scalars with named blocks"""
    values: torch.Tensor
    blocks: Dict[str, ParamBlock] = field(default_factory=dict)

    @classmethod
    def pack(
        cls,
        blocks: Dict[str, torch.Tensor],
        positive: Iterable[str] = (),
        floors: Optional[Dict[str, float]] = None,
    ) -> "ParamVector":
        """Build from natural-space values; positive blocks are stored as logs"""
        positive = set(positive)
        floors = floors or {}
        registry: Dict[str, ParamBlock] = {}
        pieces = []
        offset = 0
        for name, value in blocks.items():
            value = as_tensor(value)
            floor = floors.get(name, 0.0)
            raw = value
            if name in positive:
                raw = torch.log(torch.clamp(value - floor, min=1e-300))
            flat = raw.reshape(-1)
            registry[name] = ParamBlock(
                name=name, start=offset, stop=offset + flat.numel(),
                shape=tuple(value.shape), positive=name in positive, floor=floor,
            )
            pieces.append(flat)
            offset += flat.numel()
        values = torch.cat(pieces) if pieces else torch.zeros(0, dtype=DTYPE)
        return cls(values=values.detach().clone(), blocks=registry)

    @property
    def size(self) -> int:
        return self.values.numel()

    def raw(self, name: str, flat: Optional[torch.Tensor] = None) -> torch.Tensor:
        block = self.blocks[name]
        source = self.values if flat is None else flat
        return source[block.start:block.stop].reshape(block.shape)

    def read(self, name: str, flat: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Natural-space value of a block (exponentiated when positive)"""
        block = self.blocks[name]
        value = self.raw(name, flat)
        if block.positive:
            return block.floor + torch.exp(value)
        return value

    def block_mask(self, names: Iterable[str]) -> torch.Tensor:
        """1 on the listed blocks, 0 elsewhere"""
        mask = torch.zeros(self.size, dtype=DTYPE)
        for name in names:
            block = self.blocks[name]
            mask[block.start:block.stop] = 1.0
        return mask

    def with_values(self, values: torch.Tensor) -> "ParamVector":
        return ParamVector(values=values.detach().clone(), blocks=self.blocks)


def value_and_grad(
    objective: Callable[[torch.Tensor], torch.Tensor], flat: torch.Tensor
) -> Tuple[float, torch.Tensor]:
    """Evaluate the objective and its exact gradient at flat"""
    point = flat.detach().clone().requires_grad_(True)
    value = objective(point)
    (gradient,) = torch.autograd.grad(value, point, allow_unused=True)
    if gradient is None:
        gradient = torch.zeros_like(point)
    if not torch.isfinite(gradient).all():
        bad = torch.nonzero(~torch.isfinite(gradient)).flatten().tolist()
        raise NonFiniteGradient("gradient has non-finite components", detail={"indices": bad[:10]})
    return float(value.detach()), gradient.detach()


def grad(objective: Callable[[torch.Tensor], torch.Tensor], params: ParamVector) -> torch.Tensor:
    """Exact gradient of objective at the parameter vector"""
    _, gradient = value_and_grad(objective, params.values)
    return gradient


# Optimizer

class AdamState:
    """Single-owner Adam state around torch.optim.Adam"""

    def __init__(self, params: torch.Tensor, maximize: bool = False, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params.detach().clone().requires_grad_(True)
        self.optimizer = torch.optim.Adam(
            [self.params], lr=lr, betas=(beta1, beta2), eps=eps, maximize=maximize
        )
        self.steps = 0


def adam_step(
    state: AdamState,
    gradient: torch.Tensor,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam update; direction set by the state's maximize flag"""
    if gradient.shape != state.params.shape:
        raise DimensionMismatch(
            "gradient does not match parameters",
            detail={"params": tuple(state.params.shape), "grad": tuple(gradient.shape)},
        )
    group = state.optimizer.param_groups[0]
    group.update(lr=lr, betas=(beta1, beta2), eps=eps)
    state.params.grad = gradient.detach().clone().to(DTYPE)
    state.optimizer.step()
    state.steps += 1
    return state.params.detach().clone(), state


# Clustering

def kmeans(points, m: int, seed: int) -> np.ndarray:
    """k-means++ seeded Lloyd iterations, capped at 50, deterministic under seed"""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] == 0:
        raise EmptyInput("kmeans needs at least one point")
    if not np.isfinite(points).all():
        raise InputError("kmeans points must be finite")
    if m < 1 or m > points.shape[0]:
        raise InputError(
            "kmeans needs 1 <= M <= N", detail={"M": m, "N": points.shape[0]}
        )

    model = KMeans(
        n_clusters=m,
        init="k-means++",
        n_init=1,
        max_iter=KMEANS_MAX_ITER,
        tol=0.0,
        algorithm="lloyd",
        random_state=seed,
    )
    model.fit(points)
    logger.debug(f"kmeans: M={m}, iterations={model.n_iter_}, inertia={model.inertia_:.6g}")
    return np.asarray(model.cluster_centers_, dtype=np.float64)


__all__ = [
    'DTYPE', 'JITTER_LADDER', 'CholFactor', 'ParamBlock', 'ParamVector', 'AdamState',
    'as_tensor', 'symmetrize', 'cholesky', 'tri_solve', 'chol_solve', 'logdet',
    'lower_from_parts', 'split_lower', 'value_and_grad', 'grad', 'adam_step', 'kmeans'
]
