"""
Kernel functions and kernel-matrix builders: the squared-exponential (RBF)
kernel and the multiclass composite kernel

    K((x,c),(x',c')) = B[c,c'] * rbf(x,x') * (psi(x)^T psi(x') + delta)

The delta term is supplied structurally by the caller (self pairs), never by
comparing coordinates.
"""

from dataclasses import dataclass
from typing import Optional, Union

import torch

from errors import ClassOutOfRange, DimensionMismatch, InputError

from .numkit import DTYPE, as_tensor


@dataclass(frozen=True)
class RbfParams:
    """Amplitude alpha and per-dimension length-scales l_j (natural space)"""
    amplitude: torch.Tensor
    lengthscales: torch.Tensor

    @classmethod
    def create(cls, amplitude: float, lengthscales) -> "RbfParams":
        ls = as_tensor(lengthscales).reshape(-1)
        amp = as_tensor(amplitude).reshape(())
        if amp <= 0 or (ls <= 0).any():
            raise InputError("amplitude and length-scales must be positive")
        return cls(amplitude=amp, lengthscales=ls)

    @property
    def input_dim(self) -> int:
        return self.lengthscales.shape[0]


@dataclass(frozen=True)
class ClassKernelParams:
    """RBF factor plus the Cholesky factor of the class-dependency matrix B"""
    rbf: RbfParams
    b_chol: torch.Tensor

    @property
    def num_classes(self) -> int:
        return self.b_chol.shape[0]

    @property
    def b(self) -> torch.Tensor:
        return self.b_chol @ self.b_chol.T

    @property
    def amplitude(self) -> torch.Tensor:
        return self.rbf.amplitude


KernelParams = Union[RbfParams, ClassKernelParams]


@dataclass(frozen=True)
class InducingPoints:
    """Z_beta: input coordinates, plus embeddings and class labels in classification"""
    z: torch.Tensor
    psi: Optional[torch.Tensor] = None
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if (self.psi is None) != (self.labels is None):
            raise InputError("classification inducing points need both embeddings and labels")

    @property
    def count(self) -> int:
        return self.z.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.labels is not None


def _check_dims(x: torch.Tensor, p: RbfParams):
    if x.shape[-1] != p.input_dim:
        raise DimensionMismatch(
            "input dimension does not match length-scales",
            detail={"input_dim": x.shape[-1], "lengthscales": p.input_dim},
        )


def rbf(x: torch.Tensor, x2: torch.Tensor, p: RbfParams) -> torch.Tensor:
    """alpha * exp(-1/2 sum_j (x_j - x'_j)^2 / l_j); length-scales divide unsquared"""
    _check_dims(x, p)
    _check_dims(x2, p)
    sq = ((x - x2) ** 2 / p.lengthscales).sum(-1)
    return p.amplitude * torch.exp(-0.5 * sq)


def rbf_matrix(x: torch.Tensor, x2: torch.Tensor, p: RbfParams) -> torch.Tensor:
    """N x N' matrix of rbf evaluations"""
    if x.dim() != 2 or x2.dim() != 2:
        raise DimensionMismatch("rbf_matrix needs 2-D inputs")
    _check_dims(x, p)
    _check_dims(x2, p)
    diff = x[:, None, :] - x2[None, :, :]
    sq = (diff ** 2 / p.lengthscales).sum(-1)
    return p.amplitude * torch.exp(-0.5 * sq)


def _check_class(c: int, p: ClassKernelParams):
    if not 0 <= int(c) < p.num_classes:
        raise ClassOutOfRange(f"class {int(c)} outside [0, {p.num_classes})")


def class_kernel(
    x: torch.Tensor, psi_x: torch.Tensor, c: int,
    x2: torch.Tensor, psi_x2: torch.Tensor, c2: int,
    p: ClassKernelParams, same_point: bool = False,
) -> torch.Tensor:
    """Composite kernel between two (input, class) pairs"""
    _check_class(c, p)
    _check_class(c2, p)
    if psi_x.shape != psi_x2.shape:
        raise DimensionMismatch("embedding dimensions differ")
    linear = psi_x @ psi_x2 + (1.0 if same_point else 0.0)
    return p.b[int(c), int(c2)] * rbf(x, x2, p.rbf) * linear


def _check_labels(labels: torch.Tensor, p: ClassKernelParams):
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= p.num_classes):
        raise ClassOutOfRange(f"labels outside [0, {p.num_classes})")


def inducing_gram(inducing: InducingPoints, p) -> torch.Tensor:
    """K_beta over the inducing set, with delta=1 on the diagonal pairs"""
    if isinstance(p, RbfParams):
        return rbf_matrix(inducing.z, inducing.z, p)
    _check_labels(inducing.labels, p)
    b = p.b
    b_pairs = b[inducing.labels][:, inducing.labels]
    eye = torch.eye(inducing.count, dtype=DTYPE)
    linear = inducing.psi @ inducing.psi.T + eye
    return b_pairs * rbf_matrix(inducing.z, inducing.z, p.rbf) * linear


def cross_kernel(
    x: torch.Tensor, inducing: InducingPoints, p, psi_x: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Test-vs-inducing kernel rows.

    Regression: N x M. Classification: N x C x M, one row per output class;
    test inputs are never the inducing points themselves, so delta = 0.
    """
    if isinstance(p, RbfParams):
        return rbf_matrix(x, inducing.z, p)
    if psi_x is None:
        raise InputError("classification kernel needs embeddings")
    if psi_x.shape[-1] != inducing.psi.shape[-1]:
        raise DimensionMismatch("embedding dimensions differ")
    _check_labels(inducing.labels, p)
    k_rbf = rbf_matrix(x, inducing.z, p.rbf)
    linear = psi_x @ inducing.psi.T
    b_cols = p.b[:, inducing.labels]
    return b_cols[None, :, :] * (k_rbf * linear)[:, None, :]


def prior_class_block(psi_x: torch.Tensor, p: ClassKernelParams) -> torch.Tensor:
    """Prior C x C covariance at each input: B * alpha * (|psi|^2 + 1)"""
    scale = p.amplitude * ((psi_x ** 2).sum(-1) + 1.0)
    return scale[:, None, None] * p.b[None, :, :]


def kernel_diag(
    x: torch.Tensor,
    p,
    psi_x: Optional[torch.Tensor] = None,
    labels: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Prior variances K(x,x).

    Regression: alpha for every row. Classification: B[c,c]*alpha*(|psi|^2+1)
    at the given labels, or the N x C matrix over all classes when labels is None.
    """
    n = x.shape[0]
    if isinstance(p, RbfParams):
        return p.amplitude * torch.ones(n, dtype=DTYPE)
    if psi_x is None:
        raise InputError("classification kernel needs embeddings")
    scale = p.amplitude * ((psi_x ** 2).sum(-1) + 1.0)
    diag_b = torch.diagonal(p.b)
    if labels is None:
        return scale[:, None] * diag_b[None, :]
    _check_labels(labels, p)
    return scale * diag_b[labels]


__all__ = [
    'RbfParams', 'ClassKernelParams', 'KernelParams', 'InducingPoints', 'rbf', 'rbf_matrix',
    'class_kernel', 'inducing_gram', 'cross_kernel', 'prior_class_block', 'kernel_diag'
]
