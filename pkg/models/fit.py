"""
Fit configuration, kernel configuration and training trace models
"""

from enum import Enum
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .bundle import BundleMode


class Objective(str, Enum):
    PREDICTIVE = "predictive"  # log E_q[p(y|f)]: expectation inside the log
    ELBO = "elbo"  # E_q[log p(y|f)]


class KernelInput(str, Enum):
    FEATURES = "features"
    EMBEDDINGS = "embeddings"


class KernelFamily(str, Enum):
    RBF = "rbf"
    CLASS = "class"


class FitConfig(BaseModel):
    """Settings of one FMGP fit"""

    model_config = ConfigDict(extra="forbid", use_enum_values=True)

    mode: BundleMode = BundleMode.REGRESSION
    m_beta: int = Field(default=100, ge=1, description="M_beta >= 1 inducing points")
    batch_size: int = Field(default=100, ge=1, description="mini-batch size >= 1")
    steps: int = Field(default=20000, ge=1, description="optimizer steps >= 1")
    learning_rate: float = Field(default=1e-3, gt=0, description="Adam learning rate > 0")
    mc_train: int = Field(default=64, ge=1, description="training MC samples >= 1")
    mc_eval: int = Field(default=512, ge=1, description="evaluation MC samples >= 1")
    seed: int = 0

    objective: Objective = Objective.PREDICTIVE
    use_qstar: bool = True
    train_inducing: bool = True
    train_hyperparameters: bool = True
    warm_start: bool = True  # regression: exact-GP kernel and fitted q* coefficients
    kernel_input: KernelInput = KernelInput.FEATURES
    init_amplitude: Optional[float] = Field(default=None, gt=0)
    init_lengthscale: Optional[float] = Field(default=None, gt=0)
    log_every: int = Field(default=1000, ge=1)

    @property
    def is_classification(self) -> bool:
        return self.mode == BundleMode.CLASSIFICATION


class KernelConfig(BaseModel):
    """Kernel family, input source and the fitted hyper-parameters"""

    model_config = ConfigDict(extra="forbid", use_enum_values=True)

    family: KernelFamily
    kernel_input: KernelInput = KernelInput.FEATURES
    amplitude: float = Field(gt=0)
    lengthscales: List[float]
    b_matrix: Optional[List[List[float]]] = None

    @model_validator(mode='after')
    def validate_family(self):
        if any(l <= 0 for l in self.lengthscales):
            raise ValueError('length-scales must be positive')
        if (self.family == KernelFamily.CLASS) != (self.b_matrix is not None):
            raise ValueError('the class kernel needs B and the RBF kernel must not carry one')
        return self


class JitterEvent(BaseModel):
    step: int
    jitter: float


class TraceRecord(BaseModel):
    """Per-step optimization trace"""

    steps: List[int] = Field(default_factory=list)
    objective: List[float] = Field(default_factory=list)
    kl_q: List[float] = Field(default_factory=list)
    kl_qstar: List[float] = Field(default_factory=list)
    wall_clock: List[float] = Field(default_factory=list)
    jitter_events: List[JitterEvent] = Field(default_factory=list)
    failed_step: Optional[int] = None

    def append(self, step: int, objective: float, kl_q: float, kl_qstar: float, wall_clock: float):
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"trace steps must increase: {step} after {self.steps[-1]}")
        self.steps.append(step)
        self.objective.append(objective)
        self.kl_q.append(kl_q)
        self.kl_qstar.append(kl_qstar)
        self.wall_clock.append(wall_clock)

    def moving_average(self, window: int = 100) -> List[float]:
        values = self.objective
        if len(values) < window:
            return []
        total = sum(values[:window])
        averages = [total / window]
        for i in range(window, len(values)):
            total += values[i] - values[i - window]
            averages.append(total / window)
        return averages


class RunConfig(BaseModel):
    """Paths and switches of one command, plus the fit settings"""

    model_config = ConfigDict(extra="forbid")

    bundle: Optional[Path] = None
    state: Optional[Path] = None
    trace: Optional[Path] = None
    output: Optional[Path] = None
    ood_bundle: Optional[Path] = None
    timing: bool = False
    fit: FitConfig = Field(default_factory=FitConfig)


__all__ = [
    'Objective', 'KernelInput', 'KernelFamily', 'FitConfig', 'KernelConfig',
    'JitterEvent', 'TraceRecord', 'RunConfig'
]
