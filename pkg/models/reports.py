"""
Evaluation and verification report models
"""

from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field

from .bundle import BundleMode


class RegressionEval(BaseModel):
    """Per-point averages of the regression suite"""
    nll: float
    crps: float = Field(ge=0)
    cqm: float = Field(ge=0, le=0.5)
    n: int = Field(ge=1)


class ClassificationEval(BaseModel):
    nll: float
    ece: float = Field(ge=0, le=1)
    brier: float = Field(ge=0, le=2)
    accuracy: float = Field(ge=0, le=1)
    ood_auc: Optional[float] = Field(default=None, ge=0, le=1)
    nll_clamped: int = Field(default=0, ge=0, description="probabilities clamped at 1e-12")
    n: int = Field(ge=1)


class Timings(BaseModel):
    fit_seconds: Optional[float] = None
    predict_seconds: Optional[float] = None


class EvalReport(BaseModel):
    """Metrics of one evaluation run; serialized as canonical JSON"""

    model_config = ConfigDict(use_enum_values=True)

    format_version: int
    mode: BundleMode
    seed: int
    mc_samples: Optional[int] = None
    fmgp: dict
    baseline: Optional[dict] = None  # MAP: mean g, global residual noise (regression) / raw softmax
    timings: Timings = Field(default_factory=Timings)


class GradcheckResult(BaseModel):
    case: str
    block: str
    relative_error: float
    passed: bool


class GradcheckReport(BaseModel):
    seed: int
    repeats: int
    tolerance: float
    passed: bool
    worst_relative_error: float
    worst_case: str
    worst_block: str
    results: List[GradcheckResult] = Field(default_factory=list)

    @property
    def failures(self) -> List[GradcheckResult]:
        return [r for r in self.results if not r.passed]


__all__ = [
    'RegressionEval', 'ClassificationEval', 'Timings', 'EvalReport', 'GradcheckResult',
    'GradcheckReport'
]
