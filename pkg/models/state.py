"""
Metadata stored next to a fitted variational state
"""

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from .fit import FitConfig, KernelConfig

STATE_FORMAT_VERSION = 1


class StateMeta(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = STATE_FORMAT_VERSION
    seed: int
    m_beta: int = Field(ge=1)
    kernel: KernelConfig
    fit_config: FitConfig
    map_noise: Optional[float] = Field(default=None, gt=0, description="residual noise of g on the training rows")


__all__ = ['STATE_FORMAT_VERSION', 'StateMeta']
