"""
Prediction bundle: the only interface to the pre-trained model.
Carries features, black-box outputs g, optional embeddings psi and labels.
"""

from enum import Enum
from typing import Optional

import numpy as np
from pydantic import Field, field_validator, model_validator

from errors import ClassOutOfRange, ShapeError

from .base import ArrayModel, Float64Array, Int64Array


class BundleMode(str, Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class SplitTag(int, Enum):
    TRAIN = 0
    VAL = 1
    TEST = 2


class PredictionBundle(ArrayModel):
    """Features, black-box outputs and targets for one dataset"""
    mode: BundleMode
    x: Float64Array
    g: Float64Array
    y: Optional[Float64Array] = None  # regression targets
    labels: Optional[Int64Array] = None  # classification targets
    psi: Optional[Float64Array] = None
    split: Optional[Int64Array] = None
    seed: Optional[int] = Field(default=None, description="Seed the bundle was generated with")

    @field_validator('x', 'psi')
    @classmethod
    def validate_matrix(cls, v):
        if v is not None and v.ndim == 1:
            v = v.reshape(-1, 1)
        return v

    @model_validator(mode='after')
    def validate_shapes(self):
        n = self.x.shape[0]
        if self.x.ndim != 2:
            raise ShapeError("x must be a matrix", detail={"shape": self.x.shape})

        if self.mode == BundleMode.REGRESSION:
            if self.g.ndim == 2 and self.g.shape[1] == 1:
                self.g = self.g[:, 0]
            if self.g.ndim != 1:
                raise ShapeError("regression g must be a vector", detail={"shape": self.g.shape})
            if self.labels is not None:
                raise ShapeError("regression bundles carry y, not labels")
        else:
            if self.g.ndim != 2 or self.g.shape[1] < 2:
                raise ShapeError("classification g must be N x C logits with C >= 2",
                                 detail={"shape": self.g.shape})
            if self.y is not None:
                raise ShapeError("classification bundles carry labels, not y")
            if self.labels is not None and self.labels.size:
                if self.labels.min() < 0 or self.labels.max() >= self.g.shape[1]:
                    raise ClassOutOfRange(f"labels outside [0, {self.g.shape[1]})")

        for name in ("g", "y", "labels", "psi", "split"):
            value = getattr(self, name)
            if value is not None and value.shape[0] != n:
                raise ShapeError(
                    f"row count of {name} does not match x",
                    detail={"x": n, name: value.shape[0]},
                )
        if self.y is not None and self.y.ndim != 1:
            raise ShapeError("y must be a vector")
        if self.split is not None and self.split.size:
            if self.split.min() < 0 or self.split.max() > SplitTag.TEST.value:
                raise ShapeError("split tags must be 0 (train), 1 (val) or 2 (test)")
        return self

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.mode == BundleMode.CLASSIFICATION

    @property
    def num_classes(self) -> Optional[int]:
        return self.g.shape[1] if self.is_classification else None

    @property
    def has_targets(self) -> bool:
        return (self.labels if self.is_classification else self.y) is not None

    def rows(self, tag: SplitTag) -> np.ndarray:
        """Indices carrying the tag; every row when the bundle is untagged"""
        if self.split is None:
            return np.arange(self.n_rows)
        return np.flatnonzero(self.split == SplitTag(tag).value)

    def training_rows(self) -> np.ndarray:
        return self.rows(SplitTag.TRAIN)

    def subset(self, indices: np.ndarray) -> "PredictionBundle":
        def take(a):
            return None if a is None else a[indices]
        return PredictionBundle(
            mode=self.mode, x=self.x[indices], g=self.g[indices], y=take(self.y),
            labels=take(self.labels), psi=take(self.psi), split=take(self.split), seed=self.seed,
        )


__all__ = ['BundleMode', 'SplitTag', 'PredictionBundle']
