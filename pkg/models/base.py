"""
Base models and utilities for numpy array handling in pydantic
"""

from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, GetCoreSchemaHandler, GetJsonSchemaHandler
from pydantic_core import core_schema


class _ArrayType:
    """Custom numpy array type for Pydantic v2 with a fixed dtype"""

    dtype: Any = np.float64
    json_type: str = "number"

    @classmethod
    def __get_pydantic_core_schema__(
        cls, source_type: Any, handler: GetCoreSchemaHandler
    ) -> core_schema.CoreSchema:
        return core_schema.json_or_python_schema(
            json_schema=core_schema.chain_schema([
                core_schema.list_schema(),
                core_schema.no_info_plain_validator_function(cls.validate),
            ]),
            python_schema=core_schema.no_info_plain_validator_function(cls.validate),
            serialization=core_schema.plain_serializer_function_ser_schema(
                lambda x: x.tolist()
            ),
        )

    @classmethod
    def validate(cls, value: Any) -> np.ndarray:
        if isinstance(value, np.ndarray) and value.dtype == cls.dtype:
            return value
        try:
            array = np.asarray(value)
        except Exception as e:
            raise ValueError(f"Invalid array: {e}")
        if array.dtype.kind not in "biuf":
            raise ValueError(f"Array must be numeric, got dtype {array.dtype}")
        if cls.dtype == np.int64 and array.dtype.kind == "f":
            if not np.all(np.isfinite(array)) or not np.all(array == np.round(array)):
                raise ValueError("Integer array contains non-integral values")
        return array.astype(cls.dtype)

    @classmethod
    def __get_pydantic_json_schema__(
        cls, field_schema: core_schema.CoreSchema, handler: GetJsonSchemaHandler
    ) -> dict[str, Any]:
        return {
            "type": "array",
            "items": {"type": cls.json_type},
        }


class Float64Array(_ArrayType):
    dtype = np.float64
    json_type = "number"


class Int64Array(_ArrayType):
    dtype = np.int64
    json_type = "integer"


class ArrayModel(BaseModel):
    """Base model for containers holding numpy arrays"""

    model_config = ConfigDict(
        # Use enum values instead of names
        use_enum_values=True,
        # Arrays are validated by the custom types above
        arbitrary_types_allowed=True,
        # Reject unknown fields
        extra="forbid",
    )
