"""Pydantic schemas of the files the command line reads and writes."""

from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import settings

from ..cp_model import MultifacModel, StructurePattern
from ..imputation import ImputationMetrics, Preprocessor
from ..simulation import SimulationSpec
from ..solver import FitReport

FORMAT_VERSION = 1


class TensorManifest(BaseModel):
    """Descriptor of one dense tensor; NaN (or null inline) marks missing."""

    format_version: Literal[1] = FORMAT_VERSION
    shape: List[int] = Field(..., min_length=1)
    layout: Literal["row-major"] = "row-major"
    dtype: Literal["f64"] = "f64"
    data: Optional[List[Optional[float]]] = Field(
        None, description="Flat row-major values, null for missing"
    )
    data_file: Optional[str] = Field(
        None, description="Little-endian float64 payload next to the manifest"
    )
    missing: Literal["nan"] = "nan"

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "format_version": 1,
                "shape": [2, 2],
                "layout": "row-major",
                "dtype": "f64",
                "data": [1.0, None, 0.5, 2.0],
                "missing": "nan",
            }
        }
    )

    @model_validator(mode="after")
    def _one_payload(self) -> "TensorManifest":
        if (self.data is None) == (self.data_file is None):
            raise ValueError("exactly one of 'data' and 'data_file' is required")
        if any(s < 1 for s in self.shape):
            raise ValueError(f"shape entries must be positive, got {self.shape}")
        return self

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class LinkedManifest(BaseModel):
    """Tensors sharing their first mode, listed by manifest path."""

    format_version: Literal[1] = FORMAT_VERSION
    tensors: List[str] = Field(..., min_length=1)
    shared_mode: Literal[1] = 1

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "format_version": 1,
                "tensors": ["hematology.json", "dti.json"],
                "shared_mode": 1,
            }
        }
    )


class PreprocessingRecord(BaseModel):
    """Per-tensor centering and scaling applied before fitting."""

    means: List[float]
    scales: List[float]

    @classmethod
    def from_preprocessor(
        cls, p: Optional[Preprocessor]
    ) -> Optional["PreprocessingRecord"]:
        if p is None:
            return None
        return cls(means=list(p.means), scales=list(p.scales))

    def to_preprocessor(self) -> Preprocessor:
        return Preprocessor(tuple(self.means), tuple(self.scales))


class ModelDocument(BaseModel):
    """Serialized factor matrices of a fitted model.

    ``threshold`` is the activity threshold the fit was classified with and
    ``preprocessing`` the transform the factors live under, if any.
    """

    format_version: Literal[1] = FORMAT_VERSION
    kind: Literal["cp", "multifac"]
    rank: int
    penalty: float
    threshold: float = Field(settings.zero_threshold, gt=0.0, lt=1.0)
    shapes: List[List[int]]
    shared_factor: List[List[float]]
    tensor_factors: List[List[List[List[float]]]]
    preprocessing: Optional[PreprocessingRecord] = None

    @model_validator(mode="after")
    def _one_record_per_tensor(self) -> "ModelDocument":
        p = self.preprocessing
        n = len(self.shapes)
        if p is not None and not len(p.means) == len(p.scales) == n:
            raise ValueError(f"preprocessing must list {n} means and scales")
        return self

    @classmethod
    def from_model(
        cls,
        model: MultifacModel,
        kind: str = "multifac",
        threshold: float = settings.zero_threshold,
        preprocessing: Optional[PreprocessingRecord] = None,
    ) -> "ModelDocument":
        return cls(
            kind=kind,
            rank=model.rank,
            penalty=model.penalty,
            threshold=threshold,
            shapes=[list(s) for s in model.shapes],
            shared_factor=model.shared_factor.tolist(),
            tensor_factors=[[f.tolist() for f in fs] for fs in model.tensor_factors],
            preprocessing=preprocessing,
        )

    def to_model(self) -> MultifacModel:
        rank = self.rank

        def matrix(rows: List[List[float]]) -> np.ndarray:
            return np.array(rows, dtype=float).reshape((-1, rank))

        return MultifacModel(
            matrix(self.shared_factor),
            tuple(tuple(matrix(f) for f in fs) for fs in self.tensor_factors),
            self.penalty,
        )


class VarianceRow(BaseModel):
    """Proportion of variance explained in one tensor."""

    tensor: int
    total: float
    shared: float
    individual: float
    rank_total: int
    rank_shared: int
    rank_individual: int


class FitDocument(BaseModel):
    """``report.json`` of fit, multifit and impute."""

    format_version: Literal[1] = FORMAT_VERSION
    command: str
    report: FitReport
    structure: StructurePattern
    variance_explained: List[VarianceRow] = Field(default_factory=list)
    imputation: List[ImputationMetrics] = Field(default_factory=list)
    preprocessing: Optional[PreprocessingRecord] = None
    outputs: List[str] = Field(default_factory=list)


class SimulationManifest(BaseModel):
    """Simulation settings and seeds behind a simulation output directory."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    format_version: Literal[1] = FORMAT_VERSION
    experiment: str
    spec: SimulationSpec
    replicates: List[int]
    mode: Literal["generate", "run"]
    outputs: List[str] = Field(default_factory=list)
