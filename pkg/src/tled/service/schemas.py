"""Request and response models of the HTTP service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from ..metrics import DEFAULT_PERCENTILE, DEFAULT_SUCCESS_THRESHOLD_MM


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunRequest(_Model):
    config: dict
    base_dir: str = "."
    threads: int = Field(default=1, ge=1)


class SolveResponse(_Model):
    converged: bool
    report: dict
    outputs: dict[str, str]


class WarpResponse(_Model):
    volume_path: str
    transform_path: str
    fit_residual_mm: list[float]


class MetricsRequest(_Model):
    a: list[list[float]] = Field(description="points of set A in mm, (n, 3) or (n, 2)")
    b: list[list[float]]
    percentile: float = Field(default=DEFAULT_PERCENTILE, gt=0, le=100)
    threshold_mm: float = Field(default=DEFAULT_SUCCESS_THRESHOLD_MM, ge=0)


class MetricsResponse(_Model):
    threshold_mm: float
    percentile: float
    hausdorff_mm: float
    hausdorff_max_mm: float
    success_percentile: float
    n_a: int
    n_b: int


class VerifyRequest(_Model):
    suites: Optional[str] = None
    threads: int = Field(default=1, ge=1)


class VerifyResponse(_Model):
    passed: bool
    report: dict
    timings_s: dict[str, float]


class ErrorResponse(_Model):
    error: str
    kind: str
