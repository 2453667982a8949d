"""HTTP front end over the solve, warp, metrics and verify operations."""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse

from ..config import parse_config
from ..errors import ConfigError, ElementInversionError, InstabilityError, TledError
from ..metrics import compare_point_sets
from ..pipeline import run_solve, run_warp
from ..verify import run_verify
from .schemas import (
    ErrorResponse,
    MetricsRequest,
    MetricsResponse,
    RunRequest,
    SolveResponse,
    VerifyRequest,
    VerifyResponse,
    WarpResponse,
)

app = FastAPI(title="tled", version="0.1.0")


def _status(exc: TledError) -> int:
    if isinstance(exc, (InstabilityError, ElementInversionError)):
        return 409
    return 422


@app.exception_handler(TledError)
async def _tled_error(request, exc: TledError):
    body = ErrorResponse(error=str(exc), kind=type(exc).__name__)
    return JSONResponse(status_code=_status(exc), content=body.model_dump())


@app.exception_handler(OSError)
async def _os_error(request, exc: OSError):
    body = ErrorResponse(error=str(exc), kind="OSError")
    return JSONResponse(status_code=422, content=body.model_dump())


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/solve", response_model=SolveResponse)
def solve(req: RunRequest) -> SolveResponse:
    cfg = parse_config(req.config, req.base_dir)
    res = run_solve(cfg, threads=req.threads)
    return SolveResponse(converged=res.converged, report=res.report, outputs=res.outputs)


@app.post("/warp", response_model=WarpResponse)
def warp(req: RunRequest) -> WarpResponse:
    cfg = parse_config(req.config, req.base_dir)
    if cfg.warp is None:
        raise ConfigError("config has no 'warp' block")
    res = run_warp(cfg, threads=req.threads)
    return WarpResponse(volume_path=res.volume_path, transform_path=res.transform_path,
                        fit_residual_mm=list(res.fit_residual_mm))


@app.post("/metrics", response_model=MetricsResponse)
def metrics(req: MetricsRequest) -> MetricsResponse:
    rep = compare_point_sets(np.asarray(req.a, dtype=float), np.asarray(req.b, dtype=float),
                             req.percentile, req.threshold_mm)
    return MetricsResponse(**rep.to_dict())


@app.post("/verify", response_model=VerifyResponse)
def verify(req: VerifyRequest) -> VerifyResponse:
    res = run_verify(req.suites, threads=req.threads)
    return VerifyResponse(passed=res.passed, report=res.report, timings_s=res.timings)
