"""Run configuration: one JSON document, units declared per block."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

LENGTH_SCALE = {"m": 1.0, "mm": 1e-3}
STRESS_SCALE = {"Pa": 1.0, "kPa": 1e3}


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryBlock(_Block):
    mesh: str
    length_unit: Literal["m", "mm"]


class DiscretizationBlock(_Block):
    kind: Literal["fem", "meshless"] = "fem"
    tet_formulation: Literal["anp", "standard"] = "anp"
    hourglass: bool = True
    hourglass_kappa: Optional[float] = Field(default=None, ge=0)
    order: Literal[1, 2] = 1
    integration_tol: float = Field(default=1e-2, gt=0)
    dilation: Optional[float] = Field(default=None, gt=1)


class MaterialBlock(_Block):
    model: Literal["NeoHookean", "OgdenVisco"] = "NeoHookean"
    stress_unit: Literal["Pa", "kPa"]
    E: float = Field(gt=0)
    nu: float = Field(ge=0, lt=0.5)
    density_kg_m3: float = Field(default=1000.0, gt=0)
    ogden_mu: list[float] = []
    ogden_alpha: list[float] = []
    prony: list[tuple[float, float]] = []  # (relative modulus, relaxation time in s)


class PrescribedBlock(_Block):
    set: Optional[str] = None
    displacement: Optional[tuple[float, float, float]] = None
    file: Optional[str] = None  # CSV: node,ux,uy,uz
    components: tuple[bool, bool, bool] = (True, True, True)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.file is None) == (self.set is None or self.displacement is None):
            raise ValueError("give either 'set' with 'displacement', or 'file'")
        return self


class LoadingBlock(_Block):
    length_unit: Literal["m", "mm"]
    ramp_duration_s: float = Field(gt=0)
    prescribed: list[PrescribedBlock] = Field(min_length=1)


class ContactBlock(_Block):
    master_mesh: str
    length_unit: Literal["m", "mm"]
    slave_set: str = "boundary"


class SolverBlock(_Block):
    kind: Literal["dr", "time_accurate"] = "dr"
    dt_safety: float = Field(default=0.9, gt=0)
    tolerance_m: Optional[float] = Field(default=None, gt=0)
    max_iterations: int = Field(default=100_000, ge=1)
    adaptive: bool = True
    damping_per_s: float = Field(default=0.0, ge=0)
    duration_s: Optional[float] = Field(default=None, gt=0)


class GridBlock(_Block):
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]


class WarpBlock(_Block):
    source_volume: str
    displacement_file: Optional[str] = None  # default: <outputs>/displacements.csv
    mesh_to_image_offset_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    levels: int = Field(default=4, ge=1, le=8)
    initial_spacing_mm: Optional[float] = Field(default=None, gt=0)
    interpolation: Literal["linear", "cubic"] = "linear"
    refine_iterations: int = Field(default=0, ge=0, le=5)
    target_grid: Optional[GridBlock] = None


class RunConfig(_Block):
    geometry: GeometryBlock
    discretization: DiscretizationBlock = DiscretizationBlock()
    materials: dict[str, MaterialBlock] = Field(min_length=1)
    loading: LoadingBlock
    contact: Optional[ContactBlock] = None
    solver: SolverBlock = SolverBlock()
    warp: Optional[WarpBlock] = None
    outputs: str = "outputs"
    seed: int = 0
    base_dir: str = Field(default=".", exclude=True)

    @field_validator("materials")
    @classmethod
    def _region_keys(cls, v):
        for key in v:
            if key != "default":
                try:
                    int(key)
                except ValueError:
                    raise ValueError(f"material key {key!r} must be a region number or 'default'") from None
        return v

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def output_dir(self) -> Path:
        return self.path(self.outputs)


def parse_config(data: dict, base_dir=".") -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid configuration: {msgs}") from None
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(data, path.parent)
