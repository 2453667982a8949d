"""Config-driven solve and warp runs.

Mechanics runs in SI units (m, Pa, kg, s); image work runs in mm. Every
conversion happens here, from the units each config block declares.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import materials as mat
from .config import LENGTH_SCALE, STRESS_SCALE, RunConfig
from .contact import ContactConstraint, build_master_surface
from .dynamics import (
    DRParams,
    Loading,
    PrescribedDisplacement,
    dynamic_relaxation_solve,
    time_accurate_solve,
)
from .errors import ConfigError, WarpError
from .fem import FEMModel
from .geometry import Mesh, PointCloud, load_mesh, load_volume, write_mesh, write_volume
from .meshless import MeshlessModel
from .warp import build_backward_samples, fit_multilevel_bspline, save_transform, warp_volume

log = logging.getLogger(__name__)


def material_map(cfg: RunConfig, regions) -> dict:
    """{region: MaterialParams} in SI units for every region present."""
    out = {}
    for r in sorted(set(int(x) for x in regions)):
        block = cfg.materials.get(str(r), cfg.materials.get("default"))
        if block is None:
            raise ConfigError(f"region {r} has no material block (and there is no 'default')")
        s = STRESS_SCALE[block.stress_unit]
        try:
            out[r] = mat.MaterialParams(
                block.model, block.E * s, block.nu,
                tuple(m * s for m in block.ogden_mu), tuple(block.ogden_alpha),
                tuple(tuple(p) for p in block.prony), block.density_kg_m3,
            )
        except mat.MaterialError as exc:
            raise ConfigError(f"material for region {r}: {exc}") from None
    return out


def load_mesh_si(path, unit) -> Mesh:
    mesh = load_mesh(path)
    scale = LENGTH_SCALE[unit]
    return mesh if scale == 1.0 else mesh.with_nodes(mesh.nodes * scale)


def cloud_from_mesh(mesh: Mesh) -> PointCloud:
    """Meshless cloud: the mesh nodes, with the (axis-aligned) hexes as background cells."""
    if len(mesh.tets) or not len(mesh.hexes):
        raise ConfigError("meshless discretization needs a hex-only mesh of axis-aligned boxes")
    P = mesh.nodes[mesh.hexes]
    lo, hi = P.min(axis=1), P.max(axis=1)
    # every node must sit on a box corner
    on_corner = np.all(np.isclose(P, lo[:, None]) | np.isclose(P, hi[:, None]), axis=2)
    if not on_corner.all():
        raise ConfigError("meshless background cells must be axis-aligned boxes")
    labels = np.zeros(mesh.n_nodes, dtype=np.int64)
    labels[mesh.hexes.ravel()] = np.repeat(mesh.hex_regions, 8)
    boundary = dict(mesh.node_sets)
    return PointCloud(mesh.nodes, np.stack([lo, hi], axis=1), labels, boundary)


def read_displacement_csv(path, n_nodes) -> np.ndarray:
    """``node,ux,uy,uz`` rows (header optional) into an (n_nodes, 3) array; absent nodes are NaN."""
    path = Path(path)
    try:
        rows = np.loadtxt(path, delimiter=",", comments="#", ndmin=2, skiprows=_header_rows(path))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read displacement file {path}: {exc}") from None
    if rows.shape[1] != 4:
        raise ConfigError(f"{path}: expected node,ux,uy,uz columns")
    idx = rows[:, 0].astype(np.int64)
    if np.any(idx != rows[:, 0]) or idx.min(initial=0) < 0 or idx.max(initial=-1) >= n_nodes:
        raise ConfigError(f"{path}: node indices must be integers in [0, {n_nodes})")
    out = np.full((n_nodes, 3), np.nan)
    out[idx] = rows[:, 1:]
    return out


def _header_rows(path) -> int:
    """Lines to skip so that loading starts at the first numeric row."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                float(s.split(",")[0])
                return 0 if lineno == 0 else lineno
            except ValueError:
                return lineno + 1
    return 0


def write_displacement_csv(path, u, unit="m") -> None:
    scale = 1.0 / LENGTH_SCALE[unit]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# length_unit={unit}\nnode,ux,uy,uz\n")
        for i, row in enumerate(np.asarray(u) * scale):
            fh.write(f"{i},{row[0]:.17g},{row[1]:.17g},{row[2]:.17g}\n")


@dataclass
class Problem:
    mesh: Mesh  # SI
    model: object
    loading: Loading
    reference: np.ndarray


def build_problem(cfg: RunConfig, threads: int = 1) -> Problem:
    mesh = load_mesh_si(cfg.path(cfg.geometry.mesh), cfg.geometry.length_unit)
    regions = np.concatenate([mesh.hex_regions, mesh.tet_regions])
    materials = material_map(cfg, regions)
    disc = cfg.discretization
    if disc.kind == "fem":
        model = FEMModel(mesh, materials, hourglass_kappa=disc.hourglass_kappa, hourglass=disc.hourglass,
                         tet_formulation=disc.tet_formulation, threads=threads)
        reference = mesh.nodes
    else:
        cloud = cloud_from_mesh(mesh)
        model = MeshlessModel(cloud, materials, order=disc.order, tol=disc.integration_tol,
                              dilation=None if disc.dilation is None else {disc.order: disc.dilation},
                              threads=threads)
        reference = cloud.nodes

    scale = LENGTH_SCALE[cfg.loading.length_unit]
    ramp = cfg.loading.ramp_duration_s
    nodes, values, comps = [], [], []
    for block in cfg.loading.prescribed:
        if block.file is not None:
            field_ = read_displacement_csv(cfg.path(block.file), mesh.n_nodes)
            idx = np.nonzero(~np.isnan(field_[:, 0]))[0]
            vals = field_[idx] * scale
        else:
            if block.set not in mesh.node_sets:
                raise ConfigError(f"node set '{block.set}' not found in mesh (have: {sorted(mesh.node_sets)})")
            idx = mesh.node_sets[block.set]
            vals = np.tile(np.asarray(block.displacement, float) * scale, (len(idx), 1))
        nodes.append(idx)
        values.append(vals)
        comps.append(np.tile(block.components, (len(idx), 1)))
    nodes = np.concatenate(nodes)
    values = np.concatenate(values)
    comps = np.concatenate(comps)
    # later blocks override earlier ones on shared nodes
    _, last = np.unique(nodes[::-1], return_index=True)
    keep = np.sort(len(nodes) - 1 - last)
    nodes, values, comps = nodes[keep], values[keep], comps[keep]

    constraints = []
    if disc.kind == "fem":
        prescribed = [PrescribedDisplacement(nodes[comps.all(1)], values[comps.all(1)], ramp)]
        for mask in {tuple(c) for c in comps[~comps.all(1)]}:
            sel = np.all(comps == mask, axis=1)
            prescribed.append(PrescribedDisplacement(nodes[sel], values[sel], ramp, mask))
    else:
        prescribed = []
        # one EBCIEM operator for all Dirichlet data, so corrections do not fight
        constraints.append(model.boundary_constraint(nodes, values, ramp, comps))

    if cfg.contact is not None:
        master = load_mesh_si(cfg.path(cfg.contact.master_mesh), cfg.contact.length_unit)
        if not len(master.surface_tris):
            raise ConfigError("contact master mesh has no 'tris' block")
        surface = build_master_surface(master.nodes, master.surface_tris)
        if cfg.contact.slave_set not in mesh.node_sets:
            raise ConfigError(f"slave node set '{cfg.contact.slave_set}' not found in mesh")
        slaves = np.setdiff1d(mesh.node_sets[cfg.contact.slave_set], nodes)
        if disc.kind == "meshless":
            raise ConfigError("contact is supported for the fem discretization only")
        constraints.append(ContactConstraint(surface, slaves, reference))
    return Problem(mesh, model, Loading(prescribed, constraints), reference)


@dataclass
class SolveResult:
    displacement: np.ndarray  # (n, 3) m, nodal displacement field
    report: dict
    converged: bool
    outputs: dict = field(default_factory=dict)


def run_solve(cfg: RunConfig, threads: int = 1, write: bool = True) -> SolveResult:
    """Precompute, solve, and write displacements, deformed mesh and report."""
    t0 = time.perf_counter()
    prob = build_problem(cfg, threads)
    s = cfg.solver
    if s.kind == "dr":
        params = DRParams(damping=s.damping_per_s, adaptive=s.adaptive, tolerance=s.tolerance_m,
                          max_iterations=s.max_iterations, safety=s.dt_safety)
        res = dynamic_relaxation_solve(prob.model, prob.loading, params)
        params_u, converged = res.u, res.report.converged
        report = {"solver": "dr", **res.report.to_dict()}
    else:
        duration = s.duration_s if s.duration_s is not None else cfg.loading.ramp_duration_s
        traj = time_accurate_solve(prob.model, prob.loading, duration, safety=s.dt_safety)
        params_u, converged = traj.displacements[-1], True
        report = {"solver": "time_accurate", "converged": True, "steps": traj.steps, "dt_s": traj.dt,
                  "time_s": float(traj.times[-1])}
    u = prob.model.reconstruct(params_u) if hasattr(prob.model, "reconstruct") else params_u
    report.update({
        "discretization": cfg.discretization.kind,
        "n_nodes": int(prob.mesh.n_nodes),
        "dofs": int(3 * prob.mesh.n_nodes),
        "max_displacement_m": float(np.linalg.norm(u, axis=1).max()) if len(u) else 0.0,
        "length_unit": "m",
    })
    log.info("solve finished in %.2f s", time.perf_counter() - t0)
    result = SolveResult(u, report, converged)
    if write:
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        unit = cfg.geometry.length_unit
        paths = {"displacements": out / "displacements.csv", "deformed_mesh": out / "deformed.mesh",
                 "report": out / "report.json"}
        write_displacement_csv(paths["displacements"], u, unit)
        scale = 1.0 / LENGTH_SCALE[unit]
        write_mesh(prob.mesh.with_nodes((prob.mesh.nodes + u) * scale), paths["deformed_mesh"])
        paths["report"].write_text(json.dumps({**report, "output_length_unit": unit}, indent=1), encoding="utf-8")
        result.outputs = {k: str(v) for k, v in paths.items()}
    return result


@dataclass
class WarpResult:
    volume_path: str
    transform_path: str
    fit_residual_mm: tuple


def run_warp(cfg: RunConfig, threads: int = 1) -> WarpResult:
    """Fit the backward transform from solve outputs and resample the source volume."""
    if cfg.warp is None:
        raise ConfigError("config has no 'warp' block")
    w = cfg.warp
    unit = cfg.geometry.length_unit
    to_mm = LENGTH_SCALE[unit] * 1e3
    mesh = load_mesh(cfg.path(cfg.geometry.mesh))
    disp_path = cfg.path(w.displacement_file) if w.displacement_file else cfg.output_dir / "displacements.csv"
    if not disp_path.exists():
        raise ConfigError(f"displacement field {disp_path} not found; run 'solve' first")
    declared = _declared_unit(disp_path)
    if declared is not None and declared != unit:
        raise WarpError(f"displacement file is in {declared} but the geometry declares {unit}")
    u = read_displacement_csv(disp_path, mesh.n_nodes)
    if np.isnan(u).any():
        raise WarpError("displacement file does not cover every mesh node")
    offset = np.asarray(w.mesh_to_image_offset_mm, float)
    X = mesh.nodes * to_mm + offset
    U = u * to_mm
    source = load_volume(cfg.path(w.source_volume))
    grid = w.target_grid
    dims = source.dims if grid is None else grid.dims
    spacing = source.spacing if grid is None else grid.spacing_mm
    origin = source.origin if grid is None else grid.origin_mm
    lo_img = np.asarray(origin, float)
    hi_img = lo_img + (np.asarray(dims) - 1) * np.asarray(spacing, float)
    # frame check before any work: the deformed geometry must overlap the target grid
    pts = X + U
    if np.any(pts.max(0) < lo_img) or np.any(pts.min(0) > hi_img):
        raise WarpError("mesh (in mm, after offset) does not overlap the target image grid; "
                        "check length units and mesh_to_image_offset_mm")
    samples = build_backward_samples(X, U)
    margin = 1e-6 * max(np.ptp(samples.positions, axis=0).max(), 1.0)
    domain = np.stack([samples.positions.min(0) - margin, samples.positions.max(0) + margin])
    backward = fit_multilevel_bspline(samples, domain, w.levels, w.initial_spacing_mm)
    forward = None
    if w.refine_iterations:
        from .warp import ScatteredSamples

        fdomain = np.stack([X.min(0) - margin, X.max(0) + margin])
        forward = fit_multilevel_bspline(ScatteredSamples(X, U), fdomain, w.levels, w.initial_spacing_mm)
    out_vol = warp_volume(source, backward, dims, spacing, origin, order=1 if w.interpolation == "linear" else 3,
                          refine_with=forward, refine_iterations=w.refine_iterations)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    vpath = out / "warped.json"
    tpath = out / "backward_transform.json"
    write_volume(out_vol, vpath)
    save_transform(backward, tpath)
    return WarpResult(str(vpath), str(tpath), backward.residual_max)


def _declared_unit(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") and "length_unit=" in line:
                return line.split("length_unit=", 1)[1].strip()
            if not line.startswith("#"):
                return None
    return None
