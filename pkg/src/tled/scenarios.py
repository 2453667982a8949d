"""Benchmark problems shared by the verification suites and the test-suite.

Each function builds one small, fully specified problem, solves it and
returns plain numbers, so the same code backs ``tled verify`` and the
acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .contact import ContactConstraint, build_master_surface, enforce_contact, max_penetration
from .dynamics import (
    DRParams,
    Loading,
    PrescribedDisplacement,
    dynamic_relaxation_solve,
    spring_chain,
)
from .fem import FEMModel, deformation_gradients, hourglass_amplitudes
from .generators import (
    ball_hex_mesh,
    box_hex_mesh,
    box_mixed_mesh,
    box_point_cloud,
    box_tet_mesh,
    icosphere,
)
from .materials import OGDEN_VISCO, MaterialParams, pk2, strain_energy
from .meshless import MeshlessModel, point_gradients

SOFT_TISSUE_E = 3000.0  # Pa
NEARLY_INCOMPRESSIBLE_NU = 0.49
BEAM_LENGTH = 1.5
BEAM_HEIGHT = 1.0
CUBE_SIZE = 0.1  # m
INDENT_DEPTH = 0.01  # 10% of the cube height

PATCH_GRADIENT = np.array([[0.02, 0.01, -0.01], [0.0, -0.03, 0.02], [0.01, 0.0, 0.01]])


def soft_tissue(nu=NEARLY_INCOMPRESSIBLE_NU, E=SOFT_TISSUE_E) -> MaterialParams:
    return MaterialParams(E=E, nu=nu)


# ---------------------------------------------------------------------------
# patch tests


def fem_patch_error(mesh, A=PATCH_GRADIENT, materials=None) -> float:
    """Solve with u = A X on the boundary only; max |F - (I + A)| over all elements.

    The interior starts at zero, so the affine state has to be found by the
    solver rather than handed to it.
    """
    A = np.asarray(A, dtype=float)
    model = FEMModel(mesh, materials or soft_tissue(nu=0.3))
    b = mesh.node_sets["boundary"]
    ld = Loading([PrescribedDisplacement(b, mesh.nodes[b] @ A.T, 1e-12)])
    r = dynamic_relaxation_solve(model, ld, DRParams(tolerance=1e-14 * mesh.diameter, max_iterations=50_000))
    target = np.eye(3) + A
    err = 0.0
    pre = model.pre
    if len(pre.hexes):
        F = deformation_gradients(pre.hex_dNdX, r.u[pre.hexes])
        err = max(err, float(np.abs(F - target).max()))
    if len(pre.tets):
        F = deformation_gradients(pre.tet_dNdX, r.u[pre.tets])
        err = max(err, float(np.abs(F - target).max()))
    return err


def meshless_patch_error(nodes_per_side=5, A=PATCH_GRADIENT, tol=1e-2) -> float:
    """Affine parameters projected onto affine data on the full boundary; max |F - (I + A)|.

    Boundary nodes and face Gauss points of the background cells are all
    constrained. The projection must leave the affine field in place and
    every integration point must see the exact gradient.
    """
    from .meshless import boundary_face_points

    A = np.asarray(A, dtype=float)
    n = nodes_per_side
    cloud = box_point_cloud((n, n, n), (n - 1,) * 3)
    model = MeshlessModel(cloud, soft_tissue(nu=0.3), tol=tol)
    pts = np.vstack([cloud.nodes[cloud.boundary_nodes["boundary"]],
                     boundary_face_points(cloud.background_cells, 2)[0]])
    con = model.boundary_constraint(pts, pts @ A.T, ramp_duration=1e-12)

    class _State:  # the projection only needs displacements, masses and time
        t = 1.0
        mass = model.mass
        u = cloud.nodes @ A.T

    con.apply(_State)
    F = point_gradients(model.table, _State.u)
    return float(np.abs(F - (np.eye(3) + A)).max())


def patch_suite(n=3) -> dict:
    """F errors of hex, ANP-tet, mixed and meshless unit-cube patch tests."""
    return {
        "hex": fem_patch_error(box_hex_mesh((n, n, n))),
        "anp_tet": fem_patch_error(box_tet_mesh((n, n, n))),
        "mixed": fem_patch_error(box_mixed_mesh((n + 1, n, n))),
        "meshless": meshless_patch_error(n + 2),
    }


# ---------------------------------------------------------------------------
# cantilever bending (locking and hourglass checks)


@dataclass
class BeamResult:
    tip_deflection: float
    hourglass_amplitude: float
    converged: bool
    iterations: int
    seconds: float


def cantilever(shape, element="hex", point_load=False, hourglass=True, hourglass_kappa=None,
               max_iterations=200_000, tol=1e-7, load=1.0, threads=1) -> BeamResult:
    """Clamped L x h x h block bent by a downward tip load of ``load`` N.

    ``element`` is ``hex``, ``anp`` or ``standard`` (constant-strain tets).
    The load is spread over the tip face, or applied at the single node
    nearest the tip-face centre when ``point_load`` (a load that excites
    hourglass modes).
    """
    L, h = BEAM_LENGTH, BEAM_HEIGHT
    make = box_hex_mesh if element == "hex" else box_tet_mesh
    mesh = make(shape, (L, h, h))
    model = FEMModel(mesh, soft_tissue(), hourglass_kappa=hourglass_kappa, hourglass=hourglass,
                     tet_formulation="standard" if element == "standard" else "anp", threads=threads)
    tip = mesh.node_sets["xmax"]
    f = np.zeros((mesh.n_nodes, 3))
    if point_load:
        c = tip[np.argmin(np.linalg.norm(mesh.nodes[tip] - [L, h / 2, h / 2], axis=1))]
        f[c, 2] = -load
    else:
        f[tip, 2] = -load / len(tip)
    ld = Loading([PrescribedDisplacement(mesh.node_sets["xmin"], [0.0, 0.0, 0.0], 1.0)], forces=f, force_ramp=1.0)
    t0 = time.perf_counter()
    r = dynamic_relaxation_solve(model, ld, DRParams(tolerance=tol * L, max_iterations=max_iterations))
    seconds = time.perf_counter() - t0
    amp = float(hourglass_amplitudes(model.pre, r.u).max()) if len(model.pre.hexes) else 0.0
    return BeamResult(float(-r.u[tip, 2].mean()), amp, r.report.converged, r.report.iterations, seconds)


def hourglass_mode_stiffness(hourglass_kappa=None) -> np.ndarray:
    """u.f / |u|^2 for each of the 12 pure hourglass modes of a unit hex."""
    mesh = box_hex_mesh((1, 1, 1))
    model = FEMModel(mesh, soft_tissue(), hourglass_kappa=hourglass_kappa)
    gamma = model.pre.hex_gamma[0]  # (4, 8), element node order
    conn = mesh.hexes[0]
    out = []
    for k in range(4):
        for axis in range(3):
            u = np.zeros((8, 3))
            u[conn, axis] = 1e-4 * gamma[k] / np.linalg.norm(gamma[k])
            f = model.internal_forces(u)
            out.append(float(np.sum(f * u) / np.sum(u * u)))
    return np.array(out)


# ---------------------------------------------------------------------------
# Dynamic Relaxation


def spring_chain_error(n_springs=10, k=25.0, end_force=1.0) -> float:
    """Relative error of the DR steady state against a direct linear solve."""
    model = spring_chain(n_springs, k=k)
    n = model.n_nodes
    f = np.zeros((n, 3))
    f[-1, 0] = end_force
    ld = Loading([PrescribedDisplacement([0], [0.0, 0.0, 0.0], 1e-9)], forces=f)
    r = dynamic_relaxation_solve(model, ld, DRParams(tolerance=1e-14, max_iterations=200_000))
    free = np.arange(3, 3 * n)
    K = model.K[np.ix_(free, free)]
    exact = np.zeros(3 * n)
    exact[free] = np.linalg.solve(K, f.ravel()[free])
    exact = exact.reshape(n, 3)
    return float(np.linalg.norm(r.u - exact) / np.linalg.norm(exact))


# ---------------------------------------------------------------------------
# cube indentation: the FEM / meshless comparison problem
#
# Quarter model of a cube whose top is pushed down by a smooth frictionless
# indenter: the top face moves by -d cos(pi x / 2S) cos(pi y / 2S) (the full
# cube is compressed to 0.9 of its height at its centre line), the bottom
# slides on a frictionless support and x = 0, y = 0 are symmetry planes.
# Sliding constraints leave no corner singularity, so the FEM reference
# converges and a 2% comparison is meaningful.


def indentation_constraints(points, size=CUBE_SIZE, depth=INDENT_DEPTH):
    """(values, component mask) of the indentation boundary data at boundary points."""
    X = np.asarray(points, dtype=float)
    eps = 1e-9 * size
    vals = np.zeros((len(X), 3))
    comp = np.zeros((len(X), 3), dtype=bool)
    comp[:, 0] = X[:, 0] < eps
    comp[:, 1] = X[:, 1] < eps
    comp[:, 2] = X[:, 2] < eps
    top = X[:, 2] > size - eps
    comp[top, 2] = True
    vals[top, 2] = -depth * np.cos(np.pi * X[top, 0] / (2 * size)) * np.cos(np.pi * X[top, 1] / (2 * size))
    return vals, comp


def _grouped_prescribed(nodes, X, ramp):
    vals, comp = indentation_constraints(X[nodes])
    out = []
    for mask in {tuple(c) for c in comp[comp.any(axis=1)]}:
        sel = np.all(comp == mask, axis=1)
        out.append(PrescribedDisplacement(nodes[sel], vals[sel], ramp, mask))
    # deterministic order
    out.sort(key=lambda p: tuple(p.components))
    return out


@dataclass
class CubeSolution:
    points: np.ndarray
    u: np.ndarray
    iterations: int
    converged: bool
    seconds: float


def indentation_fem(n, tol=1e-9, ramp=1.0, params: DRParams | None = None, hourglass_kappa=None,
                    threads=1) -> CubeSolution:
    mesh = box_hex_mesh((n, n, n), (CUBE_SIZE,) * 3)
    model = FEMModel(mesh, soft_tissue(), hourglass_kappa=hourglass_kappa, threads=threads)
    ld = Loading(_grouped_prescribed(mesh.node_sets["boundary"], mesh.nodes, ramp))
    params = params or DRParams(tolerance=tol * CUBE_SIZE)
    t0 = time.perf_counter()
    r = dynamic_relaxation_solve(model, ld, params)
    return CubeSolution(mesh.nodes, r.u, r.report.iterations, r.report.converged, time.perf_counter() - t0)


def indentation_meshless(nodes_per_side, tol=1e-9, integration_tol=1e-2, threads=1) -> CubeSolution:
    n = nodes_per_side
    cloud = box_point_cloud((n, n, n), (n - 1,) * 3, (CUBE_SIZE,) * 3)
    model = MeshlessModel(cloud, soft_tissue(), tol=integration_tol, threads=threads)
    pts = cloud.nodes[cloud.boundary_nodes["boundary"]]
    vals, comp = indentation_constraints(pts)
    keep = comp.any(axis=1)
    con = model.boundary_constraint(pts[keep], vals[keep], 1.0, comp[keep])
    t0 = time.perf_counter()
    r = dynamic_relaxation_solve(model, Loading([], [con]), DRParams(tolerance=tol * CUBE_SIZE))
    return CubeSolution(cloud.nodes, model.reconstruct(r.u), r.report.iterations, r.report.converged,
                        time.perf_counter() - t0)


def grid_interpolant(sol: CubeSolution, n):
    """Trilinear interpolant of a solution on the (n+1)^3 lattice of a box_hex_mesh cube."""
    g = np.linspace(0.0, CUBE_SIZE, n + 1)
    idx = np.rint(sol.points / CUBE_SIZE * n).astype(int)
    grid = np.zeros((n + 1, n + 1, n + 1, 3))
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = sol.u
    return RegularGridInterpolator((g, g, g), grid)


def relative_max_difference(sol: CubeSolution, reference: CubeSolution, n_reference) -> float:
    """max |u - u_ref| at the solution's points over max |u_ref|."""
    ref = grid_interpolant(reference, n_reference)(sol.points)
    scale = float(np.linalg.norm(reference.u, axis=1).max())
    return float(np.linalg.norm(sol.u - ref, axis=1).max() / scale)


def dr_iteration_comparison(n=6, damping_factors=(0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0, 2.8, 4.0),
                            tol=1e-7) -> dict:
    """Adaptive DR iterations against a sweep of fixed damping values.

    The load is applied in (almost) one step so that iteration counts
    measure convergence, not the loading ramp. Fixed damping values are
    multiples of the adaptive run's final coefficient, which brackets the
    optimum c = 2 sqrt(lambda_min).
    """
    ramp = 1e-12
    adaptive = indentation_fem(n, ramp=ramp, params=DRParams(tolerance=tol * CUBE_SIZE))
    mesh = box_hex_mesh((n, n, n), (CUBE_SIZE,) * 3)
    model = FEMModel(mesh, soft_tissue())
    ld = Loading(_grouped_prescribed(mesh.node_sets["boundary"], mesh.nodes, ramp))
    c_ref = dynamic_relaxation_solve(model, ld, DRParams(tolerance=tol * CUBE_SIZE)).report.damping
    fixed = {}
    for fac in damping_factors:
        r = dynamic_relaxation_solve(model, ld, DRParams(damping=fac * c_ref, adaptive=False,
                                                         tolerance=tol * CUBE_SIZE, max_iterations=20_000))
        fixed[float(fac)] = r.report.iterations if r.report.converged else None
    best = min(v for v in fixed.values() if v is not None)
    return {"adaptive": adaptive.iterations, "fixed": fixed, "best_fixed": best,
            "ratio": adaptive.iterations / best}


# ---------------------------------------------------------------------------
# contact


def sphere_in_shell(cells=6, radius=0.01, shell_radius=0.0115, push=-0.004, pull=0.0005) -> dict:
    """Soft ball pushed into a rigid spherical shell, then pulled away from it.

    Nodes of the top cap are driven down by ``push`` (contact stops the
    bottom), then a separate run pulls them up by ``pull``, which must give
    bit-identical results with and without contact.
    """
    mesh = ball_hex_mesh(cells, radius)
    V, T = icosphere(3, shell_radius)
    master = build_master_surface(V, T)
    model = FEMModel(mesh, soft_tissue(nu=0.45))
    X = mesh.nodes
    cap = np.nonzero(X[:, 2] > 0.7 * radius)[0]
    slaves = np.setdiff1d(mesh.node_sets["boundary"], cap)

    def run(dz, contact):
        cons = [ContactConstraint(master, slaves, X)] if contact else []
        ld = Loading([PrescribedDisplacement(cap, [0.0, 0.0, dz], 0.05)], cons)
        return dynamic_relaxation_solve(model, ld, DRParams())

    pushed = run(push, True)
    u = pushed.u
    pen = max_penetration(master, X[slaves] + u[slaves])
    again, _, rep = enforce_contact(u, u, slaves, master, X)
    a = run(pull, True)
    b = run(pull, False)
    return {
        "converged": bool(pushed.report.converged),
        "max_penetration_m": pen,
        "idempotent": bool(np.array_equal(again, u) and rep.projected == 0),
        "separation_bitwise_equal": bool(np.array_equal(a.u, b.u)),
        "bottom_z_m": float((X + u)[:, 2].min()),
    }


# ---------------------------------------------------------------------------
# step cost


def step_cost(cells_per_side, steps=20, threads=1) -> dict:
    """Wall-clock per internal-force evaluation and explicit update on a hex cube."""
    from .dynamics import SolverState, explicit_step

    n = cells_per_side
    mesh = box_hex_mesh((n, n, n), (CUBE_SIZE,) * 3)
    model = FEMModel(mesh, soft_tissue(), threads=threads)
    rng = np.random.default_rng(0)
    u = 1e-5 * rng.standard_normal((mesh.n_nodes, 3))
    state = SolverState.at_rest(mesh.n_nodes, model.mass, 1e-4, u)
    f_ext = np.zeros((mesh.n_nodes, 3))
    f = model.internal_forces(state.u)
    t0 = time.perf_counter()
    for _ in range(steps):
        state = explicit_step(state, f, f_ext, (), 1.0)
        f = model.internal_forces(state.u)
    per_step = (time.perf_counter() - t0) / steps
    return {"elements": int(n ** 3), "dof": int(3 * mesh.n_nodes), "seconds_per_step": per_step}


# ---------------------------------------------------------------------------
# constitutive checks


def random_deformation_gradients(n=100, spread=0.25, seed=0) -> np.ndarray:
    """Random F = I + spread * N(0, 1) with det F > 0.2, drawn deterministically."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        F = np.eye(3) + spread * rng.standard_normal((3, 3))
        if np.linalg.det(F) > 0.2:
            out.append(F)
    return np.array(out)


def energy_gradient_fd(F, params: MaterialParams, h=1e-6) -> np.ndarray:
    """dW/dF by central differences, component by component."""
    F = np.asarray(F, dtype=float)
    P = np.zeros_like(F)
    for i in range(3):
        for j in range(3):
            E = np.zeros((3, 3))
            E[i, j] = h
            P[..., i, j] = (strain_energy(F + E, params) - strain_energy(F - E, params)) / (2 * h)
    return P


def stress_energy_mismatch(params: MaterialParams, n=100, seed=0) -> float:
    """Worst relative |F S - dW/dF| over random deformation gradients."""
    F = random_deformation_gradients(n, seed=seed)
    P = np.matmul(F, pk2(F, params))
    P_fd = energy_gradient_fd(F, params)
    scale = np.linalg.norm(P_fd, axis=(1, 2))
    return float(np.max(np.linalg.norm(P - P_fd, axis=(1, 2)) / scale))


def ogden_neo_hookean_mismatch(n=100, seed=0) -> float:
    """Relative difference between alpha = 2 Ogden and Neo-Hookean stresses."""
    nh = soft_tissue()
    og = MaterialParams.matched_ogden(nh.E, nh.nu)
    F = random_deformation_gradients(n, seed=seed)
    S_nh, S_og = pk2(F, nh), pk2(F, og)
    return float(np.max(np.linalg.norm(S_og - S_nh, axis=(1, 2)) / np.linalg.norm(S_nh, axis=(1, 2))))


OGDEN_TWO_TERM = MaterialParams(OGDEN_VISCO, SOFT_TISSUE_E, NEARLY_INCOMPRESSIBLE_NU,
                                (700.0, 306.0), (3.0, -2.0))


def constitutive_suite(n=100) -> dict:
    return {
        "neo_hookean_vs_energy": stress_energy_mismatch(soft_tissue(), n),
        "ogden_vs_energy": stress_energy_mismatch(OGDEN_TWO_TERM, n),
        "ogden_alpha2_vs_neo_hookean": ogden_neo_hookean_mismatch(n),
    }
