"""Total Lagrangian internal forces for hexahedra and tetrahedra.

Hexahedra use a single integration point with stiffness-based
Flanagan-Belytschko hourglass control; tetrahedra use either the average
nodal pressure (ANP) formulation or the plain constant-strain element (kept
for locking comparisons). Everything that depends on geometry alone is
computed once by :func:`precompute_elements`.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from . import materials as mat
from .errors import ElementInversionError
from .geometry import HEX_FACES, HEX_NATURAL, Mesh, TET_FACES, hex_jacobians, lumped_mass

DEFAULT_HOURGLASS_KAPPA = 0.1
HOURGLASS_BASE = np.stack(
    [
        HEX_NATURAL[:, 1] * HEX_NATURAL[:, 2],
        HEX_NATURAL[:, 0] * HEX_NATURAL[:, 2],
        HEX_NATURAL[:, 0] * HEX_NATURAL[:, 1],
        HEX_NATURAL[:, 0] * HEX_NATURAL[:, 1] * HEX_NATURAL[:, 2],
    ]
)


def hourglass_kappa_default() -> float:
    """Default hourglass coefficient; ``TLED_HOURGLASS_KAPPA`` overrides it."""
    return float(os.environ.get("TLED_HOURGLASS_KAPPA", DEFAULT_HOURGLASS_KAPPA))


def as_region_map(materials) -> dict:
    if materials is None:
        return {0: mat.MaterialParams()}
    if isinstance(materials, mat.MaterialParams):
        return {None: materials}
    return dict(materials)


def params_for(region_map: Mapping, region: int) -> mat.MaterialParams:
    if None in region_map:
        return region_map[None]
    try:
        return region_map[int(region)]
    except KeyError:
        raise mat.MaterialError(f"no material block for region {int(region)}") from None


def _element_moduli(regions, region_map):
    mu = np.empty(len(regions))
    kappa = np.empty(len(regions))
    rho = np.empty(len(regions))
    for r in np.unique(regions):
        p = params_for(region_map, r)
        sel = regions == r
        mu[sel], kappa[sel], rho[sel] = p.mu, p.kappa, p.density
    return mu, kappa, rho


def _scatter_matrix(conn, n_nodes):
    """Sparse (n_nodes x conn.size) summation operator in fixed order."""
    cols = np.arange(conn.size)
    return sp.csr_matrix((np.ones(conn.size), (conn.ravel(), cols)), shape=(n_nodes, conn.size))


def _quad_area(P):
    return 0.5 * np.linalg.norm(np.cross(P[..., 2, :] - P[..., 0, :], P[..., 3, :] - P[..., 1, :]), axis=-1)


def _tri_area(P):
    return 0.5 * np.linalg.norm(np.cross(P[..., 1, :] - P[..., 0, :], P[..., 2, :] - P[..., 0, :]), axis=-1)


@dataclass(frozen=True, eq=False)
class ElementPrecomp:
    n_nodes: int
    hexes: np.ndarray
    hex_dNdX: np.ndarray  # (H, 8, 3)
    hex_V0: np.ndarray
    hex_gamma: np.ndarray  # (H, 4, 8)
    hex_khg: np.ndarray  # N/m
    hex_regions: np.ndarray
    hex_length: np.ndarray
    tets: np.ndarray
    tet_dNdX: np.ndarray  # (T, 4, 3)
    tet_V0: np.ndarray
    tet_regions: np.ndarray
    tet_length: np.ndarray
    anp_V0n: np.ndarray  # per node, tets only
    anp_kappa_n: np.ndarray
    hex_scatter: sp.csr_matrix
    tet_scatter: sp.csr_matrix
    hourglass_kappa: float
    hex_hg: np.ndarray  # (H, 8, 8) k_hg Gamma^T Gamma, the hourglass stiffness


def precompute_elements(mesh: Mesh, materials=None, hourglass_kappa: float | None = None) -> ElementPrecomp:
    """Reference-configuration derivatives, volumes, hourglass vectors, ANP volumes."""
    region_map = as_region_map(materials)
    kappa_hg = hourglass_kappa_default() if hourglass_kappa is None else float(hourglass_kappa)
    n = mesh.n_nodes
    X = mesh.nodes

    Xh = X[mesh.hexes]
    Jh = hex_jacobians(Xh)
    detJ = mat.det3(Jh)
    if np.any(detJ <= 0):
        from .errors import DegenerateElementError

        i = int(np.nonzero(detJ <= 0)[0][0])
        raise DegenerateElementError("hex", i, float(8 * detJ[i]))
    hex_V0 = 8.0 * detJ
    # dN/dX = dN/dxi J^-1, with dN_a/dxi = xi_a / 8 at the centre
    hex_dNdX = np.einsum("aj,ejk->eak", HEX_NATURAL / 8.0, mat.inv3(Jh, detJ))
    # Gamma = h - dN/dX (X^T h): orthogonal to every linear nodal field
    XTh = np.einsum("ebj,kb->ekj", Xh, HOURGLASS_BASE)
    hex_gamma = HOURGLASS_BASE[None] - np.einsum("eaj,ekj->eka", hex_dNdX, XTh)
    mu_h, _, _ = _element_moduli(mesh.hex_regions, region_map)
    hex_khg = kappa_hg * mu_h * np.cbrt(hex_V0)
    if len(mesh.hexes):
        hex_length = hex_V0 / _quad_area(Xh[:, HEX_FACES]).max(axis=1)
    else:
        hex_length = np.zeros(0)

    Xt = X[mesh.tets]
    E = Xt[:, 1:, :] - Xt[:, :1, :]
    detE = mat.det3(E)
    if np.any(detE <= 0):
        from .errors import DegenerateElementError

        i = int(np.nonzero(detE <= 0)[0][0])
        raise DegenerateElementError("tet", i, float(detE[i] / 6))
    tet_V0 = detE / 6.0
    grad = np.swapaxes(mat.inv3(E, detE), -1, -2)  # rows: grad of barycentric 1..3
    tet_dNdX = np.concatenate([-grad.sum(axis=1, keepdims=True), grad], axis=1)
    if len(mesh.tets):
        tet_length = 3.0 * tet_V0 / _tri_area(Xt[:, TET_FACES]).max(axis=1)
    else:
        tet_length = np.zeros(0)
    _, kappa_t, _ = _element_moduli(mesh.tet_regions, region_map)
    anp_V0n = np.zeros(n)
    anp_kn = np.zeros(n)
    np.add.at(anp_V0n, mesh.tets, (tet_V0 / 4.0)[:, None])
    np.add.at(anp_kn, mesh.tets, (tet_V0 * kappa_t / 4.0)[:, None])
    has = anp_V0n > 0
    anp_kn[has] /= anp_V0n[has]

    hex_hg = hex_khg[:, None, None] * np.matmul(np.swapaxes(hex_gamma, 1, 2), hex_gamma)
    for arr in (hex_hg, hex_dNdX, hex_V0, hex_gamma, hex_khg, hex_length, tet_dNdX, tet_V0, tet_length, anp_V0n, anp_kn):
        arr.setflags(write=False)
    return ElementPrecomp(
        n, mesh.hexes, hex_dNdX, hex_V0, hex_gamma, hex_khg, mesh.hex_regions, hex_length,
        mesh.tets, tet_dNdX, tet_V0, mesh.tet_regions, tet_length, anp_V0n, anp_kn,
        _scatter_matrix(mesh.hexes, n), _scatter_matrix(mesh.tets, n), kappa_hg, hex_hg,
    )


# ---------------------------------------------------------------------------
# kernels


def _chunks(n, threads):
    if threads <= 1 or n < 2048:
        return [slice(0, n)]
    edges = np.linspace(0, n, threads + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _map_chunks(fn, n, threads):
    """Evaluate ``fn(slice)`` on element chunks; results concatenated in order.

    Per-element arithmetic does not depend on the chunking, so any thread
    count gives bitwise-identical output.
    """
    parts = _chunks(n, threads)
    if len(parts) == 1:
        return fn(parts[0])
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        results = list(pool.map(fn, parts))
    if isinstance(results[0], tuple):
        return tuple(np.concatenate(r) for r in zip(*results))
    return np.concatenate(results)


def _stress_by_region(F, regions, region_map, kind, offset, volumetric=True, long_term=False):
    """PK2 stress per element, grouped by region; relabels inversion errors."""
    S = np.empty(F.shape)
    for r in np.unique(regions):
        sel = np.nonzero(regions == r)[0]
        p = params_for(region_map, r)
        try:
            J, C, Cinv = mat._kinematics(F[sel])
        except ElementInversionError as exc:
            raise ElementInversionError(exc.F, int(offset + sel[exc.index]), kind) from None
        S_iso = mat.isochoric_stress(F[sel], p, J, C, Cinv)
        if long_term:
            S_iso = S_iso * p.long_term_factor
        if volumetric:
            S_iso = S_iso + (mat.volumetric_pressure(J, p.kappa) * J)[:, None, None] * Cinv
        S[sel] = S_iso
    return S


def deformation_gradients(dNdX, u_e):
    return np.eye(3) + np.matmul(np.swapaxes(u_e, 1, 2), dNdX)


def hex_element_forces(pre: ElementPrecomp, u, materials=None, threads=1, hourglass=True, long_term=False):
    """Per-element nodal forces (H, 8, 3) for the hexahedra."""
    region_map = as_region_map(materials)
    u = np.asarray(u, dtype=float)

    def kernel(s):
        u_e = u[pre.hexes[s]]
        dN = pre.hex_dNdX[s]
        F = deformation_gradients(dN, u_e)
        S = _stress_by_region(F, pre.hex_regions[s], region_map, "hex", s.start, long_term=long_term)
        P = F @ S
        fe = pre.hex_V0[s][:, None, None] * np.matmul(dN, np.swapaxes(P, 1, 2))
        if hourglass:
            fe += np.matmul(pre.hex_hg[s], u_e)
        return fe

    return _map_chunks(kernel, len(pre.hexes), threads)


def hex_internal_forces(pre: ElementPrecomp, u, materials=None, threads=1, hourglass=True, long_term=False):
    """Assembled hexahedral internal force (n_nodes, 3), hourglass included."""
    if not len(pre.hexes):
        return np.zeros((pre.n_nodes, 3))
    fe = hex_element_forces(pre, u, materials, threads, hourglass, long_term)
    return pre.hex_scatter @ fe.reshape(-1, 3)


def hourglass_amplitudes(pre: ElementPrecomp, u):
    """|Gamma^T u| per hex and mode, shape (H, 4)."""
    u_e = np.asarray(u)[pre.hexes]
    return np.linalg.norm(np.einsum("eka,eai->eki", pre.hex_gamma, u_e), axis=-1)


def tet_internal_forces_standard(pre: ElementPrecomp, u, materials=None, threads=1, long_term=False):
    """Constant-strain tetrahedra with element-wise volumetric response (locks)."""
    if not len(pre.tets):
        return np.zeros((pre.n_nodes, 3))
    region_map = as_region_map(materials)
    u = np.asarray(u, dtype=float)

    def kernel(s):
        dN = pre.tet_dNdX[s]
        F = deformation_gradients(dN, u[pre.tets[s]])
        S = _stress_by_region(F, pre.tet_regions[s], region_map, "tet", s.start, long_term=long_term)
        return pre.tet_V0[s][:, None, None] * np.matmul(dN, np.swapaxes(F @ S, 1, 2))

    fe = _map_chunks(kernel, len(pre.tets), threads)
    return pre.tet_scatter @ fe.reshape(-1, 3)


def anp_nodal_state(pre: ElementPrecomp, u):
    """Element F and J, current ANP nodal volumes, nodal J and nodal pressure."""
    u = np.asarray(u, dtype=float)
    F = deformation_gradients(pre.tet_dNdX, u[pre.tets])
    J = mat.det3(F)
    Vn = pre.tet_scatter @ np.repeat(pre.tet_V0 * J / 4.0, 4)
    Jn = np.ones(pre.n_nodes)
    has = pre.anp_V0n > 0
    Jn[has] = Vn[has] / pre.anp_V0n[has]
    pn = mat.volumetric_pressure(Jn, pre.anp_kappa_n)
    return F, J, Vn, Jn, pn


def tet_internal_forces_anp(pre: ElementPrecomp, u, materials=None, threads=1, long_term=False):
    """Average-nodal-pressure tetrahedra.

    Nodal volume ratios come from the incident tets' current volumes; the
    element pressure is the mean of its four nodal pressures. Interface nodes
    use the volume-weighted bulk modulus of their incident tets, so elements
    on material interfaces need no special handling.
    """
    if not len(pre.tets):
        return np.zeros((pre.n_nodes, 3))
    region_map = as_region_map(materials)
    F, J, _, _, pn = anp_nodal_state(pre, u)
    if np.any(J <= 0):
        i = int(np.nonzero(J <= 0)[0][0])
        raise ElementInversionError(F[i], i, "tet")
    p_el = pn[pre.tets].mean(axis=1)

    def kernel(s):
        Fs = F[s]
        Cinv = mat.inv3(np.matmul(np.swapaxes(Fs, 1, 2), Fs), J[s] ** 2)
        S = _stress_by_region(Fs, pre.tet_regions[s], region_map, "tet", s.start,
                              volumetric=False, long_term=long_term)
        S = S + (p_el[s] * J[s])[:, None, None] * Cinv
        return pre.tet_V0[s][:, None, None] * np.matmul(pre.tet_dNdX[s], np.swapaxes(Fs @ S, 1, 2))

    fe = _map_chunks(kernel, len(pre.tets), threads)
    return pre.tet_scatter @ fe.reshape(-1, 3)


# ---------------------------------------------------------------------------
# energies (oracles for the force consistency checks)


def _energy_by_region(F, regions, region_map, volumetric=True, long_term=False):
    W = np.empty(len(F))
    for r in np.unique(regions):
        sel = regions == r
        p = params_for(region_map, r)
        if volumetric and not long_term:
            W[sel] = mat.strain_energy(F[sel], p)
        else:
            J = mat.det3(F[sel])
            W[sel] = mat.strain_energy(F[sel], p) - mat.volumetric_energy(J, p.kappa)
            if long_term:
                W[sel] *= p.long_term_factor
                if volumetric:
                    W[sel] += mat.volumetric_energy(J, p.kappa)
    return W


def hex_energy(pre, u, materials=None, hourglass=True):
    region_map = as_region_map(materials)
    u = np.asarray(u, dtype=float)
    u_e = u[pre.hexes]
    F = deformation_gradients(pre.hex_dNdX, u_e)
    E = np.sum(pre.hex_V0 * _energy_by_region(F, pre.hex_regions, region_map))
    if hourglass:
        q = np.einsum("eka,eai->eki", pre.hex_gamma, u_e)
        E += 0.5 * np.sum(pre.hex_khg[:, None, None] * q * q)
    return float(E)


def tet_energy_standard(pre, u, materials=None):
    region_map = as_region_map(materials)
    F = deformation_gradients(pre.tet_dNdX, np.asarray(u, dtype=float)[pre.tets])
    return float(np.sum(pre.tet_V0 * _energy_by_region(F, pre.tet_regions, region_map)))


def tet_energy_anp(pre, u, materials=None):
    region_map = as_region_map(materials)
    F, _, _, Jn, _ = anp_nodal_state(pre, u)
    W_iso = _energy_by_region(F, pre.tet_regions, region_map, volumetric=False)
    return float(np.sum(pre.tet_V0 * W_iso) + np.sum(pre.anp_V0n * mat.volumetric_energy(Jn, pre.anp_kappa_n)))


# ---------------------------------------------------------------------------
# model wrapper used by the solvers


class FEMModel:
    """Mesh + materials + precomputed data with the solver-facing interface.

    ``tet_formulation`` is ``"anp"`` (default) or ``"standard"``.
    """

    kind = "fem"

    def __init__(self, mesh: Mesh, materials=None, hourglass_kappa=None, hourglass=True,
                 tet_formulation="anp", threads=1, long_term=True):
        self.mesh = mesh
        self.materials = as_region_map(materials)
        self.pre = precompute_elements(mesh, self.materials, hourglass_kappa)
        self.hourglass = hourglass
        if tet_formulation not in ("anp", "standard"):
            raise ValueError(f"unknown tet formulation {tet_formulation!r}")
        self.tet_formulation = tet_formulation
        self.threads = max(1, int(threads))
        # steady-state solves use the relaxed (long-term) isochoric response
        self.long_term = long_term
        density = {r: p.density for r, p in self.materials.items() if r is not None}
        if None in self.materials:
            density = self.materials[None].density
        self.mass = lumped_mass(mesh, density)

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def reference_positions(self) -> np.ndarray:
        return self.mesh.nodes

    @property
    def diameter(self) -> float:
        return self.mesh.diameter

    @property
    def n_integration_points(self) -> int:
        return len(self.pre.hexes) + len(self.pre.tets)

    def internal_forces(self, u) -> np.ndarray:
        f = hex_internal_forces(self.pre, u, self.materials, self.threads, self.hourglass, self.long_term)
        if len(self.pre.tets):
            if self.tet_formulation == "anp":
                f = f + tet_internal_forces_anp(self.pre, u, self.materials, self.threads, self.long_term)
            else:
                f = f + tet_internal_forces_standard(self.pre, u, self.materials, self.threads, self.long_term)
        return f

    def energy(self, u) -> float:
        E = 0.0
        if len(self.pre.hexes):
            E += hex_energy(self.pre, u, self.materials, self.hourglass)
        if len(self.pre.tets):
            E += (tet_energy_anp if self.tet_formulation == "anp" else tet_energy_standard)(self.pre, u, self.materials)
        return E

    def element_wave_data(self):
        """(characteristic length m, dilatational wave speed m/s) per element."""
        lengths, speeds = [], []
        for regions, length in ((self.pre.hex_regions, self.pre.hex_length),
                                (self.pre.tet_regions, self.pre.tet_length)):
            mu, kappa, rho = _element_moduli(regions, self.materials)
            lengths.append(length)
            speeds.append(np.sqrt((kappa + 4.0 * mu / 3.0) / rho))
        return np.concatenate(lengths), np.concatenate(speeds)

    def stiffness_row_bound(self) -> np.ndarray:
        """Per-node estimate of the stiffness row sum (N/m), for DR mass scaling."""
        D = np.zeros(self.n_nodes)
        for conn, dN, V0, regions in ((self.pre.hexes, self.pre.hex_dNdX, self.pre.hex_V0, self.pre.hex_regions),
                                      (self.pre.tets, self.pre.tet_dNdX, self.pre.tet_V0, self.pre.tet_regions)):
            if not len(conn):
                continue
            mu, kappa, _ = _element_moduli(regions, self.materials)
            g = np.linalg.norm(dN, axis=2)
            row = (kappa + 4.0 * mu / 3.0)[:, None] * V0[:, None] * g * g.sum(axis=1, keepdims=True)
            np.add.at(D, conn, row)
        if len(self.pre.hexes) and self.hourglass:
            G = np.abs(self.pre.hex_gamma)
            row = self.pre.hex_khg[:, None] * np.einsum("eka,ek->ea", G, G.sum(axis=2))
            np.add.at(D, self.pre.hexes, row)
        return D
