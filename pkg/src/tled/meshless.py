"""Meshless Total Lagrangian machinery on node clouds.

Shape functions come from a modified moving least squares fit: a complete
linear or quadratic basis, quartic-spline weights, and a small ridge on the
quadratic coefficients so the moment matrix stays invertible when only a
linear basis would be supported. Integration points come from adaptive
octasection of the background cells, guided by the sum of squared shape
functions. Essential boundary conditions are imposed by projecting the
nodal parameters onto the constraint set with a precomputed operator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import materials as mat
from .errors import ConstraintError, ElementInversionError, ShapeFunctionError
from .fem import _element_moduli, _energy_by_region, _map_chunks, _stress_by_region, as_region_map
from .geometry import PointCloud, lumped_mass

log = logging.getLogger(__name__)

DEFAULT_DILATION = {1: 1.8, 2: 2.4}
DEFAULT_RIDGE = 1e-8
DEFAULT_MAX_DEPTH = 6
PINV_RCOND = 1e-10
N_BASIS = {1: 4, 2: 10}
# quadratic monomials as index pairs into (x, y, z)
_QUAD = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (2, 0)]


def quartic_weight(q):
    """w(q) = 1 - 6q^2 + 8q^3 - 3q^4 on q < 1, and its derivative dw/dq."""
    q = np.asarray(q, dtype=float)
    inside = q < 1.0
    w = np.where(inside, 1.0 - 6.0 * q ** 2 + 8.0 * q ** 3 - 3.0 * q ** 4, 0.0)
    dw = np.where(inside, -12.0 * q + 24.0 * q ** 2 - 12.0 * q ** 3, 0.0)
    return w, dw


def basis(xi, order):
    """Polynomial basis at scaled local coordinates ``xi`` (..., 3) -> (..., m)."""
    terms = [np.ones(xi.shape[:-1]), xi[..., 0], xi[..., 1], xi[..., 2]]
    if order == 2:
        terms += [xi[..., a] * xi[..., b] for a, b in _QUAD]
    return np.stack(terms, axis=-1)


def node_spacing(nodes: np.ndarray, k: int = 6) -> np.ndarray:
    """Local spacing per node: median distance to its k nearest neighbours."""
    if len(nodes) < 2:
        return np.ones(len(nodes))
    k = min(k, len(nodes) - 1)
    d, _ = cKDTree(nodes).query(nodes, k=k + 1)
    return np.median(d[:, 1:], axis=1)


def support_radii(nodes, order=1, dilation=None) -> np.ndarray:
    if order not in N_BASIS:
        raise ShapeFunctionError(f"basis order must be 1 or 2, got {order}")
    dilation = DEFAULT_DILATION[order] if dilation is None else float(dilation)
    return dilation * node_spacing(nodes)


# ---------------------------------------------------------------------------
# modified MLS


@dataclass(frozen=True, eq=False)
class ShapeValues:
    """Padded shape-function data at a batch of points.

    ``support`` (P, K) node indices (padding repeats a valid index with zero
    values), ``count`` (P,) true support sizes, ``phi`` (P, K), ``dphi``
    (P, K, 3) reference-configuration gradients.
    """

    support: np.ndarray
    count: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray


def _neighbours(tree, radii, x):
    """Ragged support lists as padded (P, K) indices + mask, sorted by node index."""
    rmax = float(radii.max())
    pts_tree = cKDTree(x)
    pairs = pts_tree.sparse_distance_matrix(tree, rmax, output_type="ndarray")
    i, j, d = pairs["i"], pairs["j"], pairs["v"]
    # sparse_distance_matrix drops exact zero distances; add coincident nodes back
    d0, j0 = tree.query(x, k=1)
    hit = np.nonzero(d0 == 0.0)[0]
    if len(hit):
        i = np.concatenate([i, hit.astype(i.dtype)])
        j = np.concatenate([j, j0[hit].astype(j.dtype)])
        d = np.concatenate([d, np.zeros(len(hit))])
        key = np.unique(i.astype(np.int64) * (len(radii) + 1) + j, return_index=True)[1]
        i, j, d = i[key], j[key], d[key]
    keep = d < radii[j]
    i, j = i[keep], j[keep]
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    count = np.bincount(i, minlength=len(x))
    K = max(int(count.max()) if len(count) else 0, 1)
    start = np.concatenate([[0], np.cumsum(count)[:-1]])
    slot = np.arange(len(i)) - start[i]
    support = np.zeros((len(x), K), dtype=np.int64)
    mask = np.zeros((len(x), K), dtype=bool)
    support[i, slot] = j
    mask[i, slot] = True
    first = support[:, :1]
    support = np.where(mask, support, first)
    return support, mask, count


def _mmls_padded(nodes, radii, x, order, ridge, support, mask, count, derivatives=True):
    P, K = support.shape
    m = N_BASIS[order]
    x = np.asarray(x, dtype=float)
    low = count < m
    if np.any(low):
        p = int(np.nonzero(low)[0][0])
        raise ShapeFunctionError(
            f"point {x[p].tolist()} has {int(count[p])} supporting nodes, needs >= {m}; "
            "increase the support radius"
        )
    diff = x[:, None, :] - nodes[support]  # y - X_i
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    R = radii[support]
    w, dwq = quartic_weight(r / R)
    w = np.where(mask, w, 0.0)

    # local coordinates in units of a quarter of the mean support radius
    # (about one node spacing); the ridge below is relative to this scaling
    scale = 0.25 * np.sum(np.where(mask, R, 0.0), axis=1) / count
    xi = -diff / scale[:, None, None]  # (X_i - c) / s
    Pm = basis(xi, order)  # (P, K, m)
    PmT = np.swapaxes(Pm, 1, 2)
    A = PmT @ (w[..., None] * Pm)
    quad = np.zeros(m)
    quad[4:] = 1.0
    if order == 2:
        # ridge relative to the zeroth moment sum(w); differentiated consistently
        A = A + (ridge * np.sum(w, axis=1))[:, None, None] * np.diag(quad)
    try:
        # Cholesky doubles as the invertibility check (A is symmetric positive semi-definite)
        L = np.linalg.cholesky(A)
        diag = np.diagonal(L, axis1=1, axis2=2)
        ok = np.min(diag, axis=1) ** 2 > 1e-13 * np.max(diag, axis=1) ** 2
    except np.linalg.LinAlgError:
        ok = np.array([np.all(np.linalg.eigvalsh(a) > 0) for a in A])
    if not np.all(ok):
        p = int(np.nonzero(~ok)[0][0])
        raise ShapeFunctionError(
            f"singular moment matrix at {x[p].tolist()} ({int(count[p])} supporting nodes); "
            "increase the support radius or add nodes"
        )
    p0 = np.zeros((P, m, 1))
    p0[:, 0, 0] = 1.0
    gamma = np.linalg.solve(A, p0)[..., 0]
    gp = (Pm @ gamma[..., None])[..., 0]
    phi = gp * w
    if not derivatives:
        return phi, None
    safe_r = np.where(r > 0, r, 1.0)
    dw = np.where(mask & (r > 0), dwq / (safe_r * R), 0.0)[..., None] * diff  # (P, K, 3)
    # dA_j gamma = Pm^T (dw_j * (Pm gamma)) (+ ridge term)
    dAg = np.einsum("pka,pkj->pja", Pm, dw * gp[..., None])
    if order == 2:
        dAg = dAg + (ridge * np.sum(dw, axis=1))[:, :, None] * (quad * gamma)[:, None, :]
    dp = np.zeros((P, 3, m))
    dp[:, 0, 1] = dp[:, 1, 2] = dp[:, 2, 3] = 1.0 / scale
    dgamma = np.swapaxes(np.linalg.solve(A, np.swapaxes(dp - dAg, 1, 2)), 1, 2)  # (P, 3, m)
    dphi = (Pm @ np.swapaxes(dgamma, 1, 2)) * w[..., None] + gp[..., None] * dw
    return phi, dphi


def mmls_batch(nodes, radii, x, order=1, ridge=DEFAULT_RIDGE, tree=None, chunk=20000,
               derivatives=True) -> ShapeValues:
    """Shape functions and gradients at many points."""
    if order not in N_BASIS:
        raise ShapeFunctionError(f"basis order must be 1 or 2, got {order}")
    nodes = np.asarray(nodes, dtype=float)
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(nodes),)).copy()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tree = cKDTree(nodes) if tree is None else tree
    parts = []
    for a in range(0, len(x), chunk):
        xs = x[a:a + chunk]
        support, mask, count = _neighbours(tree, radii, xs)
        phi, dphi = _mmls_padded(nodes, radii, xs, order, ridge, support, mask, count, derivatives)
        parts.append((support, count, phi, dphi))
    K = max(p[0].shape[1] for p in parts)

    def pad(a, fill_first=False):
        extra = K - a.shape[1]
        if extra == 0:
            return a
        if fill_first:
            return np.concatenate([a, np.repeat(a[:, :1], extra, axis=1)], axis=1)
        return np.concatenate([a, np.zeros((a.shape[0], extra) + a.shape[2:])], axis=1)

    return ShapeValues(
        np.concatenate([pad(p[0], True) for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([pad(p[2]) for p in parts]),
        np.concatenate([pad(p[3]) for p in parts]) if derivatives else None,
    )


def mmls_shape_functions(nodes, x, order=1, support_radius=None, ridge=DEFAULT_RIDGE):
    """(phi, dphi/dX, support indices) at a single point ``x``.

    ``nodes`` is a PointCloud or an (N, 3) array; ``support_radius`` is a
    scalar, a per-node array, or None for the default dilation rule.
    """
    pts = nodes.nodes if isinstance(nodes, PointCloud) else np.asarray(nodes, dtype=float)
    radii = support_radii(pts, order) if support_radius is None else support_radius
    sv = mmls_batch(pts, radii, np.asarray(x, dtype=float)[None], order, ridge)
    c = int(sv.count[0])
    return sv.phi[0, :c], sv.dphi[0, :c], sv.support[0, :c]


def ensure_min_support(nodes, radii, points, order, tree=None, margin=1.05):
    """Grow node radii so every point sees at least 2x the basis size."""
    need = 2 * N_BASIS[order]
    tree = cKDTree(nodes) if tree is None else tree
    radii = radii.copy()
    k = min(need, len(nodes))
    d, idx = tree.query(points, k=k)
    d, idx = d.reshape(len(points), k), idx.reshape(len(points), k)
    covered = (d < radii[idx]).sum(axis=1)
    short = covered < k
    if np.any(short):
        np.maximum.at(radii, idx[short].ravel(), margin * d[short].ravel() + 1e-12)
    return radii


# ---------------------------------------------------------------------------
# adaptive quadrature


def _gauss_cell(lo, hi, n):
    """Tensor Gauss-Legendre points and weights on boxes lo/hi (C, 3)."""
    g, gw = np.polynomial.legendre.leggauss(n)
    grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    wts = np.prod(np.stack(np.meshgrid(gw, gw, gw, indexing="ij"), -1).reshape(-1, 3), axis=1)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    pts = mid[:, None, :] + half[:, None, :] * grid[None]
    w = np.prod(half, axis=1)[:, None] * wts[None]
    return pts, w


def _children(lo, hi):
    mid = 0.5 * (lo + hi)
    out_lo, out_hi = [], []
    for corner in range(8):
        bits = np.array([(corner >> a) & 1 for a in range(3)], dtype=bool)
        out_lo.append(np.where(bits, mid, lo))
        out_hi.append(np.where(bits, hi, mid))
    # (C, 8, 3), children of cell c are contiguous
    return np.stack(out_lo, axis=1).reshape(-1, 3), np.stack(out_hi, axis=1).reshape(-1, 3)


def _guide(nodes, radii, pts, order, ridge, tree):
    sv = mmls_batch(nodes, radii, pts.reshape(-1, 3), order, ridge, tree, derivatives=False)
    return np.sum(sv.phi ** 2, axis=1).reshape(pts.shape[:-1])


@dataclass(frozen=True, eq=False)
class ShapeFunctionTable:
    """Integration points with their shape-function data.

    ``support``/``phi``/``dphi`` are padded to a common width; padding has
    zero values. ``radii`` are the per-node support radii used.
    """

    points: np.ndarray
    weights: np.ndarray
    support: np.ndarray
    count: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    point_regions: np.ndarray
    radii: np.ndarray
    order: int
    n_nodes: int
    depth: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.points)

    def scatter_matrix(self) -> sp.csr_matrix:
        cols = np.arange(self.support.size)
        return sp.csr_matrix((np.ones(self.support.size), (self.support.ravel(), cols)),
                             shape=(self.n_nodes, self.support.size))


def adaptive_integration(cells, nodes, tol=1e-3, order=1, radii=None, ridge=DEFAULT_RIDGE,
                         max_depth=DEFAULT_MAX_DEPTH, gauss=2, regions=None) -> ShapeFunctionTable:
    """Octasect cells until the guiding function's integral settles.

    For each (sub)cell the integral of sum_i phi_i^2 with the Gauss rule on
    the cell (depth d) is compared with the sum over its 8 children (depth
    d+1); the cell's depth-d points are emitted once the relative change is
    at most ``tol``. Cells reaching ``max_depth`` are accepted with a warning.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if isinstance(nodes, PointCloud):
        regions = nodes.region_labels if regions is None else regions
        pts_nodes = nodes.nodes
    else:
        pts_nodes = np.asarray(nodes, dtype=float)
    regions = np.zeros(len(pts_nodes), dtype=np.int64) if regions is None else np.asarray(regions)
    cells = np.asarray(cells, dtype=float)
    tree = cKDTree(pts_nodes)
    radii = support_radii(pts_nodes, order) if radii is None else np.asarray(radii, dtype=float)
    probe, _ = _gauss_cell(cells[:, 0], cells[:, 1], gauss)
    radii = ensure_min_support(pts_nodes, radii, probe.reshape(-1, 3), order, tree)

    lo, hi = cells[:, 0], cells[:, 1]
    pts, w = _gauss_cell(lo, hi, gauss)
    g = _guide(pts_nodes, radii, pts, order, ridge, tree)
    out_pts, out_w, out_depth = [], [], []
    for depth in range(max_depth + 1):
        if not len(lo):
            break
        coarse = np.sum(g * w, axis=1)
        if depth == max_depth:
            log.warning("adaptive integration: %d cell(s) reached max depth %d", len(lo), max_depth)
            out_pts.append(pts.reshape(-1, 3))
            out_w.append(w.ravel())
            out_depth.append(np.full(w.size, depth))
            break
        clo, chi = _children(lo, hi)
        cpts, cw = _gauss_cell(clo, chi, gauss)
        cg = _guide(pts_nodes, radii, cpts, order, ridge, tree)
        fine = np.sum(cg * cw, axis=1).reshape(-1, 8).sum(axis=1)
        done = np.abs(fine - coarse) <= tol * np.abs(fine)
        out_pts.append(pts[done].reshape(-1, 3))
        out_w.append(w[done].ravel())
        out_depth.append(np.full(int(done.sum()) * w.shape[1], depth))
        keep = np.repeat(~done, 8)
        lo, hi, pts, w, g = clo[keep], chi[keep], cpts[keep], cw[keep], cg[keep]
    points = np.concatenate(out_pts)
    weights = np.concatenate(out_w)
    depth = np.concatenate(out_depth)
    order_idx = np.lexsort((points[:, 0], points[:, 1], points[:, 2]))
    points, weights, depth = points[order_idx], weights[order_idx], depth[order_idx]
    sv = mmls_batch(pts_nodes, radii, points, order, ridge, tree)
    _, nearest = tree.query(points)
    return ShapeFunctionTable(points, weights, sv.support, sv.count, sv.phi, sv.dphi,
                              regions[nearest], radii, order, len(pts_nodes), depth)


def build_table(cloud: PointCloud, order=1, tol=1e-3, dilation=None, ridge=DEFAULT_RIDGE,
                max_depth=DEFAULT_MAX_DEPTH, gauss=2) -> ShapeFunctionTable:
    radii = support_radii(cloud.nodes, order, dilation)
    return adaptive_integration(cloud.background_cells, cloud, tol, order, radii, ridge, max_depth, gauss)


def boundary_face_points(cells, n=2):
    """Gauss points (and outward normals) on cell faces not shared by another cell."""
    cells = np.asarray(cells, dtype=float)
    g, _ = np.polynomial.legendre.leggauss(n)
    uu, vv = [a.ravel() for a in np.meshgrid(g, g, indexing="ij")]
    faces = {}
    scale = max(float(np.ptp(cells)), 1e-300)
    for c, (lo, hi) in enumerate(cells):
        for axis in range(3):
            for side, val in ((-1, lo[axis]), (1, hi[axis])):
                a, b = [k for k in range(3) if k != axis]
                key = (axis, round(val / scale, 9), round(lo[a] / scale, 9), round(lo[b] / scale, 9),
                       round(hi[a] / scale, 9), round(hi[b] / scale, 9))
                if key in faces:
                    faces[key] = None
                else:
                    faces[key] = (c, axis, side)
    pts, normals = [], []
    for key, item in faces.items():
        if item is None:
            continue
        c, axis, side = item
        lo, hi = cells[c]
        a, b = [k for k in range(3) if k != axis]
        p = np.empty((len(uu), 3))
        p[:, axis] = lo[axis] if side < 0 else hi[axis]
        p[:, a] = 0.5 * (lo[a] + hi[a]) + 0.5 * (hi[a] - lo[a]) * uu
        p[:, b] = 0.5 * (lo[b] + hi[b]) + 0.5 * (hi[b] - lo[b]) * vv
        nrm = np.zeros((len(uu), 3))
        nrm[:, axis] = side
        pts.append(p)
        normals.append(nrm)
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(pts), np.concatenate(normals)


# ---------------------------------------------------------------------------
# internal forces


def point_gradients(table: ShapeFunctionTable, u):
    u = np.asarray(u, dtype=float)
    return np.eye(3) + np.matmul(np.swapaxes(u[table.support], 1, 2), table.dphi)


def mtled_point_forces(table, u, materials=None, threads=1, long_term=False):
    region_map = as_region_map(materials)
    u = np.asarray(u, dtype=float)

    def kernel(s):
        F = np.eye(3) + np.matmul(np.swapaxes(u[table.support[s]], 1, 2), table.dphi[s])
        S = _stress_by_region(F, table.point_regions[s], region_map, "integration point", s.start,
                              long_term=long_term)
        return table.weights[s][:, None, None] * np.matmul(table.dphi[s], np.swapaxes(F @ S, 1, 2))

    return _map_chunks(kernel, table.n_points, threads)


def mtled_internal_forces(table: ShapeFunctionTable, u, materials=None, threads=1, long_term=False,
                          scatter=None):
    """f_i = sum_p w_p (F S)_p dphi_i(x_p), F_p = I + sum_i u_i (x) dphi_i."""
    fe = mtled_point_forces(table, u, materials, threads, long_term)
    scatter = table.scatter_matrix() if scatter is None else scatter
    return scatter @ fe.reshape(-1, 3)


def mtled_energy(table: ShapeFunctionTable, u, materials=None) -> float:
    F = point_gradients(table, u)
    return float(np.sum(table.weights * _energy_by_region(F, table.point_regions, as_region_map(materials))))


# ---------------------------------------------------------------------------
# essential boundary conditions


@dataclass(frozen=True, eq=False)
class CorrectionOperator:
    """Projection of nodal parameters onto prescribed boundary values.

    For each component c, rows ``Phi_c`` reconstruct the field at that
    component's constrained points from the parameters of the ``touched``
    nodes. With weights W (inverse masses, or identity) the corrected
    parameters are u + W Phi^T (Phi W Phi^T)^+ (g - Phi u): the smallest
    W^-1-norm change that makes every constrained reconstruction exact.
    """

    n_nodes: int
    points: tuple  # per component: indices into the constrained point list
    touched: tuple  # per component: node indices with non-zero columns
    phi: tuple  # per component: dense (n_c, len(touched)) reconstruction rows
    factor: tuple  # per component: pseudo-inverse of Phi W Phi^T
    weights: tuple  # per component: W restricted to touched nodes
    n_points: int

    def is_identity(self) -> bool:
        return all(len(p) == 0 for p in self.points)


def ebciem_build(table_or_values, constrained_points=None, nodes=None, components=None,
                 inverse_mass=None, radii=None, order=None) -> CorrectionOperator:
    """Build the constant correction operator.

    ``table_or_values`` is either a ShapeFunctionTable (then
    ``constrained_points`` are coordinates of the constrained boundary
    points and ``nodes`` the cloud nodes), or a precomputed ShapeValues at
    those points. ``components`` is a (n_points, 3) boolean mask (default
    all constrained).
    """
    if isinstance(table_or_values, ShapeFunctionTable):
        table = table_or_values
        pts = np.zeros((0, 3)) if constrained_points is None else np.asarray(constrained_points, float).reshape(-1, 3)
        if len(pts):
            node_xyz = nodes.nodes if isinstance(nodes, PointCloud) else np.asarray(nodes, float)
            sv = mmls_batch(node_xyz, table.radii if radii is None else radii, pts,
                            table.order if order is None else order)
        else:
            sv = None
        n_nodes = table.n_nodes
    else:
        sv = table_or_values
        pts = np.zeros((len(sv.count), 3))
        n_nodes = int(nodes) if nodes is not None else int(sv.support.max()) + 1
    n_pts = len(pts)
    comp = np.ones((n_pts, 3), dtype=bool) if components is None else np.asarray(components, bool).reshape(n_pts, 3)
    W = np.ones(n_nodes) if inverse_mass is None else np.asarray(inverse_mass, dtype=float)

    rows_all = None
    if n_pts:
        # sparse reconstruction matrix (n_pts x n_nodes)
        rows = np.repeat(np.arange(n_pts), sv.support.shape[1])
        rows_all = sp.csr_matrix((sv.phi.ravel(), (rows, sv.support.ravel())), shape=(n_pts, n_nodes))
        rows_all.sum_duplicates()
        rows_all.eliminate_zeros()
    points, touched, phis, factors, weights = [], [], [], [], []
    for c in range(3):
        sel = np.nonzero(comp[:, c])[0]
        if not len(sel):
            points.append(sel)
            touched.append(np.zeros(0, dtype=np.int64))
            phis.append(np.zeros((0, 0)))
            factors.append(None)
            weights.append(np.zeros(0))
            continue
        Phi = rows_all[sel]
        cols = np.unique(Phi.indices)
        dense = Phi[:, cols].toarray()
        empty = np.nonzero(~np.any(dense != 0, axis=1))[0]
        if len(empty):
            raise ConstraintError(f"constrained point {int(sel[empty[0]])} is not supported by any node")
        Wc = W[cols]
        G = (dense * Wc) @ dense.T
        # symmetric pseudo-inverse: more constrained points than the boundary
        # trace has freedoms is allowed (consistent data is still met exactly)
        lam, V = np.linalg.eigh(G)
        keep = lam > PINV_RCOND * lam.max()
        fac = (V[:, keep] / lam[keep]) @ V[:, keep].T
        points.append(sel)
        touched.append(cols)
        phis.append(dense)
        factors.append(fac)
        weights.append(Wc)
    return CorrectionOperator(n_nodes, tuple(points), tuple(touched), tuple(phis), tuple(factors),
                              tuple(weights), n_pts)


def ebciem_apply(op: CorrectionOperator, u, prescribed) -> np.ndarray:
    """Corrected parameters; ``prescribed`` is (n_points, 3) boundary values."""
    u = np.array(u, dtype=float)
    if u.shape != (op.n_nodes, 3):
        raise ConstraintError(f"parameter field shape {u.shape} does not match ({op.n_nodes}, 3)")
    g = np.asarray(prescribed, dtype=float)
    if op.n_points and g.shape != (op.n_points, 3):
        raise ConstraintError(f"prescribed values shape {g.shape} does not match ({op.n_points}, 3)")
    for c in range(3):
        sel, cols = op.points[c], op.touched[c]
        if not len(sel):
            continue
        resid = g[sel, c] - op.phi[c] @ u[cols, c]
        lam = op.factor[c] @ resid
        u[cols, c] += op.weights[c] * (op.phi[c].T @ lam)
    return u


class EBCIEMConstraint:
    """Ramped boundary values imposed by projection each step.

    The projection is weighted by inverse nodal masses so that the steady
    state is the constrained energy minimum; the operator is rebuilt when the
    solver's mass distribution changes shape (uniform rescaling does not
    matter).
    """

    def __init__(self, shape_values: ShapeValues, n_nodes, values, ramp_duration=1.0, components=None):
        self.shape_values = shape_values
        self.n_nodes = n_nodes
        self.values = np.asarray(values, dtype=float).reshape(-1, 3)
        self.ramp_duration = ramp_duration
        self.components = components
        self._op = None
        self._mass_key = None

    def operator(self, mass):
        key = np.asarray(mass, dtype=float) / np.max(mass)
        if self._op is None or not np.array_equal(key, self._mass_key):
            self._op = ebciem_build(self.shape_values, nodes=self.n_nodes, components=self.components,
                                    inverse_mass=1.0 / key)
            self._mass_key = key
        return self._op

    def apply(self, state):
        from .dynamics import ramp_factor

        r = ramp_factor(state.t, self.ramp_duration)
        state.u[:] = ebciem_apply(self.operator(state.mass), state.u, r * self.values)

    def fixed_mask(self, n):
        return np.zeros((n, 3), dtype=bool)


# ---------------------------------------------------------------------------
# model wrapper


class MeshlessModel:
    """Point cloud + materials + shape-function table with the solver interface.

    Nodal unknowns are MLS parameters; :meth:`reconstruct` gives the
    displacement field at the nodes.
    """

    kind = "meshless"

    def __init__(self, cloud: PointCloud, materials=None, order=1, tol=1e-3, dilation=None,
                 ridge=DEFAULT_RIDGE, max_depth=DEFAULT_MAX_DEPTH, gauss=2, threads=1, long_term=True,
                 table: ShapeFunctionTable | None = None):
        self.cloud = cloud
        self.materials = as_region_map(materials)
        self.order = order
        self.ridge = ridge
        self.table = table if table is not None else build_table(cloud, order, tol, dilation, ridge, max_depth, gauss)
        self.scatter = self.table.scatter_matrix()
        self.threads = max(1, int(threads))
        self.long_term = long_term
        density = {r: p.density for r, p in self.materials.items() if r is not None}
        if None in self.materials:
            density = self.materials[None].density
        self.mass = lumped_mass(cloud, density, self.table)
        self._tree = cKDTree(cloud.nodes)
        self._node_values = None

    @property
    def n_nodes(self) -> int:
        return self.cloud.n_nodes

    @property
    def reference_positions(self) -> np.ndarray:
        return self.cloud.nodes

    @property
    def diameter(self) -> float:
        return self.cloud.diameter

    @property
    def n_integration_points(self) -> int:
        return self.table.n_points

    def shape_values_at(self, x) -> ShapeValues:
        return mmls_batch(self.cloud.nodes, self.table.radii, x, self.order, self.ridge, self._tree)

    def reconstruction_matrix(self, x) -> sp.csr_matrix:
        sv = self.shape_values_at(x)
        rows = np.repeat(np.arange(len(sv.count)), sv.support.shape[1])
        M = sp.csr_matrix((sv.phi.ravel(), (rows, sv.support.ravel())), shape=(len(sv.count), self.n_nodes))
        M.sum_duplicates()
        return M

    def reconstruct(self, u, x=None) -> np.ndarray:
        """Displacements at points ``x`` (default: the nodes) from parameters ``u``."""
        if x is None:
            if self._node_values is None:
                self._node_values = self.reconstruction_matrix(self.cloud.nodes)
            return self._node_values @ np.asarray(u, dtype=float)
        return self.reconstruction_matrix(x) @ np.asarray(u, dtype=float)

    def boundary_constraint(self, points, values, ramp_duration=1.0, components=None) -> EBCIEMConstraint:
        """EBCIEM constraint holding the reconstructed field at ``points``.

        ``points`` are coordinates (k, 3) or cloud node indices (k,).
        """
        points = np.asarray(points)
        if points.ndim == 1:
            points = self.cloud.nodes[points.astype(np.int64)]
        sv = self.shape_values_at(points)
        vals = np.asarray(values, dtype=float)
        if vals.shape == (3,):
            vals = np.tile(vals, (len(points), 1))
        comp = None
        if components is not None:
            comp = np.broadcast_to(np.asarray(components, bool), (len(points), 3))
        return EBCIEMConstraint(sv, self.n_nodes, vals, ramp_duration, comp)

    def internal_forces(self, u) -> np.ndarray:
        return mtled_internal_forces(self.table, u, self.materials, self.threads, self.long_term, self.scatter)

    def energy(self, u) -> float:
        return mtled_energy(self.table, u, self.materials)

    def element_wave_data(self):
        """(nodal spacing m, wave speed m/s) per node."""
        h = node_spacing(self.cloud.nodes)
        mu, kappa, rho = _element_moduli(self.cloud.region_labels, self.materials)
        return h, np.sqrt((kappa + 4.0 * mu / 3.0) / rho)

    def stiffness_row_bound(self) -> np.ndarray:
        t = self.table
        mu, kappa, _ = _element_moduli(t.point_regions, self.materials)
        g = np.linalg.norm(t.dphi, axis=2)
        row = (kappa + 4.0 * mu / 3.0)[:, None] * t.weights[:, None] * g * g.sum(axis=1, keepdims=True)
        return self.scatter @ row.ravel()

    def deformation_gradients(self, u) -> np.ndarray:
        return point_gradients(self.table, u)


def check_inversion(table, u):
    F = point_gradients(table, u)
    J = mat.det3(F)
    if np.any(J <= 0):
        i = int(np.nonzero(J <= 0)[0][0])
        raise ElementInversionError(F[i], i, "integration point")
