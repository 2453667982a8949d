"""Frictionless rigid-surface contact by closest-point projection.

The master surface is a closed, outward-wound triangle mesh. Slave nodes
found on the positive side of it (signed distance from the angle-weighted
pseudo-normal at the closest feature) are moved onto the closest point;
everything else is left alone, so separation is free and there is no
tangential constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContactSurfaceError


@dataclass(frozen=True, eq=False)
class MasterSurface:
    vertices: np.ndarray
    tris: np.ndarray
    face_normals: np.ndarray
    edge_normals: dict  # (i, j) with i < j -> unnormalized pseudo-normal
    vertex_normals: np.ndarray
    grid_origin: np.ndarray
    cell: float
    grid_shape: tuple
    cell_start: np.ndarray  # CSR over flattened cells
    cell_tris: np.ndarray
    edge_keys: np.ndarray  # (T, 3) index into edge_normal_array
    edge_normal_array: np.ndarray
    tri_centre: np.ndarray  # bounding sphere per triangle, for pruning
    tri_radius: np.ndarray

    @property
    def n_tris(self) -> int:
        return len(self.tris)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def _edges(tris):
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    return e


def build_master_surface(vertices, tris) -> MasterSurface:
    """Validate closedness/orientation and build the bucket grid.

    A globally inverted (inward-wound) surface is flipped; mixed winding or
    open edges raise ContactSurfaceError listing the offending edges.
    """
    V = np.asarray(vertices, dtype=float)
    T = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if not len(T):
        raise ContactSurfaceError("master surface has no triangles")
    directed = _edges(T)
    und = np.sort(directed, axis=1)
    keys, inverse, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    open_edges = keys[counts != 2]
    if len(open_edges):
        raise ContactSurfaceError("master surface is not closed (edges not shared by exactly 2 triangles)",
                                  [tuple(map(int, e)) for e in open_edges])
    # each undirected edge must appear once in each direction
    forward = directed[:, 0] < directed[:, 1]
    fwd_count = np.bincount(inverse, weights=forward.astype(float), minlength=len(keys))
    bad = keys[fwd_count != 1]
    if len(bad):
        raise ContactSurfaceError("inconsistent triangle winding", [tuple(map(int, e)) for e in bad])

    a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    signed_volume = np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0
    if signed_volume < 0:
        T = T[:, [0, 2, 1]]
        a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
        directed = _edges(T)
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n, axis=1)
    if np.any(nn == 0):
        raise ContactSurfaceError(f"degenerate master triangle {int(np.nonzero(nn == 0)[0][0])}")
    fn = n / nn[:, None]

    # angle-weighted vertex pseudo-normals
    vn = np.zeros_like(V)
    P = V[T]
    for k in range(3):
        e1 = P[:, (k + 1) % 3] - P[:, k]
        e2 = P[:, (k + 2) % 3] - P[:, k]
        cosang = np.einsum("ij,ij->i", e1, e2) / (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(vn, T[:, k], ang[:, None] * fn)
    # edge pseudo-normals: sum of the two adjacent face normals
    und = np.sort(directed, axis=1)
    keys, inverse = np.unique(und, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    en = np.zeros((len(keys), 3))
    np.add.at(en, inverse, np.tile(fn, (3, 1)))
    edge_keys = inverse.reshape(3, -1).T  # edge k of tri t: (k, k+1)
    edge_normals = {tuple(map(int, k)): v for k, v in zip(keys, en)}

    lengths = np.linalg.norm(V[directed[:, 0]] - V[directed[:, 1]], axis=1)
    cell = float(np.median(lengths))
    lo = P.min(axis=(0, 1))
    hi = P.max(axis=(0, 1))
    shape = tuple(int(s) for s in np.maximum(np.ceil((hi - lo) / cell).astype(int), 1))
    tlo = np.floor((P.min(axis=1) - lo) / cell).astype(int)
    thi = np.floor((P.max(axis=1) - lo) / cell).astype(int)
    tlo = np.clip(tlo, 0, np.array(shape) - 1)
    thi = np.clip(thi, 0, np.array(shape) - 1)
    cells, owners = [], []
    for t in range(len(T)):
        ii, jj, kk = np.meshgrid(*[np.arange(tlo[t, d], thi[t, d] + 1) for d in range(3)], indexing="ij")
        flat = np.ravel_multi_index((ii.ravel(), jj.ravel(), kk.ravel()), shape)
        cells.append(flat)
        owners.append(np.full(flat.size, t))
    cells = np.concatenate(cells)
    owners = np.concatenate(owners)
    order = np.lexsort((owners, cells))
    cells, owners = cells[order], owners[order]
    start = np.searchsorted(cells, np.arange(np.prod(shape) + 1))
    centre = P.mean(axis=1)
    radius = np.linalg.norm(P - centre[:, None], axis=2).max(axis=1)
    return MasterSurface(V, T, fn, edge_normals, vn, lo, cell, shape, start, owners, edge_keys, en,
                         centre, radius)


# ---------------------------------------------------------------------------
# closest point on triangles


def _segment_closest(p, a, b):
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / denom, 0.0, 1.0)
    q = np.where((t == 1.0)[:, None], b, a + t[:, None] * ab)
    return q, t


def closest_point_on_triangles(p, V, T, tri_idx):
    """Closest points from p (Q, 3) to triangles tri_idx (Q,) of (V, T).

    Returns (points, squared distances, feature code, feature index) with
    code 0 = face, 1 = edge (index 0..2 for edge k->k+1), 2 = vertex
    (index = local vertex). Edge points are parametrized from the lower
    global vertex index, so neighbouring triangles produce bitwise equal
    points on a shared edge.
    """
    tri = T[tri_idx]
    A, B, C = V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]]
    n = np.cross(B - A, C - A)
    nn = np.einsum("ij,ij->i", n, n)
    # barycentric coordinates of the projection
    w_c = np.einsum("ij,ij->i", np.cross(B - A, p - A), n) / nn
    w_a = np.einsum("ij,ij->i", np.cross(C - B, p - B), n) / nn
    w_b = 1.0 - w_a - w_c
    inside = (w_a >= 0) & (w_b >= 0) & (w_c >= 0)
    proj = p - (np.einsum("ij,ij->i", p - A, n) / nn)[:, None] * n

    best = np.where(inside[:, None], proj, 0.0)
    best_d = np.where(inside, np.einsum("ij,ij->i", p - proj, p - proj), np.inf)
    code = np.zeros(len(p), dtype=np.int64)
    index = np.zeros(len(p), dtype=np.int64)
    corners = (A, B, C)
    for k in range(3):
        i0, i1 = tri[:, k], tri[:, (k + 1) % 3]
        swap = i1 < i0
        lo_pt = np.where(swap[:, None], corners[(k + 1) % 3], corners[k])
        hi_pt = np.where(swap[:, None], corners[k], corners[(k + 1) % 3])
        q, t = _segment_closest(p, lo_pt, hi_pt)
        d = np.einsum("ij,ij->i", p - q, p - q)
        better = ~inside & (d < best_d)
        best = np.where(better[:, None], q, best)
        best_d = np.where(better, d, best_d)
        at_lo, at_hi = t == 0.0, t == 1.0
        vert_local = np.where(at_lo ^ swap, k, (k + 1) % 3)
        code = np.where(better, np.where(at_lo | at_hi, 2, 1), code)
        index = np.where(better, np.where(at_lo | at_hi, vert_local, k), index)
    return best, best_d, code, index


def _pseudo_normals(master: MasterSurface, tri_idx, code, index):
    out = master.face_normals[tri_idx].copy()
    edge = code == 1
    if np.any(edge):
        out[edge] = master.edge_normal_array[master.edge_keys[tri_idx[edge], index[edge]]]
    vert = code == 2
    if np.any(vert):
        out[vert] = master.vertex_normals[master.tris[tri_idx[vert], index[vert]]]
    return out


def _pick(q_ids, tri_ids, d2, n_queries):
    """Per query: lowest distance, ties to the lowest triangle index."""
    order = np.lexsort((tri_ids, d2, q_ids))
    q_sorted = q_ids[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = q_sorted[1:] != q_sorted[:-1]
    sel = order[first]
    return q_ids[sel], sel


def closest_points(master: MasterSurface, points):
    """Closest point, distance, triangle and signed distance for each query.

    Uses expanding shells of grid cells; a query is settled once its best
    distance is smaller than the distance to any unvisited cell.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    Q = len(p)
    shape = np.array(master.grid_shape)
    rel = (p - master.grid_origin) / master.cell
    home = np.clip(np.floor(rel).astype(int), 0, shape - 1)
    # distance from the query to the boundary of its home cell box, in cells
    outside = np.maximum(np.maximum(-rel, rel - shape), 0.0)
    out_dist = np.linalg.norm(outside, axis=1) * master.cell
    best_pt = np.zeros((Q, 3))
    best_d2 = np.full(Q, np.inf)
    best_tri = np.full(Q, -1, dtype=np.int64)
    best_code = np.zeros(Q, dtype=np.int64)
    best_idx = np.zeros(Q, dtype=np.int64)
    active = np.arange(Q)
    max_ring = int(shape.max())
    slack = 1e-12 * master.diameter
    for ring in range(max_ring + 1):
        if not len(active):
            break
        offs = np.arange(-ring, ring + 1)
        ox, oy, oz = [a.ravel() for a in np.meshgrid(offs, offs, offs, indexing="ij")]
        shell = np.maximum(np.maximum(np.abs(ox), np.abs(oy)), np.abs(oz)) == ring
        off = np.stack([ox[shell], oy[shell], oz[shell]], axis=1)
        cells = home[active][:, None, :] + off[None]
        valid = np.all((cells >= 0) & (cells < shape), axis=2)
        qi = np.repeat(active, off.shape[0])[valid.ravel()]
        flat = np.ravel_multi_index(tuple(cells.reshape(-1, 3)[valid.ravel()].T), tuple(shape))
        counts = master.cell_start[flat + 1] - master.cell_start[flat]
        q_ids = np.repeat(qi, counts)
        starts = np.repeat(master.cell_start[flat], counts)
        within = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        tri_ids = master.cell_tris[starts + within]
        if len(q_ids):
            # a triangle spanning several cells shows up once per cell
            key = np.unique(q_ids * master.n_tris + tri_ids)
            q_ids, tri_ids = key // master.n_tris, key % master.n_tris
            # bounding-sphere broad phase: drop pairs that cannot beat a
            # distance some candidate (or the current best) already guarantees
            dc = np.linalg.norm(p[q_ids] - master.tri_centre[tri_ids], axis=1)
            rad = master.tri_radius[tri_ids]
            ub = np.sqrt(best_d2)
            np.minimum.at(ub, q_ids, dc + rad)
            keep = dc - rad <= ub[q_ids] * (1.0 + 1e-9) + slack
            q_ids, tri_ids = q_ids[keep], tri_ids[keep]
            # include the current best so a tie keeps the lowest triangle index
            cp, d2, code, idx = closest_point_on_triangles(p[q_ids], master.vertices, master.tris, tri_ids)
            prev = best_tri[active] >= 0
            q_all = np.concatenate([q_ids, active[prev]])
            t_all = np.concatenate([tri_ids, best_tri[active][prev]])
            d_all = np.concatenate([d2, best_d2[active][prev]])
            cp_all = np.concatenate([cp, best_pt[active][prev]])
            code_all = np.concatenate([code, best_code[active][prev]])
            idx_all = np.concatenate([idx, best_idx[active][prev]])
            qs, sel = _pick(q_all, t_all, d_all, Q)
            best_pt[qs] = cp_all[sel]
            best_d2[qs] = d_all[sel]
            best_tri[qs] = t_all[sel]
            best_code[qs] = code_all[sel]
            best_idx[qs] = idx_all[sel]
        # unvisited cells lie beyond `ring` cells from the home cell and outside the grid box
        reach = np.maximum(out_dist[active], ring * master.cell)
        settled = np.sqrt(best_d2[active]) < reach
        active = active[~settled]
    normals = _pseudo_normals(master, best_tri, best_code, best_idx)
    signed = np.einsum("ij,ij->i", p - best_pt, normals)
    dist = np.sqrt(best_d2)
    return best_pt, dist, best_tri, np.sign(signed) * dist


def brute_force_closest(master: MasterSurface, points):
    """Oracle: every query against every triangle, same tie rule."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    Q, T = len(p), master.n_tris
    q_ids = np.repeat(np.arange(Q), T)
    tri_ids = np.tile(np.arange(T), Q)
    cp, d2, _, _ = closest_point_on_triangles(p[q_ids], master.vertices, master.tris, tri_ids)
    qs, sel = _pick(q_ids, tri_ids, d2, Q)
    out = np.zeros((Q, 3))
    out[qs] = cp[sel]
    dist = np.zeros(Q)
    dist[qs] = np.sqrt(d2[sel])
    tri = np.zeros(Q, dtype=np.int64)
    tri[qs] = tri_ids[sel]
    return out, dist, tri


# ---------------------------------------------------------------------------
# enforcement


@dataclass
class ContactReport:
    projected: int
    max_penetration: float
    outside_grid: int = 0

    def to_dict(self) -> dict:
        return {"projected": self.projected, "max_penetration_m": self.max_penetration,
                "outside_grid": self.outside_grid}


def penetration_tolerance(master: MasterSurface) -> float:
    """Signed distances at or below this count as touching, not penetrating."""
    return 1e-12 * max(master.diameter, 1e-300)


def enforce_contact(u, u_prev, slaves, master: MasterSurface, reference):
    """Project penetrating slave nodes onto the master; returns (u, u_prev, report).

    ``reference`` holds reference positions of all nodes; the correction is
    applied to both u and u_prev so it adds no velocity.
    """
    u, u_prev, report, _ = _project(u, u_prev, slaves, master, reference)
    return u, u_prev, report


def _project(u, u_prev, slaves, master, reference):
    """enforce_contact plus each slave's signed distance after projection."""
    slaves = np.asarray(slaves, dtype=np.int64)
    u = np.array(u, dtype=float)
    u_prev = np.array(u_prev, dtype=float)
    if not len(slaves):
        return u, u_prev, ContactReport(0, 0.0), np.zeros(0)
    x = np.asarray(reference, dtype=float)[slaves] + u[slaves]
    cp, _, _, signed = closest_points(master, x)
    pen = signed > penetration_tolerance(master)
    rel = (x - master.grid_origin) / master.cell
    outside = int(np.sum(np.any((rel < 0) | (rel > np.array(master.grid_shape)), axis=1) & pen))
    if np.any(pen):
        idx = slaves[pen]
        delta = cp[pen] - x[pen]
        u[idx] += delta
        u_prev[idx] += delta
    depth = float(signed[pen].max()) if np.any(pen) else 0.0
    after = np.where(pen, 0.0, signed)
    return u, u_prev, ContactReport(int(pen.sum()), depth, outside), after


@dataclass
class ContactConstraint:
    """Solver constraint wrapper: projects slaves after every step.

    Skips slaves that provably cannot have penetrated: one last seen inside
    at distance d from the rigid surface must move at least d to cross it.
    The result is the same as querying every slave.
    """

    master: MasterSurface
    slaves: np.ndarray
    reference: np.ndarray
    reports: list = field(default_factory=list)
    keep_reports: int = 1000

    def __post_init__(self):
        self.slaves = np.asarray(self.slaves, dtype=np.int64)
        self.reference = np.asarray(self.reference, dtype=float)
        self._last = None
        self._clearance = None

    def apply(self, state):
        s = self.slaves
        x = self.reference[s] + state.u[s]
        if self._last is None:
            check = np.ones(len(s), dtype=bool)
        else:
            moved = np.linalg.norm(x - self._last, axis=1)
            check = moved >= self._clearance
        rep = ContactReport(0, 0.0)
        if np.any(check):
            sub = s[check]
            state.u, state.u_prev, rep, signed = _project(state.u, state.u_prev, sub, self.master,
                                                          self.reference)
            xs = self.reference[sub] + state.u[sub]
            if self._last is None:
                self._last = x.copy()
                self._clearance = np.zeros(len(s))
            self._last[check] = xs
            # keep a relative margin so rounding cannot let a node slip through
            self._clearance[check] = np.maximum(-signed, 0.0) * (1.0 - 1e-9)
        if rep.projected:
            self.reports.append(rep)
            del self.reports[:-self.keep_reports]
        return rep.to_dict() if rep.projected else None

    def fixed_mask(self, n):
        return np.zeros((n, 3), dtype=bool)


def max_penetration(master: MasterSurface, points) -> float:
    _, _, _, signed = closest_points(master, points)
    return float(max(signed.max(), 0.0)) if len(signed) else 0.0
