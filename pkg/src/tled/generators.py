"""Structured test geometries: brick meshes, balls, icospheres, regular clouds."""

from __future__ import annotations

import numpy as np

from .geometry import Mesh, PointCloud, build_mesh

# Kuhn (Freudenthal) split of a hex into 6 tets sharing the 0-6 diagonal;
# conforming across a structured grid.
_KUHN = np.array(
    [[0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6], [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6]]
)


def grid_nodes(shape, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    nx, ny, nz = shape
    axes = [np.linspace(o, o + s, n + 1) for o, s, n in zip(origin, size, shape)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])


def _grid_hexes(shape):
    nx, ny, nz = shape

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    return np.column_stack(
        [
            nid(i, j, k), nid(i + 1, j, k), nid(i + 1, j + 1, k), nid(i, j + 1, k),
            nid(i, j, k + 1), nid(i + 1, j, k + 1), nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1),
        ]
    )


def _face_sets(nodes, lo, hi):
    tol = 1e-9 * np.max(hi - lo)
    sets = {}
    for axis, name in enumerate("xyz"):
        sets[f"{name}min"] = np.nonzero(np.abs(nodes[:, axis] - lo[axis]) < tol)[0]
        sets[f"{name}max"] = np.nonzero(np.abs(nodes[:, axis] - hi[axis]) < tol)[0]
    on_bnd = np.zeros(len(nodes), dtype=bool)
    for idx in sets.values():
        on_bnd[idx] = True
    sets["boundary"] = np.nonzero(on_bnd)[0]
    return sets


def _box_surface_tris(shape):
    """Outward-oriented boundary triangles of a structured brick."""
    hexes = _grid_hexes(shape)
    nx, ny, nz = shape
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    # faces: -z, +z, -y, +x, +y, -x  (outward winding, matches HEX_FACES)
    faces = [
        ([0, 3, 2, 1], k == 0), ([4, 5, 6, 7], k == nz - 1), ([0, 1, 5, 4], j == 0),
        ([1, 2, 6, 5], i == nx - 1), ([2, 3, 7, 6], j == ny - 1), ([3, 0, 4, 7], i == 0),
    ]
    tris = []
    for quad, mask in faces:
        q = hexes[mask][:, quad]
        tris.append(q[:, [0, 1, 2]])
        tris.append(q[:, [0, 2, 3]])
    return np.concatenate(tris)


def box_hex_mesh(shape, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Brick of nx*ny*nz hexahedra with face node sets (xmin ... zmax, boundary)."""
    shape = tuple(int(s) for s in shape)
    nodes = grid_nodes(shape, size, origin)
    lo, hi = np.asarray(origin, float), np.asarray(origin, float) + np.asarray(size, float)
    return build_mesh(nodes, hexes=_grid_hexes(shape), node_sets=_face_sets(nodes, lo, hi),
                      surface_tris=_box_surface_tris(shape))


def box_tet_mesh(shape, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Brick split into 6 Kuhn tets per cell (conforming)."""
    shape = tuple(int(s) for s in shape)
    nodes = grid_nodes(shape, size, origin)
    hexes = _grid_hexes(shape)
    tets = hexes[:, _KUHN].reshape(-1, 4)
    lo, hi = np.asarray(origin, float), np.asarray(origin, float) + np.asarray(size, float)
    return build_mesh(nodes, tets=tets, node_sets=_face_sets(nodes, lo, hi),
                      surface_tris=_box_surface_tris(shape))


def box_mixed_mesh(shape, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), split=None) -> Mesh:
    """Brick where cells with i >= split (default nx//2) are split into tets."""
    shape = tuple(int(s) for s in shape)
    split = shape[0] // 2 if split is None else split
    nodes = grid_nodes(shape, size, origin)
    hexes = _grid_hexes(shape)
    i = np.tile(np.arange(shape[0]), shape[1] * shape[2])
    tet_cells = i >= split
    tets = hexes[tet_cells][:, _KUHN].reshape(-1, 4)
    lo, hi = np.asarray(origin, float), np.asarray(origin, float) + np.asarray(size, float)
    return build_mesh(nodes, hexes=hexes[~tet_cells], tets=tets,
                      node_sets=_face_sets(nodes, lo, hi), surface_tris=_box_surface_tris(shape))


def ball_hex_mesh(n: int, radius: float, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Hex mesh of a ball: a [-1,1]^3 grid radially squashed onto the sphere.

    The ``boundary`` node set holds the surface nodes.
    """
    cube = box_hex_mesh((n, n, n), size=(2.0, 2.0, 2.0), origin=(-1.0, -1.0, -1.0))
    p = cube.nodes
    # cube-to-ball map that keeps cell shapes reasonable
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    xs = x * np.sqrt(1 - y * y / 2 - z * z / 2 + y * y * z * z / 3)
    ys = y * np.sqrt(1 - z * z / 2 - x * x / 2 + z * z * x * x / 3)
    zs = z * np.sqrt(1 - x * x / 2 - y * y / 2 + x * x * y * y / 3)
    nodes = np.column_stack([xs, ys, zs]) * radius + np.asarray(center, float)
    surf = cube.node_sets["boundary"]
    return build_mesh(nodes, hexes=cube.hexes, node_sets={"boundary": surf},
                      surface_tris=cube.surface_tris)


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Outward-wound icosphere; returns (vertices, triangles). 20 * 4**s faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(verts) * radius + np.asarray(center, float)
    return V, np.array(faces, dtype=np.int64)


def uv_sphere(n_theta: int, n_phi: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Closed outward-wound UV sphere with 2*n_phi*(n_theta-1) triangles."""
    theta = np.linspace(0, np.pi, n_theta + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_phi, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring = np.column_stack([np.sin(tt).ravel() * np.cos(pp).ravel(),
                            np.sin(tt).ravel() * np.sin(pp).ravel(),
                            np.cos(tt).ravel()])
    V = np.vstack([[0, 0, 1], ring, [0, 0, -1]]) * radius + np.asarray(center, float)
    top, bot = 0, len(V) - 1

    def rid(r, c):
        return 1 + r * n_phi + (c % n_phi)

    tris = []
    for c in range(n_phi):
        tris.append((top, rid(0, c), rid(0, c + 1)))
        tris.append((bot, rid(n_theta - 2, c + 1), rid(n_theta - 2, c)))
    for r in range(n_theta - 2):
        for c in range(n_phi):
            a, b, d, e = rid(r, c), rid(r, c + 1), rid(r + 1, c), rid(r + 1, c + 1)
            tris.append((a, d, e))
            tris.append((a, e, b))
    return V, np.array(tris, dtype=np.int64)


def box_point_cloud(nodes_shape, cells_shape, size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> PointCloud:
    """Regular node lattice with a regular background-cell grid over the same box."""
    nodes = grid_nodes(tuple(n - 1 for n in nodes_shape), size, origin)
    lo = np.asarray(origin, float)
    hi = lo + np.asarray(size, float)
    edges = [np.linspace(lo[a], hi[a], cells_shape[a] + 1) for a in range(3)]
    cells = []
    for k in range(cells_shape[2]):
        for j in range(cells_shape[1]):
            for i in range(cells_shape[0]):
                cells.append([[edges[0][i], edges[1][j], edges[2][k]],
                              [edges[0][i + 1], edges[1][j + 1], edges[2][k + 1]]])
    return PointCloud(nodes, np.array(cells), boundary_nodes=_face_sets(nodes, lo, hi))
