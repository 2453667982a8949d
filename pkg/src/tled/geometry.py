"""Reference-configuration geometry: meshes, point clouds, voxel volumes.

Lengths in meshes and point clouds are meters; volumes (images) are in mm.
All containers are treated as immutable once built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DegenerateElementError, MeshFormatError, VolumeFormatError

# natural coordinates of the 8 hex nodes, standard (bottom ccw, top ccw) ordering
HEX_NATURAL = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=float,
)
HEX_FACES = np.array(
    [[0, 3, 2, 1], [4, 5, 6, 7], [0, 1, 5, 4], [1, 2, 6, 5], [2, 3, 7, 6], [3, 0, 4, 7]]
)
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _frozen(a, dtype, shape_tail):
    arr = np.array(a, dtype=dtype, copy=True)
    if arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    arr.setflags(write=False)
    return arr


def hex_jacobians(X: np.ndarray) -> np.ndarray:
    """Jacobian dX/dxi at the element centre for hex coordinates ``X`` (..., 8, 3)."""
    return np.einsum("...ai,aj->...ij", X, HEX_NATURAL / 8.0)


def hex_volumes(X: np.ndarray) -> np.ndarray:
    """Single-point (centroid Jacobian) volume, 8 det J(0)."""
    return 8.0 * np.linalg.det(hex_jacobians(X))


def tet_volumes(X: np.ndarray) -> np.ndarray:
    """Signed volume of tets with coordinates ``X`` (..., 4, 3)."""
    edges = X[..., 1:, :] - X[..., :1, :]
    return np.linalg.det(edges) / 6.0


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray
    hexes: np.ndarray = field(default_factory=lambda: np.zeros((0, 8), dtype=np.int64))
    tets: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    node_sets: Mapping[str, np.ndarray] = field(default_factory=dict)
    surface_tris: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    hex_regions: np.ndarray | None = None
    tet_regions: np.ndarray | None = None

    def __post_init__(self):
        nodes = _frozen(self.nodes, np.float64, (3,))
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise MeshFormatError(f"nodes must be (N, 3), got {nodes.shape}")
        object.__setattr__(self, "nodes", nodes)
        n = len(nodes)
        for name, width in (("hexes", 8), ("tets", 4), ("surface_tris", 3)):
            conn = _frozen(getattr(self, name), np.int64, (width,))
            if conn.ndim != 2 or conn.shape[1] != width:
                raise MeshFormatError(f"{name} must be (K, {width}), got {conn.shape}")
            if conn.size and (conn.min() < 0 or conn.max() >= n):
                bad = int(np.nonzero((conn < 0) | (conn >= n))[0][0])
                raise MeshFormatError(
                    f"{name} {bad} references a node index outside [0, {n})"
                )
            object.__setattr__(self, name, conn)
        for name, conn in (("hex_regions", self.hexes), ("tet_regions", self.tets)):
            reg = getattr(self, name)
            reg = np.zeros(len(conn), dtype=np.int64) if reg is None else reg
            reg = _frozen(reg, np.int64, ())
            if reg.shape != (len(conn),):
                raise MeshFormatError(f"{name} must have one label per element")
            object.__setattr__(self, name, reg)
        sets = {}
        for key, idx in dict(self.node_sets).items():
            idx = _frozen(idx, np.int64, ())
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise MeshFormatError(f"node set '{key}' references a node index outside [0, {n})")
            if len(np.unique(idx)) != len(idx):
                raise MeshFormatError(f"node set '{key}' contains duplicate indices")
            sets[key] = idx
        object.__setattr__(self, "node_sets", sets)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def diameter(self) -> float:
        if not len(self.nodes):
            return 0.0
        return float(np.linalg.norm(self.nodes.max(0) - self.nodes.min(0)))

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        same = all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("nodes", "hexes", "tets", "surface_tris", "hex_regions", "tet_regions")
        )
        return (
            same
            and self.node_sets.keys() == other.node_sets.keys()
            and all(np.array_equal(self.node_sets[k], other.node_sets[k]) for k in self.node_sets)
        )

    def with_nodes(self, nodes: np.ndarray) -> "Mesh":
        """Same topology at new coordinates (used for deformed-mesh output)."""
        return Mesh(
            nodes, self.hexes, self.tets, self.node_sets, self.surface_tris,
            self.hex_regions, self.tet_regions,
        )


def build_mesh(nodes, hexes=(), tets=(), node_sets=None, surface_tris=(),
               hex_regions=None, tet_regions=None) -> Mesh:
    """Construct a Mesh, normalizing winding and rejecting degenerate elements."""
    mesh = Mesh(
        nodes,
        np.asarray(hexes, dtype=np.int64).reshape(-1, 8),
        np.asarray(tets, dtype=np.int64).reshape(-1, 4),
        node_sets or {},
        np.asarray(surface_tris, dtype=np.int64).reshape(-1, 3),
        hex_regions,
        tet_regions,
    )
    return normalize_winding(mesh)


def normalize_winding(mesh: Mesh) -> Mesh:
    """Flip inverted elements; raise DegenerateElementError on zero volume."""
    hexes = mesh.hexes.copy()
    tets = mesh.tets.copy()
    scale = max(mesh.diameter, 1e-300) ** 3 * 1e-14
    if len(hexes):
        v = hex_volumes(mesh.nodes[hexes])
        bad = np.nonzero(np.abs(v) <= scale)[0]
        if len(bad):
            raise DegenerateElementError("hex", int(bad[0]), float(v[bad[0]]))
        flip = v < 0
        hexes[flip] = hexes[flip][:, [4, 5, 6, 7, 0, 1, 2, 3]]
    if len(tets):
        v = tet_volumes(mesh.nodes[tets])
        bad = np.nonzero(np.abs(v) <= scale)[0]
        if len(bad):
            raise DegenerateElementError("tet", int(bad[0]), float(v[bad[0]]))
        flip = v < 0
        tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    return Mesh(
        mesh.nodes, hexes, tets, mesh.node_sets, mesh.surface_tris,
        mesh.hex_regions, mesh.tet_regions,
    )


# ---------------------------------------------------------------------------
# mesh text format

_BLOCKS = {"hexes": 8, "tets": 4, "tris": 3}


def write_mesh(mesh: Mesh, path) -> None:
    out = ["# tled mesh", f"nodes {mesh.n_nodes}"]
    out.extend(" ".join(repr(float(c)) for c in xyz) for xyz in mesh.nodes.tolist())
    for key, conn in (("hexes", mesh.hexes), ("tets", mesh.tets), ("tris", mesh.surface_tris)):
        if len(conn):
            out.append(f"{key} {len(conn)}")
            out.extend(" ".join(map(str, row)) for row in conn.tolist())
    for key, reg, conn in (
        ("hex_regions", mesh.hex_regions, mesh.hexes),
        ("tet_regions", mesh.tet_regions, mesh.tets),
    ):
        if len(conn) and np.any(reg):
            out.append(f"{key} {len(reg)}")
            out.extend(map(str, reg.tolist()))
    for name, idx in mesh.node_sets.items():
        out.append(f"set {name} {len(idx)}")
        vals = idx.tolist()
        for i in range(0, len(vals), 16):
            out.append(" ".join(map(str, vals[i:i + 16])))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def _parse_count(tokens, lineno, nargs=2):
    if len(tokens) != nargs:
        raise MeshFormatError(f"malformed block header '{' '.join(tokens)}'", lineno)
    try:
        count = int(tokens[-1])
    except ValueError:
        raise MeshFormatError(f"bad count '{tokens[-1]}'", lineno) from None
    if count < 0:
        raise MeshFormatError("negative count", lineno)
    return count


def parse_mesh(text: str) -> Mesh:
    """Parse the mesh text format (see write_mesh); normalizes element winding."""
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((lineno, body.split()))
    nodes = np.zeros((0, 3))
    conn = {k: np.zeros((0, w), dtype=np.int64) for k, w in _BLOCKS.items()}
    regions = {}
    sets = {}
    pos = 0
    while pos < len(lines):
        lineno, tokens = lines[pos]
        key = tokens[0]
        pos += 1
        if key == "nodes":
            n = _parse_count(tokens, lineno)
            block = lines[pos:pos + n]
            if len(block) < n:
                raise MeshFormatError(f"expected {n} node lines, file ended", lineno)
            try:
                rows = [[float(t) for t in toks] for _, toks in block]
            except ValueError as exc:
                bad = next(ln for ln, toks in block if not _all_float(toks))
                raise MeshFormatError(f"bad coordinate ({exc})", bad) from None
            for ln, toks in block:
                if len(toks) != 3:
                    raise MeshFormatError("node line needs 3 coordinates", ln)
            nodes = np.array(rows, dtype=float).reshape(-1, 3)
            pos += n
        elif key in _BLOCKS or key in ("hex_regions", "tet_regions"):
            n = _parse_count(tokens, lineno)
            width = _BLOCKS.get(key, 1)
            block = lines[pos:pos + n]
            if len(block) < n:
                raise MeshFormatError(f"expected {n} '{key}' lines, file ended", lineno)
            rows = []
            for ln, toks in block:
                if len(toks) != width:
                    raise MeshFormatError(f"'{key}' line needs {width} integers", ln)
                try:
                    rows.append([int(t) for t in toks])
                except ValueError:
                    raise MeshFormatError(f"non-integer index in '{key}'", ln) from None
            arr = np.array(rows, dtype=np.int64).reshape(-1, width)
            if key in _BLOCKS:
                conn[key] = arr
            else:
                regions[key] = arr[:, 0]
            pos += n
        elif key == "set":
            n = _parse_count(tokens, lineno, nargs=3)
            vals = []
            while len(vals) < n:
                if pos >= len(lines):
                    raise MeshFormatError(f"set '{tokens[1]}' expects {n} indices", lineno)
                ln, toks = lines[pos]
                try:
                    vals.extend(int(t) for t in toks)
                except ValueError:
                    raise MeshFormatError("non-integer index in set", ln) from None
                pos += 1
            if len(vals) != n:
                raise MeshFormatError(f"set '{tokens[1]}' expects {n} indices", lineno)
            sets[tokens[1]] = np.array(vals, dtype=np.int64)
        else:
            raise MeshFormatError(f"unknown keyword '{key}'", lineno)
    mesh = Mesh(
        nodes, conn["hexes"], conn["tets"], sets, conn["tris"],
        regions.get("hex_regions"), regions.get("tet_regions"),
    )
    return normalize_winding(mesh)


def _all_float(tokens):
    try:
        [float(t) for t in tokens]
    except ValueError:
        return False
    return True


def load_mesh(path) -> Mesh:
    return parse_mesh(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    ok: bool
    hex_volumes: np.ndarray
    tet_volumes: np.ndarray
    min_jacobian_sign: int
    inverted: list
    degenerate: list
    unreferenced_nodes: list
    duplicate_elements: list
    warnings: list
    suggestions: list

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "n_hexes": int(len(self.hex_volumes)),
            "n_tets": int(len(self.tet_volumes)),
            "total_volume": float(self.hex_volumes.sum() + self.tet_volumes.sum()),
            "min_jacobian_sign": self.min_jacobian_sign,
            "inverted": self.inverted,
            "degenerate": self.degenerate,
            "unreferenced_nodes": self.unreferenced_nodes,
            "duplicate_elements": self.duplicate_elements,
            "warnings": self.warnings,
            "suggestions": self.suggestions,
        }


def validate_mesh(mesh: Mesh) -> ValidationReport:
    """Diagnose a mesh without modifying it."""
    hv = hex_volumes(mesh.nodes[mesh.hexes]) if len(mesh.hexes) else np.zeros(0)
    tv = tet_volumes(mesh.nodes[mesh.tets]) if len(mesh.tets) else np.zeros(0)
    scale = max(mesh.diameter, 1e-300) ** 3 * 1e-14
    inverted, degenerate, warnings, suggestions = [], [], [], []
    for kind, vols in (("hex", hv), ("tet", tv)):
        for i in np.nonzero(np.abs(vols) <= scale)[0]:
            degenerate.append([kind, int(i)])
        for i in np.nonzero(vols < -scale)[0]:
            inverted.append([kind, int(i)])
            swap = "swap nodes 1 and 2" if kind == "tet" else "swap bottom and top faces"
            suggestions.append(f"{kind} {int(i)}: inverted winding, fix by rewinding ({swap})")
    used = np.zeros(mesh.n_nodes, dtype=bool)
    used[mesh.hexes.ravel()] = True
    used[mesh.tets.ravel()] = True
    unref = np.nonzero(~used)[0].tolist()
    if unref:
        warnings.append(f"unreferenced node(s): {unref[:20]}" + (" ..." if len(unref) > 20 else ""))
    dups = []
    for kind, conn in (("hex", mesh.hexes), ("tet", mesh.tets)):
        if len(conn):
            keys = np.sort(conn, axis=1)
            _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
            for f, c in zip(first, counts):
                if c > 1:
                    dups.append([kind, int(f)])
    if dups:
        warnings.append(f"duplicate element(s): {dups}")
    allv = np.concatenate([hv, tv])
    min_sign = int(np.sign(allv.min())) if len(allv) else 1
    ok = not inverted and not degenerate and not dups
    return ValidationReport(ok, hv, tv, min_sign, inverted, degenerate, unref, dups, warnings, suggestions)


# ---------------------------------------------------------------------------
# point clouds


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Meshless discretization: nodes plus axis-aligned background cells.

    ``background_cells`` has shape (M, 2, 3): lower and upper corners.
    """

    nodes: np.ndarray
    background_cells: np.ndarray
    region_labels: np.ndarray | None = None
    boundary_nodes: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        nodes = _frozen(self.nodes, np.float64, (3,))
        cells = _frozen(self.background_cells, np.float64, (2, 3))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "background_cells", cells)
        labels = np.zeros(len(nodes), dtype=np.int64) if self.region_labels is None else self.region_labels
        labels = _frozen(labels, np.int64, ())
        if labels.shape != (len(nodes),):
            raise ValueError("region_labels needs one label per node")
        object.__setattr__(self, "region_labels", labels)
        sets = {}
        for key, idx in dict(self.boundary_nodes).items():
            idx = _frozen(idx, np.int64, ())
            if len(np.unique(idx)) != len(idx):
                raise ValueError(f"boundary set '{key}' contains duplicate indices")
            if idx.size and (idx.min() < 0 or idx.max() >= len(nodes)):
                raise ValueError(f"boundary set '{key}' index out of range")
            sets[key] = idx
        object.__setattr__(self, "boundary_nodes", sets)
        if cells.ndim != 3 or cells.shape[1:] != (2, 3):
            raise ValueError("background_cells must be (M, 2, 3)")
        ext = cells[:, 1] - cells[:, 0]
        if np.any(ext <= 0):
            raise ValueError(f"background cell {int(np.nonzero(np.any(ext <= 0, 1))[0][0])} has non-positive volume")
        tol = 1e-10 * max(self.diameter, 1e-300)
        inside = np.zeros(len(nodes), dtype=bool)
        for lo, hi in zip(cells[:, 0], cells[:, 1]):
            inside |= np.all((nodes >= lo - tol) & (nodes <= hi + tol), axis=1)
            if inside.all():
                break
        if not inside.all():
            raise ValueError(f"node {int(np.nonzero(~inside)[0][0])} lies outside the background cells")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.nodes.max(0) - self.nodes.min(0))) if len(self.nodes) else 0.0

    @property
    def cell_volumes(self) -> np.ndarray:
        return np.prod(self.background_cells[:, 1] - self.background_cells[:, 0], axis=1)


# ---------------------------------------------------------------------------
# voxel volumes


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar image. ``scalars`` is indexed [ix, iy, iz]; voxel centres at
    origin + index * spacing (mm)."""

    dims: tuple
    spacing: tuple
    origin: tuple
    scalars: np.ndarray
    background: float = 0.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise VolumeFormatError(f"dims must be 3 positive integers, got {dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise VolumeFormatError(f"spacing must be strictly positive, got {spacing}")
        data = np.asarray(self.scalars, dtype=np.float32)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise VolumeFormatError(
                f"scalars length {data.size} != dims product {dims[0] * dims[1] * dims[2]}"
            )
        data = data.reshape(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "scalars", data)
        object.__setattr__(self, "background", float(self.background))

    def grid_axes(self):
        return [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]


def load_volume(path) -> Volume:
    """Read a volume from its JSON header; the raw payload sits beside it
    (``data_file`` key if present, else same stem with ``.raw``)."""
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"bad volume header: {exc}") from None
    for key in ("dims", "spacing_mm", "origin_mm"):
        if key not in header:
            raise VolumeFormatError(f"volume header missing '{key}'")
    if header.get("dtype", "f32") != "f32":
        raise VolumeFormatError(f"unsupported dtype {header['dtype']!r}")
    raw = path.parent / header.get("data_file", path.with_suffix(".raw").name)
    payload = np.fromfile(raw, dtype="<f4")
    dims = [int(d) for d in header["dims"]]
    if len(dims) != 3:
        raise VolumeFormatError("dims must have 3 entries")
    expected = dims[0] * dims[1] * dims[2]
    if payload.size != expected:
        raise VolumeFormatError(
            f"payload holds {payload.size} values but header declares {expected} voxels"
        )
    scalars = payload.reshape(dims[::-1]).transpose(2, 1, 0)
    return Volume(dims, header["spacing_mm"], header["origin_mm"], scalars, header.get("background", 0.0))


def write_volume(volume: Volume, path) -> None:
    path = Path(path)
    raw = path.with_suffix(".raw")
    header = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing),
        "origin_mm": list(volume.origin),
        "dtype": "f32",
        "background": volume.background,
        "data_file": raw.name,
    }
    path.write_text(json.dumps(header, indent=1), encoding="utf-8")
    volume.scalars.transpose(2, 1, 0).astype("<f4").tofile(raw)


# ---------------------------------------------------------------------------
# lumped mass


def _region_density(density, regions):
    if isinstance(density, Mapping):
        missing = set(np.unique(regions).tolist()) - set(density)
        if missing:
            raise ValueError(f"no density for region(s) {sorted(missing)}")
        rho = np.array([density[int(r)] for r in regions], dtype=float)
    else:
        rho = np.full(len(regions), float(density))
    if np.any(rho <= 0):
        raise ValueError("density must be positive")
    return rho


def lumped_mass(geometry, density, table=None) -> np.ndarray:
    """Diagonal (lumped) nodal masses in kg.

    Mesh: each element's V*rho is split equally among its nodes.
    PointCloud: each integration point's w*rho is split among supporting nodes
    in proportion to |phi|; ``table`` is built with default settings if omitted.
    """
    if isinstance(geometry, Mesh):
        m = np.zeros(geometry.n_nodes)
        if len(geometry.hexes):
            rho = _region_density(density, geometry.hex_regions)
            share = hex_volumes(geometry.nodes[geometry.hexes]) * rho / 8.0
            np.add.at(m, geometry.hexes, share[:, None])
        if len(geometry.tets):
            rho = _region_density(density, geometry.tet_regions)
            share = tet_volumes(geometry.nodes[geometry.tets]) * rho / 4.0
            np.add.at(m, geometry.tets, share[:, None])
        return m
    if isinstance(geometry, PointCloud):
        if table is None:
            from .meshless import build_table

            table = build_table(geometry)
        point_rho = _region_density(density, table.point_regions)
        absphi = np.abs(table.phi)
        frac = absphi / absphi.sum(axis=1, keepdims=True)
        share = frac * (table.weights * point_rho)[:, None]
        m = np.zeros(geometry.n_nodes)
        np.add.at(m, table.support, share)
        return m
    raise TypeError(f"unsupported geometry {type(geometry).__name__}")
