import json

import numpy as np
import pytest

from tled.generators import box_hex_mesh, box_mixed_mesh, box_tet_mesh, icosphere
from tled.geometry import Volume, write_mesh, write_volume
from tled.materials import NEO_HOOKEAN, MaterialParams

AFFINE = np.array([[1.05, 0.02, 0.0], [0.0, 0.97, 0.01], [0.0, 0.0, 1.02]])
SHIFT = np.array([2.0, 0.0, 1.0])  # mm
LANDMARKS = np.array([[10.0, 10.0, 10.0], [20.0, 25.0, 15.0], [30.0, 12.0, 28.0]])


def affine_displacement(X):
    return X @ (AFFINE - np.eye(3)).T + SHIFT


@pytest.fixture
def workspace(tmp_path):
    """A 40 mm cube with affine boundary data and a landmark volume on a 1 mm grid."""
    mesh = box_hex_mesh((5, 5, 5), size=(40.0, 40.0, 40.0))
    write_mesh(mesh, tmp_path / "cube.mesh")
    bnd = mesh.node_sets["boundary"]
    u = affine_displacement(mesh.nodes[bnd])
    rows = np.column_stack([bnd, u])
    np.savetxt(tmp_path / "bc.csv", rows, delimiter=",", fmt=["%d", "%.17g", "%.17g", "%.17g"])
    data = np.zeros((50, 50, 50), np.float32)
    data[::2, ::2, ::2] = 10.0  # checkerboard texture
    for p in LANDMARKS.astype(int):
        data[tuple(p)] = 1000.0
    write_volume(Volume((50, 50, 50), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), data), tmp_path / "source.json")
    cfg = {
        "geometry": {"mesh": "cube.mesh", "length_unit": "mm"},
        "materials": {"default": {"stress_unit": "Pa", "E": 3000.0, "nu": 0.45}},
        "loading": {"length_unit": "mm", "ramp_duration_s": 0.2, "prescribed": [{"file": "bc.csv"}]},
        "solver": {"tolerance_m": 1e-9},
        "warp": {"source_volume": "source.json"},
        "outputs": "out",
    }
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tissue():
    """Soft-tissue Neo-Hookean material, E = 3000 Pa, nu = 0.49."""
    return MaterialParams(NEO_HOOKEAN, 3000.0, 0.49)


@pytest.fixture
def unit_hex():
    return box_hex_mesh((1, 1, 1))


@pytest.fixture
def cube_meshes():
    return {
        "hex": box_hex_mesh((2, 2, 2)),
        "tet": box_tet_mesh((2, 2, 2)),
        "mixed": box_mixed_mesh((2, 2, 2)),
    }


@pytest.fixture
def sphere_surface():
    return icosphere(2, 1.0)  # 320 triangles
