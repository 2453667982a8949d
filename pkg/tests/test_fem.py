import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from tled.errors import DegenerateElementError
from tled.fem import (
    DEFAULT_HOURGLASS_KAPPA, FEMModel, anp_nodal_state, deformation_gradients, hex_internal_forces, params_for,
    hourglass_amplitudes, precompute_elements,
)
from tled.generators import box_hex_mesh, box_mixed_mesh, box_tet_mesh
from tled.geometry import HEX_NATURAL, Mesh, build_mesh
from tled.scenarios import PATCH_GRADIENT, fem_patch_error, hourglass_mode_stiffness


def perturbed(mesh, rng, amount=0.08):
    """Same topology with interior nodes jittered, so elements are distorted."""
    X = mesh.nodes.copy()
    inner = np.setdiff1d(np.arange(mesh.n_nodes), mesh.node_sets["boundary"])
    h = mesh.diameter / np.sqrt(3) / 3
    X[inner] += rng.uniform(-amount * h, amount * h, (len(inner), 3))
    return build_mesh(X, mesh.hexes, mesh.tets, mesh.node_sets)


class TestPrecompute:
    @pytest.mark.parametrize("edge", [1.0, 0.25])
    def test_hex_derivatives_at_centroid(self, edge):
        pre = precompute_elements(box_hex_mesh((1, 1, 1), (edge,) * 3))
        assert_allclose(pre.hex_dNdX[0], HEX_NATURAL / (4 * edge), atol=1e-14)
        assert_allclose(pre.hex_V0, [edge ** 3])

    def test_tet_derivatives_sum_to_zero(self):
        X = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        pre = precompute_elements(Mesh(X, tets=np.array([[0, 1, 2, 3]])))
        assert_allclose(pre.tet_V0, [1 / 6])
        assert_allclose(pre.tet_dNdX[0].sum(axis=0), 0.0, atol=1e-15)

    def test_hourglass_vectors_unit_cube(self, unit_hex):
        pre = precompute_elements(unit_hex)
        gamma = pre.hex_gamma[0]
        # a cube centred on the origin has Gamma equal to the base patterns; the shift does not matter
        expected = np.stack([HEX_NATURAL[:, 1] * HEX_NATURAL[:, 2], HEX_NATURAL[:, 0] * HEX_NATURAL[:, 2],
                             HEX_NATURAL[:, 0] * HEX_NATURAL[:, 1], HEX_NATURAL.prod(axis=1)])
        assert_allclose(gamma, expected, atol=1e-14)
        X = unit_hex.nodes[unit_hex.hexes[0]]
        assert_allclose(gamma @ np.column_stack([np.ones(8), X]), 0.0, atol=1e-14)

    def test_hourglass_vectors_orthogonal_on_distorted_hex(self, rng):
        X = box_hex_mesh((1, 1, 1)).nodes + rng.uniform(-0.1, 0.1, (8, 3))
        pre = precompute_elements(build_mesh(X, [np.arange(8)]))
        Xe = X[pre.hexes[0]]
        assert_allclose(pre.hex_gamma[0] @ np.column_stack([np.ones(8), Xe]), 0.0, atol=1e-13)

    def test_hourglass_stiffness_scaling(self, unit_hex, tissue):
        pre = precompute_elements(unit_hex, tissue, hourglass_kappa=0.2)
        assert_allclose(pre.hex_khg, [0.2 * tissue.mu * 1.0])
        big = precompute_elements(box_hex_mesh((1, 1, 1), (2.0,) * 3), tissue, hourglass_kappa=0.2)
        assert_allclose(big.hex_khg, [0.2 * tissue.mu * 2.0])

    def test_hourglass_env_override(self, unit_hex, monkeypatch):
        assert precompute_elements(unit_hex).hourglass_kappa == DEFAULT_HOURGLASS_KAPPA
        monkeypatch.setenv("TLED_HOURGLASS_KAPPA", "0.3")
        assert precompute_elements(unit_hex).hourglass_kappa == 0.3

    def test_degenerate_rejected(self):
        X = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        with pytest.raises(DegenerateElementError):
            precompute_elements(Mesh(X, tets=np.array([[0, 1, 2, 3]])))


class TestForces:
    @pytest.mark.parametrize("kind", ["hex", "tet", "mixed"])
    def test_zero_displacement(self, cube_meshes, kind, tissue):
        model = FEMModel(cube_meshes[kind], tissue)
        assert not model.internal_forces(np.zeros((model.n_nodes, 3))).any()

    def test_hourglass_mode_restoring_force(self, unit_hex, tissue):
        model = FEMModel(unit_hex, tissue)
        pre = model.pre
        u = np.zeros((8, 3))
        u[pre.hexes[0], 0] = 1e-3 * pre.hex_gamma[0, 3]
        F = deformation_gradients(pre.hex_dNdX, u[pre.hexes])
        assert_allclose(F[0], np.eye(3), atol=1e-15)  # invisible to the single-point stress
        assert not hex_internal_forces(pre, u, model.materials, hourglass=False).any()
        f = model.internal_forces(u)
        cos = np.sum(f * u) / (np.linalg.norm(f) * np.linalg.norm(u))
        assert_allclose(cos, 1.0, atol=1e-12)  # f_int along u: the restoring force -f_int opposes it

    def test_every_mode_is_stiff(self):
        assert np.all(hourglass_mode_stiffness() > 0)
        assert_allclose(hourglass_mode_stiffness(0.0), 0.0, atol=1e-12)

    def test_amplitude_vanishes_on_affine_field(self, rng):
        mesh = box_hex_mesh((2, 2, 2))
        pre = precompute_elements(mesh)
        u = mesh.nodes @ rng.normal(size=(3, 3)).T + rng.normal(size=3)
        assert_allclose(hourglass_amplitudes(pre, u), 0.0, atol=1e-14)

    @pytest.mark.parametrize("kind", ["hex", "tet", "mixed"])
    def test_forces_are_energy_gradient(self, cube_meshes, kind, tissue, rng):
        model = FEMModel(perturbed(cube_meshes[kind], rng), tissue)
        u = 0.05 * rng.normal(size=(model.n_nodes, 3))
        f = model.internal_forces(u)
        h = 1e-7
        fd = np.zeros_like(u)
        for i in range(model.n_nodes):
            for a in range(3):
                e = np.zeros_like(u)
                e[i, a] = h
                fd[i, a] = (model.energy(u + e) - model.energy(u - e)) / (2 * h)
        assert_allclose(f, fd, rtol=1e-5, atol=1e-5 * np.abs(f).max())

    def test_threads_bitwise_identical(self, tissue, rng):
        mesh = box_mixed_mesh((4, 4, 4))
        u = 0.02 * rng.normal(size=(mesh.n_nodes, 3))
        a = FEMModel(mesh, tissue, threads=1).internal_forces(u)
        b = FEMModel(mesh, tissue, threads=3).internal_forces(u)
        assert a.tobytes() == b.tobytes()


class TestANP:
    def test_nodal_volumes_sum_to_element_volumes(self, rng):
        mesh = perturbed(box_tet_mesh((3, 3, 3)), rng)
        pre = precompute_elements(mesh)
        u = 0.05 * rng.normal(size=(mesh.n_nodes, 3))
        _, J, Vn, _, _ = anp_nodal_state(pre, u)
        assert_allclose(Vn.sum(), (pre.tet_V0 * J).sum(), rtol=1e-13)
        assert_allclose(pre.anp_V0n.sum(), 1.0, rtol=1e-13)


class TestPatch:
    @pytest.mark.parametrize("make", [box_hex_mesh, box_tet_mesh, box_mixed_mesh])
    def test_affine_boundary_gives_uniform_gradient(self, make):
        assert fem_patch_error(make((3, 3, 3)), PATCH_GRADIENT) < 1e-10


rigid = st.tuples(st.integers(0, 2 ** 31), st.tuples(*[st.floats(-1, 1)] * 3))


@settings(max_examples=20, deadline=None)
@given(motion=rigid, kind=st.sampled_from(["hex", "tet", "mixed"]))
def test_rigid_motion_is_force_free(motion, kind):
    seed, shift = motion
    mesh = {"hex": box_hex_mesh, "tet": box_tet_mesh, "mixed": box_mixed_mesh}[kind]((2, 2, 2))
    model = FEMModel(mesh)
    R = Rotation.random(random_state=seed).as_matrix()
    u = mesh.nodes @ R.T + np.asarray(shift) - mesh.nodes
    f = model.internal_forces(u)
    mu = params_for(model.materials, 0).mu
    assert np.abs(f).max() <= 1e-9 * mu * 0.5 ** 2
