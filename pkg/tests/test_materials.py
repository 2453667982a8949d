import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.optimize import brentq
from scipy.spatial.transform import Rotation

from tled.errors import ElementInversionError, MaterialError
from tled.materials import (
    NEO_HOOKEAN, OGDEN_VISCO, MaterialParams, ViscoState, isochoric_stress, moduli_from_E_nu, pk2, pk2_neo_hookean,
    pk2_ogden_visco, resubstitute_stress, strain_energy,
)
from tled.scenarios import OGDEN_TWO_TERM, random_deformation_gradients

NEO = MaterialParams(NEO_HOOKEAN, 3000.0, 0.49)
OGDEN_A2 = MaterialParams.matched_ogden(3000.0, 0.49)


def energy_of_C(C, params):
    """W as a function of C alone, through the symmetric square root U."""
    w, N = np.linalg.eigh(C)
    return strain_energy(N @ np.diag(np.sqrt(w)) @ N.T, params)


def stress_from_C_differences(F, params, h=1e-6):
    """S = 2 dW/dC by central differences over the six independent components."""
    C = F.T @ F
    S = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            E = np.zeros((3, 3))
            E[i, j] = E[j, i] = h
            dW = (energy_of_C(C + E, params) - energy_of_C(C - E, params)) / (2 * h)
            S[i, j] = S[j, i] = 2 * dW if i == j else dW
    return S


def lateral_free_stretch(stretch, params):
    return brentq(lambda a: pk2(np.diag([stretch, a, a]), params)[1, 1], 0.5, 1.5, xtol=1e-15)


class TestModuli:
    def test_soft_tissue(self):
        mu, kappa = moduli_from_E_nu(3000.0, 0.49)
        assert_allclose([mu, kappa], [3000 / 2.98, 50000.0], rtol=1e-12)
        assert_allclose(mu, 1006.71, atol=5e-3)

    def test_zero_poisson(self):
        assert_allclose(moduli_from_E_nu(7.0, 0.0), (3.5, 7.0 / 3.0))

    def test_ventricle(self):
        assert_allclose(moduli_from_E_nu(10.0, 0.1), (4.5455, 4.1667), atol=5e-5)

    @pytest.mark.parametrize("E, nu", [(0.0, 0.3), (-1.0, 0.3), (1.0, 0.5), (1.0, -0.1)])
    def test_invalid(self, E, nu):
        with pytest.raises(MaterialError):
            moduli_from_E_nu(E, nu)


class TestNeoHookean:
    def test_reference_is_stress_free(self):
        assert_allclose(pk2(np.eye(3), NEO), 0.0, atol=1e-12)

    def test_uniaxial_matches_energy_differences(self):
        a = lateral_free_stretch(1.1, NEO)
        F = np.diag([1.1, a, a])
        assert_allclose(pk2(F, NEO), stress_from_C_differences(F, NEO), rtol=1e-6, atol=1e-6 * NEO.mu)

    def test_simple_shear_matches_energy_differences(self):
        F = np.eye(3)
        F[0, 1] = 0.1
        assert_allclose(pk2(F, NEO), stress_from_C_differences(F, NEO), rtol=1e-6, atol=1e-6 * NEO.mu)

    def test_inversion_carries_F(self):
        F = np.diag([1.0, 1.0, -0.5])
        with pytest.raises(ElementInversionError) as info:
            pk2_neo_hookean(F, NEO.mu, NEO.kappa)
        assert_allclose(info.value.F, F)

    @pytest.mark.parametrize("lam", [0.6, 0.9, 0.999, 1.001, 1.2, 1.45])
    def test_volumetric_sign(self, lam):
        S = pk2(lam * np.eye(3), NEO)
        assert np.sign(np.trace(S)) == np.sign(lam ** 3 - 1)


class TestOgden:
    def test_alpha2_matches_neo_hookean(self):
        F = random_deformation_gradients(50, seed=3)
        assert_allclose(pk2(F, OGDEN_A2), pk2(F, NEO), rtol=1e-8, atol=1e-8 * NEO.mu)

    def test_two_term_matches_energy_differences(self):
        F = np.diag([1.08, 0.97, 0.96])
        F[0, 2] = 0.05
        S = pk2(F, OGDEN_TWO_TERM)
        assert_allclose(S, stress_from_C_differences(F, OGDEN_TWO_TERM), rtol=1e-5, atol=1e-6 * NEO.mu)

    def test_coincident_stretches_finite(self):
        for F in (np.eye(3), np.diag([1.1, 1.1 + 1e-10, 0.9]), np.diag([1.05, 1.05, 1.05])):
            S = pk2(F, OGDEN_TWO_TERM)
            assert np.all(np.isfinite(S))
            assert_allclose(S, S.T, atol=1e-12)

    def test_mismatched_terms_rejected(self):
        with pytest.raises(MaterialError):
            MaterialParams(OGDEN_VISCO, 3000.0, 0.49, (1.0, 2.0), (2.0,))


class TestViscoelastic:
    PARAMS = MaterialParams.matched_ogden(3000.0, 0.49, prony=((0.5, 0.1),))

    def test_identity_stays_zero(self):
        S, state = pk2_ogden_visco(np.eye(3), 0.01, self.PARAMS)
        assert_allclose(S, 0.0, atol=1e-12)
        assert not state.h.any()

    def test_held_strain_relaxes_to_long_term(self):
        F = np.diag([1.1, 0.96, 0.96])
        state = ViscoState.zeros((), 1)
        S, state = pk2_ogden_visco(F, 1e-6, self.PARAMS, state)
        S0 = S.copy()
        for _ in range(400):
            S, state = pk2_ogden_visco(F, 0.01, self.PARAMS, state)
        elastic = pk2(F, self.PARAMS)
        assert_allclose(S0, elastic, rtol=1e-4)
        # the isochoric part relaxes by the Prony weight; the volumetric part is elastic
        iso = isochoric_stress(F, self.PARAMS)
        assert_allclose(S, elastic - 0.5 * iso, rtol=1e-9, atol=1e-9 * NEO.mu)

    def test_bad_step(self):
        with pytest.raises(MaterialError):
            pk2_ogden_visco(np.eye(3), 0.0, self.PARAMS)


class TestResubstitution:
    def test_identity(self):
        assert_allclose(resubstitute_stress(np.tile(np.eye(3), (4, 1, 1)), OGDEN_A2), 0.0, atol=1e-12)

    def test_empty(self):
        assert resubstitute_stress(np.zeros((0, 3, 3)), OGDEN_A2).shape == (0, 3, 3)

    def test_neo_hookean_gradients_with_matched_ogden(self):
        stretches = np.linspace(0.9, 1.1, 5)
        F = np.array([np.diag([s, lateral_free_stretch(s, NEO), lateral_free_stretch(s, NEO)]) for s in stretches])
        assert_allclose(resubstitute_stress(F, OGDEN_A2), pk2(F, NEO), rtol=1e-6, atol=1e-6 * NEO.mu)


rotations = st.integers(0, 2 ** 31).map(lambda s: Rotation.random(random_state=s).as_matrix())
gradients = st.integers(0, 2 ** 31).map(lambda s: random_deformation_gradients(1, seed=s)[0])
models = st.sampled_from([NEO, OGDEN_TWO_TERM])


@settings(max_examples=60, deadline=None)
@given(F=gradients, R=rotations, params=models)
def test_objectivity(F, R, params):
    S = pk2(F, params)
    assert_allclose(pk2(R @ F, params), S, atol=1e-10 * max(1.0, np.abs(S).max()))


@settings(max_examples=60, deadline=None)
@given(d=st.tuples(*[st.floats(0.7, 1.3)] * 3), perm=st.permutations([0, 1, 2]), params=models)
def test_isotropy_under_permuted_stretches(d, perm, params):
    a = np.linalg.eigvalsh(pk2(np.diag(d), params))
    b = np.linalg.eigvalsh(pk2(np.diag(np.asarray(d)[list(perm)]), params))
    assert_allclose(a, b, atol=1e-10 * max(1.0, np.abs(a).max()))


@settings(max_examples=30, deadline=None)
@given(F=gradients, params=models)
def test_stress_is_energy_gradient(F, params):
    assert_allclose(pk2(F, params), stress_from_C_differences(F, params), rtol=1e-5, atol=1e-5 * NEO.mu)
