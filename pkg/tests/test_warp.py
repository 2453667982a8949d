import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from tled.errors import WarpError
from tled.geometry import Volume
from tled.verify import smooth_field, warp_round_trip
from tled.warp import (
    BSplineTransform, ScatteredSamples, bspline_weights, build_backward_samples, fit_multilevel_bspline,
    invert_points, load_transform, sample_residuals, save_transform, warp_volume,
)

DOMAIN = np.array([[0.0, 0.0, 0.0], [40.0, 30.0, 20.0]])


def scattered(n=400, seed=0):
    return np.random.default_rng(seed).uniform(DOMAIN[0], DOMAIN[1], (n, 3))


def interior(n=300, seed=1):
    return np.random.default_rng(seed).uniform(DOMAIN[0] + 2, DOMAIN[1] - 2, (n, 3))


def random_volume(dims=(10, 9, 8), seed=0, spacing=(1.0, 1.0, 1.0)):
    data = np.random.default_rng(seed).uniform(0, 100, dims).astype(np.float32)
    return Volume(dims, spacing, (0.0, 0.0, 0.0), data, background=-1.0)


def translation(d, domain):
    x = np.random.default_rng(5).uniform(domain[0], domain[1], (50, 3))
    return fit_multilevel_bspline(ScatteredSamples(x, np.tile(d, (50, 1))), domain=domain, levels=1)


@pytest.fixture(scope="module")
def sinusoid():
    x = scattered(2000)
    v = np.stack([3 * np.sin(x[:, 0] / 6), 2 * np.cos(x[:, 1] / 5), np.sin(x[:, 2] / 4) * np.cos(x[:, 0] / 7)], 1)
    return ScatteredSamples(x, v)


class TestBasis:
    @given(t=st.floats(0, 1, exclude_max=True))
    def test_partition_of_unity(self, t):
        w = bspline_weights(t)
        assert_allclose(w.sum(), 1.0, atol=1e-14)
        assert np.all(w >= 0)


class TestFit:
    def test_constant_field(self):
        d = np.array([1.5, -2.0, 0.25])
        T = fit_multilevel_bspline(ScatteredSamples(scattered(30), np.tile(d, (30, 1))), domain=DOMAIN, levels=1)
        assert_allclose(T.displacement(interior()), np.tile(d, (300, 1)), atol=1e-10)

    def test_linear_field(self, rng):
        a, B = rng.normal(size=3), 0.05 * rng.normal(size=(3, 3))
        x = scattered(200)
        T = fit_multilevel_bspline(ScatteredSamples(x, a + x @ B.T), domain=DOMAIN, levels=1)
        y = interior()
        assert_allclose(T.displacement(y), a + y @ B.T, atol=1e-8)

    def test_residual_never_increases(self, sinusoid):
        T = fit_multilevel_bspline(sinusoid, domain=DOMAIN, levels=5)
        r = np.array(T.residual_max)
        assert np.all(np.diff(r) <= 0) and r[-1] < 0.5 * r[0]

    def test_sample_residual_matches_report(self, sinusoid):
        T = fit_multilevel_bspline(sinusoid, domain=DOMAIN, levels=4)
        err = np.abs(T.displacement(sinusoid.positions) - sinusoid.values).max()
        assert_allclose(err, T.residual_max[-1], rtol=1e-12)
        assert sample_residuals(T, sinusoid).max() <= np.sqrt(3) * T.residual_max[-1]

    def test_spacing_halves(self, sinusoid):
        T = fit_multilevel_bspline(sinusoid, domain=DOMAIN, levels=3)
        for coarse, fine in zip(T.levels, T.levels[1:]):
            assert_allclose(fine.spacing, coarse.spacing / 2)
        assert_allclose(T.levels[0].spacing, (DOMAIN[1] - DOMAIN[0]) / 4)

    def test_empty(self):
        with pytest.raises(WarpError):
            fit_multilevel_bspline(ScatteredSamples(np.zeros((0, 3)), np.zeros((0, 3))), domain=DOMAIN)

    def test_sample_outside_domain(self):
        with pytest.raises(WarpError, match="outside"):
            fit_multilevel_bspline(ScatteredSamples([[50.0, 1, 1]], [[0.0, 0, 0]]), domain=DOMAIN)


class TestTransform:
    def test_zero_coefficients_are_identity(self):
        T = BSplineTransform.identity(DOMAIN, levels=2)
        y = interior()
        assert np.array_equal(T(y), y)

    def test_displacement_fades_outside(self, sinusoid):
        T = fit_multilevel_bspline(sinusoid, domain=DOMAIN, levels=2)
        far = DOMAIN[1] + 3 * T.levels[0].spacing
        assert not T.displacement(far[None]).any()

    def test_band_does_not_extrapolate(self, sinusoid, rng):
        T = fit_multilevel_bspline(sinusoid, domain=DOMAIN, levels=3)
        inside = np.abs(T.displacement(rng.uniform(DOMAIN[0], DOMAIN[1], (5000, 3)))).max()
        band = rng.uniform(DOMAIN[0] - 20, DOMAIN[1] + 20, (5000, 3))
        assert np.abs(T.displacement(band)).max() <= 1.01 * inside

    def test_lipschitz_bound(self, sinusoid, rng):
        T = fit_multilevel_bspline(sinusoid, domain=DOMAIN, levels=3)
        L = T.lipschitz_bound()
        x = rng.uniform(DOMAIN[0] - 5, DOMAIN[1] + 5, (500, 3))
        h = rng.normal(size=(500, 3)) * 0.3
        ratio = np.linalg.norm(T(x + h) - T(x), axis=1) / np.linalg.norm(h, axis=1)
        assert ratio.max() <= L

    def test_second_differences_bounded(self, sinusoid, rng):
        T = fit_multilevel_bspline(sinusoid, domain=DOMAIN, levels=3)
        # |d2 B / dt2| sums to at most 4 over the four active basis functions per axis
        K = sum(3 * 4 * np.abs(lat.coeffs).max() / lat.spacing.min() ** 2 for lat in T.levels)
        x = interior(500)
        for h in (1e-1, 1e-2):
            e = rng.normal(size=(500, 3))
            e *= h / np.linalg.norm(e, axis=1)[:, None]
            d2 = np.linalg.norm(T(x + e) - 2 * T(x) + T(x - e), axis=1)
            assert d2.max() <= K * h * h

    def test_save_load_round_trip(self, sinusoid, tmp_path):
        T = fit_multilevel_bspline(sinusoid, domain=DOMAIN, levels=3)
        save_transform(T, tmp_path / "t.json")
        back = load_transform(tmp_path / "t.json")
        y = interior()
        assert T.displacement(y).tobytes() == back.displacement(y).tobytes()
        assert back.residual_max == T.residual_max


class TestBackward:
    def test_zero_displacement(self):
        x = scattered(20)
        s = build_backward_samples(x, np.zeros_like(x))
        assert np.array_equal(s.positions, x) and not s.values.any()

    def test_translation_is_undone(self):
        x = scattered(100)
        d = np.tile([2.0, -1.0, 0.5], (100, 1))
        fwd = fit_multilevel_bspline(ScatteredSamples(x, d), domain=DOMAIN + [[-5] * 3, [5] * 3], levels=1)
        bwd = fit_multilevel_bspline(build_backward_samples(x, d), domain=DOMAIN + [[-5] * 3, [5] * 3], levels=1)
        assert_allclose(bwd.displacement(x + d), -d, atol=1e-10)
        y = interior()
        assert_allclose(bwd(fwd(y)), y, atol=1e-10)

    def test_round_trip_smooth_field(self):
        assert warp_round_trip(size=64.0, n_samples=5000) <= 0.5

    def test_fixed_point_refinement_improves_inverse(self):
        size = 64.0
        x = np.random.default_rng(0).uniform(0, size, (4000, 3))
        u = smooth_field(x, size=size)
        dom = [[-10.0] * 3, [size + 10] * 3]
        fwd = fit_multilevel_bspline(ScatteredSamples(x, u), domain=dom)
        bwd = fit_multilevel_bspline(build_backward_samples(x, u), domain=dom)
        probes = np.random.default_rng(1).uniform(0.1 * size, 0.9 * size, (500, 3))
        targets = fwd(probes)
        plain = np.linalg.norm(bwd(targets) - probes, axis=1).max()
        refined = np.linalg.norm(invert_points(fwd, targets, 5, bwd(targets)) - probes, axis=1).max()
        assert refined < plain


class TestWarpVolume:
    def test_identity_is_bit_identical(self):
        vol = random_volume()
        out = warp_volume(vol, BSplineTransform.identity([[0, 0, 0], [9, 8, 7]]))
        assert out.scalars.tobytes() == vol.scalars.tobytes()
        assert warp_volume(vol, None).scalars.tobytes() == vol.scalars.tobytes()

    def test_one_voxel_shift(self):
        vol = random_volume(spacing=(2.0, 1.0, 1.0))
        T = translation([2.0, 0.0, 0.0], np.array([[-4.0, -4, -4], [24, 12, 12]]))
        out = warp_volume(vol, T).scalars
        assert_allclose(out[:-1], vol.scalars[1:], atol=1e-3)
        assert np.all(out[-1] == vol.background)

    def test_inverse_translations_restore_interior(self):
        vol = random_volume((12, 12, 12))
        dom = np.array([[-6.0] * 3, [17.0] * 3])
        there = warp_volume(vol, translation([1.0, -2.0, 1.0], dom))
        back = warp_volume(there, translation([-1.0, 2.0, -1.0], dom))
        assert_allclose(back.scalars[2:-2, 3:-3, 2:-2], vol.scalars[2:-2, 3:-3, 2:-2], atol=1e-3)

    def test_outside_source_gets_background(self):
        vol = random_volume()
        out = warp_volume(vol, None, target_dims=(4, 4, 4), target_origin=(100.0, 0, 0))
        assert np.all(out.scalars == vol.background)


@settings(max_examples=15, deadline=None)
@given(d=st.tuples(*[st.floats(-5, 5)] * 3), seed=st.integers(0, 1000))
def test_constant_fields_reproduced(d, seed):
    x = scattered(40, seed)
    T = fit_multilevel_bspline(ScatteredSamples(x, np.tile(d, (40, 1))), domain=DOMAIN, levels=2)
    assert_allclose(T.displacement(interior(50, seed)), np.tile(d, (50, 1)), atol=1e-8)
