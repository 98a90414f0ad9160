import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacsim.errors import InvalidInputError
from pacsim.radiance_field import (
    FEAT_DIM,
    NET_INPUT,
    SIGMA_EMPTY,
    ColorNet,
    VoxelField,
    alpha_of,
    color_at,
    density_at,
    make_net_input,
    posenc_dir,
    softplus,
    upsample,
)


@pytest.fixture
def unit_field():
    return VoxelField.empty(8, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), sigma0=0.0)


class TestDensity:
    def test_constant_raw_zero(self, unit_field):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0.05, 0.95, (50, 3))
        assert np.allclose(density_at(unit_field, pts), np.log(2.0), atol=1e-12)

    def test_empty_marker_vanishes(self):
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1))
        assert np.all(density_at(f, np.array([[0.5, 0.5, 0.5]])) < 1e-15)

    def test_outside_box_exactly_zero(self, unit_field):
        pts = np.array([[1.5, 0.5, 0.5], [-0.1, 0.2, 0.3]])
        assert np.array_equal(density_at(unit_field, pts), np.zeros(2))

    def test_linear_field_composes_with_softplus(self, unit_field):
        rng = np.random.default_rng(1)
        a, b = 3.0, -0.7
        nodes = np.indices(unit_field.sigma.shape).reshape(3, -1).T / 8.0
        unit_field.sigma[:] = (a * nodes[:, 0] + b).reshape(unit_field.sigma.shape)
        pts = rng.uniform(0.0, 1.0, (100, 3))
        expect = softplus(a * pts[:, 0] + b)
        assert np.allclose(density_at(unit_field, pts), expect, atol=1e-12)

    def test_nonnegative_everywhere(self, unit_field):
        rng = np.random.default_rng(2)
        unit_field.sigma[:] = rng.normal(0, 10, unit_field.sigma.shape)
        pts = rng.uniform(0, 1, (200, 3))
        assert np.all(density_at(unit_field, pts) >= 0.0)


class TestAlpha:
    def test_reference_point(self):
        assert alpha_of(0.0) == pytest.approx(1.0 - np.exp(-np.log(2.0)))
        assert alpha_of(0.0) == pytest.approx(0.5)

    def test_limits(self):
        assert alpha_of(-200.0) == pytest.approx(0.0, abs=1e-30)
        assert alpha_of(200.0) == pytest.approx(1.0)

    def test_strictly_monotone(self):
        x = np.linspace(-20, 20, 400)
        a = alpha_of(x)
        assert np.all(np.diff(a) > 0)
        assert np.all((a > 0) & (a < 1))


class TestColorNet:
    def test_input_width_is_39(self):
        assert NET_INPUT == 39
        assert posenc_dir(np.array([0.0, 0.0, 1.0])).shape == (24,)
        x = make_net_input(np.zeros((5, FEAT_DIM)), np.array([0.0, 0.0, 1.0]))
        assert x.shape == (5, 39)

    def test_zero_net_outputs_half(self, unit_field):
        net = ColorNet.zeros()
        c = color_at(unit_field, net, np.array([[0.5, 0.5, 0.5]]), np.array([0, 0, 1.0]))
        assert np.allclose(c, 0.5)

    def test_constant_features_give_position_independent_color(self, unit_field):
        unit_field.feat[:] = 0.37
        net = ColorNet.create(0)
        pts = np.random.default_rng(3).uniform(0.1, 0.9, (20, 3))
        c = color_at(unit_field, net, pts, np.array([0.0, 1.0, 0.0]))
        assert np.allclose(c, c[0], atol=1e-12)

    def test_output_gradient_wrt_feature_fd(self, unit_field):
        rng = np.random.default_rng(4)
        net = ColorNet.create(1)
        feat = rng.normal(size=(1, FEAT_DIM))
        d = np.array([0.3, -0.5, 0.81])
        d /= np.linalg.norm(d)

        def f(feat):
            return net.apply(make_net_input(feat, d))[0, 1]

        # analytic gradient through the two layers
        x = make_net_input(feat, d)
        h = np.maximum(x @ net.w1.T + net.b1, 0.0)
        c = 1.0 / (1.0 + np.exp(-(h @ net.w2.T + net.b2)))
        zbar = c[0, 1] * (1 - c[0, 1])
        hbar = zbar * net.w2[1]
        xbar = (hbar * (h[0] > 0)) @ net.w1
        k = 5
        eps = 1e-6
        fp = feat.copy()
        fp[0, k] += eps
        fm = feat.copy()
        fm[0, k] -= eps
        fd = (f(fp) - f(fm)) / (2 * eps)
        assert abs(xbar[k] - fd) / max(abs(fd), 1e-12) < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_output_bounded(self, seed):
        rng = np.random.default_rng(seed)
        net = ColorNet.create(seed % 1000)
        x = rng.normal(0, 10, (7, NET_INPUT))
        c = net.apply(x)
        assert np.all((c >= 0.0) & (c <= 1.0))

    def test_nonunit_direction_normalized_with_warning(self, unit_field):
        net = ColorNet.create(0)
        with pytest.warns(UserWarning):
            color_at(unit_field, net, np.array([[0.5, 0.5, 0.5]]), np.array([0, 0, 2.0]))

    def test_zero_direction_rejected(self, unit_field):
        with pytest.raises(InvalidInputError):
            color_at(unit_field, ColorNet.create(0), np.array([[0.5] * 3]), np.zeros(3))


class TestUpsample:
    def test_constant_preserved(self):
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1), sigma0=1.7)
        f.feat[:] = -0.3
        up = upsample(f, 16)
        assert np.allclose(up.sigma, 1.7, atol=1e-14)
        assert np.allclose(up.feat, -0.3, atol=1e-14)

    def test_exact_at_old_nodes(self):
        rng = np.random.default_rng(5)
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1))
        f.sigma[:] = rng.normal(size=f.sigma.shape)
        f.feat[:] = rng.normal(size=f.feat.shape)
        up = upsample(f, 16)
        assert np.allclose(up.sigma[::2, ::2, ::2], f.sigma, atol=1e-12)
        assert np.allclose(up.feat[::2, ::2, ::2], f.feat, atol=1e-12)

    def test_linear_ramp_stays_linear(self):
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1))
        nodes = np.indices(f.sigma.shape).reshape(3, -1).T / 8.0
        f.sigma[:] = (2.0 * nodes[:, 2] - 0.5).reshape(f.sigma.shape)
        up = upsample(f, 16)
        nodes16 = np.indices(up.sigma.shape).reshape(3, -1).T / 16.0
        assert np.allclose(up.sigma.ravel(), 2.0 * nodes16[:, 2] - 0.5, atol=1e-10)

    def test_shrink_rejected(self):
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1))
        with pytest.raises(InvalidInputError):
            upsample(f, 4)
