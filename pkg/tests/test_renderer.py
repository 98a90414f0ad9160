import numpy as np
import pytest

from pacsim.errors import InvalidInputError
from pacsim.radiance_field import ColorNet, VoxelField
from pacsim.renderer import (
    Camera,
    Ray,
    render_image,
    render_loss,
    render_pixel,
    render_rays,
    render_rays_backward,
    surface_regularizer,
)


def white_net():
    net = ColorNet.zeros()
    net.b2[:] = 50.0  # sigmoid(50) ~ 1
    return net


def slab_field(sigma_value):
    raw = np.log(np.expm1(sigma_value))  # softplus inverse
    return VoxelField.empty(8, (0, 0, 0), (1, 1, 1), sigma0=raw)


class TestRenderPixel:
    def test_empty_field_returns_background(self):
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1))
        net = ColorNet.create(0)
        bg = np.array([0.9, 0.2, 0.4])
        c = render_pixel(f, net, Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0, 0])), bg)
        assert np.array_equal(c, bg)

    def test_ray_missing_box_returns_background(self):
        f = slab_field(5.0)
        bg = np.array([0.1, 0.5, 0.9])
        c = render_pixel(f, ColorNet.create(0), Ray(np.array([-1.0, 5.0, 0.5]), np.array([1.0, 0, 0])), bg)
        assert np.array_equal(c, bg)

    def test_homogeneous_slab_transmittance(self):
        # unit path length through sigma = 2 -> C = 1 - exp(-2)
        f = slab_field(2.0)
        ray = Ray(np.array([-0.5, 0.5, 0.5]), np.array([1.0, 0, 0]))
        c = render_pixel(f, white_net(), ray, np.zeros(3), delta=1e-3)
        assert np.allclose(c, 1.0 - np.exp(-2.0), atol=1e-3)

    def test_slab_half_thickness(self):
        # spec example: sigma = 2 over thickness 0.5 -> 1 - e^{-1}
        f = slab_field(2.0)
        ray = Ray(np.array([-0.5, 0.5, 0.5]), np.array([1.0, 0, 0]), s_near=0.0, s_far=1.0)
        c = render_pixel(f, white_net(), ray, np.zeros(3), delta=1e-3)
        assert np.allclose(c, 1.0 - np.exp(-1.0), atol=1e-3)

    def test_first_order_quadrature_convergence(self):
        f = slab_field(2.0)
        ray = Ray(np.array([-0.5, 0.47, 0.53]), np.array([1.0, 0, 0]))
        exact = 1.0 - np.exp(-2.0)
        errs = []
        for delta in (4e-3, 2e-3, 1e-3):
            c = render_pixel(f, white_net(), ray, np.zeros(3), delta=delta)
            errs.append(abs(c[0] - exact))
        assert errs[0] < 4e-3
        # halving delta should not grow the error
        assert errs[2] <= errs[0] + 1e-12


class TestCompositing:
    def test_weights_form_convex_combination(self):
        rng = np.random.default_rng(0)
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1), sigma0=0.0)
        f.sigma[:] = rng.normal(0, 3, f.sigma.shape)
        o = np.array([[-0.5, 0.4, 0.6], [-0.5, 0.7, 0.2], [2.0, 0.5, 0.5]])
        d = np.array([[1.0, 0, 0], [1.0, 0.05, -0.02], [-1.0, 0, 0]])
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        _, ctx = render_rays(f, ColorNet.create(0), o, d, (1, 1, 1))
        for r in range(3):
            n = ctx.count[r]
            w = ctx.strans[r, :n] * ctx.salpha[r, :n]
            assert abs(w.sum() + ctx.t_end[r] - 1.0) < 1e-6
            assert np.all((w >= 0) & (w <= 1))

    def test_transmittance_monotone(self):
        rng = np.random.default_rng(1)
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1), sigma0=0.0)
        f.sigma[:] = rng.normal(0, 2, f.sigma.shape)
        o = np.array([[-0.5, 0.5, 0.5]])
        d = np.array([[1.0, 0, 0]])
        _, ctx = render_rays(f, ColorNet.create(0), o, d, (1, 1, 1))
        n = ctx.count[0]
        tr = ctx.strans[0, :n]
        assert np.all(np.diff(tr) <= 1e-15)


class TestRenderImage:
    def test_empty_scene_is_background(self):
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1))
        cam = Camera.look_at((2.5, 0.5, 0.5), (0.5, 0.5, 0.5), 24, 24, 40)
        img = render_image(f, ColorNet.create(0), cam, (1.0, 0.5, 0.25))
        assert np.allclose(img, np.array([1.0, 0.5, 0.25]))

    def test_sphere_silhouette_radius(self):
        # opaque sphere: silhouette disk radius from the pinhole model
        f = VoxelField.empty(32, (0, 0, 0), (1, 1, 1))
        center = np.array([0.5, 0.5, 0.5])
        r = 0.2
        nodes = np.indices(f.sigma.shape).reshape(3, -1).T / 32.0
        inside = np.linalg.norm(nodes - center, axis=1) <= r
        f.sigma[inside.reshape(f.sigma.shape)] = 30.0
        dist = 2.5
        cam = Camera.look_at(center + np.array([dist, 0, 0]), center, 96, 96, 40)
        img, tend = render_image(f, white_net(), cam, (0, 0, 0), with_aux=True)
        mask = tend < 0.99
        area = mask.sum()
        rad_pix = np.sqrt(area / np.pi)
        expect = cam.fx * r / dist
        assert abs(rad_pix - expect) < 1.0

    def test_silhouette_shift_matches_projection(self):
        f = VoxelField.empty(32, (0, 0, 0), (1, 1, 1))
        nodes = np.indices(f.sigma.shape).reshape(3, -1).T / 32.0
        center = np.array([0.5, 0.5, 0.5])
        inside = np.linalg.norm(nodes - center, axis=1) <= 0.15
        f.sigma[inside.reshape(f.sigma.shape)] = 30.0
        dist = 2.5
        cam = Camera.look_at(center + np.array([dist, 0.0, 0.0]), center, 96, 96, 40)

        def centroid(field):
            _, tend = render_image(field, white_net(), cam, (0, 0, 0), with_aux=True)
            m = tend < 0.99
            rows, cols = np.nonzero(m)
            return np.array([rows.mean(), cols.mean()])

        c0 = centroid(f)
        shift = 1.0 / 32.0  # one voxel along -y (image columns)
        f2 = VoxelField(sigma=np.roll(f.sigma, -1, axis=1), feat=f.feat.copy(), lo=f.lo, hi=f.hi)
        c1 = centroid(f2)
        moved = c1 - c0
        expect_cols = cam.fx * shift / dist
        assert abs(abs(moved[1]) - expect_cols) < 0.5
        assert abs(moved[0]) < 0.5


class TestRenderLoss:
    def test_identical_images_zero(self):
        img = np.random.default_rng(2).random((6, 6, 3))
        assert render_loss([img], [img.copy()]) == 0.0

    def test_uniform_half_difference(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.5)
        assert render_loss([a], [b]) == pytest.approx(0.75)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
        assert render_loss([a], [b]) == pytest.approx(render_loss([b], [a]))

    def test_mean_over_frames(self):
        a = np.zeros((2, 2, 3))
        b = np.full((2, 2, 3), 0.5)
        assert render_loss([a, a], [b, a]) == pytest.approx(0.375)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            render_loss([np.zeros((2, 2, 3))], [np.zeros((3, 2, 3))])

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a, b = rng.random((3, 3, 3)), rng.random((3, 3, 3))
            assert render_loss([a], [b]) >= 0.0


class TestSurfaceRegularizer:
    def test_single_particle_value(self):
        # clamp(0.5) = 0.1; 0.1 * (0.1/2)^2 = 2.5e-4
        assert surface_regularizer(np.array([0.5]), 0.1) == pytest.approx(2.5e-4)

    def test_lower_clamp(self):
        assert surface_regularizer(np.array([1e-5]), 0.1) == pytest.approx(1e-4 * 2.5e-3)

    def test_linear_in_particle_count(self):
        one = surface_regularizer(np.array([0.03]), 0.2)
        many = surface_regularizer(np.full(17, 0.03), 0.2)
        assert many == pytest.approx(17 * one)


class TestRenderBackward:
    def test_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1), sigma0=0.0)
        f.sigma[:] = rng.normal(0, 1, f.sigma.shape)
        f.feat[:] = rng.normal(0, 0.5, f.feat.shape)
        net = ColorNet.create(1)
        o = np.tile(np.array([[-0.5, 0.45, 0.55]]), (4, 1))
        d = rng.normal(size=(4, 3))
        d[:, 0] += 2.0
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        target = rng.random((4, 3))

        def loss(field):
            cols, ctx = render_rays(field, net, o, d, (1, 1, 1))
            return float(((cols - target) ** 2).sum()), ctx, cols

        L0, ctx, cols = loss(f)
        sb, fb, ng = render_rays_backward(f, net, ctx, 2 * (cols - target))
        h = 1e-6
        for grad, arr in ((sb, f.sigma), (fb, f.feat), (ng["w1"], net.w1), (ng["b2"], net.b2)):
            idx = np.unravel_index(np.argmax(np.abs(grad)), grad.shape)
            arr[idx] += h
            lp, _, _ = loss(f)
            arr[idx] -= 2 * h
            lm, _, _ = loss(f)
            arr[idx] += h
            fd = (lp - lm) / (2 * h)
            assert abs(grad[idx] - fd) / max(abs(fd), 1e-12) < 1e-4

    def test_out_of_frustum_parameters_have_zero_gradient(self):
        f = VoxelField.empty(8, (0, 0, 0), (1, 1, 1), sigma0=0.0)
        net = ColorNet.create(0)
        o = np.array([[-0.5, 0.5, 0.5]])
        d = np.array([[1.0, 0.0, 0.0]])  # travels along the box mid-plane
        cols, ctx = render_rays(f, net, o, d, (1, 1, 1))
        sb, fb, _ = render_rays_backward(f, net, ctx, np.ones((1, 3)))
        # nodes far from the ray line carry exactly zero adjoint
        assert np.all(sb[:, 0, 0] == 0.0)
        assert np.all(fb[:, -1, -1, :] == 0.0)
        assert np.any(sb != 0.0)


class TestCameraRays:
    def test_directions_unit_and_through_center(self):
        cam = Camera.look_at((2.0, 0.5, 0.5), (0.5, 0.5, 0.5), 33, 33, 45)
        o, d = cam.rays()
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
        center_pix = (33 // 2) * 33 + 33 // 2
        fwd = np.array([0.5, 0.5, 0.5]) - np.array([2.0, 0.5, 0.5])
        fwd /= np.linalg.norm(fwd)
        assert np.allclose(d[center_pix], fwd, atol=0.05)

    def test_invalid_rotation_rejected(self):
        with pytest.raises(InvalidInputError):
            Camera(fx=10, fy=10, cx=8, cy=8, width=16, height=16,
                   rot=np.eye(3) * 2.0, pos=np.zeros(3))

    def test_ray_validation(self):
        with pytest.raises(InvalidInputError):
            Ray(np.zeros(3), np.array([1.0, 0, 0]), s_near=2.0, s_far=1.0)
