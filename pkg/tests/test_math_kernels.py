import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacsim.errors import BoundsError, DegenerateDeformationError, InvalidInputError
from pacsim.math_kernels import Svd3, hencky_strain, svd3, trilinear_stencil


class TestSvd3:
    def test_identity(self):
        r = svd3(np.eye(3))
        assert np.allclose(r.u, np.eye(3))
        assert np.allclose(r.s, 1.0)
        assert np.allclose(r.v, np.eye(3))

    def test_diagonal_descending(self):
        r = svd3(np.diag([2.0, 1.0, 0.5]))
        assert np.allclose(r.s, [2.0, 1.0, 0.5])
        assert np.allclose(r.u, np.eye(3))
        assert np.allclose(r.v, np.eye(3))

    def test_reconstruction_1000_random(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            m = rng.uniform(-1.0, 1.0, (3, 3))
            r = svd3(m)
            worst = max(worst, np.linalg.norm(r.reconstruct() - m) / np.linalg.norm(m))
        assert worst < 1e-9

    def test_orthogonality(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            r = svd3(rng.normal(size=(3, 3)))
            assert np.linalg.norm(r.u.T @ r.u - np.eye(3)) < 1e-10
            assert np.linalg.norm(r.v.T @ r.v - np.eye(3)) < 1e-10

    def test_rotation_only_sign_convention(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            m = rng.normal(size=(3, 3))
            r = svd3(m)
            assert np.linalg.det(r.u) == pytest.approx(1.0, abs=1e-9)
            assert np.linalg.det(r.v) == pytest.approx(1.0, abs=1e-9)
            if np.linalg.det(m) < 0:
                assert r.s[2] <= 0
            else:
                assert r.s[2] >= 0
            assert r.s[0] >= r.s[1] >= r.s[2]

    def test_repeated_singular_values(self):
        r = svd3(2.0 * np.eye(3))
        assert np.allclose(r.s, 2.0)
        assert np.allclose(r.reconstruct(), 2.0 * np.eye(3))

    def test_deterministic(self):
        m = np.arange(9.0).reshape(3, 3) / 7.0 + np.eye(3)
        a, b = svd3(m), svd3(m)
        assert np.array_equal(a.u, b.u)
        assert np.array_equal(a.s, b.s)
        assert np.array_equal(a.v, b.v)

    def test_nonfinite_rejected(self):
        m = np.eye(3)
        m[1, 2] = np.nan
        with pytest.raises(InvalidInputError):
            svd3(m)


class TestHencky:
    def test_identity_strain(self):
        assert np.allclose(hencky_strain(svd3(np.eye(3))), 0.0)

    def test_exact_logs(self):
        e = np.e
        r = svd3(np.diag([e, 1.0, 1.0 / e]))
        assert np.allclose(hencky_strain(r), [1.0, 0.0, -1.0], atol=1e-12)

    def test_trace(self):
        r = svd3(np.diag([2.0, 2.0, 2.0]))
        eps = hencky_strain(r)
        assert eps.sum() == pytest.approx(3.0 * np.log(2.0), abs=1e-12)

    def test_log_exp_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            s = np.sort(np.exp(rng.uniform(-1, 1, 3)))[::-1]
            eps = hencky_strain(Svd3(np.eye(3), s, np.eye(3)))
            assert np.allclose(np.exp(eps), s, atol=1e-12)

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateDeformationError):
            hencky_strain(Svd3(np.eye(3), np.array([1.0, 1.0, 0.0]), np.eye(3)))


DIMS = (17, 17, 17)
DX = 1.0 / 16.0
ORIGIN = np.zeros(3)


class TestTrilinearStencil:
    def test_at_node_single_weight(self):
        st = trilinear_stencil(np.array([4 * DX, 5 * DX, 6 * DX]), DX, ORIGIN, DIMS)
        assert st.weights.max() == pytest.approx(1.0, abs=1e-15)
        assert st.weights.sum() == pytest.approx(1.0, abs=1e-15)

    def test_cell_center_eighth_weights(self):
        st = trilinear_stencil(np.array([4.5 * DX, 5.5 * DX, 6.5 * DX]), DX, ORIGIN, DIMS)
        assert np.allclose(st.weights, 0.125, atol=1e-13)

    def test_linear_reproduction(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=3)
        b = rng.normal()
        nodes = np.indices(DIMS).reshape(3, -1).T * DX + ORIGIN
        vals = (nodes @ a + b).reshape(DIMS)
        for _ in range(100):
            x = rng.uniform(DX, 1.0 - DX, 3)
            st = trilinear_stencil(x, DX, ORIGIN, DIMS)
            interp = sum(
                w * vals[tuple(idx)] for w, idx in zip(st.weights, st.indices)
            )
            assert interp == pytest.approx(x @ a + b, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0701, 0.93), st.floats(0.0701, 0.93), st.floats(0.0701, 0.93))
    def test_partition_of_unity_property(self, x, y, z):
        stn = trilinear_stencil(np.array([x, y, z]), DX, ORIGIN, DIMS)
        assert abs(stn.weights.sum() - 1.0) < 1e-12
        assert np.all(stn.weights >= 0.0)
        assert np.all(stn.indices >= 0) and np.all(stn.indices < 17)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(BoundsError):
            trilinear_stencil(np.array([0.01, 0.5, 0.5]), DX, ORIGIN, DIMS)
        with pytest.raises(BoundsError):
            trilinear_stencil(np.array([0.5, 0.5, 0.999]), DX, ORIGIN, DIMS)
