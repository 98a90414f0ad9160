import numpy as np
import pytest

from pacsim.errors import IncompressibleLimitError, InvalidInputError, InvertedElementError
from pacsim.materials import (
    Elastic,
    LamePair,
    NewtonianFluid,
    NonNewtonianFluid,
    Plasticine,
    Sand,
    drucker_prager_alpha,
    kirchhoff_neo_hookean,
    kirchhoff_newtonian,
    kirchhoff_stress,
    kirchhoff_stvk,
    lame_from_young_poisson,
    return_map,
    return_map_drucker_prager,
    return_map_viscoplastic,
    return_map_von_mises,
)
from pacsim.math_kernels import svd3


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_F(rng, spread=0.4):
    f = np.eye(3) + spread * rng.normal(size=(3, 3))
    if np.linalg.det(f) <= 0.05:
        return random_F(rng, spread * 0.7)
    return f


def dev_hencky_norm(F):
    s = svd3(F).s
    eps = np.log(s)
    dev = eps - eps.mean()
    return np.linalg.norm(dev)


class TestLame:
    def test_reference_values(self):
        lame = lame_from_young_poisson(1e5, 0.3)
        assert lame.mu_lame == pytest.approx(1e5 / 2.6, rel=1e-12)  # 3.84615e4
        assert lame.lambda_lame == pytest.approx(0.3e5 / (1.3 * 0.4), rel=1e-12)  # 5.76923e4

    def test_zero_poisson(self):
        lame = lame_from_young_poisson(1.0, 0.0)
        assert lame.mu_lame == pytest.approx(0.5)
        assert lame.lambda_lame == pytest.approx(0.0)

    def test_playdoh_scale(self):
        lame = lame_from_young_poisson(2e6, 0.3)
        assert lame.mu_lame == pytest.approx(7.6923e5, rel=1e-4)

    def test_incompressible_limit(self):
        with pytest.raises(IncompressibleLimitError):
            lame_from_young_poisson(1e5, 0.5)

    def test_invalid_modulus(self):
        with pytest.raises(InvalidInputError):
            lame_from_young_poisson(-1.0, 0.3)


class TestNeoHookean:
    def test_rest_state(self):
        tau = kirchhoff_neo_hookean(np.eye(3), LamePair(1e4, 2e4))
        assert np.allclose(tau, 0.0, atol=1e-12)

    def test_uniform_expansion_value(self):
        tau = kirchhoff_neo_hookean(1.1 * np.eye(3), LamePair(1.0, 1.0))
        expect = 1.21 + 3.0 * np.log(1.1) - 1.0
        assert np.allclose(np.diag(tau), expect, atol=1e-12)
        assert expect == pytest.approx(0.4959305, abs=1e-6)

    def test_symmetry_over_random_F(self):
        rng = np.random.default_rng(0)
        lame = LamePair(2.0, 3.0)
        for _ in range(1000):
            tau = kirchhoff_neo_hookean(random_F(rng), lame)
            assert np.allclose(tau, tau.T, atol=1e-10 * max(1.0, np.abs(tau).max()))

    def test_inverted_rejected(self):
        with pytest.raises(InvertedElementError):
            kirchhoff_neo_hookean(np.diag([1.0, 1.0, -1.0]), LamePair(1.0, 1.0))


class TestNewtonian:
    def test_rest_fluid(self):
        tau = kirchhoff_newtonian(1.0, np.zeros((3, 3)), 1.0, 1e5)
        assert np.allclose(tau, 0.0)

    def test_rigid_rotation_no_viscous_stress(self):
        w = np.array([[0.0, -1.0, 0.5], [1.0, 0.0, -2.0], [-0.5, 2.0, 0.0]])
        tau = kirchhoff_newtonian(1.0, w, 3.0, 1e5)
        assert np.allclose(tau, 0.0, atol=1e-12)

    def test_compression_pressure_value(self):
        tau = kirchhoff_newtonian(0.9, np.zeros((3, 3)), 0.0, 1e5)
        expect = 1e5 * (0.9 - 0.9**-6)
        assert np.allclose(np.diag(tau), expect)
        assert expect == pytest.approx(-9.8168e4, rel=1e-4)

    def test_inverted_rejected(self):
        with pytest.raises(InvertedElementError):
            kirchhoff_newtonian(-0.1, np.zeros((3, 3)), 1.0, 1e5)


class TestStvk:
    def test_rest_state(self):
        assert np.allclose(kirchhoff_stvk(np.eye(3), LamePair(5.0, 7.0)), 0.0)

    def test_principal_stretch_value(self):
        tau = kirchhoff_stvk(np.diag([np.e, 1.0, 1.0]), LamePair(1.0, 0.0))
        assert np.allclose(tau, np.diag([2.0, 0.0, 0.0]), atol=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(1)
        lame = LamePair(2.0, 1.0)
        for _ in range(100):
            F = random_F(rng)
            R = random_rotation(rng)
            t1 = kirchhoff_stvk(R @ F, lame)
            t2 = R @ kirchhoff_stvk(F, lame) @ R.T
            assert np.allclose(t1, t2, atol=1e-8)


class TestVonMises:
    def test_elastic_branch_bit_identical(self):
        F = np.eye(3) + 0.001 * np.arange(9).reshape(3, 3)
        out = return_map_von_mises(F, 1e4, 1e9)
        assert out is F or np.array_equal(out, F)

    def test_huge_yield_stress_unchanged(self):
        F = np.diag([np.e**2, 1.0, np.e**-2])
        assert np.array_equal(return_map_von_mises(F, 1.0, 1e12), F)

    def test_projection_lands_on_yield_surface(self):
        rng = np.random.default_rng(2)
        mu, tau_y = 3.0, 0.4
        triggered = 0
        for _ in range(1000):
            F = random_F(rng)
            before = dev_hencky_norm(F)
            if before <= tau_y / (2 * mu):
                continue
            triggered += 1
            Z = return_map_von_mises(F, mu, tau_y)
            assert dev_hencky_norm(Z) == pytest.approx(tau_y / (2 * mu), abs=1e-8)
        assert triggered > 500

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            F = random_F(rng)
            z1 = return_map_von_mises(F, 2.0, 0.5)
            z2 = return_map_von_mises(z1, 2.0, 0.5)
            assert np.linalg.norm(z2 - z1) < 1e-10

    def test_volume_preserved_by_projection(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            F = random_F(rng)
            Z = return_map_von_mises(F, 2.0, 0.1)
            assert np.linalg.det(Z) == pytest.approx(np.linalg.det(F), rel=1e-9)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            F = random_F(rng)
            R = random_rotation(rng)
            z1 = return_map_von_mises(R @ F, 2.0, 0.3)
            z2 = R @ return_map_von_mises(F, 2.0, 0.3)
            assert np.allclose(z1, z2, atol=1e-8)


class TestViscoplastic:
    def test_elastic_branch(self):
        F = np.eye(3) + 0.001 * np.eye(3)
        assert np.array_equal(return_map_viscoplastic(F, 1e4, 1e9, 5.0, 1e-3), F)

    def test_zero_viscosity_matches_von_mises(self):
        rng = np.random.default_rng(6)
        mu, tau_y = 3.0, 0.3
        for _ in range(200):
            F = random_F(rng)
            a = return_map_viscoplastic(F, mu, tau_y, 0.0, 1e-3)
            b = return_map_von_mises(F, mu, tau_y)
            assert np.allclose(a, b, atol=1e-8)

    def test_infinite_viscosity_freezes_flow(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            F = random_F(rng)
            a = return_map_viscoplastic(F, 3.0, 0.1, 1e18, 1e-3)
            assert np.allclose(a, F, atol=1e-8)

    def test_invalid_dt(self):
        with pytest.raises(InvalidInputError):
            return_map_viscoplastic(np.eye(3), 1.0, 1.0, 1.0, 0.0)


class TestDruckerPrager:
    def test_expansion_releases_all_strain(self):
        Z = return_map_drucker_prager(1.2 * np.eye(3), LamePair(1.0, 1.0), 30.0)
        assert np.allclose(Z, np.eye(3), atol=1e-12)

    def test_alpha_value(self):
        assert drucker_prager_alpha(40.0) == pytest.approx(0.44530, abs=1e-4)

    def test_compression_inside_cone_unchanged(self):
        F = 0.995 * np.eye(3)  # tiny isotropic compression: no deviatoric part
        assert np.array_equal(return_map_drucker_prager(F, LamePair(2.0, 1.0), 40.0), F)

    def test_projected_state_satisfies_criterion(self):
        rng = np.random.default_rng(8)
        lame = LamePair(2.0, 1.0)
        alpha = drucker_prager_alpha(35.0)
        for _ in range(300):
            F = random_F(rng)
            Z = return_map_drucker_prager(F, lame, 35.0)
            eps = np.log(svd3(Z).s)
            tr = eps.sum()
            assert tr <= 1e-12
            dev = np.linalg.norm(eps - eps.mean())
            dgamma = dev + alpha * (3 * lame.lambda_lame + 2 * lame.mu_lame) * tr / (
                2 * lame.mu_lame
            )
            assert dgamma <= 1e-8

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        lame = LamePair(2.0, 1.0)
        for _ in range(200):
            F = random_F(rng)
            z1 = return_map_drucker_prager(F, lame, 35.0)
            z2 = return_map_drucker_prager(z1, lame, 35.0)
            assert np.linalg.norm(z2 - z1) < 1e-10

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(10)
        lame = LamePair(2.0, 1.0)
        for _ in range(100):
            F = random_F(rng)
            R = random_rotation(rng)
            z1 = return_map_drucker_prager(R @ F, lame, 35.0)
            z2 = R @ return_map_drucker_prager(F, lame, 35.0)
            assert np.allclose(z1, z2, atol=1e-8)


class TestFamilyDispatch:
    @pytest.mark.parametrize(
        "params",
        [
            Elastic(1e5, 0.3),
            Plasticine(1e5, 0.3, 1e3),
            NewtonianFluid(5.0, 1e4),
            NonNewtonianFluid(5e3, 1e5, 200.0, 10.0),
            Sand(35.0),
        ],
        ids=lambda p: p.family,
    )
    def test_zero_stress_at_rest(self, params):
        tau = kirchhoff_stress(params, np.eye(3), grad_v=np.zeros((3, 3)))
        assert np.allclose(tau, 0.0, atol=1e-9)

    @pytest.mark.parametrize(
        "params",
        [
            Elastic(1e5, 0.3),
            Plasticine(1e5, 0.3, 50.0),
            NewtonianFluid(5.0, 1e4),
            # viscous resistance makes the projection a per-step relaxation,
            # idempotent only in the eta -> 0 limit
            NonNewtonianFluid(5e3, 1e5, 20.0, 0.0),
            Sand(35.0),
        ],
        ids=lambda p: p.family,
    )
    def test_return_map_idempotent(self, params):
        rng = np.random.default_rng(11)
        for _ in range(100):
            F = random_F(rng)
            z1 = return_map(params, F, dt=1e-3)
            z2 = return_map(params, z1, dt=1e-3)
            assert np.linalg.norm(z2 - z1) < 1e-10

    def test_viscoplastic_relaxes_monotonically(self):
        # with eta > 0 repeated applications shrink the deviatoric strain
        # toward the yield surface without overshooting it
        rng = np.random.default_rng(12)
        params = NonNewtonianFluid(5e3, 1e5, 20.0, 10.0)
        target = 20.0 / (2 * 5e3)
        for _ in range(50):
            F = random_F(rng)
            prev = dev_hencky_norm(F)
            if prev <= target:
                continue
            for _ in range(5):
                F = return_map(params, F, dt=1e-3)
                cur = dev_hencky_norm(F)
                assert cur <= prev + 1e-12
                assert cur >= target - 1e-9
                prev = cur

    def test_parameter_validation(self):
        with pytest.raises(InvalidInputError):
            Sand(120.0)
        with pytest.raises(InvalidInputError):
            NewtonianFluid(-1.0, 1e4)
        with pytest.raises(IncompressibleLimitError):
            Elastic(1e5, 0.6)
