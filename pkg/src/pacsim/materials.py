"""Constitutive models and plastic return mappings for five material families.

All stress routines return Kirchhoff stress (J times Cauchy stress), which is
what the momentum update consumes directly. Return mappings project a trial
deformation gradient back into the material's elastic region and are applied
after every deformation-gradient update.

The numba cores operate on a packed parameter vector so the simulation
kernels can stay monomorphic:

    k[0] mu_lame      shear modulus (Pa)
    k[1] lambda_lame  Lame lambda (Pa)
    k[2] tau_y        yield stress (Pa)
    k[3] eta          plastic viscosity (Pa s)
    k[4] kappa        fluid bulk modulus (Pa)
    k[5] mu_visc      dynamic viscosity (Pa s)
    k[6] alpha_dp     Drucker-Prager cone coefficient (dimensionless)

Gradient accumulators emitted by the adjoint kernels use the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import (
    DegenerateDeformationError,
    IncompressibleLimitError,
    InvalidInputError,
    InvertedElementError,
)
from .math_kernels import det3, svd3, svd3_core

# Material family codes used by the kernels.
ELASTIC = 0
PLASTICINE = 1
NEWTONIAN = 2
NON_NEWTONIAN = 3
SAND = 4

FAMILY_NAMES = {
    ELASTIC: "elastic",
    PLASTICINE: "plasticine",
    NEWTONIAN: "newtonian",
    NON_NEWTONIAN: "non_newtonian",
    SAND: "sand",
}
FAMILY_CODES = {v: k for k, v in FAMILY_NAMES.items()}

NK = 8  # packed kernel parameter vector length

# Sand needs elastic moduli for its StVK base response; these are not
# identified, only the friction angle is.
SAND_DEFAULT_E = 3.537e5
SAND_DEFAULT_NU = 0.3


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class LamePair:
    mu_lame: float
    lambda_lame: float


def lame_from_young_poisson(E: float, nu: float) -> LamePair:
    """Lame parameters from Young's modulus and Poisson's ratio."""
    if not (np.isfinite(E) and np.isfinite(nu)) or E <= 0.0:
        raise InvalidInputError(f"invalid elastic constants E={E}, nu={nu}")
    if nu >= 0.5:
        raise IncompressibleLimitError(f"nu={nu} is at/beyond the incompressible limit")
    if nu < 0.0:
        raise InvalidInputError(f"negative Poisson ratio nu={nu} unsupported")
    mu = E / (2.0 * (1.0 + nu))
    lam = nu * E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return LamePair(mu, lam)


@dataclass
class Elastic:
    """Neo-Hookean elastic solid."""

    E: float
    nu: float

    family = "elastic"

    def __post_init__(self):
        lame_from_young_poisson(self.E, self.nu)

    def identified(self):
        return ("E", "nu")


@dataclass
class Plasticine:
    """StVK elasticity with a von Mises plastic return mapping."""

    E: float
    nu: float
    tau_y: float

    family = "plasticine"

    def __post_init__(self):
        lame_from_young_poisson(self.E, self.nu)
        if self.tau_y < 0.0:
            raise InvalidInputError(f"tau_y={self.tau_y} must be nonnegative")

    def identified(self):
        return ("E", "nu", "tau_y")


@dataclass
class NewtonianFluid:
    """Volume-tracking fluid with an explicit viscosity term."""

    mu: float  # dynamic viscosity, Pa s
    kappa: float  # bulk modulus, Pa

    family = "newtonian"

    def __post_init__(self):
        if self.mu < 0.0 or self.kappa <= 0.0:
            raise InvalidInputError(f"invalid fluid params mu={self.mu}, kappa={self.kappa}")

    def identified(self):
        return ("mu", "kappa")


@dataclass
class NonNewtonianFluid:
    """Viscoplastic (Herschel-Bulkley-like) fluid with a yield stress."""

    mu: float  # shear modulus, Pa
    kappa: float  # bulk modulus, Pa
    tau_y: float
    eta: float

    family = "non_newtonian"

    def __post_init__(self):
        if self.mu <= 0.0 or self.kappa <= 0.0 or self.tau_y < 0.0 or self.eta < 0.0:
            raise InvalidInputError("invalid non-Newtonian parameters")

    def identified(self):
        return ("mu", "kappa", "tau_y", "eta")


@dataclass
class Sand:
    """Granular material: StVK base with a Drucker-Prager return mapping."""

    theta_fric: float  # friction angle, degrees
    E: float = SAND_DEFAULT_E
    nu: float = SAND_DEFAULT_NU

    family = "sand"

    def __post_init__(self):
        if not (0.0 < self.theta_fric < 90.0):
            raise InvalidInputError(f"theta_fric={self.theta_fric} outside (0, 90) degrees")
        lame_from_young_poisson(self.E, self.nu)

    def identified(self):
        return ("theta_fric",)


MaterialParams = Elastic | Plasticine | NewtonianFluid | NonNewtonianFluid | Sand


def drucker_prager_alpha(theta_fric_deg: float) -> float:
    """Cone coefficient of the Drucker-Prager yield surface."""
    th = np.deg2rad(theta_fric_deg)
    return np.sqrt(2.0 / 3.0) * 2.0 * np.sin(th) / (3.0 - np.sin(th))


def pack_kernel_params(params: MaterialParams) -> tuple[int, np.ndarray]:
    """Packed (family_code, parameter-vector) consumed by the sim kernels."""
    k = np.zeros(NK)
    if isinstance(params, Elastic):
        lame = lame_from_young_poisson(params.E, params.nu)
        k[0], k[1] = lame.mu_lame, lame.lambda_lame
        return ELASTIC, k
    if isinstance(params, Plasticine):
        lame = lame_from_young_poisson(params.E, params.nu)
        k[0], k[1], k[2] = lame.mu_lame, lame.lambda_lame, params.tau_y
        return PLASTICINE, k
    if isinstance(params, NewtonianFluid):
        k[4], k[5] = params.kappa, params.mu
        return NEWTONIAN, k
    if isinstance(params, NonNewtonianFluid):
        # StVK base with lambda chosen so kappa is the bulk modulus.
        k[0] = params.mu
        k[1] = params.kappa - 2.0 * params.mu / 3.0
        k[2], k[3] = params.tau_y, params.eta
        return NON_NEWTONIAN, k
    if isinstance(params, Sand):
        lame = lame_from_young_poisson(params.E, params.nu)
        k[0], k[1] = lame.mu_lame, lame.lambda_lame
        k[6] = drucker_prager_alpha(params.theta_fric)
        return SAND, k
    raise InvalidInputError(f"unknown material params {params!r}")


def needs_svd(family: int) -> bool:
    return family in (PLASTICINE, NON_NEWTONIAN, SAND)


# ---------------------------------------------------------------------------
# numba stress cores
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=False)
def tau_neo_hookean(F, mu, lam, tau):
    """tau = mu F F^T + (lam log J - mu) I."""
    J = det3(F)
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += F[i, k] * F[j, k]
            tau[i, j] = mu * acc
    d = lam * np.log(J) - mu
    tau[0, 0] += d
    tau[1, 1] += d
    tau[2, 2] += d
    return J


@njit(cache=True, fastmath=False)
def tau_newtonian(J, C, mu_visc, kappa, tau):
    """tau = mu/2 (grad v + grad v^T) + kappa (J - J^-6) I."""
    for i in range(3):
        for j in range(3):
            tau[i, j] = 0.5 * mu_visc * (C[i, j] + C[j, i])
    p = kappa * (J - 1.0 / J**6)
    tau[0, 0] += p
    tau[1, 1] += p
    tau[2, 2] += p


@njit(cache=True, fastmath=False)
def tau_stvk_from_svd(U, S, mu, lam, tau):
    """tau = U (2 mu eps + lam tr(eps) I) U^T with eps = log(S)."""
    e0 = np.log(S[0])
    e1 = np.log(S[1])
    e2 = np.log(S[2])
    tr = e0 + e1 + e2
    g0 = 2.0 * mu * e0 + lam * tr
    g1 = 2.0 * mu * e1 + lam * tr
    g2 = 2.0 * mu * e2 + lam * tr
    for i in range(3):
        for j in range(3):
            tau[i, j] = (
                g0 * U[i, 0] * U[j, 0] + g1 * U[i, 1] * U[j, 1] + g2 * U[i, 2] * U[j, 2]
            )


# ---------------------------------------------------------------------------
# numba return-mapping cores
#
# Each takes the SVD (U, S, V) of the trial deformation gradient and writes
# the projected F and its singular values; U and V are unchanged by all
# projections. Returns a branch code: 0 = elastic (unchanged), 1 = projected,
# 2 = expansion branch (Drucker-Prager only).
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=False)
def _compose_usv(U, z0, z1, z2, V, F_out):
    for i in range(3):
        for j in range(3):
            F_out[i, j] = (
                z0 * U[i, 0] * V[j, 0] + z1 * U[i, 1] * V[j, 1] + z2 * U[i, 2] * V[j, 2]
            )


@njit(cache=True, fastmath=False)
def z_von_mises(U, S, V, mu, tau_y, F_out, S_out):
    e0 = np.log(S[0])
    e1 = np.log(S[1])
    e2 = np.log(S[2])
    em = (e0 + e1 + e2) / 3.0
    d0 = e0 - em
    d1 = e1 - em
    d2 = e2 - em
    n = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    dgamma = n - tau_y / (2.0 * mu)
    if dgamma <= 0.0:
        S_out[0] = S[0]
        S_out[1] = S[1]
        S_out[2] = S[2]
        _compose_usv(U, S[0], S[1], S[2], V, F_out)
        return 0
    c = dgamma / n
    z0 = np.exp(e0 - c * d0)
    z1 = np.exp(e1 - c * d1)
    z2 = np.exp(e2 - c * d2)
    S_out[0] = z0
    S_out[1] = z1
    S_out[2] = z2
    _compose_usv(U, z0, z1, z2, V, F_out)
    return 1


@njit(cache=True, fastmath=False)
def z_viscoplastic(U, S, V, mu, tau_y, eta, dt, F_out, S_out):
    e0 = np.log(S[0])
    e1 = np.log(S[1])
    e2 = np.log(S[2])
    em = (e0 + e1 + e2) / 3.0
    d0 = e0 - em
    d1 = e1 - em
    d2 = e2 - em
    n = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    dgamma = n - tau_y / (2.0 * mu)
    if dgamma <= 0.0:
        S_out[0] = S[0]
        S_out[1] = S[1]
        S_out[2] = S[2]
        _compose_usv(U, S[0], S[1], S[2], V, F_out)
        return 0
    # Plastic flow is resisted by viscosity: the deviatoric stress relaxes
    # toward the yield surface at a rate set by eta. Stress units throughout,
    # then back to strain via 2 mu.
    mu_hat = (mu / 3.0) * (S[0] * S[0] + S[1] * S[1] + S[2] * S[2])
    s_norm = 2.0 * mu * n
    s_hat = s_norm - (2.0 * mu * dgamma) / (1.0 + eta / (2.0 * mu_hat * dt))
    mstar = s_hat / (2.0 * mu)
    c = mstar / n
    z0 = np.exp(em + c * d0)
    z1 = np.exp(em + c * d1)
    z2 = np.exp(em + c * d2)
    S_out[0] = z0
    S_out[1] = z1
    S_out[2] = z2
    _compose_usv(U, z0, z1, z2, V, F_out)
    return 1


@njit(cache=True, fastmath=False)
def z_drucker_prager(U, S, V, mu, lam, alpha_dp, F_out, S_out):
    e0 = np.log(S[0])
    e1 = np.log(S[1])
    e2 = np.log(S[2])
    tr = e0 + e1 + e2
    if tr > 0.0:
        # Expansion: all strain released.
        S_out[0] = 1.0
        S_out[1] = 1.0
        S_out[2] = 1.0
        _compose_usv(U, 1.0, 1.0, 1.0, V, F_out)
        return 2
    em = tr / 3.0
    d0 = e0 - em
    d1 = e1 - em
    d2 = e2 - em
    n = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    dgamma = n + alpha_dp * (3.0 * lam + 2.0 * mu) * tr / (2.0 * mu)
    if dgamma <= 0.0:
        S_out[0] = S[0]
        S_out[1] = S[1]
        S_out[2] = S[2]
        _compose_usv(U, S[0], S[1], S[2], V, F_out)
        return 0
    c = dgamma / n
    z0 = np.exp(e0 - c * d0)
    z1 = np.exp(e1 - c * d1)
    z2 = np.exp(e2 - c * d2)
    S_out[0] = z0
    S_out[1] = z1
    S_out[2] = z2
    _compose_usv(U, z0, z1, z2, V, F_out)
    return 1


# ---------------------------------------------------------------------------
# Public wrappers
# ---------------------------------------------------------------------------


def _checked_svd(F: np.ndarray):
    F = np.asarray(F, dtype=np.float64)
    if not np.all(np.isfinite(F)):
        raise InvalidInputError("non-finite deformation gradient")
    r = svd3(F)
    if np.any(r.s <= 0.0):
        raise DegenerateDeformationError(f"singular values {r.s} not all positive")
    return F, r


def kirchhoff_neo_hookean(F: np.ndarray, lame: LamePair) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    J = float(np.linalg.det(F))
    if J <= 0.0:
        raise InvertedElementError(f"det(F)={J} <= 0")
    tau = np.empty((3, 3))
    tau_neo_hookean(F, lame.mu_lame, lame.lambda_lame, tau)
    return tau


def kirchhoff_newtonian(J: float, grad_v: np.ndarray, mu: float, kappa: float) -> np.ndarray:
    if J <= 0.0:
        raise InvertedElementError(f"J={J} <= 0")
    grad_v = np.asarray(grad_v, dtype=np.float64)
    tau = np.empty((3, 3))
    tau_newtonian(J, grad_v, mu, kappa, tau)
    return tau


def kirchhoff_stvk(F: np.ndarray, lame: LamePair) -> np.ndarray:
    F, r = _checked_svd(F)
    if det3(F) <= 0.0:
        raise InvertedElementError("det(F) <= 0")
    tau = np.empty((3, 3))
    tau_stvk_from_svd(r.u, r.s, lame.mu_lame, lame.lambda_lame, tau)
    return tau


def return_map_von_mises(F: np.ndarray, mu: float, tau_y: float) -> np.ndarray:
    F, r = _checked_svd(F)
    F_out = np.empty((3, 3))
    s_out = np.empty(3)
    changed = z_von_mises(r.u, r.s, r.v, mu, tau_y, F_out, s_out)
    return F if changed == 0 else F_out


def return_map_viscoplastic(
    F: np.ndarray, mu: float, tau_y: float, eta: float, dt: float
) -> np.ndarray:
    if dt <= 0.0:
        raise InvalidInputError(f"dt={dt} must be positive")
    F, r = _checked_svd(F)
    F_out = np.empty((3, 3))
    s_out = np.empty(3)
    changed = z_viscoplastic(r.u, r.s, r.v, mu, tau_y, eta, dt, F_out, s_out)
    return F if changed == 0 else F_out


def return_map_drucker_prager(F: np.ndarray, lame: LamePair, theta_fric: float) -> np.ndarray:
    F, r = _checked_svd(F)
    F_out = np.empty((3, 3))
    s_out = np.empty(3)
    changed = z_drucker_prager(
        r.u, r.s, r.v, lame.mu_lame, lame.lambda_lame, drucker_prager_alpha(theta_fric), F_out, s_out
    )
    return F if changed == 0 else F_out


def kirchhoff_stress(
    params: MaterialParams, F: np.ndarray, grad_v: np.ndarray | None = None
) -> np.ndarray:
    """Family dispatch used by tests and diagnostics (the sim uses the cores)."""
    family, k = pack_kernel_params(params)
    F = np.asarray(F, dtype=np.float64)
    if family == ELASTIC:
        return kirchhoff_neo_hookean(F, LamePair(k[0], k[1]))
    if family == NEWTONIAN:
        gv = np.zeros((3, 3)) if grad_v is None else grad_v
        return kirchhoff_newtonian(float(np.linalg.det(F)), gv, k[5], k[4])
    return kirchhoff_stvk(F, LamePair(k[0], k[1]))


def return_map(params: MaterialParams, F: np.ndarray, dt: float) -> np.ndarray:
    """Family dispatch for the plastic projection (identity where elastic)."""
    family, k = pack_kernel_params(params)
    if family in (ELASTIC, NEWTONIAN):
        return np.asarray(F, dtype=np.float64)
    if family == PLASTICINE:
        return return_map_von_mises(F, k[0], k[2])
    if family == NON_NEWTONIAN:
        return return_map_viscoplastic(F, k[0], k[2], k[3], dt)
    return _dp_from_packed(F, k)


def _dp_from_packed(F, k):
    F, r = _checked_svd(F)
    F_out = np.empty((3, 3))
    s_out = np.empty(3)
    changed = z_drucker_prager(r.u, r.s, r.v, k[0], k[1], k[6], F_out, s_out)
    return F if changed == 0 else F_out
