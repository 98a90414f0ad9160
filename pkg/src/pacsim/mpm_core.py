"""Hybrid particle/grid simulation loop.

Particle state is stored structure-of-arrays. A particle carries position,
velocity, deformation gradient F, the affine velocity matrix C, mass, the
force volume scale (initial volume times opacity cubed) and advected radiance
attributes. For materials whose stress needs principal strains, the SVD of
the projected F is maintained alongside it (the plastic projections produce
it for free).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _sim_kernels as K
from .errors import (
    BoundsError,
    ConfigError,
    EmptyGeometryError,
    InvertedElementError,
)
from .materials import ELASTIC, NEWTONIAN, MaterialParams, needs_svd, pack_kernel_params
from .radiance_field import FEAT_DIM, SIGMA_EMPTY, VoxelField, alpha_of

PRUNE_RATIO = 1e-3  # particles with alpha below this fraction of max are removed
WEIGHT_EPS = 1e-8  # scatter weight below which a field node is declared empty


@dataclass
class ParticleState:
    """Structure-of-arrays Lagrangian state."""

    x: np.ndarray  # (n, 3) position, m
    v: np.ndarray  # (n, 3) velocity, m/s
    F: np.ndarray  # (n, 3, 3) deformation gradient
    C: np.ndarray  # (n, 3, 3) affine velocity matrix, 1/s
    U: np.ndarray  # (n, 3, 3) cached SVD of F (valid for SVD materials)
    S: np.ndarray  # (n, 3)
    V: np.ndarray  # (n, 3, 3)
    mass: np.ndarray  # (n,)
    vol_a3: np.ndarray  # (n,) V0 * alpha^3, force scale
    v0: np.ndarray  # (n,) unscaled initial volume
    sigma_p: np.ndarray  # (n,) raw density, advected unchanged
    feat_p: np.ndarray  # (n, FEAT_DIM) color features, advected unchanged
    alpha: np.ndarray  # (n,) opacity surrogate

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "ParticleState":
        return ParticleState(
            **{k: getattr(self, k).copy() for k in self.__dataclass_fields__}
        )

    def dynamic_copy(self) -> dict[str, np.ndarray]:
        """Copies of only the fields a substep mutates (checkpoint payload)."""
        return {k: getattr(self, k).copy() for k in ("x", "v", "F", "C", "U", "S", "V")}

    def restore_dynamic(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            getattr(self, k)[...] = arr

    @staticmethod
    def from_positions(x: np.ndarray, mass=1.0, v0=1.0) -> "ParticleState":
        """Bare mechanical state (used by kernel-level tests)."""
        n = x.shape[0]
        eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        return ParticleState(
            x=np.array(x, dtype=np.float64),
            v=np.zeros((n, 3)),
            F=eye.copy(),
            C=np.zeros((n, 3, 3)),
            U=eye.copy(),
            S=np.ones((n, 3)),
            V=eye.copy(),
            mass=np.full(n, float(mass)),
            vol_a3=np.full(n, float(v0)),
            v0=np.full(n, float(v0)),
            sigma_p=np.zeros(n),
            feat_p=np.zeros((n, FEAT_DIM)),
            alpha=np.ones(n),
        )


@dataclass
class MpmGrid:
    """Background Eulerian grid; ``dims`` counts nodes per axis."""

    dims: tuple[int, int, int]
    dx: float
    origin: np.ndarray

    gm: np.ndarray = dc_field(init=False)
    gmom: np.ndarray = dc_field(init=False)
    gv: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        self.gm = np.zeros(self.dims)
        self.gmom = np.zeros(self.dims + (3,))
        self.gv = np.zeros(self.dims + (3,))

    @staticmethod
    def cube(res: int, lo, size: float) -> "MpmGrid":
        return MpmGrid(dims=(res + 1,) * 3, dx=size / res, origin=np.asarray(lo, dtype=np.float64))


@dataclass
class HalfSpace:
    normal: np.ndarray
    offset: float
    mode: str = "separate"  # or "sticky"
    friction: float = 0.4

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-12:
            self.normal = self.normal / n


@dataclass
class Cylinder:
    point: np.ndarray
    axis: np.ndarray
    radius: float
    mode: str = "sticky"
    friction: float = 0.0

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(self.axis)
        if abs(n - 1.0) > 1e-12:
            self.axis = self.axis / n


Collider = HalfSpace | Cylinder

_MODES = {"sticky": 0, "separate": 1}


def pack_colliders(colliders: list[Collider]):
    k = len(colliders)
    ctype = np.zeros(k, dtype=np.int64)
    ca = np.zeros((k, 3))
    cb = np.zeros((k, 3))
    cr = np.zeros(k)
    cmode = np.zeros(k, dtype=np.int64)
    cfric = np.zeros(k)
    for i, c in enumerate(colliders):
        if isinstance(c, HalfSpace):
            ctype[i] = 0
            ca[i] = c.normal
            cr[i] = c.offset
        elif isinstance(c, Cylinder):
            ctype[i] = 1
            ca[i] = c.point
            cb[i] = c.axis
            cr[i] = c.radius
        else:
            raise ConfigError(f"unknown collider {c!r}")
        if c.mode not in _MODES:
            raise ConfigError(f"unknown collider mode {c.mode!r}")
        cmode[i] = _MODES[c.mode]
        cfric[i] = c.friction
    return ctype, ca, cb, cr, cmode, cfric


def collider_distance(c: Collider, x: np.ndarray) -> np.ndarray:
    """Signed distance of points to one collider surface (negative inside)."""
    x = np.atleast_2d(x)
    if isinstance(c, HalfSpace):
        return x @ c.normal - c.offset
    q = x - c.point
    t = q @ c.axis
    r = q - t[:, None] * c.axis
    return np.linalg.norm(r, axis=1) - c.radius


# ---------------------------------------------------------------------------
# Particle sampling from a voxel field
# ---------------------------------------------------------------------------


def sample_particles(
    voxfield: VoxelField,
    seed: int,
    rho0: float = 1000.0,
    particles_per_voxel: int = 8,
    prune_ratio: float = PRUNE_RATIO,
    prune: bool = True,
) -> ParticleState:
    """Sample particles in occupied voxels and bind radiance attributes.

    Positions are uniform inside each voxel, deterministic for a given seed.
    A voxel is occupied when any of its corner raw densities is above the
    empty marker. Particles whose opacity falls below ``prune_ratio`` times
    the maximum are dropped.
    """
    sig = voxfield.sigma
    occ = np.zeros(tuple(s - 1 for s in sig.shape), dtype=bool)
    for ci in range(2):
        for cj in range(2):
            for ck in range(2):
                occ |= (
                    sig[
                        ci : ci + occ.shape[0],
                        cj : cj + occ.shape[1],
                        ck : ck + occ.shape[2],
                    ]
                    > SIGMA_EMPTY + 1e-6
                )
    vox = np.argwhere(occ)
    if vox.shape[0] == 0:
        raise EmptyGeometryError("no occupied voxels in field")
    rng = np.random.default_rng(seed)
    m = vox.shape[0]
    offsets = rng.random((m, particles_per_voxel, 3))
    dxf = voxfield.dx
    pos = (vox[:, None, :] + offsets) * dxf + voxfield.lo
    pos = pos.reshape(-1, 3)

    n = pos.shape[0]
    attrs = np.empty((n, 1 + FEAT_DIM))
    grid = np.concatenate([sig[..., None], voxfield.feat], axis=-1)
    K.field_gather(
        pos, grid, np.array(sig.shape, dtype=np.int64), dxf, voxfield.lo, attrs
    )
    sigma_p = attrs[:, 0]
    feat_p = attrs[:, 1:]
    alpha = alpha_of(sigma_p)
    if prune:
        keep = alpha >= prune_ratio * alpha.max()
    else:
        keep = np.ones(n, dtype=bool)
    pos, sigma_p, feat_p, alpha = pos[keep], sigma_p[keep], feat_p[keep], alpha[keep]
    n = pos.shape[0]
    if n == 0:
        raise EmptyGeometryError("all sampled particles pruned")

    v0 = dxf**3 / particles_per_voxel
    eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    return ParticleState(
        x=pos,
        v=np.zeros((n, 3)),
        F=eye.copy(),
        C=np.zeros((n, 3, 3)),
        U=eye.copy(),
        S=np.ones((n, 3)),
        V=eye.copy(),
        mass=rho0 * alpha**3 * v0,
        vol_a3=alpha**3 * v0,
        v0=np.full(n, v0),
        sigma_p=sigma_p,
        feat_p=feat_p,
        alpha=alpha,
    )


# ---------------------------------------------------------------------------
# Simulation steps
# ---------------------------------------------------------------------------


def filter_to_inset(state: ParticleState, grid: MpmGrid, cells: int = 2) -> ParticleState:
    """Drop particles outside the simulable interior of the grid.

    Stray low-opacity particles produced by geometry fitting can sit near the
    domain boundary where the transfer stencils are not valid.
    """
    lo = grid.origin + cells * grid.dx
    hi = grid.origin + (np.array(grid.dims) - 1 - cells) * grid.dx
    keep = np.all((state.x >= lo) & (state.x <= hi), axis=1)
    if keep.all():
        return state
    warnings.warn(f"dropping {int((~keep).sum())} particles outside the grid interior")
    return ParticleState(
        **{k: getattr(state, k)[keep].copy() for k in state.__dataclass_fields__}
    )


def _raise_kernel_error(code: int, where: str):
    if code > 0:
        raise BoundsError(f"{where}: particle {code - 1} left the valid grid region")
    if code < 0:
        raise InvertedElementError(
            f"{where}: particle {-code - 1} reached a degenerate deformation state"
        )


def compute_stress(state: ParticleState, family: int, kp: np.ndarray, tau: np.ndarray):
    K.compute_stress(family, kp, state.F, state.C, state.U, state.S, tau, state.n)


def p2g(state: ParticleState, grid: MpmGrid, params: MaterialParams, dt: float) -> MpmGrid:
    """Stress evaluation plus scatter of mass/momentum/forces to the grid."""
    family, kp = pack_kernel_params(params)
    tau = np.empty((state.n, 3, 3))
    compute_stress(state, family, kp, tau)
    code = K.p2g(
        state.x,
        state.v,
        state.C,
        tau,
        state.mass,
        state.vol_a3,
        dt,
        grid.dx,
        grid.origin,
        np.array(grid.dims, dtype=np.int64),
        grid.gm,
        grid.gmom,
    )
    _raise_kernel_error(code, "p2g")
    return grid


def grid_update(
    grid: MpmGrid,
    colliders: list[Collider],
    gravity: np.ndarray,
    dt: float,
    mass_eps: float = 0.0,
) -> MpmGrid:
    packed = pack_colliders(colliders)
    K.grid_update(
        grid.gm,
        grid.gmom,
        grid.gv,
        dt,
        np.asarray(gravity, dtype=np.float64),
        grid.dx,
        grid.origin,
        np.array(grid.dims, dtype=np.int64),
        mass_eps,
        *packed,
    )
    return grid


def clampable_mask(family: int, alpha: np.ndarray) -> np.ndarray:
    """Particles whose degenerate deformation is recovered by clamping.

    Fluids and granular media always recover; for elastic solids only the
    opacity-softened tracer particles do (structural inversion is an error).
    """
    if family in (ELASTIC, 1):  # elastic and plasticine solids
        return (alpha < 0.5).astype(np.uint8)
    return np.ones(alpha.shape[0], dtype=np.uint8)


def g2p(state: ParticleState, grid: MpmGrid, params: MaterialParams, dt: float) -> ParticleState:
    family, kp = pack_kernel_params(params)
    code = K.g2p(
        state.x,
        state.v,
        state.C,
        state.F,
        state.U,
        state.S,
        state.V,
        grid.gv,
        dt,
        grid.dx,
        grid.origin,
        np.array(grid.dims, dtype=np.int64),
        family,
        kp,
        clampable_mask(family, state.alpha),
    )
    _raise_kernel_error(code, "g2p")
    return state


def advance_substep(
    state: ParticleState,
    grid: MpmGrid,
    params: MaterialParams,
    colliders: list[Collider],
    gravity,
    dt: float,
    mass_eps: float = 0.0,
) -> ParticleState:
    p2g(state, grid, params, dt)
    grid_update(grid, colliders, gravity, dt, mass_eps)
    return g2p(state, grid, params, dt)


def advance_frame(
    state: ParticleState,
    grid: MpmGrid,
    params: MaterialParams,
    colliders: list[Collider],
    gravity,
    dt_frame: float,
    substeps: int,
    mass_eps: float = 0.0,
    cfl_warn: bool = True,
) -> ParticleState:
    """Advance one video frame as ``substeps`` symplectic substeps."""
    if substeps < 1:
        raise ConfigError(f"substeps={substeps} must be >= 1")
    dt = dt_frame / substeps
    if cfl_warn and state.n:
        vmax = float(np.max(np.abs(state.v)))
        if vmax * dt > 0.5 * grid.dx:
            warnings.warn(
                f"CFL risk: max |v| * dt = {vmax * dt:.3e} exceeds half a cell {0.5 * grid.dx:.3e}",
                stacklevel=2,
            )
    for _ in range(substeps):
        advance_substep(state, grid, params, colliders, gravity, dt, mass_eps)
    return state


def cfl_substeps(
    dx: float,
    dt_frame: float,
    rho0: float,
    mu_lame: float,
    lambda_lame: float,
    factor: float = 0.3,
) -> int:
    """Substep count from a sound-speed CFL rule."""
    c = np.sqrt((lambda_lame + 2.0 * mu_lame) / rho0)
    if c <= 0.0:
        return 1
    return max(1, int(np.ceil(dt_frame / (factor * dx / c))))


# ---------------------------------------------------------------------------
# Particles back to a renderable voxel field
# ---------------------------------------------------------------------------


def field_p2g(
    state: ParticleState,
    res: int | tuple[int, int, int],
    lo,
    hi,
    weight_eps: float = WEIGHT_EPS,
) -> VoxelField:
    """Weighted-average transfer of advected attributes onto field nodes."""
    if state.n == 0:
        raise EmptyGeometryError("field_p2g on empty particle set")
    if isinstance(res, int):
        res = (res, res, res)
    shape = tuple(r + 1 for r in res)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    dxf = float((hi[0] - lo[0]) / res[0])
    q = np.concatenate([state.sigma_p[:, None], state.feat_p], axis=1)
    num = np.empty(shape + (1 + FEAT_DIM,))
    den = np.empty(shape)
    K.field_p2g_scatter(state.x, q, np.array(shape, dtype=np.int64), dxf, lo, num, den)
    empty_vals = np.zeros(1 + FEAT_DIM)
    empty_vals[0] = SIGMA_EMPTY
    out = np.empty_like(num)
    K.field_p2g_normalize(num, den, weight_eps, empty_vals, out)
    return VoxelField(sigma=out[..., 0].copy(), feat=out[..., 1:].copy(), lo=lo, hi=hi)
