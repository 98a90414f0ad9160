"""Three-stage identification: geometry seeding, initial-velocity estimation
and physical-parameter estimation, plus a Chamfer-supervised oracle mode.

Stages are strictly sequential. After seeding, the radiance field and color
network are frozen; later stages only move particles (and re-deposit their
advected attributes onto a fresh grid every frame for rendering).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import _adjoint_kernels as AK
from . import _render_kernels as RK
from . import _sim_kernels as SK
from .adjoint_engine import (
    SimGradients,
    SimSession,
    simulate_backward,
    simulate_forward,
    theta_to_param_grads,
)
from .errors import ConfigError, LineSearchStalledError, NanGradientError
from .materials import (
    Elastic,
    MaterialParams,
    NewtonianFluid,
    NonNewtonianFluid,
    Plasticine,
    Sand,
)
from .mpm_core import (
    Collider,
    MpmGrid,
    ParticleState,
    collider_distance,
    field_p2g,
    sample_particles,
)
from .optimizers import AdamState, LbfgsState, adam_step, lbfgs_step
from .radiance_field import (
    FEAT_DIM,
    SIGMA_EMPTY,
    ColorNet,
    VoxelField,
    alpha_of,
    softplus,
    upsample,
)
from .renderer import (
    Camera,
    render_rays,
    render_rays_backward,
    surface_regularizer,
    surface_regularizer_grad,
)

log = logging.getLogger("pacsim.sysid")

WEIGHT_EPS = 1e-8


# ---------------------------------------------------------------------------
# Reparameterization
# ---------------------------------------------------------------------------

LOG10_PARAMS = ("E", "mu", "kappa", "tau_y", "eta")
SIGMOID_RANGES = {"nu": (0.005, 0.495), "theta_fric": (5.0, 85.0)}
LN10 = np.log(10.0)


@dataclass
class ParamSpace:
    """Bijection between physical material parameters and optimizer space.

    Moduli, viscosities and yield stresses live in log10; ratio-like
    parameters go through a scaled sigmoid that keeps every iterate inside
    its physical range. Optional per-parameter search bounds are enforced by
    projection after every optimizer step.
    """

    family: str
    bounds: dict | None = None

    def project(self, u: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if not self.bounds:
            return u
        for name, (lo, hi) in self.bounds.items():
            if name not in u:
                continue
            if name in LOG10_PARAMS:
                u[name] = np.clip(u[name], np.log10(lo), np.log10(hi))
            else:
                blo, bhi = SIGMOID_RANGES[name]
                ylo = np.clip((lo - blo) / (bhi - blo), 1e-12, 1 - 1e-12)
                yhi = np.clip((hi - blo) / (bhi - blo), 1e-12, 1 - 1e-12)
                u[name] = np.clip(u[name], np.log(ylo / (1 - ylo)), np.log(yhi / (1 - yhi)))
        return u

    def names(self, params: MaterialParams) -> tuple[str, ...]:
        return params.identified()

    def to_opt(self, params: MaterialParams) -> dict[str, np.ndarray]:
        out = {}
        for name in params.identified():
            p = float(getattr(params, name))
            if name in LOG10_PARAMS:
                out[name] = np.float64(np.log10(p))
            else:
                lo, hi = SIGMOID_RANGES[name]
                y = np.clip((p - lo) / (hi - lo), 1e-12, 1.0 - 1e-12)
                out[name] = np.float64(np.log(y / (1.0 - y)))
        return out

    def to_phys(self, u: dict[str, np.ndarray], template: MaterialParams) -> MaterialParams:
        kw = {}
        for name in template.identified():
            uu = float(u[name])
            if name in LOG10_PARAMS:
                kw[name] = 10.0**uu
            else:
                lo, hi = SIGMOID_RANGES[name]
                kw[name] = lo + (hi - lo) / (1.0 + np.exp(-uu))
        return replace(template, **kw)

    def chain_grads(
        self, params: MaterialParams, phys_grads: dict[str, float]
    ) -> dict[str, np.ndarray]:
        out = {}
        for name in params.identified():
            p = float(getattr(params, name))
            g = phys_grads[name]
            if name in LOG10_PARAMS:
                out[name] = np.float64(g * p * LN10)
            else:
                lo, hi = SIGMOID_RANGES[name]
                y = (p - lo) / (hi - lo)
                out[name] = np.float64(g * (hi - lo) * y * (1.0 - y))
        return out


# ---------------------------------------------------------------------------
# Chamfer distance
# ---------------------------------------------------------------------------


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    ta = cKDTree(a)
    tb = cKDTree(b)
    d_ab, _ = tb.query(a, k=1)
    d_ba, _ = ta.query(b, k=1)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def chamfer_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Chamfer value and its gradient wrt the first cloud (matches frozen)."""
    ta = cKDTree(a)
    tb = cKDTree(b)
    d_ab, j_ab = tb.query(a, k=1)
    d_ba, j_ba = ta.query(b, k=1)
    val = float(np.mean(d_ab**2) + np.mean(d_ba**2))
    grad = 2.0 * (a - b[j_ab]) / a.shape[0]
    np.add.at(grad, j_ba, 2.0 * (a[j_ba] - b) / b.shape[0])
    return val, grad


# ---------------------------------------------------------------------------
# Schedules and observations
# ---------------------------------------------------------------------------


@dataclass
class StageSchedule:
    coarse_res: int = 16
    fine_res: int = 32
    seed_iters_coarse: int = 200
    seed_iters_fine: int = 150
    seed_rays: int = 4096
    lr_sigma: float = 0.3
    lr_feat: float = 0.01
    lr_net: float = 0.01
    lambda_surf: float = 1e-2
    velocity_frames: int = 3
    velocity_iters: int = 25
    param_iters_a: int = 30
    param_iters_b: int = 40
    lr_params: float = 0.01
    rays_per_frame_view: int = 1024
    warm_window_pad: int = 3
    bg_keep_fraction: float = 0.1
    bg_weight: float = 0.1

    def __post_init__(self):
        if self.velocity_frames not in (2, 3):
            raise ConfigError("velocity_frames must be 2 or 3")
        for f in ("seed_iters_coarse", "seed_iters_fine", "velocity_iters",
                  "param_iters_a", "param_iters_b"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")


@dataclass
class Observations:
    """Posed multi-view video: images in [0,1], boolean foreground masks."""

    cameras: list[Camera]
    images: np.ndarray  # (V, N+1, H, W, 3)
    masks: np.ndarray  # (V, N+1, H, W)
    c_bg: np.ndarray

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def n_frames(self) -> int:
        return self.images.shape[1] - 1

    def union_mask(self, view: int) -> np.ndarray:
        return self.masks[view].any(axis=0)


def _dilate(mask: np.ndarray, it: int = 2) -> np.ndarray:
    out = mask.copy()
    for _ in range(it):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


class RayPool:
    """Deterministic per-(stage, iteration, frame, view) ray batches.

    Seeding mode (``full_coverage``) draws from every pixel and down-weights
    rays that are background in all frames, so empty space is carved
    everywhere. Simulation stages restrict the pool to the dilated union of
    foreground masks plus a fixed subsample of background pixels.
    """

    def __init__(
        self,
        obs: Observations,
        seed: int,
        stage_id: int,
        bg_keep: float = 0.1,
        full_coverage: bool = False,
        bg_weight: float = 0.1,
    ):
        self.obs = obs
        self.seed = seed
        self.stage_id = stage_id
        self.pools = []
        self.weights = []
        for v in range(obs.n_views):
            un = _dilate(obs.union_mask(v), it=3)
            if full_coverage:
                pool = np.arange(un.size)
                w = np.where(un.ravel(), 1.0, bg_weight)
            else:
                rng = np.random.default_rng([seed, stage_id, 777, v])
                bg_ids = np.nonzero(~un.ravel())[0]
                keep = rng.random(bg_ids.shape[0]) < bg_keep
                pool = np.concatenate([np.nonzero(un.ravel())[0], bg_ids[keep]])
                pool.sort()
                w = np.ones(pool.shape[0])
            self.pools.append(pool)
            self.weights.append(w)

    def batch(self, it: int, t: int, v: int, nrays: int):
        pool = self.pools[v]
        if nrays >= pool.shape[0]:
            ids = pool
            w = self.weights[v]
        else:
            rng = np.random.default_rng([self.seed, self.stage_id, it, t, v])
            sel = rng.choice(pool.shape[0], size=nrays, replace=False)
            ids = pool[sel]
            w = self.weights[v][sel]
        obs_cols = self.obs.images[v, t].reshape(-1, 3)[ids]
        return ids, obs_cols, w


# ---------------------------------------------------------------------------
# Field deposit (particles -> renderable field) with backward
# ---------------------------------------------------------------------------


def deposit_field(x, sigma_p, feat_p, res, lo, hi, weight_eps=WEIGHT_EPS):
    """field_p2g on raw arrays, also returning the weight sums for backward."""
    shape = (res + 1, res + 1, res + 1)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    dxf = float((hi[0] - lo[0]) / res)
    q = np.concatenate([sigma_p[:, None], feat_p], axis=1)
    num = np.empty(shape + (1 + FEAT_DIM,))
    den = np.empty(shape)
    SK.field_p2g_scatter(x, q, np.array(shape, dtype=np.int64), dxf, lo, num, den)
    empty_vals = np.zeros(1 + FEAT_DIM)
    empty_vals[0] = SIGMA_EMPTY
    out = np.empty_like(num)
    SK.field_p2g_normalize(num, den, weight_eps, empty_vals, out)
    fld = VoxelField(sigma=np.ascontiguousarray(out[..., 0]), feat=np.ascontiguousarray(out[..., 1:]), lo=lo, hi=hi)
    return fld, q, den, out


def deposit_field_backward(x, q, den, out, sigma_bar, feat_bar, res, lo, hi, weight_eps=WEIGHT_EPS):
    """Adjoint of deposit_field wrt particle positions and attribute values."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    dxf = float((hi[0] - lo[0]) / res)
    outbar = np.concatenate([sigma_bar[..., None], feat_bar], axis=-1)
    active = den >= weight_eps
    numbar = np.where(active[..., None], outbar / np.maximum(den, weight_eps)[..., None], 0.0)
    denbar = -np.sum(numbar * out, axis=-1)
    xbar = np.zeros_like(x)
    qbar = np.zeros_like(q)
    dims = np.array([res + 1] * 3, dtype=np.int64)
    AK.field_p2g_backward(x, q, dims, dxf, lo, numbar, denbar, xbar, qbar)
    return xbar, qbar


# ---------------------------------------------------------------------------
# Geometry seeding
# ---------------------------------------------------------------------------


@dataclass
class SeedResult:
    field: VoxelField
    net: ColorNet
    particles: ParticleState
    loss_history: list[float]
    kept_fraction: float


def _seed_stage(
    obs: Observations,
    fld: VoxelField,
    net: ColorNet,
    pool: RayPool,
    schedule: StageSchedule,
    iters: int,
    seed: int,
    stage_tag: int,
    lambda_surf: float,
    loss_history: list[float],
    prune_particles: bool = False,
):
    res = fld.res[0]
    # fixed particle cloud for the gather/deposit round trip; refinement
    # stages restrict it to the region the coarse stage left occupied
    parts = sample_particles(fld, seed=seed + stage_tag, prune=prune_particles)
    x = parts.x
    n = x.shape[0]
    dims = np.array(fld.sigma.shape, dtype=np.int64)
    dxf = fld.dx
    params = {
        "sigma": fld.sigma,
        "feat": fld.feat,
        "w1": net.w1,
        "b1": net.b1,
        "w2": net.w2,
        "b2": net.b2,
    }
    lrs = {
        "sigma": schedule.lr_sigma,
        "feat": schedule.lr_feat,
        "w1": schedule.lr_net,
        "b1": schedule.lr_net,
        "w2": schedule.lr_net,
        "b2": schedule.lr_net,
    }
    opts = {k: AdamState(lr=lrs[k]) for k in params}
    attrs = np.empty((n, 1 + FEAT_DIM))
    for it in range(iters):
        # gather current node values onto the fixed particles, deposit back
        grid13 = np.concatenate([fld.sigma[..., None], fld.feat], axis=-1)
        SK.field_gather(x, grid13, dims, dxf, fld.lo, attrs)
        sigma_p = attrs[:, 0].copy()
        feat_p = np.ascontiguousarray(attrs[:, 1:])
        rt_field, q, den, out = deposit_field(x, sigma_p, feat_p, res, fld.lo, fld.hi)

        # render one weighted minibatch per view at frame 0
        total = 0.0
        sig_bar = np.zeros_like(fld.sigma)
        feat_bar = np.zeros_like(fld.feat)
        net_bar = {"w1": np.zeros_like(net.w1), "b1": np.zeros_like(net.b1),
                   "w2": np.zeros_like(net.w2), "b2": np.zeros_like(net.b2)}
        sbar_rt = np.zeros_like(rt_field.sigma)
        fbar_rt = np.zeros_like(rt_field.feat)
        batches = [pool.batch(it, 0, v, schedule.seed_rays // obs.n_views)
                   for v in range(obs.n_views)]
        w_total = sum(float(w.sum()) for _, _, w in batches)
        for v, (ids, obs_cols, w) in enumerate(batches):
            o, d = obs.cameras[v].rays(ids)
            cols, ctx = render_rays(rt_field, net, o, d, obs.c_bg)
            diff = cols - obs_cols
            total += float((w * (diff**2).sum(axis=1)).sum()) / w_total
            cbar = 2.0 * w[:, None] * diff / w_total
            sb, fb, ng = render_rays_backward(rt_field, net, ctx, cbar)
            sbar_rt += sb
            fbar_rt += fb
            for k in net_bar:
                net_bar[k] += ng[k]

        # surface regularizer on the gathered particle opacities
        a_p = alpha_of(sigma_p)
        reg = surface_regularizer(a_p, dxf)
        total += lambda_surf * reg
        abar = lambda_surf * surface_regularizer_grad(a_p, dxf)
        sp = softplus(sigma_p)
        sigp_bar_reg = abar * np.exp(-sp) / (1.0 + np.exp(-sigma_p))

        # backward: deposit -> particle attrs -> gather -> node grids
        _, qbar = deposit_field_backward(x, q, den, out, sbar_rt, fbar_rt, res, fld.lo, fld.hi)
        qbar[:, 0] += sigp_bar_reg
        gridbar = np.zeros(fld.sigma.shape + (1 + FEAT_DIM,))
        RK.scatter_grad_multichannel(x, np.ascontiguousarray(qbar), dims, dxf, fld.lo, gridbar)
        sig_bar += gridbar[..., 0]
        feat_bar += gridbar[..., 1:]

        grads = {"sigma": sig_bar, "feat": feat_bar, **net_bar}
        for k in params:
            sub = {k: params[k]}
            adam_step(opts[k], sub, {k: grads[k]})
            params[k] = sub[k]
        fld.sigma = params["sigma"]
        fld.feat = params["feat"]
        net.w1, net.b1 = params["w1"], params["b1"]
        net.w2, net.b2 = params["w2"], params["b2"]
        loss_history.append(total)
        if it % 25 == 0:
            log.info("seed stage res=%d iter %d loss %.6e (reg %.3e)", res, it, total, reg)
    return fld


def seed_geometry(
    obs: Observations,
    lo,
    hi,
    schedule: StageSchedule,
    seed: int = 0,
    rho0: float = 1000.0,
    lambda_surf: float | None = None,
) -> SeedResult:
    """Fit the static first-frame field coarse-to-fine, then sample particles."""
    if obs.n_views < 3:
        warnings.warn("fewer than 3 views; geometry may be poorly constrained")
    lam = schedule.lambda_surf if lambda_surf is None else lambda_surf
    net = ColorNet.create(seed)
    fld = VoxelField.empty(schedule.coarse_res, lo, hi, sigma0=0.0)
    pool = RayPool(obs, seed, stage_id=1, full_coverage=True,
                   bg_weight=schedule.bg_weight)
    history: list[float] = []
    fld = _seed_stage(obs, fld, net, pool, schedule, schedule.seed_iters_coarse,
                      seed, 11, lam, history)
    if schedule.fine_res > schedule.coarse_res:
        fld = upsample(fld, schedule.fine_res)
        fld = _seed_stage(obs, fld, net, pool, schedule, schedule.seed_iters_fine,
                          seed, 12, lam, history, prune_particles=True)
    # freeze: sample the final particle set with pruning
    parts = sample_particles(fld, seed=seed + 99, rho0=rho0, prune=True)
    total_voxels = int(np.prod([r for r in fld.res])) * 8
    head = np.mean(history[: max(3, len(history) // 10)])
    tail = np.mean(history[-max(3, len(history) // 10):])
    if not tail < head:
        warnings.warn(
            f"geometry seeding loss did not decrease (start {head:.4e}, end {tail:.4e})"
        )
    return SeedResult(
        field=fld, net=net, particles=parts, loss_history=history,
        kept_fraction=parts.n / total_voxels,
    )


# ---------------------------------------------------------------------------
# Simulate-and-render objective shared by velocity and parameter stages
# ---------------------------------------------------------------------------


def _skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


@dataclass
class SimRenderObjective:
    """Photometric loss of a simulated particle cloud against observations.

    The geometry (positions and attributes at t0) is frozen; the degrees of
    freedom are the rigid initial velocity field and, later, the material
    parameters.
    """

    obs: Observations
    base: ParticleState
    net: ColorNet
    params: MaterialParams
    colliders: list[Collider]
    gravity: np.ndarray
    grid: MpmGrid
    dt_frame: float
    substeps: int
    field_res: int
    seed: int
    stage_id: int
    rays_per_frame_view: int
    frames_used: list[int]
    bg_keep: float = 0.1

    def __post_init__(self):
        self.pool = RayPool(self.obs, self.seed, self.stage_id, bg_keep=self.bg_keep)
        self._com = self.base.x.mean(axis=0)
        self.flo = self.grid.origin.copy()
        self.fhi = self.grid.origin + (np.array(self.grid.dims) - 1) * self.grid.dx

    def make_state(self, v0, omega) -> ParticleState:
        st = self.base.copy()
        st.v[:] = np.asarray(v0) + np.cross(np.asarray(omega), st.x - self._com)
        st.C[:] = _skew(np.asarray(omega))
        return st

    def session(self, params: MaterialParams | None = None) -> SimSession:
        return SimSession(
            params=params if params is not None else self.params,
            colliders=self.colliders,
            gravity=self.gravity,
            grid=self.grid,
            dt_frame=self.dt_frame,
            substeps=self.substeps,
        )

    def frame_loss(self, it: int, t: int, x: np.ndarray, backward: bool):
        """Photometric loss of frame t given particle positions x."""
        fld, q, den, out = deposit_field(
            x, self.base.sigma_p, self.base.feat_p, self.field_res, self.flo, self.fhi
        )
        batches = [
            self.pool.batch(it, t, v, self.rays_per_frame_view)
            for v in range(self.obs.n_views)
        ]
        n_rays = sum(ids.shape[0] for ids, _, _ in batches)
        scale = 1.0 / (n_rays * len(self.frames_used))
        loss = 0.0
        sig_bar = np.zeros_like(fld.sigma) if backward else None
        feat_bar = np.zeros_like(fld.feat) if backward else None
        for v, (ids, obs_cols, _) in enumerate(batches):
            o, d = self.obs.cameras[v].rays(ids)
            cols, ctx = render_rays(fld, self.net, o, d, self.obs.c_bg)
            diff = cols - obs_cols
            loss += float((diff**2).sum()) * scale
            if backward:
                sb, fb, _ = render_rays_backward(
                    fld, self.net, ctx, 2.0 * diff * scale, want_net_grads=False
                )
                sig_bar += sb
                feat_bar += fb
        if not backward:
            return loss, None
        xbar, _ = deposit_field_backward(
            x, q, den, out, sig_bar, feat_bar, self.field_res, self.flo, self.fhi
        )
        return loss, xbar

    def evaluate(self, it: int, v0, omega, params: MaterialParams | None = None):
        """One loss + gradient evaluation of the full simulate-render graph."""
        state = self.make_state(v0, omega)
        sess = self.session(params)
        losses: dict[int, float] = {}
        tape = simulate_forward(sess, state, max(self.frames_used))

        def xbar_fn(t, snap):
            if t not in self.frames_used:
                return None
            loss_t, xbar = self.frame_loss(it, t, snap["x"], backward=True)
            losses[t] = loss_t
            return xbar

        grads = simulate_backward(tape, xbar_fn)
        return sum(losses.values()), grads

    def loss_only(self, it: int, v0, omega, params: MaterialParams | None = None) -> float:
        state = self.make_state(v0, omega)
        sess = self.session(params)
        losses: dict[int, float] = {}

        def cb(t, st):
            if t in self.frames_used:
                losses[t], _ = self.frame_loss(it, t, st.x, backward=False)

        simulate_forward(sess, state, max(self.frames_used), frame_cb=cb)
        return sum(losses.values())


# ---------------------------------------------------------------------------
# Stage 2: initial velocity estimation
# ---------------------------------------------------------------------------


def triangulate_mask_centroids(obs: Observations, t: int) -> np.ndarray | None:
    """Least-squares 3D point closest to the rays through all mask centroids."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for v, cam in enumerate(obs.cameras):
        m = obs.masks[v, t]
        if not m.any():
            return None
        rows, cols = np.nonzero(m)
        dc = np.array([
            (cols.mean() + 0.5 - cam.cx) / cam.fx,
            (rows.mean() + 0.5 - cam.cy) / cam.fy,
            1.0,
        ])
        d = cam.rot @ dc
        d /= np.linalg.norm(d)
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ cam.pos
    return np.linalg.solve(A, b)


def velocity_init_from_masks(
    obs: Observations, dt_frame: float, gravity, k: int = 2
) -> np.ndarray:
    """Ballistic fit of the triangulated silhouette centroid trajectory."""
    g = np.asarray(gravity, dtype=np.float64)
    pts = []
    for t in range(min(k, obs.n_frames) + 1):
        p = triangulate_mask_centroids(obs, t)
        if p is None:
            return np.zeros(3)
        pts.append(p)
    pts = np.asarray(pts)
    ts = np.arange(pts.shape[0]) * dt_frame
    y = pts - pts[0] - 0.5 * g[None, :] * ts[:, None] ** 2
    denom = float((ts**2).sum())
    if denom == 0.0:
        return np.zeros(3)
    return (ts[:, None] * y).sum(axis=0) / denom


@dataclass
class VelocityResult:
    v0: np.ndarray
    omega: np.ndarray
    loss_history: list[float]
    used_fallback: bool


def estimate_velocity(
    objective: SimRenderObjective,
    schedule: StageSchedule,
    v0_init=None,
    omega_init=(0.0, 0.0, 0.0),
) -> VelocityResult:
    """Recover the rigid initial velocity field from the first frames.

    Initialized from the triangulated silhouette-centroid trajectory, then a
    quasi-Newton loop. A line-search stall after progress means convergence;
    an early stall falls back to Adam.
    """
    it_counter = {"i": 0}
    history: list[float] = []
    best = {"loss": np.inf, "u": None}

    def loss_grad(u):
        i = it_counter["i"]
        it_counter["i"] += 1
        loss, grads = objective.evaluate(i, u["v0"], u["omega"])
        gm = grads.v0.sum(axis=0)
        # rigid field v = v0 + w x r, plus the affine init C = [w]x
        r = objective.base.x - objective.base.x.mean(axis=0)
        gw = np.cross(r, grads.v0).sum(axis=0)
        cb = grads.C0.sum(axis=0)
        gw += np.array([cb[2, 1] - cb[1, 2], cb[0, 2] - cb[2, 0], cb[1, 0] - cb[0, 1]])
        history.append(loss)
        if loss < best["loss"]:
            best["loss"] = loss
            best["u"] = {k: v.copy() for k, v in u.items()}
        return loss, {"v0": gm, "omega": gw}

    if v0_init is None:
        v0_init = velocity_init_from_masks(
            objective.obs, objective.dt_frame, objective.gravity,
            k=schedule.velocity_frames,
        )
        log.info("velocity init from mask centroids: %s", np.round(v0_init, 4))
    u = {"v0": np.asarray(v0_init, dtype=np.float64).copy(),
         "omega": np.asarray(omega_init, dtype=np.float64).copy()}
    lb = LbfgsState(initial_step=1.0)
    used_fallback = False
    steps_done = 0
    for _ in range(schedule.velocity_iters):
        try:
            lb, u, f = lbfgs_step(lb, u, loss_grad)
            steps_done += 1
        except LineSearchStalledError:
            if steps_done >= 3:
                break  # stalled at the noise floor after real progress
            warnings.warn("velocity L-BFGS stalled early; switching to Adam")
            used_fallback = True
            adam = AdamState(lr=0.05)
            for _ in range(schedule.velocity_iters * 2):
                f, g = loss_grad(u)
                adam_step(adam, u, g)
            break
    if best["u"] is not None:
        u = best["u"]
    return VelocityResult(v0=u["v0"], omega=u["omega"], loss_history=history,
                          used_fallback=used_fallback)


# ---------------------------------------------------------------------------
# Stage 3: physical parameter estimation (warm start, then full window)
# ---------------------------------------------------------------------------


def detect_first_collision(
    objective: SimRenderObjective, v0, omega, n_frames: int
) -> int | None:
    """First frame at which any particle comes within one cell of a collider."""
    if not objective.colliders:
        return None
    state = objective.make_state(v0, omega)
    sess = objective.session()
    hit = {"t": None}
    dx = objective.grid.dx

    def cb(t, st):
        if hit["t"] is None:
            for c in objective.colliders:
                if collider_distance(c, st.x).min() < dx:
                    hit["t"] = t
                    break

    simulate_forward(sess, state, n_frames, frame_cb=cb)
    return hit["t"]


@dataclass
class ParamResult:
    params: MaterialParams
    loss_history: list[float]
    best_loss: float
    warm_window: int


def estimate_params(
    objective: SimRenderObjective,
    schedule: StageSchedule,
    v0,
    omega,
    params_init: MaterialParams,
    n_frames: int,
    bounds: dict | None = None,
) -> ParamResult:
    """Two-phase parameter fit: short window past first contact, then full."""
    space = ParamSpace(params_init.family, bounds=bounds)
    coll = detect_first_collision(objective, v0, omega, n_frames)
    if coll is None:
        window = n_frames
    else:
        window = min(n_frames, coll + schedule.warm_window_pad)
    phases = []
    if window < n_frames and schedule.param_iters_a > 0:
        phases.append((list(range(1, window + 1)), schedule.param_iters_a))
    phases.append((list(range(1, n_frames + 1)), schedule.param_iters_b))

    u = space.to_opt(params_init)
    u = {k: np.float64(v) for k, v in u.items()}
    history: list[float] = []
    best = (np.inf, dict(u))
    it_global = 0
    for frames, iters in phases:
        objective.frames_used = frames
        adam = AdamState(lr=schedule.lr_params)
        for _ in range(iters):
            params = space.to_phys(u, params_init)
            try:
                loss, grads = objective.evaluate(it_global, v0, omega, params=params)
            except NanGradientError:
                # halve the window once, then give up on this phase
                half = frames[: max(1, len(frames) // 2)]
                warnings.warn(
                    f"non-finite gradient; retrying with frame window {half}"
                )
                objective.frames_used = half
                loss, grads = objective.evaluate(it_global, v0, omega, params=params)
            pg = theta_to_param_grads(params, grads.theta)
            gu = space.chain_grads(params, pg)
            history.append(loss)
            if loss < best[0]:
                best = (loss, dict(u))
            adam_step(adam, u, gu)
            space.project(u)
            it_global += 1
            if it_global % 10 == 0:
                log.info("param iter %d loss %.6e %s", it_global, loss,
                         {k: float(v) for k, v in u.items()})
    # include the final iterate in the best-so-far scan
    params = space.to_phys(u, params_init)
    final_loss = objective.loss_only(it_global, v0, omega, params=params)
    history.append(final_loss)
    if final_loss < best[0]:
        best = (final_loss, dict(u))
    return ParamResult(
        params=space.to_phys(best[1], params_init),
        loss_history=history,
        best_loss=float(best[0]),
        warm_window=window,
    )


# ---------------------------------------------------------------------------
# Oracle mode: Chamfer-supervised fit against ground-truth particle clouds
# ---------------------------------------------------------------------------


@dataclass
class ChamferObjective:
    """3D-supervised objective bypassing rendering entirely."""

    gt_clouds: list[np.ndarray]  # per frame 1..N
    base: ParticleState
    v0: np.ndarray
    omega: np.ndarray
    colliders: list[Collider]
    gravity: np.ndarray
    grid: MpmGrid
    dt_frame: float
    substeps: int

    def __post_init__(self):
        self._com = self.base.x.mean(axis=0)

    def evaluate(self, params: MaterialParams, backward: bool = True):
        st = self.base.copy()
        st.v[:] = self.v0 + np.cross(self.omega, st.x - self._com)
        st.C[:] = _skew(self.omega)
        sess = SimSession(
            params=params, colliders=self.colliders, gravity=self.gravity,
            grid=self.grid, dt_frame=self.dt_frame, substeps=self.substeps,
        )
        n_frames = len(self.gt_clouds)
        losses: dict[int, float] = {}
        if not backward:
            def cb(t, state):
                if t >= 1:
                    losses[t] = chamfer(state.x, self.gt_clouds[t - 1])
            simulate_forward(sess, st, n_frames, frame_cb=cb)
            return sum(losses.values()) / n_frames, None
        tape = simulate_forward(sess, st, n_frames)

        def xbar_fn(t, snap):
            val, grad = chamfer_with_grad(snap["x"], self.gt_clouds[t - 1])
            losses[t] = val
            return grad / n_frames

        grads = simulate_backward(tape, xbar_fn)
        return sum(losses.values()) / n_frames, grads


def oracle_fit(
    objective: ChamferObjective,
    params_init: MaterialParams,
    iters: int = 60,
    lr: float = 0.05,
    bounds: dict | None = None,
) -> ParamResult:
    """Chamfer-supervised parameter fit (privileged 3D geometry)."""
    space = ParamSpace(params_init.family, bounds=bounds)
    u = {k: np.float64(v) for k, v in space.to_opt(params_init).items()}
    adam = AdamState(lr=lr)
    history: list[float] = []
    best = (np.inf, dict(u))
    for i in range(iters):
        params = space.to_phys(u, params_init)
        loss, grads = objective.evaluate(params)
        pg = theta_to_param_grads(params, grads.theta)
        gu = space.chain_grads(params, pg)
        history.append(loss)
        if loss < best[0]:
            best = (loss, dict(u))
        adam_step(adam, u, gu)
        space.project(u)
        if i % 10 == 0:
            log.info("oracle iter %d chamfer %.6e %s", i, loss,
                     {k: float(v) for k, v in u.items()})
    params = space.to_phys(u, params_init)
    final_loss, _ = objective.evaluate(params, backward=False)
    history.append(final_loss)
    if final_loss < best[0]:
        best = (final_loss, dict(u))
    return ParamResult(
        params=space.to_phys(best[1], params_init),
        loss_history=history,
        best_loss=float(best[0]),
        warm_window=len(objective.gt_clouds),
    )


# ---------------------------------------------------------------------------
# Geometry metric
# ---------------------------------------------------------------------------


def occupancy_iou(field: VoxelField, gt_inside_fn, alpha_cut: float = 0.5) -> float:
    """IoU of thresholded field opacity against an analytic occupancy test.

    ``gt_inside_fn(points (M,3)) -> bool (M,)`` evaluated at voxel centers.
    """
    res = field.res
    dxf = field.dx
    idx = np.indices(res).reshape(3, -1).T
    centers = field.lo + (idx + 0.5) * dxf
    # voxel opacity from the mean of its 8 corner raw densities
    sig = field.sigma
    acc = np.zeros(res)
    for ci in range(2):
        for cj in range(2):
            for ck in range(2):
                acc += sig[ci : ci + res[0], cj : cj + res[1], ck : ck + res[2]]
    a = alpha_of(acc.reshape(-1) / 8.0)
    pred = a >= alpha_cut
    gt = gt_inside_fn(centers)
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    return float(inter) / float(max(union, 1))
