"""Reverse-mode differentiation of simulate-then-observe losses.

The forward pass checkpoints particle state at video-frame granularity.
The backward pass revisits frames last to first: it re-runs the frame's
substeps from the previous checkpoint (bit-identical, since all kernels are
deterministic), stores the per-substep states, then walks the substeps in
reverse through hand-written adjoint kernels.

Gradients are produced for the packed material parameter vector, the initial
particle velocities and affine matrices, and (through the per-frame loss
adjoints) anything upstream of particle positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import _adjoint_kernels as AK
from . import _sim_kernels as SK
from .errors import NanGradientError
from .materials import NK, MaterialParams, pack_kernel_params
from .mpm_core import (
    Collider,
    MpmGrid,
    ParticleState,
    _raise_kernel_error,
    clampable_mask,
    pack_colliders,
)

STATE_KEYS = ("x", "v", "F", "C", "U", "S", "V")


@dataclass
class SimSession:
    """Immutable description of one differentiable simulation run."""

    params: MaterialParams
    colliders: list[Collider]
    gravity: np.ndarray
    grid: MpmGrid
    dt_frame: float
    substeps: int
    mass_eps: float = 0.0

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        self.family, self.kp = pack_kernel_params(self.params)
        self.packed_colliders = pack_colliders(self.colliders)
        self.dims = np.array(self.grid.dims, dtype=np.int64)

    def clampable(self, state: ParticleState) -> np.ndarray:
        return clampable_mask(self.family, state.alpha)

    @property
    def dt(self) -> float:
        return self.dt_frame / self.substeps


@dataclass
class AdjointTape:
    """Per-frame checkpoints of the dynamic particle state."""

    session: SimSession
    state: ParticleState
    checkpoints: list[dict[str, np.ndarray]] = dc_field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.checkpoints) - 1


def _forward_substep(sess: SimSession, st: dict[str, np.ndarray], consts, tau):
    SK.compute_stress(sess.family, sess.kp, st["F"], st["C"], st["U"], st["S"], tau, st["x"].shape[0])
    code = SK.p2g(
        st["x"], st["v"], st["C"], tau, consts["mass"], consts["vol_a3"],
        sess.dt, sess.grid.dx, sess.grid.origin, sess.dims, sess.grid.gm, sess.grid.gmom,
    )
    _raise_kernel_error(code, "p2g")
    SK.grid_update(
        sess.grid.gm, sess.grid.gmom, sess.grid.gv, sess.dt, sess.gravity,
        sess.grid.dx, sess.grid.origin, sess.dims, sess.mass_eps, *sess.packed_colliders,
    )
    code = SK.g2p(
        st["x"], st["v"], st["C"], st["F"], st["U"], st["S"], st["V"],
        sess.grid.gv, sess.dt, sess.grid.dx, sess.grid.origin, sess.dims,
        sess.family, sess.kp, consts["clampable"],
    )
    _raise_kernel_error(code, "g2p")


def simulate_forward(
    sess: SimSession,
    state: ParticleState,
    n_frames: int,
    frame_cb: Callable[[int, ParticleState], None] | None = None,
) -> AdjointTape:
    """Run the simulation, checkpointing after every frame.

    ``frame_cb`` is invoked with (frame_index, state) after each frame,
    including frame 0 before any stepping.
    """
    tape = AdjointTape(session=sess, state=state)
    tape.checkpoints.append(state.dynamic_copy())
    if frame_cb is not None:
        frame_cb(0, state)
    consts = {"mass": state.mass, "vol_a3": state.vol_a3,
              "clampable": sess.clampable(state)}
    tau = np.empty((state.n, 3, 3))
    st = {k: getattr(state, k) for k in STATE_KEYS}
    for t in range(1, n_frames + 1):
        for _ in range(sess.substeps):
            _forward_substep(sess, st, consts, tau)
        tape.checkpoints.append(state.dynamic_copy())
        if frame_cb is not None:
            frame_cb(t, state)
    return tape


@dataclass
class SimGradients:
    theta: np.ndarray  # packed parameter-vector gradient (materials layout)
    x0: np.ndarray  # (n, 3) adjoint of initial positions
    v0: np.ndarray  # (n, 3) adjoint of initial velocities
    C0: np.ndarray  # (n, 3, 3) adjoint of initial affine matrices


def simulate_backward(
    tape: AdjointTape,
    frame_xbar: Callable[[int, dict[str, np.ndarray]], np.ndarray | None],
) -> SimGradients:
    """Backpropagate through all checkpointed frames.

    ``frame_xbar(t, snapshot)`` returns the adjoint of the loss wrt particle
    positions at frame t (or None when the frame carries no loss).
    """
    sess = tape.session
    state = tape.state
    n = state.x.shape[0]
    nsub = sess.substeps
    consts = {"mass": state.mass, "vol_a3": state.vol_a3,
              "clampable": sess.clampable(state)}
    tau = np.empty((n, 3, 3))
    taubar = np.empty((n, 3, 3))

    adj = {
        "x": np.zeros((n, 3)),
        "v": np.zeros((n, 3)),
        "C": np.zeros((n, 3, 3)),
        "F": np.zeros((n, 3, 3)),
    }
    theta_bar = np.zeros(NK)
    gvbar = np.zeros(sess.grid.dims + (3,))
    gmombar = np.zeros(sess.grid.dims + (3,))
    gmbar = np.zeros(sess.grid.dims)

    # per-substep state stack for one frame
    stack = {
        k: np.empty((nsub + 1,) + tape.checkpoints[0][k].shape) for k in STATE_KEYS
    }

    for t in range(tape.n_frames, 0, -1):
        xb = frame_xbar(t, tape.checkpoints[t])
        if xb is not None:
            adj["x"] += xb
        # recompute the frame's substeps from the previous checkpoint
        st = {k: tape.checkpoints[t - 1][k].copy() for k in STATE_KEYS}
        for k in STATE_KEYS:
            stack[k][0] = st[k]
        for s in range(nsub):
            _forward_substep(sess, st, consts, tau)
            for k in STATE_KEYS:
                stack[k][s + 1] = st[k]
        # reverse sweep
        for s in range(nsub - 1, -1, -1):
            sin = {k: stack[k][s] for k in STATE_KEYS}
            # forward intermediates at substep s
            SK.compute_stress(
                sess.family, sess.kp, sin["F"], sin["C"], sin["U"], sin["S"], tau, n
            )
            code = SK.p2g(
                sin["x"], sin["v"], sin["C"], tau, consts["mass"], consts["vol_a3"],
                sess.dt, sess.grid.dx, sess.grid.origin, sess.dims,
                sess.grid.gm, sess.grid.gmom,
            )
            _raise_kernel_error(code, "p2g(backward recompute)")
            SK.grid_update(
                sess.grid.gm, sess.grid.gmom, sess.grid.gv, sess.dt, sess.gravity,
                sess.grid.dx, sess.grid.origin, sess.dims, sess.mass_eps,
                *sess.packed_colliders,
            )
            # adjoints
            xbar_in = np.zeros((n, 3))
            fbar_in = np.zeros((n, 3, 3))
            gvbar[:] = 0.0
            AK.g2p_backward(
                sin["x"], sin["F"], sess.grid.gv, sess.dt, sess.grid.dx,
                sess.grid.origin, sess.dims, sess.family, sess.kp,
                adj["x"], adj["v"], adj["C"], adj["F"],
                xbar_in, fbar_in, gvbar, theta_bar,
            )
            AK.grid_backward(
                sess.grid.gm, sess.grid.gmom, gvbar, sess.dt, sess.gravity,
                sess.grid.dx, sess.grid.origin, sess.dims, sess.mass_eps,
                *sess.packed_colliders, gmombar, gmbar,
            )
            vbar_in = np.zeros((n, 3))
            cbar_in = np.zeros((n, 3, 3))
            AK.p2g_backward(
                sin["x"], sin["v"], sin["C"], tau, consts["mass"], consts["vol_a3"],
                sess.dt, sess.grid.dx, sess.grid.origin, sess.dims,
                gmombar, gmbar, xbar_in, vbar_in, cbar_in, taubar,
            )
            AK.stress_backward(
                sess.family, sess.kp, sin["F"], sin["C"], sin["U"], sin["S"], sin["V"],
                taubar, fbar_in, cbar_in, theta_bar, n,
            )
            adj["x"] = xbar_in
            adj["v"] = vbar_in
            adj["C"] = cbar_in
            adj["F"] = fbar_in
        for key in ("x", "v", "C", "F"):
            if not np.all(np.isfinite(adj[key])):
                raise NanGradientError(
                    f"non-finite adjoint of particle {key} while backpropagating frame {t}"
                )
    if not np.all(np.isfinite(theta_bar)):
        raise NanGradientError("non-finite material parameter adjoint")
    return SimGradients(theta=theta_bar, x0=adj["x"], v0=adj["v"], C0=adj["C"])


# ---------------------------------------------------------------------------
# Chain rules from the packed kernel vector to primitive material parameters
# ---------------------------------------------------------------------------


def lame_chain(E: float, nu: float, gmu: float, glam: float) -> tuple[float, float]:
    """(dL/dE, dL/dnu) from adjoints of the Lame parameters."""
    a = 1.0 + nu
    b = 1.0 - 2.0 * nu
    dmu_dE = 1.0 / (2.0 * a)
    dmu_dnu = -E / (2.0 * a * a)
    dlam_dE = nu / (a * b)
    dlam_dnu = E * (a * b - nu * (b - 2.0 * a)) / (a * a * b * b)
    return gmu * dmu_dE + glam * dlam_dE, gmu * dmu_dnu + glam * dlam_dnu


def theta_to_param_grads(params: MaterialParams, theta_bar: np.ndarray) -> dict[str, float]:
    """Map packed-vector adjoints onto the material's primitive parameters."""
    fam = params.family
    if fam == "elastic":
        gE, gnu = lame_chain(params.E, params.nu, theta_bar[0], theta_bar[1])
        return {"E": gE, "nu": gnu}
    if fam == "plasticine":
        gE, gnu = lame_chain(params.E, params.nu, theta_bar[0], theta_bar[1])
        return {"E": gE, "nu": gnu, "tau_y": float(theta_bar[2])}
    if fam == "newtonian":
        return {"mu": float(theta_bar[5]), "kappa": float(theta_bar[4])}
    if fam == "non_newtonian":
        # mu_lame = mu ; lambda = kappa - 2 mu / 3
        return {
            "mu": float(theta_bar[0] - 2.0 / 3.0 * theta_bar[1]),
            "kappa": float(theta_bar[1]),
            "tau_y": float(theta_bar[2]),
            "eta": float(theta_bar[3]),
        }
    if fam == "sand":
        th = np.deg2rad(params.theta_fric)
        dalpha_dtheta = np.sqrt(2.0 / 3.0) * 6.0 * np.cos(th) / (3.0 - np.sin(th)) ** 2
        return {"theta_fric": float(theta_bar[6] * dalpha_dtheta * np.pi / 180.0)}
    raise ValueError(f"unknown family {fam}")


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    name: str
    adjoint: float
    fd: float

    @property
    def rel_error(self) -> float:
        return abs(self.adjoint - self.fd) / max(abs(self.adjoint), abs(self.fd), 1e-12)


def grad_check(
    loss_fn: Callable[[dict[str, float]], float],
    grad_fn: Callable[[dict[str, float]], dict[str, float]],
    point: dict[str, float],
    names: list[str] | None = None,
    h: float = 1e-4,
) -> list[GradReport]:
    """Central-difference comparison of an adjoint gradient at ``point``.

    Both callables take a flat name->value dict (already in the optimizer's
    working space, e.g. log10 for moduli). Reports are sorted worst first.
    """
    grads = grad_fn(dict(point))
    reports = []
    for name in names or sorted(point.keys()):
        p_hi = dict(point)
        p_lo = dict(point)
        p_hi[name] = point[name] + h
        p_lo[name] = point[name] - h
        fd = (loss_fn(p_hi) - loss_fn(p_lo)) / (2.0 * h)
        reports.append(GradReport(name=name, adjoint=float(grads[name]), fd=float(fd)))
    reports.sort(key=lambda r: r.rel_error, reverse=True)
    return reports


def reports_to_csv(reports: list[GradReport]) -> str:
    lines = ["parameter,adjoint,fd,rel_error"]
    for r in reports:
        lines.append(f"{r.name},{r.adjoint!r},{r.fd!r},{r.rel_error!r}")
    return "\n".join(lines) + "\n"
