"""Differentiable volume rendering of the voxel field along camera rays,
the photometric loss, and the surface regularizer.

Rendering composites uniformly spaced samples front to back; the leftover
transmittance is assigned to a constant background color, so the compositing
weights always form a convex combination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _render_kernels as RK
from . import _sim_kernels as SK
from .errors import InvalidInputError
from .radiance_field import ColorNet, VoxelField, posenc_dir

MAX_SAMPLES_PER_RAY = 4096


@dataclass
class Camera:
    """Pinhole camera; pose maps camera coordinates to world coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rot: np.ndarray  # (3,3) world-from-camera rotation (x right, y down, z forward)
    pos: np.ndarray  # (3,) camera center in world

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.pos = np.asarray(self.pos, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if np.linalg.norm(self.rot @ self.rot.T - np.eye(3)) > 1e-8:
            raise InvalidInputError("camera rotation not orthonormal")

    @staticmethod
    def look_at(eye, target, width: int, height: int, fov_deg: float, up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        rn = np.linalg.norm(right)
        if rn < 1e-9:  # looking straight along up: pick an arbitrary right
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
            rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return Camera(
            fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
            width=width, height=height, rot=rot, pos=eye,
        )

    def rays(self, pixel_ids: np.ndarray | None = None):
        """Ray origins and unit directions; pixels are row-major indices."""
        if pixel_ids is None:
            pixel_ids = np.arange(self.width * self.height)
        rows = pixel_ids // self.width
        cols = pixel_ids % self.width
        dc = np.stack(
            [
                (cols + 0.5 - self.cx) / self.fx,
                (rows + 0.5 - self.cy) / self.fy,
                np.ones_like(cols, dtype=np.float64),
            ],
            axis=-1,
        )
        d = dc @ self.rot.T
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.pos, d.shape).copy()
        return o, d

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rot": self.rot.tolist(), "pos": self.pos.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=int(d["width"]), height=int(d["height"]),
            rot=np.array(d["rot"], dtype=np.float64),
            pos=np.array(d["pos"], dtype=np.float64),
        )


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    s_near: float = 0.0
    s_far: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            self.direction = self.direction / n
        if not self.s_near < self.s_far:
            raise InvalidInputError("ray requires s_near < s_far")


@dataclass
class RenderContext:
    """Per-sample buffers retained for the backward pass."""

    origins: np.ndarray
    dirs: np.ndarray
    delta: float
    count: np.ndarray
    t_end: np.ndarray
    spos: np.ndarray
    salpha: np.ndarray
    strans: np.ndarray
    scolor: np.ndarray
    mask: np.ndarray  # (R, kmax) valid-sample mask
    ray_of: np.ndarray  # (M,) ray index per compact sample
    net_in: np.ndarray  # (M, 39)
    hidden: np.ndarray  # (M, 128) post-relu
    colors: np.ndarray  # (R, 3) output
    c_bg: np.ndarray


def _net_forward(net: ColorNet, net_in: np.ndarray):
    h = np.maximum(net_in @ net.w1.T + net.b1, 0.0)
    c = 1.0 / (1.0 + np.exp(-(h @ net.w2.T + net.b2)))
    return h, c


def net_backward(net: ColorNet, net_in, hidden, colors, cbar):
    """Adjoints of the two-layer network; returns (param grads, input grads)."""
    zbar2 = cbar * colors * (1.0 - colors)
    gw2 = zbar2.T @ hidden
    gb2 = zbar2.sum(axis=0)
    hbar = zbar2 @ net.w2
    zbar1 = np.where(hidden > 0.0, hbar, 0.0)
    gw1 = zbar1.T @ net_in
    gb1 = zbar1.sum(axis=0)
    inbar = zbar1 @ net.w1
    return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}, inbar


def render_rays(
    field: VoxelField,
    net: ColorNet,
    origins: np.ndarray,
    dirs: np.ndarray,
    c_bg,
    delta: float | None = None,
    tnear: np.ndarray | None = None,
    tfar: np.ndarray | None = None,
    jitter: np.ndarray | None = None,
) -> tuple[np.ndarray, RenderContext]:
    """Render a batch of rays; returns colors (R,3) and the backward context."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    nrays = origins.shape[0]
    c_bg = np.asarray(c_bg, dtype=np.float64)
    if delta is None:
        delta = 0.5 * field.dx
    if tnear is None:
        tnear = np.zeros(nrays)
    if tfar is None:
        tfar = np.full(nrays, np.inf)
    if jitter is None:
        jitter = np.full(nrays, 0.5)
    diag = float(np.linalg.norm(field.hi - field.lo))
    kmax = min(int(np.ceil(diag / delta)) + 2, MAX_SAMPLES_PER_RAY)
    dims = np.array(field.sigma.shape, dtype=np.int64)

    count = np.zeros(nrays, dtype=np.int64)
    t_end = np.ones(nrays)
    spos = np.zeros((nrays, kmax, 3))
    salpha = np.zeros((nrays, kmax))
    strans = np.zeros((nrays, kmax))
    RK.collect_samples(
        origins, dirs, tnear, tfar, jitter, field.sigma, dims,
        field.lo, field.hi, field.dx, delta, kmax, count, t_end, spos, salpha, strans,
    )

    mask = np.arange(kmax)[None, :] < count[:, None]
    ray_of = np.nonzero(mask)[0]
    m = ray_of.shape[0]
    scolor = np.zeros((nrays, kmax, 3))
    if m > 0:
        pts = spos[mask]
        feat = np.empty((m, field.feat.shape[-1]))
        SK.field_gather(pts, field.feat, dims, field.dx, field.lo, feat)
        denc = posenc_dir(dirs)
        net_in = np.concatenate([feat, dirs[ray_of], denc[ray_of]], axis=1)
        hidden, cs = _net_forward(net, net_in)
        scolor[mask] = cs
    else:
        net_in = np.zeros((0, 3 + field.feat.shape[-1] + posenc_dir(np.zeros(3)).shape[-1]))
        hidden = np.zeros((0, net.b1.shape[0]))

    colors = np.empty((nrays, 3))
    RK.composite(count, salpha, strans, t_end, scolor, c_bg, colors)
    ctx = RenderContext(
        origins=origins, dirs=dirs, delta=delta, count=count, t_end=t_end,
        spos=spos, salpha=salpha, strans=strans, scolor=scolor, mask=mask,
        ray_of=ray_of, net_in=net_in, hidden=hidden, colors=colors, c_bg=c_bg,
    )
    return colors, ctx


def render_rays_backward(
    field: VoxelField,
    net: ColorNet,
    ctx: RenderContext,
    cbar: np.ndarray,
    want_net_grads: bool = True,
):
    """Adjoints of ray colors wrt the density grid, feature grid and network."""
    dims = np.array(field.sigma.shape, dtype=np.int64)
    sigma_bar = np.zeros_like(field.sigma)
    ccolor_bar = np.zeros_like(ctx.scolor)
    RK.backward_alpha(
        ctx.count, ctx.salpha, ctx.strans, ctx.spos, ctx.scolor, ctx.c_bg,
        np.ascontiguousarray(cbar, dtype=np.float64), field.sigma, dims,
        field.lo, field.dx, ctx.delta, sigma_bar, ccolor_bar,
    )
    feat_bar_grid = np.zeros_like(field.feat)
    net_grads = {k: np.zeros_like(v) for k, v in net.params().items()}
    m = ctx.ray_of.shape[0]
    if m > 0:
        csbar = ccolor_bar[ctx.mask]
        grads, inbar = net_backward(net, ctx.net_in, ctx.hidden, ctx.scolor[ctx.mask], csbar)
        if want_net_grads:
            net_grads = grads
        featbar = np.ascontiguousarray(inbar[:, : field.feat.shape[-1]])
        RK.scatter_grad_multichannel(
            ctx.spos[ctx.mask], featbar, dims, field.dx, field.lo, feat_bar_grid
        )
    return sigma_bar, feat_bar_grid, net_grads


def render_pixel(field: VoxelField, net: ColorNet, ray: Ray, c_bg, delta: float | None = None):
    """Single-ray convenience wrapper."""
    colors, _ = render_rays(
        field, net, ray.origin[None, :], ray.direction[None, :], c_bg,
        delta=delta, tnear=np.array([ray.s_near]), tfar=np.array([min(ray.s_far, 1e30)]),
    )
    return colors[0]


def render_image(
    field: VoxelField,
    net: ColorNet,
    camera: Camera,
    c_bg,
    delta: float | None = None,
    chunk: int = 8192,
    with_aux: bool = False,
):
    """Full-frame render; optionally also the terminal transmittance map."""
    npix = camera.width * camera.height
    img = np.empty((npix, 3))
    tend = np.empty(npix)
    for s in range(0, npix, chunk):
        ids = np.arange(s, min(s + chunk, npix))
        o, d = camera.rays(ids)
        colors, ctx = render_rays(field, net, o, d, c_bg, delta=delta)
        img[ids] = colors
        tend[ids] = ctx.t_end
    img = img.reshape(camera.height, camera.width, 3)
    if with_aux:
        return img, tend.reshape(camera.height, camera.width)
    return img


def render_loss(rendered, observed, weights=None) -> float:
    """Mean over frames of (weighted) mean squared color error over rays."""
    if len(rendered) != len(observed):
        raise InvalidInputError(
            f"frame count mismatch: {len(rendered)} rendered vs {len(observed)} observed"
        )
    total = 0.0
    for i, (r, o) in enumerate(zip(rendered, observed)):
        r = np.asarray(r, dtype=np.float64)
        o = np.asarray(o, dtype=np.float64)
        if r.shape != o.shape:
            raise InvalidInputError(f"frame {i}: shape {r.shape} vs {o.shape}")
        sq = ((r - o) ** 2).reshape(-1, 3).sum(axis=1)
        if weights is None:
            total += sq.mean()
        else:
            w = np.asarray(weights[i], dtype=np.float64).reshape(-1)
            total += float((w * sq).sum() / w.sum())
    return total / max(len(rendered), 1)


def surface_regularizer(alpha_p: np.ndarray, dx: float) -> float:
    """Total-surface-area proxy: sum of clamped opacities times (dx/2)^2."""
    a = np.clip(np.asarray(alpha_p, dtype=np.float64), 1e-4, 1e-1)
    return float(a.sum() * (dx / 2.0) ** 2)


def surface_regularizer_grad(alpha_p: np.ndarray, dx: float) -> np.ndarray:
    """d regularizer / d alpha_p (zero outside the clamp window)."""
    a = np.asarray(alpha_p, dtype=np.float64)
    return np.where((a > 1e-4) & (a < 1e-1), (dx / 2.0) ** 2, 0.0)
