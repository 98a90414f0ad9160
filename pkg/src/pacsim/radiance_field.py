"""Voxel radiance representation: raw density grid, color-feature grid and the
shallow view-dependent color network.

Grids store node values; ``res`` counts cells per axis, so arrays have
``res + 1`` nodes per axis and the bounding box spans the node lattice
exactly. Raw density is pre-softplus; empty space is marked with a large
negative raw value so the activated density underflows to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError

SIGMA_EMPTY = -40.0  # raw density marking empty space; softplus(-40) ~ 4e-18
FEAT_DIM = 12
N_FREQS = 4  # direction encoding frequencies: 4 x sin/cos x 3 = 24 entries
NET_HIDDEN = 128
NET_INPUT = FEAT_DIM + 3 + 6 * N_FREQS  # 39


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_grad(x):
    # d/dx softplus = sigmoid
    x = np.asarray(x, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-x))


def alpha_of(sigma_hat):
    """Per-particle opacity surrogate: 1 - exp(-softplus(raw density))."""
    return 1.0 - np.exp(-softplus(sigma_hat))


def posenc_dir(d: np.ndarray) -> np.ndarray:
    """Sin/cos encoding of a unit direction, N_FREQS octaves: 24 entries."""
    d = np.asarray(d, dtype=np.float64)
    freqs = 2.0 ** np.arange(N_FREQS)
    ang = d[..., None, :] * freqs[:, None]  # (..., 4, 3)
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 4, 6)
    return enc.reshape(*d.shape[:-1], 6 * N_FREQS)


@dataclass
class ColorNet:
    """Two dense layers (39 -> 128 relu -> 3 sigmoid) for view-dependent color."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def create(seed: int = 0) -> "ColorNet":
        rng = np.random.default_rng(seed)
        lim1 = 1.0 / np.sqrt(NET_INPUT)
        lim2 = 1.0 / np.sqrt(NET_HIDDEN)
        return ColorNet(
            w1=rng.uniform(-lim1, lim1, (NET_HIDDEN, NET_INPUT)),
            b1=rng.uniform(-lim1, lim1, NET_HIDDEN),
            w2=rng.uniform(-lim2, lim2, (3, NET_HIDDEN)),
            b2=rng.uniform(-lim2, lim2, 3),
        )

    @staticmethod
    def zeros() -> "ColorNet":
        return ColorNet(
            np.zeros((NET_HIDDEN, NET_INPUT)), np.zeros(NET_HIDDEN),
            np.zeros((3, NET_HIDDEN)), np.zeros(3),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        """Forward on (..., 39) inputs; output rgb in [0, 1]^3."""
        h = np.maximum(inputs @ self.w1.T + self.b1, 0.0)
        z = h @ self.w2.T + self.b2
        return 1.0 / (1.0 + np.exp(-z))


def make_net_input(feat: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Assemble (feature, direction, encoded direction) rows; width 39."""
    feat = np.atleast_2d(feat)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), (feat.shape[0], 3))
    return np.concatenate([feat, d, posenc_dir(d)], axis=-1)


@dataclass
class VoxelField:
    """Eulerian grids of raw density and color features over a box."""

    sigma: np.ndarray  # (nx+1, ny+1, nz+1)
    feat: np.ndarray  # (nx+1, ny+1, nz+1, FEAT_DIM)
    lo: np.ndarray  # (3,) box lower corner, m
    hi: np.ndarray  # (3,) box upper corner, m

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if any(n < 5 for n in self.sigma.shape):
            raise ConfigError(f"field resolution {self.res} below minimum of 4 cells")

    @property
    def res(self) -> tuple[int, int, int]:
        return tuple(n - 1 for n in self.sigma.shape)

    @property
    def dx(self) -> float:
        return float((self.hi[0] - self.lo[0]) / self.res[0])

    @staticmethod
    def empty(res: int | tuple[int, int, int], lo, hi, sigma0: float = SIGMA_EMPTY) -> "VoxelField":
        if isinstance(res, int):
            res = (res, res, res)
        shape = tuple(r + 1 for r in res)
        return VoxelField(
            sigma=np.full(shape, sigma0, dtype=np.float64),
            feat=np.zeros(shape + (FEAT_DIM,), dtype=np.float64),
            lo=np.asarray(lo, dtype=np.float64),
            hi=np.asarray(hi, dtype=np.float64),
        )


def _interp_weights(field: VoxelField, x: np.ndarray):
    """Clamped cell base indices and fractions for (N, 3) query points."""
    res = np.array(field.res)
    g = (x - field.lo) / (field.hi - field.lo) * res
    base = np.floor(g).astype(np.int64)
    base = np.clip(base, 0, res - 1)
    f = g - base
    return base, f


def trilerp(grid: np.ndarray, field: VoxelField, x: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of node ``grid`` at points ``x`` (N, 3).

    Points are assumed inside the box; callers handle outside queries.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    base, f = _interp_weights(field, x)
    out = None
    for ci in range(2):
        wx = f[:, 0] if ci else 1.0 - f[:, 0]
        for cj in range(2):
            wy = f[:, 1] if cj else 1.0 - f[:, 1]
            for ck in range(2):
                wz = f[:, 2] if ck else 1.0 - f[:, 2]
                w = wx * wy * wz
                vals = grid[base[:, 0] + ci, base[:, 1] + cj, base[:, 2] + ck]
                term = w[:, None] * vals[..., None] if vals.ndim == 1 else w[:, None] * vals
                out = term if out is None else out + term
    return out


def inside_box(field: VoxelField, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.all((x >= field.lo) & (x <= field.hi), axis=-1)


def density_at(field: VoxelField, x: np.ndarray) -> np.ndarray:
    """Activated density at world points; exactly zero outside the box."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ins = inside_box(field, x)
    out = np.zeros(x.shape[0])
    if np.any(ins):
        raw = trilerp(field.sigma, field, x[ins])[:, 0]
        out[ins] = softplus(raw)
    return out


def color_at(field: VoxelField, net: ColorNet, x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """View-dependent color at world points for view direction ``d``."""
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInputError("view direction must be a nonzero finite vector")
    if abs(n - 1.0) > 1e-9:
        import warnings

        warnings.warn("view direction not unit length; normalizing")
        d = d / n
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feat = trilerp(field.feat, field, x)
    return net.apply(make_net_input(feat, d))


def upsample(field: VoxelField, new_res: int | tuple[int, int, int]) -> VoxelField:
    """Trilinear refinement onto a finer node lattice over the same box."""
    if isinstance(new_res, int):
        new_res = (new_res, new_res, new_res)
    old_res = field.res
    if any(n < o for n, o in zip(new_res, old_res)):
        raise InvalidInputError(f"upsample cannot shrink {old_res} -> {new_res}")
    shape = tuple(r + 1 for r in new_res)
    axes = [np.linspace(field.lo[a], field.hi[a], shape[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
    sigma = trilerp(field.sigma, field, pts)[:, 0].reshape(shape)
    feat = trilerp(field.feat, field, pts).reshape(shape + (FEAT_DIM,))
    return VoxelField(sigma=sigma, feat=feat, lo=field.lo.copy(), hi=field.hi.copy())
