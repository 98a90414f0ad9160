"""Fixed-size linear algebra and interpolation primitives.

Everything here is 3x3 / 3-vector specific: a deterministic Jacobi-based SVD
with a rotation-only sign convention, Hencky strain helpers, and trilinear
interpolation stencils (weights, gradients and Hessians) used by both the
simulator transfers and the voxel field.

The numba-compiled cores are shared with the hot simulation kernels; the
public wrappers validate inputs and raise typed errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import BoundsError, DegenerateDeformationError, InvalidInputError

# ---------------------------------------------------------------------------
# 3x3 SVD
# ---------------------------------------------------------------------------


@dataclass
class Svd3:
    """SVD of a 3x3 matrix with det(U) = det(V) = +1.

    Singular values are sorted descending; if the input has negative
    determinant the reflection is folded into the last singular value,
    which is then the only possibly-negative entry.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.u @ np.diag(self.s) @ self.v.T


@njit(cache=True, fastmath=False)
def _jacobi_eigh3(b, v):
    """Cyclic Jacobi diagonalization of symmetric 3x3 ``b`` in place.

    Accumulates rotations into ``v`` (must start as identity). Deterministic:
    fixed (p, q) sweep order, fixed convergence threshold.
    """
    for _ in range(30):
        off = (
            b[0, 1] * b[0, 1] + b[0, 2] * b[0, 2] + b[1, 2] * b[1, 2]
        )
        scale = (
            b[0, 0] * b[0, 0] + b[1, 1] * b[1, 1] + b[2, 2] * b[2, 2] + 2.0 * off
        )
        if off <= 1e-34 * (scale + 1e-300):
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = b[p, q]
                if apq == 0.0:
                    continue
                app = b[p, p]
                aqq = b[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(3):
                    bkp = b[k, p]
                    bkq = b[k, q]
                    b[k, p] = c * bkp - s * bkq
                    b[k, q] = s * bkp + c * bkq
                for k in range(3):
                    bpk = b[p, k]
                    bqk = b[q, k]
                    b[p, k] = c * bpk - s * bqk
                    b[q, k] = s * bpk + c * bqk
                for k in range(3):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq


@njit(cache=True, fastmath=False)
def svd3_core(m, u, s, v):
    """SVD of 3x3 ``m`` into preallocated ``u`` (3,3), ``s`` (3,), ``v`` (3,3).

    det(u) = det(v) = +1; s descending, s[2] < 0 only when det(m) < 0.
    """
    b = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += m[k, i] * m[k, j]
            b[i, j] = acc
    for i in range(3):
        for j in range(3):
            v[i, j] = 1.0 if i == j else 0.0
    _jacobi_eigh3(b, v)

    # Sort eigenvalues descending; stable 3-element sort keeps tie order
    # deterministic (original column order wins on exact ties).
    e0, e1, e2 = b[0, 0], b[1, 1], b[2, 2]
    i0, i1, i2 = 0, 1, 2
    if e1 > e0:
        e0, e1 = e1, e0
        i0, i1 = i1, i0
    if e2 > e0:
        e0, e2 = e2, e0
        i0, i2 = i2, i0
    if e2 > e1:
        e1, e2 = e2, e1
        i1, i2 = i2, i1
    order = (i0, i1, i2)
    eig = (e0, e1, e2)
    vt = np.empty((3, 3))
    for j in range(3):
        for i in range(3):
            vt[i, j] = v[i, order[j]]
    for i in range(3):
        for j in range(3):
            v[i, j] = vt[i, j]
    for j in range(3):
        s[j] = np.sqrt(eig[j]) if eig[j] > 0.0 else 0.0

    # u = m v / s, with cross-product completion for (near-)rank-deficiency.
    smax = s[0]
    for j in range(3):
        if s[j] > 1e-12 * (smax + 1e-300):
            for i in range(3):
                acc = 0.0
                for k in range(3):
                    acc += m[i, k] * v[k, j]
                u[i, j] = acc / s[j]
        else:
            # Complete an orthonormal frame; only the last columns can land
            # here since s is sorted descending.
            if j == 2:
                u[0, 2] = u[1, 0] * u[2, 1] - u[2, 0] * u[1, 1]
                u[1, 2] = u[2, 0] * u[0, 1] - u[0, 0] * u[2, 1]
                u[2, 2] = u[0, 0] * u[1, 1] - u[1, 0] * u[0, 1]
            elif j == 1:
                # rank <= 1: pick any unit vector orthogonal to u[:,0]
                if abs(u[0, 0]) < 0.9:
                    a0, a1, a2 = 1.0, 0.0, 0.0
                else:
                    a0, a1, a2 = 0.0, 1.0, 0.0
                d = a0 * u[0, 0] + a1 * u[1, 0] + a2 * u[2, 0]
                a0 -= d * u[0, 0]
                a1 -= d * u[1, 0]
                a2 -= d * u[2, 0]
                n = np.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
                u[0, 1] = a0 / n
                u[1, 1] = a1 / n
                u[2, 1] = a2 / n
            else:
                u[0, 0] = 1.0
                u[1, 0] = 0.0
                u[2, 0] = 0.0

    # One modified Gram-Schmidt pass: m @ v / s loses orthogonality at
    # eps * cond(m) which can exceed the 1e-10 contract.
    for j in range(3):
        for k in range(j):
            d = u[0, j] * u[0, k] + u[1, j] * u[1, k] + u[2, j] * u[2, k]
            u[0, j] -= d * u[0, k]
            u[1, j] -= d * u[1, k]
            u[2, j] -= d * u[2, k]
        n = np.sqrt(u[0, j] ** 2 + u[1, j] ** 2 + u[2, j] ** 2)
        if n > 0.0:
            u[0, j] /= n
            u[1, j] /= n
            u[2, j] /= n

    # Fold reflections so det(u) = det(v) = +1.
    detu = (
        u[0, 0] * (u[1, 1] * u[2, 2] - u[1, 2] * u[2, 1])
        - u[0, 1] * (u[1, 0] * u[2, 2] - u[1, 2] * u[2, 0])
        + u[0, 2] * (u[1, 0] * u[2, 1] - u[1, 1] * u[2, 0])
    )
    detv = (
        v[0, 0] * (v[1, 1] * v[2, 2] - v[1, 2] * v[2, 1])
        - v[0, 1] * (v[1, 0] * v[2, 2] - v[1, 2] * v[2, 0])
        + v[0, 2] * (v[1, 0] * v[2, 1] - v[1, 1] * v[2, 0])
    )
    if detu < 0.0 and detv < 0.0:
        for i in range(3):
            u[i, 2] = -u[i, 2]
            v[i, 2] = -v[i, 2]
    elif detu < 0.0:
        for i in range(3):
            u[i, 2] = -u[i, 2]
        s[2] = -s[2]
    elif detv < 0.0:
        for i in range(3):
            v[i, 2] = -v[i, 2]
        s[2] = -s[2]


@njit(cache=True)
def det3(m):
    return (
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


def svd3(m: np.ndarray) -> Svd3:
    """Deterministic SVD of a 3x3 matrix (rotation-only U, V)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise InvalidInputError(f"svd3 expects a 3x3 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("svd3: non-finite entries in input")
    u = np.empty((3, 3))
    s = np.empty(3)
    v = np.empty((3, 3))
    svd3_core(m, u, s, v)
    return Svd3(u, s, v)


def hencky_strain(svd: Svd3) -> np.ndarray:
    """Principal logarithmic (Hencky) strain: log of the singular values."""
    s = np.asarray(svd.s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise DegenerateDeformationError(
            f"hencky_strain: nonpositive singular value in {s}"
        )
    return np.log(s)


# ---------------------------------------------------------------------------
# Trilinear stencils
# ---------------------------------------------------------------------------

# Corner offsets of a cell, fixed order: x fastest-varying last.
CORNERS = np.array(
    [[i, j, k] for i in range(2) for j in range(2) for k in range(2)],
    dtype=np.int64,
)


@dataclass
class TrilinearStencil:
    """The 8 cell-corner nodes and weights interpolating a point."""

    indices: np.ndarray  # (8, 3) int node indices
    weights: np.ndarray  # (8,) float weights, sum to 1


@njit(cache=True, fastmath=False)
def stencil_core(px, py, pz, ox, oy, oz, inv_dx):
    """Cell base index and in-cell fractions for a query point."""
    gx = (px - ox) * inv_dx
    gy = (py - oy) * inv_dx
    gz = (pz - oz) * inv_dx
    bx = int(np.floor(gx))
    by = int(np.floor(gy))
    bz = int(np.floor(gz))
    return bx, by, bz, gx - bx, gy - by, gz - bz


@njit(cache=True, fastmath=False)
def corner_weight(fx, fy, fz, ci, cj, ck):
    wx = fx if ci == 1 else 1.0 - fx
    wy = fy if cj == 1 else 1.0 - fy
    wz = fz if ck == 1 else 1.0 - fz
    return wx * wy * wz


@njit(cache=True, fastmath=False)
def corner_weight_grad(fx, fy, fz, ci, cj, ck, inv_dx, out):
    """Weight and its spatial gradient for one cell corner.

    The gradient is with respect to the query point (units 1/m).
    """
    wx = fx if ci == 1 else 1.0 - fx
    wy = fy if cj == 1 else 1.0 - fy
    wz = fz if ck == 1 else 1.0 - fz
    dx_ = inv_dx if ci == 1 else -inv_dx
    dy_ = inv_dx if cj == 1 else -inv_dx
    dz_ = inv_dx if ck == 1 else -inv_dx
    out[0] = dx_ * wy * wz
    out[1] = wx * dy_ * wz
    out[2] = wx * wy * dz_
    return wx * wy * wz


@njit(cache=True, fastmath=False)
def corner_weight_hess(fx, fy, fz, ci, cj, ck, inv_dx, h):
    """Hessian of one corner weight wrt the query point (3x3, zero diagonal)."""
    wx = fx if ci == 1 else 1.0 - fx
    wy = fy if cj == 1 else 1.0 - fy
    wz = fz if ck == 1 else 1.0 - fz
    dx_ = inv_dx if ci == 1 else -inv_dx
    dy_ = inv_dx if cj == 1 else -inv_dx
    dz_ = inv_dx if ck == 1 else -inv_dx
    h[0, 0] = 0.0
    h[1, 1] = 0.0
    h[2, 2] = 0.0
    h[0, 1] = dx_ * dy_ * wz
    h[1, 0] = h[0, 1]
    h[0, 2] = dx_ * wy * dz_
    h[2, 0] = h[0, 2]
    h[1, 2] = wx * dy_ * dz_
    h[2, 1] = h[1, 2]


def trilinear_stencil(
    x: np.ndarray, dx: float, origin: np.ndarray, dims: tuple[int, int, int]
) -> TrilinearStencil:
    """Stencil of the cell containing ``x`` on a node grid of shape ``dims``.

    ``dims`` counts nodes per axis; the query must lie at least one cell
    inside the grid boundary.
    """
    x = np.asarray(x, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("trilinear_stencil: non-finite query point")
    bx, by, bz, fx, fy, fz = stencil_core(
        x[0], x[1], x[2], origin[0], origin[1], origin[2], 1.0 / dx
    )
    base = np.array([bx, by, bz], dtype=np.int64)
    hi = np.array(dims, dtype=np.int64) - 2
    if np.any(base < 1) or np.any(base > hi - 1):
        raise BoundsError(
            f"trilinear_stencil: query {x} outside one-cell inset of grid {dims}"
        )
    indices = base[None, :] + CORNERS
    f = np.array([fx, fy, fz])
    w1 = np.where(CORNERS == 1, f[None, :], 1.0 - f[None, :])
    weights = w1[:, 0] * w1[:, 1] * w1[:, 2]
    return TrilinearStencil(indices=indices, weights=weights)
