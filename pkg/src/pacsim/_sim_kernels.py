"""numba forward kernels for the hybrid particle/grid simulation step.

Conventions shared with the adjoint kernels:

- Grids store node values, ``dims`` counts nodes per axis; cell size ``dx``.
- Transfers use trilinear weights. Stress forces use the affine-fused form
  momentum += w * (-dt V tau) * (4/dx^2) (x_i - x_p): the weight factor
  guarantees that a node's momentum increment vanishes with its mass share,
  which keeps nearly massless nodes at bounded velocities. The affine
  velocity matrix is gathered with the analytic weight gradient,
  C = sum v_i (grad w_i)^T, which reproduces linear velocity fields exactly.
- All scatters run serially so accumulation order is deterministic.
- Kernels return error codes instead of raising: 0 ok, otherwise the
  (1-based) particle index that left the valid region, negated for inversion
  errors.
"""

import numpy as np
from numba import njit

from .materials import (
    ELASTIC,
    NEWTONIAN,
    NON_NEWTONIAN,
    PLASTICINE,
    SAND,
    tau_neo_hookean,
    tau_newtonian,
    tau_stvk_from_svd,
    z_drucker_prager,
    z_von_mises,
    z_viscoplastic,
)
from .math_kernels import det3, svd3_core

BORDER_BAND = 2  # nodes at the domain edge where outward velocity is removed
DET_MIN = 1e-10
SVAL_MIN = 1e-4


@njit(cache=True, fastmath=False)
def compute_stress(family, kp, F, C, U, S, tau, n):
    """Kirchhoff stress per particle into ``tau`` (n,3,3)."""
    for p in range(n):
        if family == ELASTIC:
            tau_neo_hookean(F[p], kp[0], kp[1], tau[p])
        elif family == NEWTONIAN:
            J = det3(F[p])
            tau_newtonian(J, C[p], kp[5], kp[4], tau[p])
        else:
            tau_stvk_from_svd(U[p], S[p], kp[0], kp[1], tau[p])
    return 0


@njit(cache=True, fastmath=False)
def p2g(x, v, C, tau, mass, vol_a3, dt, dx, origin, dims, gm, gmom):
    """Scatter mass, affine momentum and stress forces to the grid."""
    n = x.shape[0]
    inv_dx = 1.0 / dx
    gm[:, :, :] = 0.0
    gmom[:, :, :, :] = 0.0
    for p in range(n):
        gx = (x[p, 0] - origin[0]) * inv_dx
        gy = (x[p, 1] - origin[1]) * inv_dx
        gz = (x[p, 2] - origin[2]) * inv_dx
        bx = int(np.floor(gx))
        by = int(np.floor(gy))
        bz = int(np.floor(gz))
        if (
            bx < 1
            or by < 1
            or bz < 1
            or bx > dims[0] - 3
            or by > dims[1] - 3
            or bz > dims[2] - 3
        ):
            return p + 1
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        m = mass[p]
        # A = -dt (4/dx^2) V0 alpha^3 tau : affine-fused force coefficient
        s = -dt * 4.0 * inv_dx * inv_dx * vol_a3[p]
        a00 = s * tau[p, 0, 0]
        a01 = s * tau[p, 0, 1]
        a02 = s * tau[p, 0, 2]
        a10 = s * tau[p, 1, 0]
        a11 = s * tau[p, 1, 1]
        a12 = s * tau[p, 1, 2]
        a20 = s * tau[p, 2, 0]
        a21 = s * tau[p, 2, 1]
        a22 = s * tau[p, 2, 2]
        for ci in range(2):
            wx = fx if ci == 1 else 1.0 - fx
            rx = (ci - fx) * dx
            for cj in range(2):
                wy = fy if cj == 1 else 1.0 - fy
                ry = (cj - fy) * dx
                for ck in range(2):
                    wz = fz if ck == 1 else 1.0 - fz
                    rz = (ck - fz) * dx
                    w = wx * wy * wz
                    ii = bx + ci
                    jj = by + cj
                    kk = bz + ck
                    gm[ii, jj, kk] += w * m
                    wm = w * m
                    gmom[ii, jj, kk, 0] += (
                        wm * (v[p, 0] + C[p, 0, 0] * rx + C[p, 0, 1] * ry + C[p, 0, 2] * rz)
                        + w * (a00 * rx + a01 * ry + a02 * rz)
                    )
                    gmom[ii, jj, kk, 1] += (
                        wm * (v[p, 1] + C[p, 1, 0] * rx + C[p, 1, 1] * ry + C[p, 1, 2] * rz)
                        + w * (a10 * rx + a11 * ry + a12 * rz)
                    )
                    gmom[ii, jj, kk, 2] += (
                        wm * (v[p, 2] + C[p, 2, 0] * rx + C[p, 2, 1] * ry + C[p, 2, 2] * rz)
                        + w * (a20 * rx + a21 * ry + a22 * rz)
                    )
    return 0


@njit(cache=True, fastmath=False)
def apply_collider_to_velocity(
    vx, vy, vz, px, py, pz, ctype, ca, cb, cr, cmode, cfric
):
    """Project one node velocity against one collider. Returns new velocity."""
    # signed distance and outward normal
    if ctype == 0:  # half space: ca = normal, cr = offset
        phi = ca[0] * px + ca[1] * py + ca[2] * pz - cr
        nx_, ny_, nz_ = ca[0], ca[1], ca[2]
    else:  # cylinder: ca = axis point, cb = unit axis, cr = radius
        qx = px - ca[0]
        qy = py - ca[1]
        qz = pz - ca[2]
        t = qx * cb[0] + qy * cb[1] + qz * cb[2]
        rx = qx - t * cb[0]
        ry = qy - t * cb[1]
        rz = qz - t * cb[2]
        rn = np.sqrt(rx * rx + ry * ry + rz * rz)
        phi = rn - cr
        if rn > 1e-12:
            nx_, ny_, nz_ = rx / rn, ry / rn, rz / rn
        else:
            nx_, ny_, nz_ = 0.0, 0.0, 1.0
    if phi >= 0.0:
        return vx, vy, vz
    if cmode == 0:  # sticky
        return 0.0, 0.0, 0.0
    vn = vx * nx_ + vy * ny_ + vz * nz_
    if vn >= 0.0:  # already separating
        return vx, vy, vz
    tx = vx - vn * nx_
    ty = vy - vn * ny_
    tz = vz - vn * nz_
    tn = np.sqrt(tx * tx + ty * ty + tz * tz)
    if tn > 1e-16:
        scale = 1.0 + cfric * vn / tn  # vn < 0: Coulomb friction shortens tangent
        if scale < 0.0:
            scale = 0.0
        tx *= scale
        ty *= scale
        tz *= scale
    return tx, ty, tz


@njit(cache=True, fastmath=False)
def grid_update(
    gm,
    gmom,
    gv,
    dt,
    gravity,
    dx,
    origin,
    dims,
    mass_eps,
    col_type,
    col_a,
    col_b,
    col_r,
    col_mode,
    col_fric,
):
    """Momentum to velocity, gravity, collider projection, border guard."""
    ncol = col_type.shape[0]
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                m = gm[i, j, k]
                if m > mass_eps:
                    vx = gmom[i, j, k, 0] / m + dt * gravity[0]
                    vy = gmom[i, j, k, 1] / m + dt * gravity[1]
                    vz = gmom[i, j, k, 2] / m + dt * gravity[2]
                    px = origin[0] + i * dx
                    py = origin[1] + j * dx
                    pz = origin[2] + k * dx
                    for c in range(ncol):
                        vx, vy, vz = apply_collider_to_velocity(
                            vx,
                            vy,
                            vz,
                            px,
                            py,
                            pz,
                            col_type[c],
                            col_a[c],
                            col_b[c],
                            col_r[c],
                            col_mode[c],
                            col_fric[c],
                        )
                    # keep material inside the simulation domain
                    if i < BORDER_BAND and vx < 0.0:
                        vx = 0.0
                    if i >= dims[0] - BORDER_BAND and vx > 0.0:
                        vx = 0.0
                    if j < BORDER_BAND and vy < 0.0:
                        vy = 0.0
                    if j >= dims[1] - BORDER_BAND and vy > 0.0:
                        vy = 0.0
                    if k < BORDER_BAND and vz < 0.0:
                        vz = 0.0
                    if k >= dims[2] - BORDER_BAND and vz > 0.0:
                        vz = 0.0
                    gv[i, j, k, 0] = vx
                    gv[i, j, k, 1] = vy
                    gv[i, j, k, 2] = vz
                else:
                    gv[i, j, k, 0] = 0.0
                    gv[i, j, k, 1] = 0.0
                    gv[i, j, k, 2] = 0.0
    return 0


@njit(cache=True, fastmath=False)
def g2p(x, v, C, F, U, S, V, gv, dt, dx, origin, dims, family, kp, clampable):
    """Gather velocities, advect, update and project deformation gradients.

    ``clampable`` marks particles whose degenerate deformation states are
    recovered by singular-value clamping instead of raising: all particles of
    fluid/granular materials, and opacity-softened tracer particles of
    elastic materials (their mass and stress are scaled down by alpha^3, so
    contact-front velocity gradients can legitimately invert them).
    """
    n = x.shape[0]
    inv_dx = 1.0 / dx
    ft = np.empty((3, 3))
    uu = np.empty((3, 3))
    ss = np.empty(3)
    vv = np.empty((3, 3))
    fo = np.empty((3, 3))
    so = np.empty(3)
    for p in range(n):
        gx = (x[p, 0] - origin[0]) * inv_dx
        gy = (x[p, 1] - origin[1]) * inv_dx
        gz = (x[p, 2] - origin[2]) * inv_dx
        bx = int(np.floor(gx))
        by = int(np.floor(gy))
        bz = int(np.floor(gz))
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        nvx = 0.0
        nvy = 0.0
        nvz = 0.0
        c00 = 0.0
        c01 = 0.0
        c02 = 0.0
        c10 = 0.0
        c11 = 0.0
        c12 = 0.0
        c20 = 0.0
        c21 = 0.0
        c22 = 0.0
        for ci in range(2):
            wx = fx if ci == 1 else 1.0 - fx
            gwx = inv_dx if ci == 1 else -inv_dx
            for cj in range(2):
                wy = fy if cj == 1 else 1.0 - fy
                gwy = inv_dx if cj == 1 else -inv_dx
                for ck in range(2):
                    wz = fz if ck == 1 else 1.0 - fz
                    gwz = inv_dx if ck == 1 else -inv_dx
                    w = wx * wy * wz
                    g0 = gwx * wy * wz
                    g1 = wx * gwy * wz
                    g2 = wx * wy * gwz
                    ii = bx + ci
                    jj = by + cj
                    kk = bz + ck
                    ux = gv[ii, jj, kk, 0]
                    uy = gv[ii, jj, kk, 1]
                    uz = gv[ii, jj, kk, 2]
                    nvx += w * ux
                    nvy += w * uy
                    nvz += w * uz
                    c00 += ux * g0
                    c01 += ux * g1
                    c02 += ux * g2
                    c10 += uy * g0
                    c11 += uy * g1
                    c12 += uy * g2
                    c20 += uz * g0
                    c21 += uz * g1
                    c22 += uz * g2
        v[p, 0] = nvx
        v[p, 1] = nvy
        v[p, 2] = nvz
        C[p, 0, 0] = c00
        C[p, 0, 1] = c01
        C[p, 0, 2] = c02
        C[p, 1, 0] = c10
        C[p, 1, 1] = c11
        C[p, 1, 2] = c12
        C[p, 2, 0] = c20
        C[p, 2, 1] = c21
        C[p, 2, 2] = c22
        x[p, 0] += dt * nvx
        x[p, 1] += dt * nvy
        x[p, 2] += dt * nvz
        # trial deformation gradient: (I + dt C) F
        for a in range(3):
            for b in range(3):
                ft[a, b] = (
                    F[p, a, b]
                    + dt
                    * (
                        C[p, a, 0] * F[p, 0, b]
                        + C[p, a, 1] * F[p, 1, b]
                        + C[p, a, 2] * F[p, 2, b]
                    )
                )
        if family == ELASTIC or family == NEWTONIAN:
            J = det3(ft)
            if J <= DET_MIN:
                if clampable[p] == 0:
                    return -(p + 1)
                # rebuild from clamped singular values
                svd3_core(ft, uu, ss, vv)
                for q in range(3):
                    if ss[q] < SVAL_MIN:
                        ss[q] = SVAL_MIN
                for a in range(3):
                    for b in range(3):
                        F[p, a, b] = (
                            ss[0] * uu[a, 0] * vv[b, 0]
                            + ss[1] * uu[a, 1] * vv[b, 1]
                            + ss[2] * uu[a, 2] * vv[b, 2]
                        )
            else:
                for a in range(3):
                    for b in range(3):
                        F[p, a, b] = ft[a, b]
        else:
            svd3_core(ft, uu, ss, vv)
            if ss[2] < SVAL_MIN:
                if clampable[p] == 0:
                    return -(p + 1)
                for q in range(3):
                    if ss[q] < SVAL_MIN:
                        ss[q] = SVAL_MIN
            if family == PLASTICINE:
                z_von_mises(uu, ss, vv, kp[0], kp[2], fo, so)
            elif family == NON_NEWTONIAN:
                z_viscoplastic(uu, ss, vv, kp[0], kp[2], kp[3], dt, fo, so)
            else:
                z_drucker_prager(uu, ss, vv, kp[0], kp[1], kp[6], fo, so)
            for a in range(3):
                S[p, a] = so[a]
                for b in range(3):
                    F[p, a, b] = fo[a, b]
                    U[p, a, b] = uu[a, b]
                    V[p, a, b] = vv[a, b]
        # advected attributes ride along unchanged
        gx = (x[p, 0] - origin[0]) * inv_dx
        gy = (x[p, 1] - origin[1]) * inv_dx
        gz = (x[p, 2] - origin[2]) * inv_dx
        if (
            gx < 1.0
            or gy < 1.0
            or gz < 1.0
            or gx > dims[0] - 2
            or gy > dims[1] - 2
            or gz > dims[2] - 2
        ):
            return p + 1
    return 0


@njit(cache=True, fastmath=False)
def field_p2g_scatter(x, q, dims, dx, origin, num, den):
    """Weighted scatter of particle attributes ``q`` (n, nch) to field nodes."""
    n = x.shape[0]
    nch = q.shape[1]
    inv_dx = 1.0 / dx
    num[:, :, :, :] = 0.0
    den[:, :, :] = 0.0
    for p in range(n):
        gx = (x[p, 0] - origin[0]) * inv_dx
        gy = (x[p, 1] - origin[1]) * inv_dx
        gz = (x[p, 2] - origin[2]) * inv_dx
        bx = int(np.floor(gx))
        by = int(np.floor(gy))
        bz = int(np.floor(gz))
        if bx < 0:
            bx = 0
        if by < 0:
            by = 0
        if bz < 0:
            bz = 0
        if bx > dims[0] - 2:
            bx = dims[0] - 2
        if by > dims[1] - 2:
            by = dims[1] - 2
        if bz > dims[2] - 2:
            bz = dims[2] - 2
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        for ci in range(2):
            wx = fx if ci == 1 else 1.0 - fx
            for cj in range(2):
                wy = fy if cj == 1 else 1.0 - fy
                for ck in range(2):
                    wz = fz if ck == 1 else 1.0 - fz
                    w = wx * wy * wz
                    ii = bx + ci
                    jj = by + cj
                    kk = bz + ck
                    den[ii, jj, kk] += w
                    for ch in range(nch):
                        num[ii, jj, kk, ch] += w * q[p, ch]
    return 0


@njit(cache=True, fastmath=False)
def field_p2g_normalize(num, den, weight_eps, empty_vals, out):
    """out = num / den where den >= eps, else the per-channel empty value."""
    d0, d1, d2, nch = num.shape
    for i in range(d0):
        for j in range(d1):
            for k in range(d2):
                d = den[i, j, k]
                if d >= weight_eps:
                    for ch in range(nch):
                        out[i, j, k, ch] = num[i, j, k, ch] / d
                else:
                    for ch in range(nch):
                        out[i, j, k, ch] = empty_vals[ch]
    return 0


@njit(cache=True, fastmath=False)
def field_gather(x, grid, dims, dx, origin, out):
    """Trilinear gather of multichannel node ``grid`` at particle positions."""
    n = x.shape[0]
    nch = grid.shape[3]
    inv_dx = 1.0 / dx
    for p in range(n):
        gx = (x[p, 0] - origin[0]) * inv_dx
        gy = (x[p, 1] - origin[1]) * inv_dx
        gz = (x[p, 2] - origin[2]) * inv_dx
        bx = int(np.floor(gx))
        by = int(np.floor(gy))
        bz = int(np.floor(gz))
        if bx < 0:
            bx = 0
        if by < 0:
            by = 0
        if bz < 0:
            bz = 0
        if bx > dims[0] - 2:
            bx = dims[0] - 2
        if by > dims[1] - 2:
            by = dims[1] - 2
        if bz > dims[2] - 2:
            bz = dims[2] - 2
        fx = gx - bx
        fy = gy - by
        fz = gz - bz
        for ch in range(nch):
            out[p, ch] = 0.0
        for ci in range(2):
            wx = fx if ci == 1 else 1.0 - fx
            for cj in range(2):
                wy = fy if cj == 1 else 1.0 - fy
                for ck in range(2):
                    wz = fz if ck == 1 else 1.0 - fz
                    w = wx * wy * wz
                    for ch in range(nch):
                        out[p, ch] += w * grid[bx + ci, by + cj, bz + ck, ch]
    return 0
