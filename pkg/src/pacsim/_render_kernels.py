"""numba kernels for volume rendering: ray marching and its adjoint.

The march is split so the color network can run as one batched matmul
outside numba:

  1. collect: march rays through the density grid, storing per-sample
     position, opacity and entry transmittance (samples with exactly zero
     opacity are skipped; they contribute nothing to color or gradients
     beyond ~1e-18).
  2. (numpy) gather features, run the network, composite.
  3. backward: reverse sweep per ray producing raw-density adjoints scattered
     to sigma nodes, plus per-sample color adjoints for the network backward.

All scatters are serial for deterministic accumulation.
"""

import numpy as np
from numba import njit

T_STOP = 1e-4  # early termination transmittance
ALPHA_SKIP = 1e-7  # samples this transparent are dropped from compositing


@njit(cache=True, fastmath=False)
def _box_clip(ox, oy, oz, dx_, dy_, dz_, lo, hi, tmin, tmax):
    """Slab intersection of a ray with the field box, clipped to [tmin, tmax]."""
    t0 = tmin
    t1 = tmax
    for a in range(3):
        o = ox if a == 0 else (oy if a == 1 else oz)
        d = dx_ if a == 0 else (dy_ if a == 1 else dz_)
        if abs(d) < 1e-300:
            if o < lo[a] or o > hi[a]:
                return 1.0, 0.0
        else:
            ta = (lo[a] - o) / d
            tb = (hi[a] - o) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True, fastmath=False)
def _trilerp_scalar(grid, dims, inv_dx, lo, px, py, pz):
    gx = (px - lo[0]) * inv_dx
    gy = (py - lo[1]) * inv_dx
    gz = (pz - lo[2]) * inv_dx
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
    acc = 0.0
    for ci in range(2):
        wx = fx if ci == 1 else 1.0 - fx
        for cj in range(2):
            wy = fy if cj == 1 else 1.0 - fy
            for ck in range(2):
                wz = fz if ck == 1 else 1.0 - fz
                acc += wx * wy * wz * grid[bx + ci, by + cj, bz + ck]
    return acc


@njit(cache=True, fastmath=False)
def collect_samples(
    origins,
    dirs,
    tnear,
    tfar,
    jitter,
    sigma,
    dims,
    lo,
    hi,
    dxf,
    delta,
    kmax,
    count,
    t_end,
    spos,
    salpha,
    strans,
):
    """March all rays; record nonzero-opacity samples until transmittance stop.

    spos (R, kmax, 3), salpha (R, kmax), strans (R, kmax): entry transmittance.
    """
    nrays = origins.shape[0]
    inv_dx = 1.0 / dxf
    for r in range(nrays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx_, dy_, dz_ = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        t0, t1 = _box_clip(ox, oy, oz, dx_, dy_, dz_, lo, hi, tnear[r], tfar[r])
        tr = 1.0
        m = 0
        if t1 > t0:
            nsteps = int(np.ceil((t1 - t0) / delta))
            if nsteps > kmax:
                nsteps = kmax
            for k in range(nsteps):
                s = t0 + (k + jitter[r]) * delta
                if s >= t1:
                    break
                px = ox + s * dx_
                py = oy + s * dy_
                pz = oz + s * dz_
                raw = _trilerp_scalar(sigma, dims, inv_dx, lo, px, py, pz)
                # stable softplus
                sg = (raw if raw > 0.0 else 0.0) + np.log1p(np.exp(-abs(raw)))
                a = 1.0 - np.exp(-sg * delta)
                if a > ALPHA_SKIP:
                    spos[r, m, 0] = px
                    spos[r, m, 1] = py
                    spos[r, m, 2] = pz
                    salpha[r, m] = a
                    strans[r, m] = tr
                    m += 1
                    tr *= 1.0 - a
                    if tr < T_STOP:
                        break
        count[r] = m
        t_end[r] = tr
    return 0


@njit(cache=True, fastmath=False)
def composite(count, salpha, strans, t_end, scolor, c_bg, out):
    """Pixel colors from per-sample colors: sum T_k a_k c_k + T_end c_bg."""
    nrays = count.shape[0]
    for r in range(nrays):
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for k in range(count[r]):
            w = strans[r, k] * salpha[r, k]
            c0 += w * scolor[r, k, 0]
            c1 += w * scolor[r, k, 1]
            c2 += w * scolor[r, k, 2]
        out[r, 0] = c0 + t_end[r] * c_bg[0]
        out[r, 1] = c1 + t_end[r] * c_bg[1]
        out[r, 2] = c2 + t_end[r] * c_bg[2]
    return 0


@njit(cache=True, fastmath=False)
def backward_alpha(
    count,
    salpha,
    strans,
    spos,
    scolor,
    c_bg,
    cbar,
    sigma,
    dims,
    lo,
    dxf,
    delta,
    sigma_bar,
    ccolor_bar,
):
    """Reverse sweep: adjoints of pixel color wrt raw density nodes and
    per-sample colors.

    For sample k with suffix color R_k (what renders behind it),
    dC/da_k = T_k (c_k - R_k) and dC/dc_k = T_k a_k.
    """
    nrays = count.shape[0]
    inv_dx = 1.0 / dxf
    for r in range(nrays):
        m = count[r]
        # suffix rendered color, unit transmittance, starts at background
        r0 = c_bg[0]
        r1 = c_bg[1]
        r2 = c_bg[2]
        for k in range(m - 1, -1, -1):
            a = salpha[r, k]
            tr = strans[r, k]
            ck0 = scolor[r, k, 0]
            ck1 = scolor[r, k, 1]
            ck2 = scolor[r, k, 2]
            abar = (
                cbar[r, 0] * tr * (ck0 - r0)
                + cbar[r, 1] * tr * (ck1 - r1)
                + cbar[r, 2] * tr * (ck2 - r2)
            )
            ccolor_bar[r, k, 0] = cbar[r, 0] * tr * a
            ccolor_bar[r, k, 1] = cbar[r, 1] * tr * a
            ccolor_bar[r, k, 2] = cbar[r, 2] * tr * a
            # a = 1 - exp(-softplus(raw) delta)
            px = spos[r, k, 0]
            py = spos[r, k, 1]
            pz = spos[r, k, 2]
            raw = _trilerp_scalar(sigma, dims, inv_dx, lo, px, py, pz)
            sig_grad = 1.0 / (1.0 + np.exp(-raw))  # softplus'
            rawbar = abar * delta * (1.0 - a) * sig_grad
            # scatter to the 8 nodes
            gx = (px - lo[0]) * inv_dx
            gy = (py - lo[1]) * inv_dx
            gz = (pz - lo[2]) * inv_dx
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
                    for ck_ in range(2):
                        wz = fz if ck_ == 1 else 1.0 - fz
                        sigma_bar[bx + ci, by + cj, bz + ck_] += wx * wy * wz * rawbar
            # update suffix color
            r0 = a * ck0 + (1.0 - a) * r0
            r1 = a * ck1 + (1.0 - a) * r1
            r2 = a * ck2 + (1.0 - a) * r2
    return 0


@njit(cache=True, fastmath=False)
def scatter_grad_multichannel(x, qbar, dims, dxf, lo, grid_bar):
    """Accumulate per-point multichannel adjoints onto grid nodes."""
    n = x.shape[0]
    nch = qbar.shape[1]
    inv_dx = 1.0 / dxf
    for p in range(n):
        gx = (x[p, 0] - lo[0]) * inv_dx
        gy = (x[p, 1] - lo[1]) * inv_dx
        gz = (x[p, 2] - lo[2]) * inv_dx
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
                    for ch in range(nch):
                        grid_bar[bx + ci, by + cj, bz + ck, ch] += w * qbar[p, ch]
    return 0
