"""numba adjoint kernels for the simulation substep.

Backward of one substep runs in reverse kernel order, recomputing forward
intermediates (grid mass/momentum/velocities, trial deformation gradients)
from the stored pre-substep particle state:

    stress_backward <- p2g_backward <- grid_backward <- g2p_backward

Branches taken in the forward pass (yield conditions, collider projections,
border guards) are differentiated through the taken branch only.

Material parameter gradients accumulate into a packed vector mirroring the
forward parameter layout (see materials module).
"""

import numpy as np
from numba import njit

from .materials import ELASTIC, NEWTONIAN, NON_NEWTONIAN, PLASTICINE, SAND
from .math_kernels import det3, svd3_core
from ._sim_kernels import BORDER_BAND, DET_MIN, SVAL_MIN, apply_collider_to_velocity

SVD_DENOM_CLAMP = 1e-8


@njit(cache=True, fastmath=False)
def svd3_backward(U, S, V, Ubar, Sbar, Vbar, Fbar):
    """Accumulate d(loss)/dF into Fbar given adjoints of U, S, V.

    Uses the standard rotation-perturbation solve; the (s_j^2 - s_i^2)
    denominators are clamped sign-preserving so coincident singular values
    yield finite gradients.
    """
    # A = U^T Ubar, B = V^T Vbar
    a01 = 0.0
    a10 = 0.0
    a02 = 0.0
    a20 = 0.0
    a12 = 0.0
    a21 = 0.0
    b01 = 0.0
    b10 = 0.0
    b02 = 0.0
    b20 = 0.0
    b12 = 0.0
    b21 = 0.0
    for k in range(3):
        a01 += U[k, 0] * Ubar[k, 1]
        a10 += U[k, 1] * Ubar[k, 0]
        a02 += U[k, 0] * Ubar[k, 2]
        a20 += U[k, 2] * Ubar[k, 0]
        a12 += U[k, 1] * Ubar[k, 2]
        a21 += U[k, 2] * Ubar[k, 1]
        b01 += V[k, 0] * Vbar[k, 1]
        b10 += V[k, 1] * Vbar[k, 0]
        b02 += V[k, 0] * Vbar[k, 2]
        b20 += V[k, 2] * Vbar[k, 0]
        b12 += V[k, 1] * Vbar[k, 2]
        b21 += V[k, 2] * Vbar[k, 1]
    pb = np.empty((3, 3))
    pb[0, 0] = Sbar[0]
    pb[1, 1] = Sbar[1]
    pb[2, 2] = Sbar[2]
    # pair (i, j): skew parts divided by clamped s_j^2 - s_i^2
    for i in range(2):
        for j in range(i + 1, 3):
            if i == 0 and j == 1:
                aij = a01 - a10
                bij = b01 - b10
            elif i == 0 and j == 2:
                aij = a02 - a20
                bij = b02 - b20
            else:
                aij = a12 - a21
                bij = b12 - b21
            d = S[j] * S[j] - S[i] * S[i]
            if d >= 0.0:
                if d < SVD_DENOM_CLAMP:
                    d = SVD_DENOM_CLAMP
            else:
                if d > -SVD_DENOM_CLAMP:
                    d = -SVD_DENOM_CLAMP
            pb[i, j] = (aij * S[j] + bij * S[i]) / d
            pb[j, i] = (aij * S[i] + bij * S[j]) / d
    # Fbar += U pb V^T
    for a in range(3):
        for b in range(3):
            acc = 0.0
            for i in range(3):
                for j in range(3):
                    acc += U[a, i] * pb[i, j] * V[b, j]
            Fbar[a, b] += acc


@njit(cache=True, fastmath=False)
def cofactor(F, out):
    out[0, 0] = F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1]
    out[0, 1] = F[1, 2] * F[2, 0] - F[1, 0] * F[2, 2]
    out[0, 2] = F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]
    out[1, 0] = F[0, 2] * F[2, 1] - F[0, 1] * F[2, 2]
    out[1, 1] = F[0, 0] * F[2, 2] - F[0, 2] * F[2, 0]
    out[1, 2] = F[0, 1] * F[2, 0] - F[0, 0] * F[2, 1]
    out[2, 0] = F[0, 1] * F[1, 2] - F[0, 2] * F[1, 1]
    out[2, 1] = F[0, 2] * F[1, 0] - F[0, 0] * F[1, 2]
    out[2, 2] = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]


@njit(cache=True, fastmath=False)
def stress_backward(family, kp, F, C, U, S, V, taubar, Fbar, Cbar, theta_bar, n):
    """Adjoint of the Kirchhoff stress evaluation, accumulated per particle."""
    cof = np.empty((3, 3))
    ubar = np.empty((3, 3))
    sbar = np.empty(3)
    vbar = np.zeros((3, 3))
    for p in range(n):
        if family == ELASTIC:
            mu = kp[0]
            lam = kp[1]
            J = det3(F[p])
            cofactor(F[p], cof)
            trt = taubar[p, 0, 0] + taubar[p, 1, 1] + taubar[p, 2, 2]
            ffT = 0.0
            for a in range(3):
                for b in range(3):
                    # Fbar += mu (taubar + taubar^T) F + lam tr(taubar) F^-T
                    accf = 0.0
                    for k in range(3):
                        accf += (taubar[p, a, k] + taubar[p, k, a]) * F[p, k, b]
                    Fbar[p, a, b] += mu * accf + lam * trt * cof[a, b] / J
            for a in range(3):
                for b in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc += F[p, a, k] * F[p, b, k]
                    ffT += taubar[p, a, b] * acc
            theta_bar[0] += ffT - trt  # d/d mu
            theta_bar[1] += trt * np.log(J)  # d/d lambda
        elif family == NEWTONIAN:
            muv = kp[5]
            kap = kp[4]
            J = det3(F[p])
            trt = taubar[p, 0, 0] + taubar[p, 1, 1] + taubar[p, 2, 2]
            symCC = 0.0
            for a in range(3):
                for b in range(3):
                    Cbar[p, a, b] += 0.5 * muv * (taubar[p, a, b] + taubar[p, b, a])
                    symCC += taubar[p, a, b] * 0.5 * (C[p, a, b] + C[p, b, a])
            theta_bar[5] += symCC
            theta_bar[4] += trt * (J - J ** (-6.0))
            jbar = kap * trt * (1.0 + 6.0 * J ** (-7.0))
            cofactor(F[p], cof)
            for a in range(3):
                for b in range(3):
                    Fbar[p, a, b] += jbar * cof[a, b]
        else:
            mu = kp[0]
            lam = kp[1]
            e0 = np.log(S[p, 0])
            e1 = np.log(S[p, 1])
            e2 = np.log(S[p, 2])
            tre = e0 + e1 + e2
            g0 = 2.0 * mu * e0 + lam * tre
            g1 = 2.0 * mu * e1 + lam * tre
            g2 = 2.0 * mu * e2 + lam * tre
            # gbar_k = u_k^T taubar u_k ; Ubar = (taubar + taubar^T) U diag(g)
            gb0 = 0.0
            gb1 = 0.0
            gb2 = 0.0
            for a in range(3):
                for b in range(3):
                    gb0 += U[p, a, 0] * taubar[p, a, b] * U[p, b, 0]
                    gb1 += U[p, a, 1] * taubar[p, a, b] * U[p, b, 1]
                    gb2 += U[p, a, 2] * taubar[p, a, b] * U[p, b, 2]
            for a in range(3):
                t0 = 0.0
                t1 = 0.0
                t2 = 0.0
                for b in range(3):
                    sym = taubar[p, a, b] + taubar[p, b, a]
                    t0 += sym * U[p, b, 0]
                    t1 += sym * U[p, b, 1]
                    t2 += sym * U[p, b, 2]
                ubar[a, 0] = t0 * g0
                ubar[a, 1] = t1 * g1
                ubar[a, 2] = t2 * g2
            sgb = gb0 + gb1 + gb2
            eb0 = 2.0 * mu * gb0 + lam * sgb
            eb1 = 2.0 * mu * gb1 + lam * sgb
            eb2 = 2.0 * mu * gb2 + lam * sgb
            sbar[0] = eb0 / S[p, 0]
            sbar[1] = eb1 / S[p, 1]
            sbar[2] = eb2 / S[p, 2]
            theta_bar[0] += 2.0 * (e0 * gb0 + e1 * gb1 + e2 * gb2)
            theta_bar[1] += tre * sgb
            for a in range(3):
                for b in range(3):
                    vbar[a, b] = 0.0
            svd3_backward(U[p], S[p], V[p], ubar, sbar, vbar, Fbar[p])
    return 0


@njit(cache=True, fastmath=False)
def _zbar_from_fbar(U, V, z0, z1, z2, fbar, ubar, vbar):
    """Adjoints of F' = U diag(z) V^T wrt U, V and z (returned as tuple)."""
    zb0 = 0.0
    zb1 = 0.0
    zb2 = 0.0
    for a in range(3):
        ub0 = 0.0
        ub1 = 0.0
        ub2 = 0.0
        vb0 = 0.0
        vb1 = 0.0
        vb2 = 0.0
        for b in range(3):
            ub0 += fbar[a, b] * V[b, 0]
            ub1 += fbar[a, b] * V[b, 1]
            ub2 += fbar[a, b] * V[b, 2]
            vb0 += fbar[b, a] * U[b, 0]
            vb1 += fbar[b, a] * U[b, 1]
            vb2 += fbar[b, a] * U[b, 2]
        ubar[a, 0] = ub0 * z0
        ubar[a, 1] = ub1 * z1
        ubar[a, 2] = ub2 * z2
        vbar[a, 0] = vb0 * z0
        vbar[a, 1] = vb1 * z1
        vbar[a, 2] = vb2 * z2
    for a in range(3):
        for b in range(3):
            zb0 += U[a, 0] * fbar[a, b] * V[b, 0]
            zb1 += U[a, 1] * fbar[a, b] * V[b, 1]
            zb2 += U[a, 2] * fbar[a, b] * V[b, 2]
    return zb0, zb1, zb2


@njit(cache=True, fastmath=False)
def return_map_backward(family, kp, dt, U, S, V, fpbar, ftbar, theta_bar):
    """Adjoint of the plastic projection F' = Z(F_trial).

    (U, S, V) is the SVD of the trial state; ``fpbar`` is the adjoint of the
    projected F'; the result accumulates into ``ftbar`` (adjoint of F_trial)
    and ``theta_bar``.
    """
    e0 = np.log(S[0])
    e1 = np.log(S[1])
    e2 = np.log(S[2])
    em = (e0 + e1 + e2) / 3.0
    tre = e0 + e1 + e2
    d0 = e0 - em
    d1 = e1 - em
    d2 = e2 - em
    n = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    mu = kp[0]
    lam = kp[1]
    tau_y = kp[2]
    eta = kp[3]
    alpha_dp = kp[6]

    ubar = np.empty((3, 3))
    vbar = np.empty((3, 3))
    sbar = np.empty(3)

    took = 0  # 0 passthrough, 1 projection, 2 expansion
    q = 0.0
    if family == PLASTICINE:
        dg = n - tau_y / (2.0 * mu)
        if dg > 0.0:
            took = 1
            q = tau_y / (2.0 * mu * n)
    elif family == NON_NEWTONIAN:
        dg = n - tau_y / (2.0 * mu)
        if dg > 0.0:
            took = 1
    elif family == SAND:
        if tre > 0.0:
            took = 2
        else:
            dg = n + alpha_dp * (3.0 * lam + 2.0 * mu) * tre / (2.0 * mu)
            if dg > 0.0:
                took = 1
                q = 1.0 - dg / n

    if took == 0:
        for a in range(3):
            for b in range(3):
                ftbar[a, b] += fpbar[a, b]
        return 0

    if took == 2:
        # expansion branch: F' = U V^T, z constant so no sbar or theta flow
        zb0, zb1, zb2 = _zbar_from_fbar(U, V, 1.0, 1.0, 1.0, fpbar, ubar, vbar)
        sbar[0] = 0.0
        sbar[1] = 0.0
        sbar[2] = 0.0
        svd3_backward(U, S, V, ubar, sbar, vbar, ftbar)
        return 0

    # took == 1: projected states all have the form z_k = exp(em + c d_k)
    if family == PLASTICINE:
        c = q
        z0 = np.exp(em + c * d0)
        z1 = np.exp(em + c * d1)
        z2 = np.exp(em + c * d2)
        zb0, zb1, zb2 = _zbar_from_fbar(U, V, z0, z1, z2, fpbar, ubar, vbar)
        p0 = zb0 * z0
        p1 = zb1 * z1
        p2 = zb2 * z2
        cbar = p0 * d0 + p1 * d1 + p2 * d2
        embar = (p0 + p1 + p2) * (1.0 - c)
        # c = tau_y / (2 mu n)
        theta_bar[2] += cbar / (2.0 * mu * n)
        theta_bar[0] += -cbar * tau_y / (2.0 * mu * mu * n)
        nbar = -cbar * c / n
        eb0 = c * p0 + embar / 3.0 + nbar * d0 / n
        eb1 = c * p1 + embar / 3.0 + nbar * d1 / n
        eb2 = c * p2 + embar / 3.0 + nbar * d2 / n
        sbar[0] = eb0 / S[0]
        sbar[1] = eb1 / S[1]
        sbar[2] = eb2 / S[2]
        svd3_backward(U, S, V, ubar, sbar, vbar, ftbar)
        return 0

    if family == SAND:
        dg = n + alpha_dp * (3.0 * lam + 2.0 * mu) * tre / (2.0 * mu)
        c = 1.0 - dg / n
        z0 = np.exp(em + c * d0)
        z1 = np.exp(em + c * d1)
        z2 = np.exp(em + c * d2)
        zb0, zb1, zb2 = _zbar_from_fbar(U, V, z0, z1, z2, fpbar, ubar, vbar)
        p0 = zb0 * z0
        p1 = zb1 * z1
        p2 = zb2 * z2
        cbar = p0 * d0 + p1 * d1 + p2 * d2
        embar = (p0 + p1 + p2) * (1.0 - c)
        dgbar = -cbar / n
        nbar = cbar * dg / (n * n)
        # dg = n + alpha (3 lam + 2 mu) tre / (2 mu)
        nbar += dgbar
        trebar = dgbar * alpha_dp * (3.0 * lam + 2.0 * mu) / (2.0 * mu)
        theta_bar[6] += dgbar * (3.0 * lam + 2.0 * mu) * tre / (2.0 * mu)
        theta_bar[1] += dgbar * alpha_dp * 3.0 * tre / (2.0 * mu)
        theta_bar[0] += dgbar * alpha_dp * (-3.0 * lam * tre) / (2.0 * mu * mu)
        embar += trebar * 3.0
        eb0 = c * p0 + embar / 3.0 + nbar * d0 / n
        eb1 = c * p1 + embar / 3.0 + nbar * d1 / n
        eb2 = c * p2 + embar / 3.0 + nbar * d2 / n
        sbar[0] = eb0 / S[0]
        sbar[1] = eb1 / S[1]
        sbar[2] = eb2 / S[2]
        svd3_backward(U, S, V, ubar, sbar, vbar, ftbar)
        return 0

    # non-Newtonian viscoplastic
    dg = n - tau_y / (2.0 * mu)
    ss = S[0] * S[0] + S[1] * S[1] + S[2] * S[2]
    mu_hat = (mu / 3.0) * ss
    D = 1.0 + eta / (2.0 * mu_hat * dt)
    mstar = n - dg / D
    c = mstar / n
    z0 = np.exp(em + c * d0)
    z1 = np.exp(em + c * d1)
    z2 = np.exp(em + c * d2)
    zb0, zb1, zb2 = _zbar_from_fbar(U, V, z0, z1, z2, fpbar, ubar, vbar)
    p0 = zb0 * z0
    p1 = zb1 * z1
    p2 = zb2 * z2
    cbar = p0 * d0 + p1 * d1 + p2 * d2
    embar = (p0 + p1 + p2) * (1.0 - c)
    mstarbar = cbar / n
    nbar = -cbar * mstar / (n * n)
    # mstar = n - dg / D ; dg = n - tau_y/(2 mu)
    nbar += mstarbar
    dgbar = -mstarbar / D
    Dbar = mstarbar * dg / (D * D)
    nbar += dgbar
    theta_bar[2] += dgbar * (-1.0 / (2.0 * mu))
    theta_bar[0] += dgbar * tau_y / (2.0 * mu * mu)
    # D = 1 + eta / (2 mu_hat dt)
    theta_bar[3] += Dbar / (2.0 * mu_hat * dt)
    muhatbar = -Dbar * eta / (2.0 * mu_hat * mu_hat * dt)
    theta_bar[0] += muhatbar * ss / 3.0
    shat0 = muhatbar * (mu / 3.0) * 2.0 * S[0]
    shat1 = muhatbar * (mu / 3.0) * 2.0 * S[1]
    shat2 = muhatbar * (mu / 3.0) * 2.0 * S[2]
    eb0 = c * p0 + embar / 3.0 + nbar * d0 / n
    eb1 = c * p1 + embar / 3.0 + nbar * d1 / n
    eb2 = c * p2 + embar / 3.0 + nbar * d2 / n
    sbar[0] = eb0 / S[0] + shat0
    sbar[1] = eb1 / S[1] + shat1
    sbar[2] = eb2 / S[2] + shat2
    svd3_backward(U, S, V, ubar, sbar, vbar, ftbar)
    return 0


@njit(cache=True, fastmath=False)
def g2p_backward(
    x,
    F,
    gv,
    dt,
    dx,
    origin,
    dims,
    family,
    kp,
    xbar_out,
    vbar_out,
    cbar_out,
    fbar_out,
    xbar_in,
    fbar_in,
    gvbar,
    theta_bar,
):
    """Adjoint of the gather/advect/deformation-update stage.

    Inputs are the PRE-substep particle state (x, F) and the post-projection
    grid velocities. (xbar_out, vbar_out, cbar_out, fbar_out) are adjoints of
    the substep outputs; the kernel accumulates adjoints of the inputs into
    (xbar_in, fbar_in, gvbar) and consumes vbar/cbar entirely (the inputs v
    and C only feed this substep through p2g).
    """
    n = x.shape[0]
    inv_dx = 1.0 / dx
    ft = np.empty((3, 3))
    ftbar = np.empty((3, 3))
    fpbar = np.empty((3, 3))
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
        # recompute gathered v', C'
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
        # x' = x + dt v'
        vbx = vbar_out[p, 0] + dt * xbar_out[p, 0]
        vby = vbar_out[p, 1] + dt * xbar_out[p, 1]
        vbz = vbar_out[p, 2] + dt * xbar_out[p, 2]
        xbar_in[p, 0] += xbar_out[p, 0]
        xbar_in[p, 1] += xbar_out[p, 1]
        xbar_in[p, 2] += xbar_out[p, 2]

        # F' = Z((I + dt C') F) : backward through projection first
        for a in range(3):
            for b in range(3):
                ft[a, b] = (
                    F[p, a, b]
                    + dt
                    * (
                        c00 * F[p, 0, b] + c01 * F[p, 1, b] + c02 * F[p, 2, b]
                        if a == 0
                        else (
                            c10 * F[p, 0, b] + c11 * F[p, 1, b] + c12 * F[p, 2, b]
                            if a == 1
                            else c20 * F[p, 0, b] + c21 * F[p, 1, b] + c22 * F[p, 2, b]
                        )
                    )
                )
                ftbar[a, b] = 0.0
                fpbar[a, b] = fbar_out[p, a, b]
        if family == ELASTIC or family == NEWTONIAN:
            if det3(ft) > DET_MIN:
                for a in range(3):
                    for b in range(3):
                        ftbar[a, b] = fpbar[a, b]
            # else: clamped recovery path, gradient intentionally dropped
        else:
            svd3_core(ft, uu, ss, vv)
            if ss[2] >= SVAL_MIN:
                return_map_backward(family, kp, dt, uu, ss, vv, fpbar, ftbar, theta_bar)
            # else: clamped recovery path, gradient intentionally dropped

        # ft = (I + dt C') F
        # C'bar += dt ftbar F^T ; Fbar_in += (I + dt C')^T ftbar
        cb00 = cbar_out[p, 0, 0]
        cb01 = cbar_out[p, 0, 1]
        cb02 = cbar_out[p, 0, 2]
        cb10 = cbar_out[p, 1, 0]
        cb11 = cbar_out[p, 1, 1]
        cb12 = cbar_out[p, 1, 2]
        cb20 = cbar_out[p, 2, 0]
        cb21 = cbar_out[p, 2, 1]
        cb22 = cbar_out[p, 2, 2]
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for k in range(3):
                    acc += ftbar[a, k] * F[p, b, k]
                if a == 0:
                    if b == 0:
                        cb00 += dt * acc
                    elif b == 1:
                        cb01 += dt * acc
                    else:
                        cb02 += dt * acc
                elif a == 1:
                    if b == 0:
                        cb10 += dt * acc
                    elif b == 1:
                        cb11 += dt * acc
                    else:
                        cb12 += dt * acc
                else:
                    if b == 0:
                        cb20 += dt * acc
                    elif b == 1:
                        cb21 += dt * acc
                    else:
                        cb22 += dt * acc
        for a in range(3):
            for b in range(3):
                fbar_in[p, a, b] += (
                    ftbar[a, b]
                    + dt
                    * (
                        (c00 * ftbar[0, b] + c10 * ftbar[1, b] + c20 * ftbar[2, b])
                        if a == 0
                        else (
                            (c01 * ftbar[0, b] + c11 * ftbar[1, b] + c21 * ftbar[2, b])
                            if a == 1
                            else (c02 * ftbar[0, b] + c12 * ftbar[1, b] + c22 * ftbar[2, b])
                        )
                    )
                )

        # gather adjoints: gvbar, and position adjoint from w(x), grad w(x)
        xb0 = 0.0
        xb1 = 0.0
        xb2 = 0.0
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
                    # Hessian of w (zero diagonal)
                    h01 = gwx * gwy * wz
                    h02 = gwx * wy * gwz
                    h12 = wx * gwy * gwz
                    ii = bx + ci
                    jj = by + cj
                    kk = bz + ck
                    ux = gv[ii, jj, kk, 0]
                    uy = gv[ii, jj, kk, 1]
                    uz = gv[ii, jj, kk, 2]
                    # gvbar += w vbar + Cbar @ gradw
                    gvbar[ii, jj, kk, 0] += w * vbx + cb00 * g0 + cb01 * g1 + cb02 * g2
                    gvbar[ii, jj, kk, 1] += w * vby + cb10 * g0 + cb11 * g1 + cb12 * g2
                    gvbar[ii, jj, kk, 2] += w * vbz + cb20 * g0 + cb21 * g1 + cb22 * g2
                    # xbar += (vbar . u) gradw
                    du = vbx * ux + vby * uy + vbz * uz
                    xb0 += du * g0
                    xb1 += du * g1
                    xb2 += du * g2
                    # xbar += H @ (Cbar^T u)
                    t0 = cb00 * ux + cb10 * uy + cb20 * uz
                    t1 = cb01 * ux + cb11 * uy + cb21 * uz
                    t2 = cb02 * ux + cb12 * uy + cb22 * uz
                    xb0 += h01 * t1 + h02 * t2
                    xb1 += h01 * t0 + h12 * t2
                    xb2 += h02 * t0 + h12 * t1
        xbar_in[p, 0] += xb0
        xbar_in[p, 1] += xb1
        xbar_in[p, 2] += xb2
    return 0


@njit(cache=True, fastmath=False)
def grid_backward(
    gm,
    gmom,
    gvbar,
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
    gmombar,
    gmbar,
):
    """Adjoint of the momentum-to-velocity update with collider projections."""
    ncol = col_type.shape[0]
    vstore = np.empty((ncol + 1, 3))
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                m = gm[i, j, k]
                if m <= mass_eps:
                    gmombar[i, j, k, 0] = 0.0
                    gmombar[i, j, k, 1] = 0.0
                    gmombar[i, j, k, 2] = 0.0
                    gmbar[i, j, k] = 0.0
                    continue
                px = origin[0] + i * dx
                py = origin[1] + j * dx
                pz = origin[2] + k * dx
                vx = gmom[i, j, k, 0] / m + dt * gravity[0]
                vy = gmom[i, j, k, 1] / m + dt * gravity[1]
                vz = gmom[i, j, k, 2] / m + dt * gravity[2]
                vstore[0, 0] = vx
                vstore[0, 1] = vy
                vstore[0, 2] = vz
                for c in range(ncol):
                    vx, vy, vz = apply_collider_to_velocity(
                        vx, vy, vz, px, py, pz,
                        col_type[c], col_a[c], col_b[c], col_r[c], col_mode[c], col_fric[c],
                    )
                    vstore[c + 1, 0] = vx
                    vstore[c + 1, 1] = vy
                    vstore[c + 1, 2] = vz
                bx = gvbar[i, j, k, 0]
                by = gvbar[i, j, k, 1]
                bz = gvbar[i, j, k, 2]
                # border guard: zeroed components carry no adjoint
                if i < BORDER_BAND and vx < 0.0:
                    bx = 0.0
                if i >= dims[0] - BORDER_BAND and vx > 0.0:
                    bx = 0.0
                if j < BORDER_BAND and vy < 0.0:
                    by = 0.0
                if j >= dims[1] - BORDER_BAND and vy > 0.0:
                    by = 0.0
                if k < BORDER_BAND and vz < 0.0:
                    bz = 0.0
                if k >= dims[2] - BORDER_BAND and vz > 0.0:
                    bz = 0.0
                for c in range(ncol - 1, -1, -1):
                    bx, by, bz = _collider_backward(
                        vstore[c, 0], vstore[c, 1], vstore[c, 2],
                        px, py, pz,
                        col_type[c], col_a[c], col_b[c], col_r[c], col_mode[c], col_fric[c],
                        bx, by, bz,
                    )
                gmombar[i, j, k, 0] = bx / m
                gmombar[i, j, k, 1] = by / m
                gmombar[i, j, k, 2] = bz / m
                gmbar[i, j, k] = -(
                    bx * gmom[i, j, k, 0] + by * gmom[i, j, k, 1] + bz * gmom[i, j, k, 2]
                ) / (m * m)
    return 0


@njit(cache=True, fastmath=False)
def _collider_backward(vx, vy, vz, px, py, pz, ctype, ca, cb, cr, cmode, cfric, bx, by, bz):
    """vjp of apply_collider_to_velocity at input velocity (vx, vy, vz)."""
    if ctype == 0:
        phi = ca[0] * px + ca[1] * py + ca[2] * pz - cr
        nx_, ny_, nz_ = ca[0], ca[1], ca[2]
    else:
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
        return bx, by, bz
    if cmode == 0:
        return 0.0, 0.0, 0.0
    vn = vx * nx_ + vy * ny_ + vz * nz_
    if vn >= 0.0:
        return bx, by, bz
    tx = vx - vn * nx_
    ty = vy - vn * ny_
    tz = vz - vn * nz_
    tn = np.sqrt(tx * tx + ty * ty + tz * tz)
    if tn <= 1e-16:
        # forward returned vt unchanged (~0); out = P v
        dn = bx * nx_ + by * ny_ + bz * nz_
        return bx - dn * nx_, by - dn * ny_, bz - dn * nz_
    s = 1.0 + cfric * vn / tn
    if s < 0.0:
        return 0.0, 0.0, 0.0
    # out = s * P v, s = 1 + mu (v.n)/|P v|
    # vbar = s P bbar + (bbar . Pv) ds/dv,  ds/dv = mu [ n/tn - vn Pv / tn^3 ]
    dn = bx * nx_ + by * ny_ + bz * nz_
    pbx = bx - dn * nx_
    pby = by - dn * ny_
    pbz = bz - dn * nz_
    dot_bt = bx * tx + by * ty + bz * tz
    gx = cfric * (nx_ / tn - vn * tx / (tn * tn * tn))
    gy = cfric * (ny_ / tn - vn * ty / (tn * tn * tn))
    gz = cfric * (nz_ / tn - vn * tz / (tn * tn * tn))
    return (
        s * pbx + dot_bt * gx,
        s * pby + dot_bt * gy,
        s * pbz + dot_bt * gz,
    )


@njit(cache=True, fastmath=False)
def p2g_backward(
    x,
    v,
    C,
    tau,
    mass,
    vol_a3,
    dt,
    dx,
    origin,
    dims,
    gmombar,
    gmbar,
    xbar_in,
    vbar_in,
    cbar_in,
    taubar,
):
    """Adjoint of the scatter stage; consumes grid adjoints, emits particle ones."""
    n = x.shape[0]
    inv_dx = 1.0 / dx
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
        m = mass[p]
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
        vb0 = 0.0
        vb1 = 0.0
        vb2 = 0.0
        xb0 = 0.0
        xb1 = 0.0
        xb2 = 0.0
        ab00 = 0.0
        ab01 = 0.0
        ab02 = 0.0
        ab10 = 0.0
        ab11 = 0.0
        ab12 = 0.0
        ab20 = 0.0
        ab21 = 0.0
        ab22 = 0.0
        for ci in range(2):
            wx = fx if ci == 1 else 1.0 - fx
            gwx = inv_dx if ci == 1 else -inv_dx
            rx = (ci - fx) * dx
            for cj in range(2):
                wy = fy if cj == 1 else 1.0 - fy
                gwy = inv_dx if cj == 1 else -inv_dx
                ry = (cj - fy) * dx
                for ck in range(2):
                    wz = fz if ck == 1 else 1.0 - fz
                    gwz = inv_dx if ck == 1 else -inv_dx
                    rz = (ck - fz) * dx
                    w = wx * wy * wz
                    g0 = gwx * wy * wz
                    g1 = wx * gwy * wz
                    g2 = wx * wy * gwz
                    ii = bx + ci
                    jj = by + cj
                    kk = bz + ck
                    mb0 = gmombar[ii, jj, kk, 0]
                    mb1 = gmombar[ii, jj, kk, 1]
                    mb2 = gmombar[ii, jj, kk, 2]
                    mmb = gmbar[ii, jj, kk]
                    # v and C adjoints
                    vb0 += w * m * mb0
                    vb1 += w * m * mb1
                    vb2 += w * m * mb2
                    cbar_in[p, 0, 0] += w * m * mb0 * rx
                    cbar_in[p, 0, 1] += w * m * mb0 * ry
                    cbar_in[p, 0, 2] += w * m * mb0 * rz
                    cbar_in[p, 1, 0] += w * m * mb1 * rx
                    cbar_in[p, 1, 1] += w * m * mb1 * ry
                    cbar_in[p, 1, 2] += w * m * mb1 * rz
                    cbar_in[p, 2, 0] += w * m * mb2 * rx
                    cbar_in[p, 2, 1] += w * m * mb2 * ry
                    cbar_in[p, 2, 2] += w * m * mb2 * rz
                    # A adjoint (affine-fused force): Abar += w mbar r^T
                    ab00 += w * mb0 * rx
                    ab01 += w * mb0 * ry
                    ab02 += w * mb0 * rz
                    ab10 += w * mb1 * rx
                    ab11 += w * mb1 * ry
                    ab12 += w * mb1 * rz
                    ab20 += w * mb2 * rx
                    ab21 += w * mb2 * ry
                    ab22 += w * mb2 * rz
                    # position adjoint from the w(x) dependence
                    qx = (
                        m * (v[p, 0] + C[p, 0, 0] * rx + C[p, 0, 1] * ry + C[p, 0, 2] * rz)
                        + a00 * rx + a01 * ry + a02 * rz
                    )
                    qy = (
                        m * (v[p, 1] + C[p, 1, 0] * rx + C[p, 1, 1] * ry + C[p, 1, 2] * rz)
                        + a10 * rx + a11 * ry + a12 * rz
                    )
                    qz = (
                        m * (v[p, 2] + C[p, 2, 0] * rx + C[p, 2, 1] * ry + C[p, 2, 2] * rz)
                        + a20 * rx + a21 * ry + a22 * rz
                    )
                    dm = mb0 * qx + mb1 * qy + mb2 * qz + mmb * m
                    xb0 += dm * g0
                    xb1 += dm * g1
                    xb2 += dm * g2
                    # r = x_i - x_p depends on x_p: -w (m C + A)^T mbar
                    xb0 -= w * (
                        (m * C[p, 0, 0] + a00) * mb0
                        + (m * C[p, 1, 0] + a10) * mb1
                        + (m * C[p, 2, 0] + a20) * mb2
                    )
                    xb1 -= w * (
                        (m * C[p, 0, 1] + a01) * mb0
                        + (m * C[p, 1, 1] + a11) * mb1
                        + (m * C[p, 2, 1] + a21) * mb2
                    )
                    xb2 -= w * (
                        (m * C[p, 0, 2] + a02) * mb0
                        + (m * C[p, 1, 2] + a12) * mb1
                        + (m * C[p, 2, 2] + a22) * mb2
                    )
        vbar_in[p, 0] += vb0
        vbar_in[p, 1] += vb1
        vbar_in[p, 2] += vb2
        xbar_in[p, 0] += xb0
        xbar_in[p, 1] += xb1
        xbar_in[p, 2] += xb2
        taubar[p, 0, 0] = s * ab00
        taubar[p, 0, 1] = s * ab01
        taubar[p, 0, 2] = s * ab02
        taubar[p, 1, 0] = s * ab10
        taubar[p, 1, 1] = s * ab11
        taubar[p, 1, 2] = s * ab12
        taubar[p, 2, 0] = s * ab20
        taubar[p, 2, 1] = s * ab21
        taubar[p, 2, 2] = s * ab22
    return 0


@njit(cache=True, fastmath=False)
def field_p2g_backward(x, q, dims, dxf, lo, numbar, denbar, xbar, qbar):
    """Adjoint of the normalized attribute scatter.

    The caller precomputes per-node adjoints of the raw sums:
    numbar = outbar / den and denbar = -sum_ch numbar * out for nodes above
    the weight threshold, zero elsewhere (empty branch carries no adjoint).
    """
    n = x.shape[0]
    nch = q.shape[1]
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
        xb0 = 0.0
        xb1 = 0.0
        xb2 = 0.0
        for ci in range(2):
            wx = fx if ci == 1 else 1.0 - fx
            gwx = inv_dx if ci == 1 else -inv_dx
            for cj in range(2):
                wy = fy if cj == 1 else 1.0 - fy
                gwy = inv_dx if cj == 1 else -inv_dx
                for ck in range(2):
                    wz = fz if ck == 1 else 1.0 - fz
                    gwz = inv_dx if ck == 1 else -inv_dx
                    ii = bx + ci
                    jj = by + cj
                    kk = bz + ck
                    w = wx * wy * wz
                    g0 = gwx * wy * wz
                    g1 = wx * gwy * wz
                    g2 = wx * wy * gwz
                    wbar = denbar[ii, jj, kk]
                    for ch in range(nch):
                        nb = numbar[ii, jj, kk, ch]
                        qbar[p, ch] += w * nb
                        wbar += nb * q[p, ch]
                    xb0 += wbar * g0
                    xb1 += wbar * g1
                    xb2 += wbar * g2
        xbar[p, 0] += xb0
        xbar[p, 1] += xb1
        xbar[p, 2] += xb2
    return 0
