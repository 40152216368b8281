"""Fused numba versions of the stencils in :mod:`salt_lpf.swe`.

Same discretisation point by point; the numpy functions remain the reference
and the tests check the two agree to rounding.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _fill(x):
    n = x.shape[-1]
    d = n - 2
    for f in (0, 2):
        for a in range(n):
            x[f, a, 0] = x[f, a, 1]
            x[f, a, d + 1] = x[f, a, d]
    for a in range(n):
        x[1, a, 1] = 0.0
        x[1, a, d + 1] = 0.0
        x[1, a, 0] = -x[1, a, 2]
    for f in range(3):
        for b in range(n):
            x[f, 0, b] = x[f, d, b]
            x[f, d + 1, b] = x[f, 1, b]


@njit(cache=True)
def _increment(x, xu, xv, noisy, rot, g, nu, dt, out, q, cu, cv, kin):
    """Full increment: transport by ``c = u dt + xi`` plus pressure and viscosity."""
    n = x.shape[-1]
    d = n - 2
    dx = 1.0 / d
    u = x[0]
    v = x[1]
    e = x[2]
    out[:] = 0.0
    for a in range(n):
        for b in range(n):
            cu[a, b] = u[a, b] * dt
            cv[a, b] = v[a, b] * dt
            if noisy:
                cu[a, b] += xu[a, b]
                cv[a, b] += xv[a, b]
    # potential vorticity on corners, q[a, b] for corner (a, b)
    for a in range(1, n):
        for b in range(1, n):
            zeta = (v[a, b] - v[a - 1, b] - u[a, b] + u[a, b - 1]) / dx
            h = 0.25 * (e[a - 1, b - 1] + e[a, b - 1] + e[a - 1, b] + e[a, b])
            q[a, b] = (rot + zeta) / h
    # Bernoulli term u.(u dt / 2 + xi), averaged to centres
    for a in range(1, d + 1):
        for b in range(1, d + 1):
            s = 0.5 * dt * (u[a, b] * u[a, b] + u[a + 1, b] * u[a + 1, b]
                            + v[a, b] * v[a, b] + v[a, b + 1] * v[a, b + 1])
            if noisy:
                s += (u[a, b] * xu[a, b] + u[a + 1, b] * xu[a + 1, b]
                      + v[a, b] * xv[a, b] + v[a, b + 1] * xv[a, b + 1])
            kin[a, b] = 0.5 * s
    for b in range(1, d + 1):
        kin[0, b] = kin[d, b]
    for a in range(n):
        kin[a, 0] = kin[a, 1]
    for a in range(1, d + 1):
        for b in range(1, d + 1):
            # mass fluxes on the faces around corners (a, b), (a, b+1), (a+1, b)
            fy_sw = 0.5 * (e[a - 1, b - 1] + e[a - 1, b]) * cv[a - 1, b]
            fy_s = 0.5 * (e[a, b - 1] + e[a, b]) * cv[a, b]
            fy_nw = 0.5 * (e[a - 1, b] + e[a - 1, b + 1]) * cv[a - 1, b + 1]
            fy_n = 0.5 * (e[a, b] + e[a, b + 1]) * cv[a, b + 1]
            fx_sw = 0.5 * (e[a - 1, b - 1] + e[a, b - 1]) * cu[a, b - 1]
            fx_w = 0.5 * (e[a - 1, b] + e[a, b]) * cu[a, b]
            fx_se = 0.5 * (e[a, b - 1] + e[a + 1, b - 1]) * cu[a + 1, b - 1]
            fx_e = 0.5 * (e[a, b] + e[a + 1, b]) * cu[a + 1, b]
            qv = 0.5 * (q[a, b] * 0.5 * (fy_sw + fy_s) + q[a, b + 1] * 0.5 * (fy_nw + fy_n))
            qu = 0.5 * (q[a, b] * 0.5 * (fx_sw + fx_w) + q[a + 1, b] * 0.5 * (fx_se + fx_e))
            lap_u = (u[a + 1, b] + u[a - 1, b] + u[a, b + 1] + u[a, b - 1] - 4.0 * u[a, b]) / (dx * dx)
            lap_v = (v[a + 1, b] + v[a - 1, b] + v[a, b + 1] + v[a, b - 1] - 4.0 * v[a, b]) / (dx * dx)
            out[0, a, b] = (
                qv - (kin[a, b] - kin[a - 1, b]) / dx
                + (-g * (e[a, b] - e[a - 1, b]) / dx + nu * lap_u) * dt
            )
            if b > 1:
                out[1, a, b] = (
                    -qu - (kin[a, b] - kin[a, b - 1]) / dx
                    + (-g * (e[a, b] - e[a, b - 1]) / dx + nu * lap_v) * dt
                )
            out[2, a, b] = -((fx_e - fx_w) + (fy_n - fy_s)) / dx


@njit(cache=True)
def rk4_batch(data, xu, xv, noisy, rot, g, nu, dt):
    """RK4 step for every state in ``data`` (P, 3, n, n); ``xu``/``xv`` are (P, n, n)."""
    out = np.empty_like(data)
    k1 = np.empty_like(data[0])
    k2 = np.empty_like(k1)
    k3 = np.empty_like(k1)
    k4 = np.empty_like(k1)
    y = np.empty_like(k1)
    q = np.zeros(data.shape[-2:])
    cu = np.empty_like(q)
    cv = np.empty_like(q)
    kin = np.zeros_like(q)
    for p in range(data.shape[0]):
        x = data[p]
        _increment(x, xu[p], xv[p], noisy, rot, g, nu, dt, k1, q, cu, cv, kin)
        y[:] = x + 0.5 * k1
        _fill(y)
        _increment(y, xu[p], xv[p], noisy, rot, g, nu, dt, k2, q, cu, cv, kin)
        y[:] = x + 0.5 * k2
        _fill(y)
        _increment(y, xu[p], xv[p], noisy, rot, g, nu, dt, k3, q, cu, cv, kin)
        y[:] = x + k3
        _fill(y)
        _increment(y, xu[p], xv[p], noisy, rot, g, nu, dt, k4, q, cu, cv, kin)
        res = out[p]
        res[:] = x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        _fill(res)
    return out
