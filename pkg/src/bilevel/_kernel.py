"""Compiled composite-gradient loop.

Mirrors ``optimizer._run_reference`` step for step; the two are checked
against each other in the test suite. Only the per-iteration arithmetic
lives here, result assembly stays in Python.
"""

import math

import numba
import numpy as np

LOSS_CODES = {"least_squares": 0, "huber": 1, "tukey": 2, "cauchy": 3}
PENALTY_CODES = {"lasso": 0, "mcp": 1}

OK, BAD_GRADIENT, STEP_UNDERFLOW, BAD_OBJECTIVE, ROUNDING_STOP = 0, 1, 2, 3, 4

_jit = numba.njit(cache=True, nogil=True)
# reassociation only, so NaN and Inf still propagate
_jit_fast = numba.njit(cache=True, nogil=True, fastmath={"reassoc", "contract"})


@_jit
def _loss_value(code, a, u):
    if code == 0:
        return 0.5 * u * u
    if code == 1:
        au = abs(u)
        if au <= a:
            return 0.5 * u * u
        return a * au - 0.5 * a * a
    if code == 2:
        r = (u / a) ** 2
        if r > 1.0:
            r = 1.0
        return (a * a / 6.0) * (1.0 - (1.0 - r) ** 3)
    return 0.5 * a * a * math.log1p((u / a) ** 2)


@_jit
def _loss_deriv(code, a, u):
    if code == 0:
        return u
    if code == 1:
        if u > a:
            return a
        if u < -a:
            return -a
        return u
    if code == 2:
        if abs(u) < a:
            r = 1.0 - (u / a) ** 2
            return u * r * r
        return 0.0
    return u / (1.0 + (u / a) ** 2)


@_jit
def _q(code, b, t, lam):
    if code == 0:
        return 0.0
    if t <= b * lam:
        return t * t / (2.0 * b)
    return lam * t - 0.5 * b * lam * lam


@_jit
def _q_deriv_over_t(code, b, t, lam):
    # q'(t) / t for t > 0
    if code == 0:
        return 0.0
    return min(lam, t / b) / t


@_jit
def _group_norms(beta, starts, out):
    for j in range(starts.shape[0] - 1):
        s = 0.0
        for m in range(starts[j], starts[j + 1]):
            s += beta[m] * beta[m]
        out[j] = math.sqrt(s)


@_jit_fast
def _residual(XF, y, beta, r):
    n, p = XF.shape
    for i in range(n):
        r[i] = y[i]
    for m in range(p):
        bm = beta[m]
        if bm != 0.0:
            for i in range(n):
                r[i] -= XF[i, m] * bm


@_jit
def _smooth_value(r, v, wv, loss_code, alpha, pen_code, b, lam_j, norms):
    n = r.shape[0]
    s = 0.0
    for i in range(n):
        s += wv[i] * _loss_value(loss_code, alpha, r[i] * v[i])
    val = s / n
    if pen_code != 0:
        for j in range(lam_j.shape[0]):
            val -= _q(pen_code, b, norms[j], lam_j[j])
    return val


@_jit_fast
def _smooth_grad(XF, r, v, w, loss_code, alpha, pen_code, b, lam_j, starts, beta, norms,
                 u, g):
    n, p = XF.shape
    for i in range(n):
        u[i] = w[i] * _loss_deriv(loss_code, alpha, r[i] * v[i])
    for m in range(p):
        s = 0.0
        for i in range(n):
            s += XF[i, m] * u[i]
        g[m] = -s / n
    if pen_code != 0:
        for j in range(lam_j.shape[0]):
            if norms[j] > 0.0:
                c = _q_deriv_over_t(pen_code, b, norms[j], lam_j[j])
                for m in range(starts[j], starts[j + 1]):
                    g[m] -= c * beta[m]


@_jit
def _l1_part(lam_j, norms):
    s = 0.0
    for j in range(lam_j.shape[0]):
        s += lam_j[j] * norms[j]
    return s


@_jit
def _prox_step(beta, g, eta, lam_j, starts, R, z_norms, out):
    p = beta.shape[0]
    for m in range(p):
        out[m] = beta[m] - eta * g[m]
    _group_norms(out, starts, z_norms)
    for j in range(lam_j.shape[0]):
        thr = eta * lam_j[j]
        nz = z_norms[j]
        if nz > thr:
            f = 1.0 - thr / nz
        else:
            f = 0.0
        for m in range(starts[j], starts[j + 1]):
            out[m] *= f
    l1 = 0.0
    for m in range(p):
        l1 += abs(out[m])
    if l1 > R:
        for m in range(p):
            out[m] *= R / l1


@_jit
def _stationarity(beta, g, lam_j, starts, norms):
    worst = 0.0
    for j in range(lam_j.shape[0]):
        s = 0.0
        if norms[j] > 0.0:
            c = lam_j[j] / norms[j]
            for m in range(starts[j], starts[j + 1]):
                e = g[m] + c * beta[m]
                s += e * e
            viol = math.sqrt(s)
        else:
            for m in range(starts[j], starts[j + 1]):
                s += g[m] * g[m]
            viol = math.sqrt(s) - lam_j[j]
            if viol < 0.0:
                viol = 0.0
        if viol > worst:
            worst = viol
    return worst


@_jit
def solve(XF, y, w, v, loss_code, alpha, pen_code, b, lam_j, starts, beta0,
          R, max_iters, tol_obj, tol_stat, eta_init, eta_shrink, eta_grow, eta_max,
          max_halvings):
    n, p = XF.shape
    J = lam_j.shape[0]
    wv = w / v
    eps8 = 8.0 * 2.220446049250313e-16

    beta = beta0.copy()
    r = np.empty(n)
    u = np.empty(n)
    g = np.empty(p)
    norms = np.empty(J)
    cand = np.empty(p)
    d = np.empty(p)
    r_c = np.empty(n)
    norms_c = np.empty(J)
    z_norms = np.empty(J)
    trace = np.empty(max_iters + 1)

    _residual(XF, y, beta, r)
    _group_norms(beta, starts, norms)
    f = _smooth_value(r, v, wv, loss_code, alpha, pen_code, b, lam_j, norms)
    _smooth_grad(XF, r, v, w, loss_code, alpha, pen_code, b, lam_j, starts, beta, norms, u, g)
    F = f + _l1_part(lam_j, norms)
    trace[0] = F
    if not math.isfinite(F):
        return beta, trace[:1], 0, False, math.inf, eta_init, BAD_OBJECTIVE
    stat = _stationarity(beta, g, lam_j, starts, norms)
    eta = eta_init
    converged = False
    status = OK
    it = 0
    k = 1
    while it < max_iters:
        for m in range(p):
            if not math.isfinite(g[m]):
                return beta, trace[:k], it, False, stat, eta, BAD_GRADIENT
        slack = eps8 * max(1.0, abs(f))
        accepted = False
        f_c = 0.0
        for _ in range(max_halvings + 1):
            _prox_step(beta, g, eta, lam_j, starts, R, z_norms, cand)
            gd = 0.0
            dd = 0.0
            for m in range(p):
                d[m] = cand[m] - beta[m]
                gd += g[m] * d[m]
                dd += d[m] * d[m]
            _residual(XF, y, cand, r_c)
            _group_norms(cand, starts, norms_c)
            f_c = _smooth_value(r_c, v, wv, loss_code, alpha, pen_code, b, lam_j, norms_c)
            bound = f + gd + dd / (2.0 * eta)
            if math.isfinite(f_c) and f_c <= bound + slack:
                accepted = True
                break
            eta *= eta_shrink
        if not accepted:
            return beta, trace[:k], it, False, stat, eta, STEP_UNDERFLOW
        it += 1
        F_c = f_c + _l1_part(lam_j, norms_c)
        if not math.isfinite(F_c):
            return beta, trace[:k], it, False, stat, eta, BAD_OBJECTIVE
        if F_c > F:
            status = ROUNDING_STOP
            break
        change = abs(F - F_c) / max(1.0, abs(F))
        for m in range(p):
            beta[m] = cand[m]
        for i in range(n):
            r[i] = r_c[i]
        for j in range(J):
            norms[j] = norms_c[j]
        f = f_c
        F = F_c
        _smooth_grad(XF, r, v, w, loss_code, alpha, pen_code, b, lam_j, starts, beta, norms, u, g)
        trace[k] = F
        k += 1
        stat = _stationarity(beta, g, lam_j, starts, norms)
        if change < tol_obj and stat < tol_stat:
            converged = True
            break
        eta = min(eta * eta_grow, eta_max)
    for m in range(p):
        if not math.isfinite(g[m]):
            return beta, trace[:k], it, False, stat, eta, BAD_GRADIENT
    return beta, trace[:k], it, converged, stat, eta, status
