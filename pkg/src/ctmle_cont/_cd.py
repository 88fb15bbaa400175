"""Numba kernels for L1-penalised logistic regression by coordinate descent.

All arrays are on the standardised scale; ``xt`` is the transposed design
(``p x n``) so that column access is contiguous.
"""

import numpy as np
from numba import njit

OK = 0
NOT_CONVERGED = 1

_W_MIN = 1e-5


@njit(cache=True, nogil=True)
def _softplus(x):
    if x > 0.0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit(cache=True, nogil=True)
def _expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def objective(xt, a, b0, beta, h):
    p, n = xt.shape
    total = 0.0
    for i in range(n):
        eta = b0
        for j in range(p):
            eta += xt[j, i] * beta[j]
        total += _softplus(eta) - a[i] * eta
    pen = 0.0
    for j in range(p):
        pen += abs(beta[j])
    return total / n + h * pen


@njit(cache=True, nogil=True)
def gradient(xt, a, b0, beta):
    """Gradient of the mean logistic loss w.r.t. (intercept, beta)."""
    p, n = xt.shape
    g0 = 0.0
    g = np.zeros(p)
    for i in range(n):
        eta = b0
        for j in range(p):
            eta += xt[j, i] * beta[j]
        r = _expit(eta) - a[i]
        g0 += r
        for j in range(p):
            g[j] += xt[j, i] * r
    return g0 / n, g / n


@njit(cache=True, nogil=True)
def _inner_cd(xt, w, res, eta, xwx, penalised, b0, beta, h, tol, sweeps, max_sweeps):
    """Weighted-least-squares lasso on the current IRLS quadratic.

    ``res`` holds ``w * (z - eta)`` and is updated in place together with
    ``eta`` and ``beta``. Returns ``(b0, sweeps, status)``.
    """
    p, n = xt.shape
    sw = 0.0
    for i in range(n):
        sw += w[i]
    full = True
    while True:
        if sweeps >= max_sweeps:
            return b0, sweeps, NOT_CONVERGED
        sweeps += 1
        maxd = 0.0
        s = 0.0
        for i in range(n):
            s += res[i]
        d0 = s / sw
        if d0 != 0.0:
            b0 += d0
            for i in range(n):
                res[i] -= w[i] * d0
                eta[i] += d0
            maxd = max(maxd, abs(d0))
        for j in range(p):
            if not penalised[j]:
                continue
            if not full and beta[j] == 0.0:
                continue
            g = 0.0
            for i in range(n):
                g += xt[j, i] * res[i]
            u = g / n + xwx[j] * beta[j]
            if u > h:
                new = (u - h) / xwx[j]
            elif u < -h:
                new = (u + h) / xwx[j]
            else:
                new = 0.0
            d = new - beta[j]
            if d != 0.0:
                beta[j] = new
                for i in range(n):
                    res[i] -= w[i] * xt[j, i] * d
                    eta[i] += xt[j, i] * d
                maxd = max(maxd, abs(d))
        if maxd < tol:
            if full:
                return b0, sweeps, OK
            full = True
        else:
            full = False


@njit(cache=True, nogil=True)
def fit_one(xt, a, penalised, h, b0, beta, tol, max_sweeps):
    """Minimise mean logistic loss + h * ||beta||_1 from a warm start.

    Returns ``(b0, beta, sweeps, status)``.
    """
    p, n = xt.shape
    beta = beta.copy()
    eta = np.empty(n)
    w = np.empty(n)
    res = np.empty(n)
    xwx = np.empty(p)
    sweeps = 0
    obj = objective(xt, a, b0, beta, h)
    while True:
        for i in range(n):
            e = b0
            for j in range(p):
                e += xt[j, i] * beta[j]
            eta[i] = e
            pr = _expit(e)
            w[i] = max(pr * (1.0 - pr), _W_MIN)
            res[i] = a[i] - pr
        for j in range(p):
            acc = 0.0
            for i in range(n):
                acc += w[i] * xt[j, i] * xt[j, i]
            xwx[j] = acc / n
        b0_old = b0
        beta_old = beta.copy()
        b0, sweeps, status = _inner_cd(xt, w, res, eta, xwx, penalised, b0, beta, h, tol * 0.1, sweeps, max_sweeps)
        if status != OK:
            return b0, beta, sweeps, status
        new_obj = objective(xt, a, b0, beta, h)
        # step halving guards against Newton overshoot far from the optimum
        halvings = 0
        while new_obj > obj + 1e-14 * max(1.0, abs(obj)) and halvings < 30:
            b0 = 0.5 * (b0 + b0_old)
            for j in range(p):
                beta[j] = 0.5 * (beta[j] + beta_old[j])
            new_obj = objective(xt, a, b0, beta, h)
            halvings += 1
        change = abs(b0 - b0_old)
        for j in range(p):
            change = max(change, abs(beta[j] - beta_old[j]))
        obj = new_obj
        if change < tol:
            return b0, beta, sweeps, OK
        if sweeps >= max_sweeps:
            return b0, beta, sweeps, NOT_CONVERGED


@njit(cache=True, nogil=True)
def fit_path(xt, a, penalised, grid, tol, max_sweeps):
    """Warm-started path over a decreasing grid.

    Returns ``(b0s, betas, status, failed_index)``; on failure the arrays
    are filled up to ``failed_index``.
    """
    p, n = xt.shape
    m = grid.shape[0]
    b0s = np.zeros(m)
    betas = np.zeros((m, p))
    abar = 0.0
    for i in range(n):
        abar += a[i]
    abar /= n
    b0 = np.log(abar / (1.0 - abar))
    beta = np.zeros(p)
    for k in range(m):
        b0, beta, sweeps, status = fit_one(xt, a, penalised, grid[k], b0, beta, tol, max_sweeps)
        if status != OK:
            return b0s, betas, status, k
        b0s[k] = b0
        betas[k, :] = beta
    return b0s, betas, OK, -1
