"""Pure numpy implementation of the solver kernels.

Array conventions shared with the compiled backend:

- ``xi``, ``beta``: ``(M, K)`` float64
- ``phi2``: ``(K, K)`` float64, squared pilot inner products
- ``t``: ``(M, K)`` receiver filters, unit-norm columns
- ``alpha``, ``delta``: ``(K,)``; ``chi``, ``eta``: ``(K, K)`` with ``eta`` zero on the diagonal
"""
import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve

_LN2 = math.log(2.0)
MIN_STEP = 1e-12


def interference_matrix(k, p, xi, beta, phi2, rho):
    """Denominator matrix of user ``k``'s SINR quadratic form."""
    xk = xi[:, k]
    bk = beta[:, k]
    D = np.diag(xk + rho * xk * (beta @ p))
    for i in np.flatnonzero(phi2[k]):
        if i == k:
            continue
        z = phi2[k, i] * xk * beta[:, i] / bk
        D += (rho * p[i]) * np.outer(z, z)
    return D


def filter_all(p, xi, beta, phi2, rho):
    M, K = xi.shape
    t = np.empty((M, K))
    for k in range(K):
        D = interference_matrix(k, p, xi, beta, phi2, rho)
        x = cho_solve(cho_factor(D, lower=True), xi[:, k])
        t[:, k] = x / np.linalg.norm(x)
    return t


def coefficients(t, xi, beta, phi2, rho):
    alpha = rho * np.sum(t * xi, axis=0) ** 2
    chi = rho * ((t * t * xi).T @ beta)
    proj = (t * xi / beta).T @ beta  # proj[k, i] = t_k . (xi_k * beta_i / beta_k)
    eta = rho * phi2 * proj**2
    np.fill_diagonal(eta, 0.0)
    delta = np.sum(t * t * xi, axis=0)
    return alpha, chi, eta, delta


def _parts(p, alpha, chi, eta, delta):
    den = (chi + eta) @ p + delta
    sinr = alpha * p / den
    rate = np.log1p(sinr) / _LN2
    return den, sinr, rate


def objective(p, alpha, chi, eta, delta):
    _, _, rate = _parts(p, alpha, chi, eta, delta)
    if np.any(rate <= 0.0):
        return -math.inf
    return float(np.sum(np.log2(rate)))


def gradient(p, alpha, chi, eta, delta):
    den, sinr, rate = _parts(p, alpha, chi, eta, delta)
    w = 1.0 / (rate * _LN2 * (1.0 + sinr) * _LN2)
    c = w * alpha * p / den**2
    return w * alpha / den - (chi + eta).T @ c


def solve_powers(p0, alpha, chi, eta, delta, p_min, tol, max_iter, sigma, shrink, step0):
    """Gradient projection with Armijo backtracking; returns ``(p, f, iterations)``."""
    p = np.clip(np.asarray(p0, dtype=float), p_min, 1.0)
    f = objective(p, alpha, chi, eta, delta)
    it = 0
    while it < max_iter:
        it += 1
        g = gradient(p, alpha, chi, eta, delta)
        step = step0
        accepted = False
        while step >= MIN_STEP:
            p_new = np.clip(p + step * g, p_min, 1.0)
            f_new = objective(p_new, alpha, chi, eta, delta)
            if f_new >= f + sigma * float(g @ (p_new - p)):
                accepted = True
                break
            step *= shrink
        if not accepted:
            break
        f_old = f
        p, f = p_new, f_new
        if f - f_old <= tol * abs(f_old):
            break
    return p, f, it


def alternate(p0, xi, beta, phi2, rho, eps, max_outer, p_min,
              gp_tol, gp_max_iter, sigma, shrink, step0):
    """Alternate filter and power updates.

    Returns ``(t, p, trace, outer_iterations, converged)`` where ``t`` are
    the optimal filters for the returned ``p`` and ``trace[0]`` is the
    objective at the initial powers.
    """
    p = np.clip(np.asarray(p0, dtype=float), p_min, 1.0)
    t = filter_all(p, xi, beta, phi2, rho)
    C = coefficients(t, xi, beta, phi2, rho)
    f_prev = objective(p, *C)
    trace = [f_prev]
    converged = False
    n = 0
    while n < max_outer:
        n += 1
        p, f, _ = solve_powers(p, *C, p_min, gp_tol, gp_max_iter, sigma, shrink, step0)
        trace.append(f)
        t = filter_all(p, xi, beta, phi2, rho)
        C = coefficients(t, xi, beta, phi2, rho)
        if f - f_prev <= eps * abs(f_prev):
            converged = True
            break
        f_prev = f
    return t, p, np.array(trace), n, converged


def refine(p, xi, beta, phi2, rho):
    """Optimal filters for fixed powers and the resulting per-user rates."""
    t = filter_all(p, xi, beta, phi2, rho)
    alpha, chi, eta, delta = coefficients(t, xi, beta, phi2, rho)
    _, _, rate = _parts(p, alpha, chi, eta, delta)
    return t, rate


def rdn_forward(x, fel_w, fel_b, rdb_w, rdb_b, fuse_w, fuse_b, frl_w, frl_b, relu, tanh_out):
    """Single-sample forward pass on packed weights (see ``cfpf.rdn.pack_rdn``)."""
    K = x.shape[0]
    G, L = fel_w.shape[0], rdb_b.shape[0]
    act = (lambda z: np.maximum(z, 0.0)) if relu else np.tanh
    feats = act(x @ fel_w.T + fel_b)
    off = 0
    for l in range(1, L + 1):
        cin = l * G
        w = rdb_w[off:off + G * 3 * cin].reshape(G, 3, cin)
        off += G * 3 * cin
        xp = np.pad(feats, ((1, 1), (0, 0)))
        z = xp[0:K] @ w[:, 0].T + xp[1:K + 1] @ w[:, 1].T + xp[2:K + 2] @ w[:, 2].T
        feats = np.concatenate([feats, act(z + rdb_b[l - 1])], axis=1)
    bf = feats[:, :G] + feats @ fuse_w.T + fuse_b
    bp = np.pad(bf, ((1, 1), (0, 0)))
    z = bp[0:K] @ frl_w[0] + bp[1:K + 1] @ frl_w[1] + bp[2:K + 2] @ frl_w[2] + frl_b
    if tanh_out:
        return 0.5 * (np.tanh(z) + 1.0)
    return 0.5 * (1.0 + np.tanh(0.5 * z))
