# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled solver kernels.

Same contracts as ``_reference``; arrays must be C-contiguous float64.
"""
import numpy as np
from libc.math cimport sqrt, log, log1p, fabs, tanh, INFINITY

cdef double LN2 = log(2.0)
cdef double MIN_STEP = 1e-12


cdef int _cholesky_solve(double[:, ::1] A, double[::1] b, Py_ssize_t n) noexcept nogil:
    """In-place lower Cholesky of A, then solve A x = b overwriting b. Returns -1 if not PD."""
    cdef Py_ssize_t i, j, c
    cdef double s
    for j in range(n):
        s = A[j, j]
        for c in range(j):
            s -= A[j, c] * A[j, c]
        if s <= 0.0:
            return -1
        A[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for c in range(j):
                s -= A[i, c] * A[j, c]
            A[i, j] = s / A[j, j]
    for i in range(n):
        s = b[i]
        for c in range(i):
            s -= A[i, c] * b[c]
        b[i] = s / A[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for c in range(i + 1, n):
            s -= A[c, i] * b[c]
        b[i] = s / A[i, i]
    return 0


cdef int _filters(double[::1] p, double[:, ::1] xi, double[:, ::1] beta,
                  double[:, ::1] phi2, double rho, double[:, ::1] t,
                  double[:, ::1] D, double[::1] x, double[::1] z, double[::1] bp) noexcept nogil:
    cdef Py_ssize_t M = xi.shape[0], K = xi.shape[1]
    cdef Py_ssize_t m, n, i, k
    cdef double s, w, nrm
    for m in range(M):
        s = 0.0
        for i in range(K):
            s += beta[m, i] * p[i]
        bp[m] = s
    for k in range(K):
        for m in range(M):
            for n in range(M):
                D[m, n] = 0.0
            D[m, m] = xi[m, k] + rho * xi[m, k] * bp[m]
        for i in range(K):
            if i == k or phi2[k, i] == 0.0:
                continue
            w = rho * p[i]
            for m in range(M):
                z[m] = phi2[k, i] * xi[m, k] * beta[m, i] / beta[m, k]
            for m in range(M):
                for n in range(m + 1):
                    D[m, n] += w * z[m] * z[n]
        for m in range(M):
            x[m] = xi[m, k]
        if _cholesky_solve(D, x, M) != 0:
            return -1
        nrm = 0.0
        for m in range(M):
            nrm += x[m] * x[m]
        nrm = sqrt(nrm)
        for m in range(M):
            t[m, k] = x[m] / nrm
    return 0


cdef void _coefficients(double[:, ::1] t, double[:, ::1] xi, double[:, ::1] beta,
                        double[:, ::1] phi2, double rho, double[::1] alpha,
                        double[:, ::1] chi, double[:, ::1] eta, double[::1] delta) noexcept nogil:
    cdef Py_ssize_t M = xi.shape[0], K = xi.shape[1]
    cdef Py_ssize_t m, i, k
    cdef double a, d, c, e, tx
    for k in range(K):
        a = 0.0
        d = 0.0
        for m in range(M):
            tx = t[m, k] * xi[m, k]
            a += tx
            d += t[m, k] * tx
        alpha[k] = rho * a * a
        delta[k] = d
        for i in range(K):
            c = 0.0
            for m in range(M):
                c += t[m, k] * t[m, k] * xi[m, k] * beta[m, i]
            chi[k, i] = rho * c
            if i == k or phi2[k, i] == 0.0:
                eta[k, i] = 0.0
            else:
                e = 0.0
                for m in range(M):
                    e += t[m, k] * xi[m, k] * beta[m, i] / beta[m, k]
                eta[k, i] = rho * phi2[k, i] * e * e


cdef double _objective(double[::1] p, double[::1] alpha, double[:, ::1] chi,
                       double[:, ::1] eta, double[::1] delta) noexcept nogil:
    cdef Py_ssize_t K = p.shape[0]
    cdef Py_ssize_t k, i
    cdef double den, r, f = 0.0
    for k in range(K):
        den = delta[k]
        for i in range(K):
            den += (chi[k, i] + eta[k, i]) * p[i]
        r = log1p(alpha[k] * p[k] / den) / LN2
        if r <= 0.0:
            return -INFINITY
        f += log(r) / LN2
    return f


cdef void _gradient(double[::1] p, double[::1] alpha, double[:, ::1] chi,
                    double[:, ::1] eta, double[::1] delta, double[::1] g,
                    double[::1] c) noexcept nogil:
    cdef Py_ssize_t K = p.shape[0]
    cdef Py_ssize_t k, j
    cdef double den, sinr, rate, w
    for j in range(K):
        g[j] = 0.0
    for k in range(K):
        den = delta[k]
        for j in range(K):
            den += (chi[k, j] + eta[k, j]) * p[j]
        sinr = alpha[k] * p[k] / den
        rate = log1p(sinr) / LN2
        w = 1.0 / (rate * LN2 * (1.0 + sinr) * LN2)
        g[k] += w * alpha[k] / den
        c[k] = w * alpha[k] * p[k] / (den * den)
    for k in range(K):
        for j in range(K):
            g[j] -= (chi[k, j] + eta[k, j]) * c[k]


cdef inline double _clip(double v, double lo, double hi) noexcept nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


cdef double _solve_powers(double[::1] p, double[::1] alpha, double[:, ::1] chi,
                          double[:, ::1] eta, double[::1] delta, double p_min, double tol,
                          Py_ssize_t max_iter, double sigma, double shrink, double step0,
                          double[::1] g, double[::1] c, double[::1] p_new,
                          Py_ssize_t* iters) noexcept nogil:
    """Run GP in place on ``p``; returns the final objective."""
    cdef Py_ssize_t K = p.shape[0]
    cdef Py_ssize_t k, it = 0
    cdef double f, f_new, f_old, step, dot
    cdef bint accepted
    for k in range(K):
        p[k] = _clip(p[k], p_min, 1.0)
    f = _objective(p, alpha, chi, eta, delta)
    while it < max_iter:
        it += 1
        _gradient(p, alpha, chi, eta, delta, g, c)
        step = step0
        accepted = False
        while step >= MIN_STEP:
            dot = 0.0
            for k in range(K):
                p_new[k] = _clip(p[k] + step * g[k], p_min, 1.0)
                dot += g[k] * (p_new[k] - p[k])
            f_new = _objective(p_new, alpha, chi, eta, delta)
            if f_new >= f + sigma * dot:
                accepted = True
                break
            step *= shrink
        if not accepted:
            break
        f_old = f
        for k in range(K):
            p[k] = p_new[k]
        f = f_new
        if f - f_old <= tol * fabs(f_old):
            break
    iters[0] = it
    return f


def filter_all(double[::1] p, double[:, ::1] xi, double[:, ::1] beta,
               double[:, ::1] phi2, double rho):
    cdef Py_ssize_t M = xi.shape[0], K = xi.shape[1]
    t = np.empty((M, K))
    D = np.empty((M, M))
    x = np.empty(M)
    z = np.empty(M)
    bp = np.empty(M)
    if _filters(p, xi, beta, phi2, rho, t, D, x, z, bp) != 0:
        raise np.linalg.LinAlgError("interference matrix is not positive definite")
    return t


def coefficients(double[:, ::1] t, double[:, ::1] xi, double[:, ::1] beta,
                 double[:, ::1] phi2, double rho):
    cdef Py_ssize_t K = xi.shape[1]
    alpha = np.empty(K)
    chi = np.empty((K, K))
    eta = np.empty((K, K))
    delta = np.empty(K)
    _coefficients(t, xi, beta, phi2, rho, alpha, chi, eta, delta)
    return alpha, chi, eta, delta


def objective(double[::1] p, double[::1] alpha, double[:, ::1] chi,
              double[:, ::1] eta, double[::1] delta):
    return _objective(p, alpha, chi, eta, delta)


def gradient(double[::1] p, double[::1] alpha, double[:, ::1] chi,
             double[:, ::1] eta, double[::1] delta):
    cdef Py_ssize_t K = p.shape[0]
    g = np.empty(K)
    c = np.empty(K)
    _gradient(p, alpha, chi, eta, delta, g, c)
    return g


def solve_powers(p0, double[::1] alpha, double[:, ::1] chi, double[:, ::1] eta,
                 double[::1] delta, double p_min, double tol, Py_ssize_t max_iter,
                 double sigma, double shrink, double step0):
    cdef Py_ssize_t K = alpha.shape[0]
    cdef Py_ssize_t iters = 0
    p = np.array(p0, dtype=np.float64, copy=True)
    g = np.empty(K)
    c = np.empty(K)
    p_new = np.empty(K)
    f = _solve_powers(p, alpha, chi, eta, delta, p_min, tol, max_iter,
                      sigma, shrink, step0, g, c, p_new, &iters)
    return p, f, iters


def alternate(p0, double[:, ::1] xi, double[:, ::1] beta, double[:, ::1] phi2,
              double rho, double eps, Py_ssize_t max_outer, double p_min,
              double gp_tol, Py_ssize_t gp_max_iter, double sigma, double shrink,
              double step0):
    cdef Py_ssize_t M = xi.shape[0], K = xi.shape[1]
    cdef Py_ssize_t n = 0, iters = 0, k
    cdef double f, f_prev
    cdef bint converged = False
    cdef int status
    p_arr = np.array(p0, dtype=np.float64, copy=True)
    cdef double[::1] p = p_arr
    for k in range(K):
        p[k] = _clip(p[k], p_min, 1.0)
    t_arr = np.empty((M, K))
    alpha_arr = np.empty(K)
    chi_arr = np.empty((K, K))
    eta_arr = np.empty((K, K))
    delta_arr = np.empty(K)
    cdef double[:, ::1] t = t_arr
    cdef double[::1] alpha = alpha_arr
    cdef double[:, ::1] chi = chi_arr
    cdef double[:, ::1] eta = eta_arr
    cdef double[::1] delta = delta_arr
    cdef double[:, ::1] D = np.empty((M, M))
    cdef double[::1] x = np.empty(M)
    cdef double[::1] z = np.empty(M)
    cdef double[::1] bp = np.empty(M)
    cdef double[::1] g = np.empty(K)
    cdef double[::1] c = np.empty(K)
    cdef double[::1] p_new = np.empty(K)
    trace = []

    with nogil:
        status = _filters(p, xi, beta, phi2, rho, t, D, x, z, bp)
    if status != 0:
        raise np.linalg.LinAlgError("interference matrix is not positive definite")
    _coefficients(t, xi, beta, phi2, rho, alpha, chi, eta, delta)
    f_prev = _objective(p, alpha, chi, eta, delta)
    trace.append(f_prev)
    while n < max_outer:
        n += 1
        with nogil:
            f = _solve_powers(p, alpha, chi, eta, delta, p_min, gp_tol, gp_max_iter,
                              sigma, shrink, step0, g, c, p_new, &iters)
            status = _filters(p, xi, beta, phi2, rho, t, D, x, z, bp)
            if status == 0:
                _coefficients(t, xi, beta, phi2, rho, alpha, chi, eta, delta)
        trace.append(f)
        if status != 0:
            raise np.linalg.LinAlgError("interference matrix is not positive definite")
        if f - f_prev <= eps * fabs(f_prev):
            converged = True
            break
        f_prev = f
    return t_arr, p_arr, np.array(trace), n, converged


cdef inline double _inner_act(double z, int relu) noexcept nogil:
    if relu:
        return z if z > 0.0 else 0.0
    return tanh(z)


def rdn_forward(double[:, ::1] x, double[:, ::1] fel_w, double[::1] fel_b,
                double[::1] rdb_w, double[:, ::1] rdb_b, double[:, ::1] fuse_w,
                double[::1] fuse_b, double[:, ::1] frl_w, double frl_b,
                int relu, int tanh_out):
    """Single-sample forward pass on packed weights (see ``pack_rdn``)."""
    cdef Py_ssize_t K = x.shape[0], F = x.shape[1]
    cdef Py_ssize_t G = fel_w.shape[0], L = rdb_b.shape[0]
    cdef Py_ssize_t C = (L + 1) * G
    cdef Py_ssize_t k, g, f, c, j, kk, l, cin, off = 0
    cdef double s
    feats_arr = np.empty((K, C))
    bf_arr = np.empty((K, G))
    out_arr = np.empty(K)
    cdef double[:, ::1] feats = feats_arr
    cdef double[:, ::1] bf = bf_arr
    cdef double[::1] out = out_arr
    with nogil:
        for k in range(K):
            for g in range(G):
                s = fel_b[g]
                for f in range(F):
                    s += x[k, f] * fel_w[g, f]
                feats[k, g] = _inner_act(s, relu)
        for l in range(1, L + 1):
            cin = l * G
            for k in range(K):
                for g in range(G):
                    s = rdb_b[l - 1, g]
                    for j in range(3):
                        kk = k + j - 1
                        if kk < 0 or kk >= K:
                            continue
                        for c in range(cin):
                            s += feats[kk, c] * rdb_w[off + (g * 3 + j) * cin + c]
                    feats[k, l * G + g] = _inner_act(s, relu)
            off += G * 3 * cin
        for k in range(K):
            for g in range(G):
                s = fuse_b[g] + feats[k, g]
                for c in range(C):
                    s += feats[k, c] * fuse_w[g, c]
                bf[k, g] = s
        for k in range(K):
            s = frl_b
            for j in range(3):
                kk = k + j - 1
                if kk < 0 or kk >= K:
                    continue
                for g in range(G):
                    s += bf[kk, g] * frl_w[j, g]
            if tanh_out:
                out[k] = 0.5 * (tanh(s) + 1.0)
            else:
                out[k] = 0.5 * (1.0 + tanh(0.5 * s))
    return out_arr


def refine(double[::1] p, double[:, ::1] xi, double[:, ::1] beta,
           double[:, ::1] phi2, double rho):
    """Optimal filters for fixed powers and the resulting per-user rates."""
    cdef Py_ssize_t M = xi.shape[0], K = xi.shape[1]
    cdef Py_ssize_t k, i
    cdef double den
    cdef int status
    t_arr = np.empty((M, K))
    rates_arr = np.empty(K)
    cdef double[:, ::1] t = t_arr
    cdef double[::1] rates = rates_arr
    cdef double[:, ::1] D = np.empty((M, M))
    cdef double[::1] x = np.empty(M)
    cdef double[::1] z = np.empty(M)
    cdef double[::1] bp = np.empty(M)
    cdef double[::1] alpha = np.empty(K)
    cdef double[:, ::1] chi = np.empty((K, K))
    cdef double[:, ::1] eta = np.empty((K, K))
    cdef double[::1] delta = np.empty(K)
    with nogil:
        status = _filters(p, xi, beta, phi2, rho, t, D, x, z, bp)
        if status == 0:
            _coefficients(t, xi, beta, phi2, rho, alpha, chi, eta, delta)
            for k in range(K):
                den = delta[k]
                for i in range(K):
                    den += (chi[k, i] + eta[k, i]) * p[i]
                rates[k] = log1p(alpha[k] * p[k] / den) / LN2
    if status != 0:
        raise np.linalg.LinAlgError("interference matrix is not positive definite")
    return t_arr, rates_arr
