"""Proportional-fair uplink design: receiver filters and power control.

The problem maximizes ``sum_k log2(R_k)`` over unit-norm receiver filters
``t_k`` and powers ``p_k in [p_min, 1]``.  For fixed powers each user's
filter maximizes a Rayleigh quotient with a rank-one numerator, which has
the closed form ``t_k ~ D_k^{-1} xi_k``.  For fixed filters the powers are
found by gradient projection with Armijo backtracking.  The two steps are
alternated until the relative objective improvement drops below ``eps``.

The functions operating on :class:`QuadraticForms` build every matrix
explicitly and are the readable reference.  :func:`solve_alternating` runs
the whole loop inside a kernel backend (see :mod:`cfpf.kernels`).
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import kernels
from .channel import NetworkRealization

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class SolverOptions:
    eps: float = 1e-3
    max_outer: int = 100
    gp_max_iter: int = 500
    # inner GP stopping tolerance (relative objective improvement)
    gp_tol: float = 1e-6
    armijo_sigma: float = 1e-4
    armijo_shrink: float = 0.5
    step0: float = 1.0
    p_min: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0 or self.gp_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.armijo_shrink < 1:
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if not 0 < self.armijo_sigma < 1:
            raise ValueError("armijo_sigma must lie in (0, 1)")
        if not 0 < self.p_min < 1:
            raise ValueError("p_min must lie in (0, 1)")
        if self.max_outer < 1 or self.gp_max_iter < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.step0 <= 0:
            raise ValueError("step0 must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SolverOptions":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def kernel_args(self) -> dict:
        return dict(
            p_min=self.p_min,
            gp_tol=self.gp_tol,
            gp_max_iter=self.gp_max_iter,
            sigma=self.armijo_sigma,
            shrink=self.armijo_shrink,
            step0=self.step0,
        )


@dataclass(frozen=True, eq=False)
class QuadraticForms:
    """Per-user vectors and diagonal matrices of the SINR quadratic forms.

    ``xi[k]`` is the M-vector of user ``k`` (also the diagonal of its noise
    matrix), ``Y[k, i]`` the diagonal of ``Y_ki`` and ``zeta[k, i]`` the
    pilot-contamination vector (all zeros for ``i == k`` and for users on
    orthogonal pilots).
    """

    xi: np.ndarray  # (K, M)
    Y: np.ndarray  # (K, K, M)
    zeta: np.ndarray  # (K, K, M)

    @property
    def K(self) -> int:
        return self.xi.shape[0]

    @property
    def M(self) -> int:
        return self.xi.shape[1]

    def interference_matrix(self, k: int, p, rho: float) -> np.ndarray:
        """``D_k``: interference-plus-noise matrix of user ``k``."""
        p = np.asarray(p, dtype=float)
        D = np.diag(rho * (p @ self.Y[k]) + self.xi[k])
        for i in range(self.K):
            if i != k:
                D += rho * p[i] * np.outer(self.zeta[k, i], self.zeta[k, i])
        return D


@dataclass(frozen=True)
class SINRCoefficients:
    alpha: np.ndarray
    chi: np.ndarray
    eta: np.ndarray
    delta: np.ndarray

    def astuple(self):
        return self.alpha, self.chi, self.eta, self.delta


@dataclass(eq=False)
class SolverResult:
    t: np.ndarray
    p: np.ndarray
    rates: np.ndarray
    trace: np.ndarray
    objective: float
    outer_iterations: int
    converged: bool
    wall_time: float
    backend: str


def build_quadratic_forms(realization: NetworkRealization) -> QuadraticForms:
    beta = realization.beta
    if np.any(beta <= 0):
        raise ValueError("large-scale fading must be strictly positive")
    xi = realization.xi.T  # (K, M)
    b = beta.T  # (K, M)
    phi2 = realization.phi2
    Y = xi[:, None, :] * b[None, :, :]
    zeta = phi2[:, :, None] * xi[:, None, :] * b[None, :, :] / b[:, None, :]
    idx = np.arange(realization.K)
    zeta[idx, idx, :] = 0.0
    return QuadraticForms(xi=xi, Y=Y, zeta=zeta)


def optimal_filter(k: int, p, forms: QuadraticForms, rho: float) -> np.ndarray:
    """SINR-maximizing unit filter of user ``k`` for fixed powers.

    The numerator matrix ``rho p_k xi_k xi_k^T`` has rank one, so the
    maximizing generalized eigenvector is ``D_k^{-1} xi_k`` up to scale.
    """
    D = forms.interference_matrix(k, p, rho)
    x = cho_solve(cho_factor(D, lower=True), forms.xi[k])
    return x / np.linalg.norm(x)


def filter_sinr(k: int, t_k, p, forms: QuadraticForms, rho: float):
    """SINR of user ``k`` for filter(s) ``t_k`` (shape ``(M,)`` or ``(M, n)``)."""
    t_k = np.asarray(t_k, dtype=float)
    D = forms.interference_matrix(k, p, rho)
    num = rho * p[k] * (forms.xi[k] @ t_k) ** 2
    den = np.einsum("m...,mn,n...->...", t_k, D, t_k)
    return num / den


def sinr_coefficients(t, forms: QuadraticForms, rho: float) -> SINRCoefficients:
    t = np.asarray(t, dtype=float)
    tk = t.T  # (K, M)
    alpha = rho * np.einsum("km,km->k", tk, forms.xi) ** 2
    chi = rho * np.einsum("km,kim->ki", tk * tk, forms.Y)
    eta = rho * np.einsum("km,kim->ki", tk, forms.zeta) ** 2
    delta = np.einsum("km,km->k", tk * tk, forms.xi)
    return SINRCoefficients(alpha, chi, eta, delta)


def _denominator(p, c: SINRCoefficients):
    return c.chi @ p + c.eta @ p + c.delta


def sinr(p, coeffs: SINRCoefficients, k: int | None = None):
    p = np.asarray(p, dtype=float)
    s = coeffs.alpha * p / _denominator(p, coeffs)
    return s if k is None else float(s[k])


def rate(p, coeffs: SINRCoefficients, k: int | None = None):
    """Achievable rate ``log2(1 + SINR)`` in bits/s/Hz (before pilot overhead)."""
    r = np.log2(1.0 + sinr(p, coeffs))
    return r if k is None else float(r[k])


def pf_objective(p, coeffs: SINRCoefficients) -> float:
    r = rate(p, coeffs)
    if np.any(r <= 0):
        raise ValueError("zero rate: some power is below p_min")
    return float(np.sum(np.log2(r)))


def pf_gradient(p, coeffs: SINRCoefficients) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    a, chi, eta = coeffs.alpha, coeffs.chi, coeffs.eta
    den = _denominator(p, coeffs)
    s = a * p / den
    r = np.log2(1.0 + s)
    if np.any(r <= 0):
        raise ValueError("zero rate: some power is below p_min")
    # dS_k/dp_j for all (k, j)
    dS = -(a * p / den**2)[:, None] * (chi + eta)
    diag = a * (den - p * np.diag(chi)) / den**2
    dS[np.diag_indices_from(dS)] = diag
    w = 1.0 / (r * _LN2) / ((1.0 + s) * _LN2)
    return w @ dS


def project_box(p_raw, p_min: float = SolverOptions.p_min) -> np.ndarray:
    return np.clip(np.asarray(p_raw, dtype=float), p_min, 1.0)


def solve_powers(p0, coeffs: SINRCoefficients, options: SolverOptions = SolverOptions(),
                 backend: str | None = None) -> np.ndarray:
    """Gradient-projection power update for fixed filters.

    The result never has a lower objective than ``p0``.
    """
    kern = kernels.get(backend)
    a = [np.ascontiguousarray(x, dtype=float) for x in coeffs.astuple()]
    p, _, _ = kern.solve_powers(
        np.asarray(p0, dtype=float), *a,
        options.p_min, options.gp_tol, options.gp_max_iter,
        options.armijo_sigma, options.armijo_shrink, options.step0,
    )
    return p


def _kernel_inputs(realization: NetworkRealization):
    return (
        np.ascontiguousarray(realization.xi, dtype=float),
        np.ascontiguousarray(realization.beta, dtype=float),
        np.ascontiguousarray(realization.phi2, dtype=float),
    )


def solve_alternating(realization: NetworkRealization, options: SolverOptions = SolverOptions(),
                      backend: str | None = None) -> SolverResult:
    """Alternating filter / power optimization from full power.

    The returned filters are optimal for the returned powers, and
    ``objective`` is evaluated at that pair; it is never below ``trace[-1]``.
    ``trace[0]`` is the objective at full power with its optimal filters.
    """
    name = backend or kernels.ACTIVE
    kern = kernels.get(name)
    xi, beta, phi2 = _kernel_inputs(realization)
    start = time.perf_counter()
    t, p, trace, n_outer, converged = kern.alternate(
        np.ones(realization.K), xi, beta, phi2, realization.rho,
        options.eps, options.max_outer, **options.kernel_args(),
    )
    wall = time.perf_counter() - start
    # same routine as the network's refinement path, so identical powers give identical rates
    _, rates = kern.refine(p, xi, beta, phi2, realization.rho)
    if np.any(rates <= 0):
        raise ValueError("zero rate at the solver output")
    return SolverResult(
        t=t,
        p=p,
        rates=rates,
        trace=np.asarray(trace),
        objective=float(np.sum(np.log2(rates))),
        outer_iterations=int(n_outer),
        converged=bool(converged),
        wall_time=wall,
        backend=name,
    )


def refine(realization: NetworkRealization, p, backend: str | None = None):
    """Optimal filters for given powers and the resulting per-user rates."""
    xi, beta, phi2 = _kernel_inputs(realization)
    p = np.ascontiguousarray(p, dtype=float)
    return kernels.get(backend).refine(p, xi, beta, phi2, realization.rho)
