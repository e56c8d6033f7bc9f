import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfpf import kernels
from cfpf.channel import NetworkConfig, NetworkRealization, drop_network
from cfpf.solver import (
    SINRCoefficients,
    SolverOptions,
    build_quadratic_forms,
    filter_sinr,
    optimal_filter,
    pf_gradient,
    pf_objective,
    project_box,
    rate,
    refine,
    sinr,
    sinr_coefficients,
    solve_alternating,
    solve_powers,
)

DESK = NetworkConfig(M=20, K=8, tau=4)
SMALL = NetworkConfig(M=6, K=4, tau=2)


def make_realization(beta, xi, mu, rho=1.0, tau=1):
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    M, K = beta.shape
    return NetworkRealization(ap_pos=np.zeros((M, 2)), user_pos=np.zeros((K, 2)), beta=beta,
                              mu=np.asarray(mu), xi=xi, rho_p=rho, rho=rho, tau=tau, seed=0)


def random_unit(rng, M, n):
    u = rng.standard_normal((M, n))
    return u / np.linalg.norm(u, axis=0)


def fd_gradient(f, p, h=1e-6):
    g = np.empty_like(p)
    for j in range(p.size):
        e = np.zeros_like(p)
        e[j] = h
        g[j] = (f(p + e) - f(p - e)) / (2 * h)
    return g


# -- quadratic forms -------------------------------------------------------------

def test_forms_single_user():
    r = make_realization([[0.5], [2.0]], [[0.2], [0.7]], [1])
    f = build_quadratic_forms(r)
    assert np.allclose(f.Y[0, 0], [0.1, 1.4])
    assert np.all(f.zeta == 0)


def test_forms_orthogonal_pilots_zero_zeta():
    r = drop_network(NetworkConfig(M=5, K=3, tau=3, orthogonal_first=True), 4)
    assert np.all(build_quadratic_forms(r).zeta == 0)


def test_forms_shared_pilot_equal_beta():
    beta = np.array([[0.3, 0.3], [0.8, 0.8]])
    xi = np.array([[0.1, 0.1], [0.5, 0.5]])
    f = build_quadratic_forms(make_realization(beta, xi, [1, 1]))
    assert np.allclose(f.zeta[0, 1], xi[:, 0])
    assert np.allclose(f.zeta[1, 0], xi[:, 1])


# -- optimal filter -----------------------------------------------------------------

def test_filter_single_antenna_is_one():
    r = make_realization([[0.3, 0.9]], [[0.2, 0.5]], [1, 1], rho=5.0)
    f = build_quadratic_forms(r)
    for k in range(2):
        assert abs(optimal_filter(k, np.array([0.4, 0.8]), f, r.rho)[0]) == pytest.approx(1.0)


def test_filter_diagonal_closed_form():
    r = drop_network(NetworkConfig(M=7, K=4, tau=4, orthogonal_first=True), 12)
    f = build_quadratic_forms(r)
    p = np.array([0.3, 1.0, 0.6, 0.1])
    for k in range(r.K):
        D = f.interference_matrix(k, p, r.rho)
        assert np.count_nonzero(D - np.diag(np.diag(D))) == 0
        expected = f.xi[k] / np.diag(D)
        expected /= np.linalg.norm(expected)
        assert np.allclose(optimal_filter(k, p, f, r.rho), expected, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_filter_beats_random_unit_vectors(seed):
    rng = np.random.default_rng(seed)
    r = drop_network(DESK, 500 + seed)
    f = build_quadratic_forms(r)
    p = rng.uniform(0.01, 1.0, r.K)
    for k in range(r.K):
        best = filter_sinr(k, optimal_filter(k, p, f, r.rho), p, f, r.rho)
        others = filter_sinr(k, random_unit(rng, r.M, 2000), p, f, r.rho)
        assert best >= others.max() - 1e-9 * best


def test_filter_stationary_under_perturbation():
    # the closed form is a local maximum of the Rayleigh quotient
    rng = np.random.default_rng(0)
    r = drop_network(DESK, 3)
    f = build_quadratic_forms(r)
    p = np.full(r.K, 0.5)
    t = optimal_filter(2, p, f, r.rho)
    s0 = filter_sinr(2, t, p, f, r.rho)
    for _ in range(50):
        u = t + 1e-3 * rng.standard_normal(r.M)
        assert filter_sinr(2, u / np.linalg.norm(u), p, f, r.rho) <= s0 * (1 + 1e-12)


# -- coefficients, SINR, rate, objective ------------------------------------------------

HAND = make_realization([[1.0]], [[0.5]], [1])


def test_coefficients_hand_example():
    c = sinr_coefficients(np.ones((1, 1)), build_quadratic_forms(HAND), 1.0)
    assert c.alpha[0] == pytest.approx(0.25)
    assert c.chi[0, 0] == pytest.approx(0.5)
    assert c.delta[0] == pytest.approx(0.5)
    assert c.eta[0, 0] == 0.0


def test_sinr_and_rate_hand_example():
    c = sinr_coefficients(np.ones((1, 1)), build_quadratic_forms(HAND), 1.0)
    assert sinr(np.ones(1), c, 0) == pytest.approx(0.25)
    assert rate(np.ones(1), c, 0) == pytest.approx(math.log2(1.25))


def test_sinr_vanishes_with_power():
    c = sinr_coefficients(np.ones((1, 1)), build_quadratic_forms(HAND), 1.0)
    assert sinr(np.array([1e-12]), c, 0) < 1e-12
    assert rate(np.array([1e-12]), c, 0) < 1e-11


def test_eta_zero_for_orthogonal_pilots():
    r = drop_network(NetworkConfig(M=5, K=3, tau=3, orthogonal_first=True), 8)
    f = build_quadratic_forms(r)
    t = np.column_stack([optimal_filter(k, np.ones(3), f, r.rho) for k in range(3)])
    assert np.all(sinr_coefficients(t, f, r.rho).eta == 0)


def test_coefficients_sign_invariant(desk_drop):
    f = build_quadratic_forms(desk_drop)
    t = random_unit(np.random.default_rng(1), desk_drop.M, desk_drop.K)
    a = sinr_coefficients(t, f, desk_drop.rho)
    flipped = t.copy()
    flipped[:, 3] *= -1
    b = sinr_coefficients(flipped, f, desk_drop.rho)
    for x, y in zip(a.astuple(), b.astuple()):
        assert np.allclose(x, y, rtol=1e-14, atol=0)


def test_coefficients_match_quadratic_forms(desk_drop):
    # alpha p / den must equal the Rayleigh quotient built from D_k
    f = build_quadratic_forms(desk_drop)
    rng = np.random.default_rng(2)
    t = random_unit(rng, desk_drop.M, desk_drop.K)
    p = rng.uniform(0.1, 1, desk_drop.K)
    c = sinr_coefficients(t, f, desk_drop.rho)
    direct = [filter_sinr(k, t[:, k], p, f, desk_drop.rho) for k in range(desk_drop.K)]
    assert np.allclose(sinr(p, c), direct, rtol=1e-12)


def _coeffs(alpha, chi=None, eta=None, delta=None):
    alpha = np.asarray(alpha, dtype=float)
    K = alpha.size
    return SINRCoefficients(alpha, np.zeros((K, K)) if chi is None else np.asarray(chi, float),
                            np.zeros((K, K)) if eta is None else np.asarray(eta, float),
                            np.ones(K) if delta is None else np.asarray(delta, float))


@pytest.mark.parametrize("alpha, expected", [([3.0], 1.0), ([1.0], 0.0), ([3.0, 15.0], 3.0)])
def test_pf_objective_known_rates(alpha, expected):
    # SINR 3 gives R=2, SINR 1 gives R=1, SINR 15 gives R=4
    assert pf_objective(np.ones(len(alpha)), _coeffs(alpha)) == pytest.approx(expected, abs=1e-14)


def test_pf_objective_rejects_zero_rate():
    with pytest.raises(ValueError):
        pf_objective(np.zeros(1), _coeffs([1.0]))


# -- gradient ------------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 2**31))
def test_gradient_matches_finite_differences(seed, pseed):
    r = drop_network(SMALL, seed)
    f = build_quadratic_forms(r)
    c = sinr_coefficients(np.column_stack([optimal_filter(k, np.ones(r.K), f, r.rho)
                                           for k in range(r.K)]), f, r.rho)
    p = np.random.default_rng(pseed).uniform(0.05, 0.95, r.K)
    g = pf_gradient(p, c)
    fd = fd_gradient(lambda q: pf_objective(q, c), p)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-5


def test_gradient_positive_single_user():
    c = _coeffs([2.0], chi=[[0.0]], delta=[0.7])
    for p in np.linspace(0.01, 1.0, 25):
        assert pf_gradient(np.array([p]), c)[0] > 0


def test_gradient_symmetric_instance():
    c = _coeffs([2.0, 2.0], chi=[[0.3, 0.1], [0.1, 0.3]], eta=[[0, 0.05], [0.05, 0]], delta=[0.5, 0.5])
    g = pf_gradient(np.array([0.4, 0.4]), c)
    assert g[0] == pytest.approx(g[1], rel=1e-14)


def test_gradient_kernel_parity(backend, desk_drop):
    f = build_quadratic_forms(desk_drop)
    t = random_unit(np.random.default_rng(7), desk_drop.M, desk_drop.K)
    c = sinr_coefficients(t, f, desk_drop.rho)
    p = np.linspace(0.1, 1.0, desk_drop.K)
    args = [np.ascontiguousarray(x) for x in c.astuple()]
    assert np.allclose(kernels.get(backend).gradient(p, *args), pf_gradient(p, c), rtol=1e-10)
    assert kernels.get(backend).objective(p, *args) == pytest.approx(pf_objective(p, c), rel=1e-12)


# -- projection and power update ------------------------------------------------------------------

def test_project_box_clamps():
    assert project_box([-0.2, 0.5, 1.4], 1e-6).tolist() == [1e-6, 0.5, 1.0]


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=10))
def test_project_box_idempotent(p):
    q = project_box(p)
    assert np.array_equal(q, np.asarray(p))
    assert np.array_equal(project_box(q), q)


def test_single_user_full_power_matches_grid(backend):
    c = _coeffs([0.8], chi=[[0.3]], delta=[0.4])
    p = solve_powers(np.array([0.2]), c, backend=backend)
    grid = np.arange(1, 1001) * 1e-3
    vals = [pf_objective(np.array([g]), c) for g in grid]
    assert grid[int(np.argmax(vals))] == pytest.approx(1.0)
    assert p[0] == pytest.approx(1.0, abs=1e-12)


def test_symmetric_start_stays_symmetric(backend):
    c = _coeffs([2.0, 2.0], chi=[[0.3, 0.9], [0.9, 0.3]], eta=[[0, 0.2], [0.2, 0]], delta=[0.5, 0.5])
    p = solve_powers(np.array([0.5, 0.5]), c, backend=backend)
    assert p[0] == p[1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_power_update_never_decreases(seed):
    r = drop_network(SMALL, seed)
    f = build_quadratic_forms(r)
    p0 = np.random.default_rng(seed).uniform(0.01, 1.0, r.K)
    t = np.column_stack([optimal_filter(k, p0, f, r.rho) for k in range(r.K)])
    c = sinr_coefficients(t, f, r.rho)
    p = solve_powers(p0, c)
    assert np.all((p >= 1e-6) & (p <= 1.0))
    assert pf_objective(p, c) >= pf_objective(p0, c) - 1e-12


# -- alternating solver ------------------------------------------------------------------------

def test_alternating_single_user_single_ap(backend):
    res = solve_alternating(HAND, backend=backend)
    assert res.p[0] == pytest.approx(1.0)
    assert abs(res.t[0, 0]) == pytest.approx(1.0)
    assert res.objective == pytest.approx(math.log2(math.log2(1.25)), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_alternating_trace_monotone(seed):
    res = solve_alternating(drop_network(DESK, seed))
    assert np.all(np.diff(res.trace) >= -1e-9)
    assert res.objective >= res.trace[-1] - 1e-9
    assert res.outer_iterations <= SolverOptions().max_outer


def test_alternating_filters_optimal_at_output(desk_drop):
    res = solve_alternating(desk_drop)
    f = build_quadratic_forms(desk_drop)
    for k in range(desk_drop.K):
        t = optimal_filter(k, res.p, f, desk_drop.rho)
        assert abs(t @ res.t[:, k]) == pytest.approx(1.0, abs=1e-10)


def test_alternating_deterministic(backend, desk_drop):
    a = solve_alternating(desk_drop, backend=backend)
    b = solve_alternating(desk_drop, backend=backend)
    for name in ("t", "p", "rates", "trace"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert (a.objective, a.outer_iterations, a.converged) == (b.objective, b.outer_iterations, b.converged)


@pytest.mark.skipif(len(kernels.BACKENDS) < 2, reason="compiled backend not built")
@pytest.mark.parametrize("seed", range(10))
def test_backends_agree(seed):
    r = drop_network(DESK, seed)
    a = solve_alternating(r, backend="python")
    b = solve_alternating(r, backend="native")
    assert a.outer_iterations == b.outer_iterations
    assert np.allclose(a.p, b.p, rtol=1e-9, atol=1e-12)
    assert np.allclose(a.trace, b.trace, rtol=1e-10)
    assert a.objective == pytest.approx(b.objective, rel=1e-10)


def test_refine_matches_explicit_path(backend, desk_drop):
    p = np.random.default_rng(5).uniform(0.05, 1.0, desk_drop.K)
    t, rates = refine(desk_drop, p, backend)
    f = build_quadratic_forms(desk_drop)
    t_ref = np.column_stack([optimal_filter(k, p, f, desk_drop.rho) for k in range(desk_drop.K)])
    assert np.allclose(np.abs(np.sum(t * t_ref, axis=0)), 1.0, atol=1e-10)
    assert np.allclose(rates, rate(p, sinr_coefficients(t_ref, f, desk_drop.rho)), rtol=1e-10)


def test_solver_result_rates_consistent_with_refine(desk_drop):
    res = solve_alternating(desk_drop)
    assert np.array_equal(res.rates, refine(desk_drop, res.p)[1])


@pytest.mark.parametrize("bad", [{"eps": 0}, {"armijo_shrink": 1.0}, {"p_min": 0}, {"max_outer": 0}, {"nope": 1}])
def test_options_validation(bad):
    with pytest.raises((ValueError, TypeError)):
        SolverOptions.from_dict(bad)
