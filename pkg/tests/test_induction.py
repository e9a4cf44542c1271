import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rigidmhd.discrete_calculus import Grid, curl, curl_matrix, div, helmholtz_project
from rigidmhd.induction import (InductionError, InductionProblem, bump, current_sample_times,
                                induction_energy_terms, induction_residual, mean_velocity, mollify_current,
                                solve_induction)


def _solenoidal(grid, rng, scale=1.0):
    return scale * helmholtz_project(rng.standard_normal((3,) + grid.shape), grid)


def _problem(grid, rng, kappa=10.0, eps=1e-2, sigma=0.5, mu=1.3, dt=0.05, solid=True, scale=0.1):
    mask = np.zeros(grid.shape, bool)
    if solid:
        mask[2:5, 3:6, 2:6] = True
    return InductionProblem(_solenoidal(grid, rng, scale), scale * rng.standard_normal((3,) + grid.shape),
                            scale * rng.standard_normal((3,) + grid.shape), mask, grid, sigma, mu, eps, dt, kappa)


# ---------------------------------------------------------------------------
# data preparation

def test_mean_velocity_first_step(grid8, rng):
    u0 = rng.standard_normal((3,) + grid8.shape)
    assert np.array_equal(mean_velocity(None, 1, u0), u0)


def test_mean_velocity_constant_and_linear(grid8, rng):
    v = rng.standard_normal((3,) + grid8.shape)
    dt = 0.1
    times = np.linspace(dt, 2 * dt, 9)
    assert np.allclose(mean_velocity((times, np.stack([v] * 9)), 3, None, dt), v, atol=1e-14)
    t0 = np.linspace(0.0, dt, 9)
    lin = np.stack([t * v for t in t0])
    assert np.allclose(mean_velocity((t0, lin), 2, None, dt), 0.5 * dt * v, atol=1e-14)


def test_mean_velocity_missing_history(grid8):
    with pytest.raises(ValueError):
        mean_velocity(None, 2, np.zeros((3,) + grid8.shape))
    with pytest.raises(ValueError):
        mean_velocity((np.array([0.0, 0.05]), np.zeros((2, 3, 8, 8, 8))), 3, None, dt=0.1)


def _samples(fn, dt, k, omega, T, per_step=8):
    times = current_sample_times(dt, k, omega, T, per_step)
    return times, np.stack([fn(t) * np.ones((3, 2, 2, 2)) for t in times])


def test_mollify_constant_and_zero():
    dt, T = 1 / 32, 1.0
    for k in (1, 16, 32):
        out = mollify_current(_samples(lambda t: 2.5, dt, k, dt, T), dt, k, dt, T)
        assert np.abs(out - 2.5).max() <= 1e-12
        assert np.abs(mollify_current(_samples(lambda t: 0.0, dt, k, dt, T), dt, k, dt, T)).max() == 0.0


def test_mollify_linear_current():
    dt, T = 1 / 32, 1.0
    omega = dt
    for k in (1, 10, 32):
        t = k * dt
        shifted = t + omega * (T - 2 * t) / T
        out = mollify_current(_samples(lambda s: s, dt, k, omega, T, per_step=64), dt, k, omega, T)
        # oracle: dense quadrature of the normalized shifted convolution
        s = np.linspace(shifted - omega, shifted + omega, 200001)
        w = bump(shifted - s, omega)
        dense = np.trapezoid(w * s, s) / np.trapezoid(w, s)
        assert abs(out[0, 0, 0, 0] - dense) <= 1e-6
        assert abs(out[0, 0, 0, 0] - shifted) <= omega ** 2


def test_mollify_rejects_bad_omega():
    dt, T = 1 / 32, 1.0
    with pytest.raises(ValueError):
        mollify_current(_samples(lambda t: 1.0, dt, 1, dt, T), dt, 1, 0.3, T)
    times = np.linspace(0, 1, 5)
    with pytest.raises(ValueError):
        mollify_current((times, np.ones((5, 3, 2, 2, 2))), dt, 4, 1e-3, T)


# ---------------------------------------------------------------------------
# solve

def test_zero_data_gives_zero(grid8):
    z = np.zeros((3,) + grid8.shape)
    st_ = solve_induction(InductionProblem(z, z, z, np.zeros(grid8.shape, bool), grid8, 1, 1, 1e-2, 0.1, 10))
    assert np.array_equal(st_.B, z)


def _dense_newton(p, tol=1e-14, maxit=50):
    """Brute-force oracle: dense matrices, dense residual and Jacobian."""
    g = p.grid
    m = g.size
    C = curl_matrix(g, "magnetic").toarray()
    Ct = C.T
    Q = Ct @ C @ Ct @ C
    coef = 1.0 / (p.sigma * p.mu) + p.kappa * p.solid.ravel()
    q = p.eps / p.mu ** 2
    cross = np.cross(p.u_mean, p.B_prev, axis=0).ravel()
    f = p.B_prev.ravel() / p.dt + Ct @ cross + Ct @ p.J.ravel() / p.sigma

    def residual(b):
        c = (C @ b).reshape(3, m)
        return b / p.dt + p.eps * Q @ b + Ct @ (coef * c + q * (c ** 2).sum(0) * c).ravel() - f

    b = p.B_prev.ravel().copy()
    for _ in range(maxit):
        r = residual(b)
        if np.linalg.norm(r) <= tol * np.linalg.norm(f):
            break
        c = (C @ b).reshape(3, m)
        W = np.zeros((3 * m, 3 * m))
        s2 = (c ** 2).sum(0)
        for i in range(3):
            for j in range(3):
                d = 2 * q * c[i] * c[j] + (coef + q * s2) * (i == j)
                W[i * m:(i + 1) * m, j * m:(j + 1) * m] = np.diag(d)
        H = np.eye(3 * m) / p.dt + p.eps * Q + Ct @ W @ C
        b = b - np.linalg.solve(H, r)
    return b.reshape(p.B_prev.shape), f


def test_matches_dense_newton(grid8, rng):
    p = _problem(grid8, rng)
    t0 = time.perf_counter()
    state = solve_induction(p)
    elapsed = time.perf_counter() - t0
    ref, f = _dense_newton(p)
    assert np.linalg.norm(state.B - ref) <= 1e-10 * np.linalg.norm(ref)
    assert state.residual <= 1e-10 * np.linalg.norm(f)
    assert np.linalg.norm(induction_residual(state.B, p)) <= 1e-10 * np.linalg.norm(f)
    assert elapsed <= 30.0


def test_divergence_and_constraint_report(grid8, rng):
    p = _problem(grid8, rng)
    state = solve_induction(p)
    assert state.div_norm <= 1e-8
    d = div(state.B, grid8, "magnetic")
    assert np.isclose(state.div_norm, np.sqrt(grid8.cell_volume * (d ** 2).sum()))
    c = curl(state.B, grid8, "magnetic")
    assert np.isclose(state.curl_solid, grid8.cell_volume * (c ** 2).sum(0)[p.solid].sum())
    assert state.kappa == p.kappa


def test_newton_failure_carries_trace(grid8, rng):
    p = _problem(grid8, rng, eps=1.0, scale=3.0)
    p.maxit = 1
    with pytest.raises(InductionError) as err:
        solve_induction(p)
    assert len(err.value.trace) >= 1


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_monotone_coercivity(seed):
    g = Grid.cube(8)
    rng = np.random.default_rng(seed)
    p = _problem(g, rng)
    b1 = rng.standard_normal((3,) + g.shape)
    b2 = rng.standard_normal((3,) + g.shape)
    dA = induction_residual(b1, p) - induction_residual(b2, p)
    diff = (b1 - b2).ravel()
    assert dA @ diff >= (diff @ diff) / p.dt * (1 - 1e-12)


def test_energy_estimate(grid8, rng):
    """Testing with B/mu: change of magnetic energy + dissipation <= sources."""
    p = _problem(grid8, rng)
    state = solve_induction(p)
    t = induction_energy_terms(state, p)
    h3 = grid8.cell_volume
    de = 0.5 * h3 * ((state.B ** 2).sum() - (p.B_prev ** 2).sum()) / p.mu
    lhs = de + t["ohmic"] + t["curl4"] + t["curlcurl"] + t["pen_solid"]
    rhs = t["current"] + t["lorentz_b"]
    gap = 0.5 * h3 * ((state.B - p.B_prev) ** 2).sum() / p.mu
    assert lhs <= rhs + 1e-8 * abs(rhs)
    # the slack is exactly the implicit Euler dissipation
    assert abs((rhs - lhs) - gap) <= 1e-8 * max(gap, abs(rhs))


def test_penalty_reduces_solid_curl(grid8, rng):
    base = _problem(grid8, rng, kappa=1.0)
    vals = []
    for kappa in (1e1, 1e2, 1e3):
        base.kappa = kappa
        vals.append(solve_induction(base).curl_solid)
    assert vals[0] > vals[1] > vals[2]
