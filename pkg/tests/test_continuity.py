import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rigidmhd.continuity import (DensityState, NegativeDensityError, advective_flux, density_envelope,
                                 entropy, face_velocity, flux_divergence, step_density, total_mass,
                                 w1inf_norm)
from rigidmhd.discrete_calculus import Grid


def _bump(grid, amp=0.1):
    x, y, z = grid.mesh()
    return 1 + amp * np.sin(np.pi * x) * np.sin(np.pi * y) * np.sin(np.pi * z)


def _swirl(grid, amp=1.0, k=1):
    """Smooth field vanishing on the walls."""
    x, y, z = grid.mesh()
    s = lambda v: np.sin(np.pi * v)
    return amp * np.stack([s(x) * np.sin(2 * np.pi * y) * s(z) * k,
                           -np.sin(2 * np.pi * x) * s(y) * s(z),
                           0.5 * s(x) * s(y) * np.sin(2 * np.pi * z)])


def test_total_mass():
    assert abs(total_mass(np.ones((8, 8, 8)), Grid.cube(8)) - 1.0) <= 1e-14
    g = Grid.cube(8, 0.5 ** (1 / 3))
    assert abs(total_mass(np.full(g.shape, 2.0), g) - 1.0) <= 1e-14


def test_constant_steady(grid8):
    out = step_density(np.ones(grid8.shape), np.zeros((3,) + grid8.shape), 0.01, 0.0, 0.1, grid8)
    # the sparse LU solve returns the constant to roundoff
    assert np.abs(out.rho - 1.0).max() <= 1e-14


def _dense_neumann_laplacian(n, h):
    L1 = np.zeros((n, n))
    for i in range(n):
        if i > 0:
            L1[i, i - 1] = 1
            L1[i, i] -= 1
        if i < n - 1:
            L1[i, i + 1] = 1
            L1[i, i] -= 1
    L1 /= h * h
    I = np.eye(n)
    return (np.kron(np.kron(L1, I), I) + np.kron(np.kron(I, L1), I) + np.kron(np.kron(I, I), L1))


def test_heat_equation_dense_oracle(grid8):
    rho0 = _bump(grid8)
    eps, span, S = 0.05, 0.2, 7
    out = step_density(rho0, np.zeros((3,) + grid8.shape), eps, 0.0, span, grid8, substeps=S)
    A = np.eye(grid8.size) - (span / S) * eps * _dense_neumann_laplacian(8, grid8.h)
    r = rho0.ravel()
    for _ in range(S):
        r = np.linalg.solve(A, r)
    assert np.abs(out.rho.ravel() - r).max() <= 1e-8
    assert abs(total_mass(out.rho, grid8) - total_mass(rho0, grid8)) <= 1e-12
    assert out.rho.max() < rho0.max() and out.rho.min() > rho0.min()


@pytest.mark.parametrize("scheme", ["central", "upwind"])
def test_mass_conserved_with_flow(grid16, scheme):
    rho0 = _bump(grid16, 0.3)
    out = step_density(rho0, _swirl(grid16), 1e-3, 0.0, 0.25, grid16, scheme=scheme)
    m0 = total_mass(rho0, grid16)
    assert abs(total_mass(out.rho, grid16) - m0) <= 1e-11 * m0
    assert out.rho.min() > 0


def test_flux_divergence_telescopes(grid8, rng):
    rho = 1 + rng.random(grid8.shape)
    F = advective_flux(rho, face_velocity(_swirl(grid8)), "central")
    assert abs(flux_divergence(F, grid8).sum()) <= 1e-12 * np.abs(flux_divergence(F, grid8)).max()


def test_time_samples_and_callable_agree(grid8):
    u = _swirl(grid8, 0.5)
    rho0 = _bump(grid8)
    a = step_density(rho0, u, 1e-2, 0.0, 0.1, grid8, substeps=8).rho
    b = step_density(rho0, (np.array([0.0, 1.0]), np.stack([u, u])), 1e-2, 0.0, 0.1, grid8, substeps=8).rho
    c = step_density(rho0, lambda t: u, 1e-2, 0.0, 0.1, grid8, substeps=8).rho
    assert np.array_equal(a, c)
    assert np.abs(a - b).max() <= 1e-14


def test_cfl_refinement(grid8):
    """Too few substeps are doubled until max|u| tau <= h/2."""
    u = _swirl(grid8, 4.0)
    rho0 = _bump(grid8)
    coarse = step_density(rho0, u, 1e-2, 0.0, 0.5, grid8, substeps=1, scheme="upwind").rho
    assert coarse.min() > 0
    assert abs(total_mass(coarse, grid8) - total_mass(rho0, grid8)) <= 1e-11


def test_rejects_nonpositive(grid8):
    with pytest.raises(NegativeDensityError):
        step_density(np.zeros(grid8.shape), np.zeros((3,) + grid8.shape), 0.1, 0, 1, grid8)
    with pytest.raises(ValueError):
        step_density(np.ones(grid8.shape), np.zeros((3,) + grid8.shape), 0.0, 0, 1, grid8)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.2, 2.0), st.floats(0.0, 0.5), st.floats(1e-3, 5e-2))
def test_exponential_envelope(amp, bump, eps):
    g = Grid.cube(12)
    u = _swirl(g, amp)
    rho0 = _bump(g, bump)
    span = 0.2
    out = step_density(rho0, u, eps, 0.0, span, g)
    lo, hi = density_envelope(rho0.min(), rho0.max(), span * w1inf_norm(u, g))
    assert lo <= out.rho.min() and out.rho.max() <= hi


def test_eps_consistency_first_order(grid16):
    u = _swirl(grid16, 0.5)
    rho0 = _bump(grid16, 0.3)
    sols = [step_density(rho0, u, e, 0.0, 0.2, grid16, substeps=64).rho for e in (4e-3, 2e-3, 1e-3)]
    d1 = np.abs(sols[0] - sols[1]).max()
    d2 = np.abs(sols[1] - sols[2]).max()
    assert 1.6 <= d1 / d2 <= 2.4


def test_entropy_and_norm(grid8):
    assert entropy(np.ones(grid8.shape), grid8) == 0.0
    x = grid8.mesh()
    assert np.isclose(w1inf_norm(np.stack([x[0], 0 * x[0], 0 * x[0]]), grid8), x[0].max() + 1.0)


def test_entropy_decays_under_pure_diffusion(grid8, rng):
    rho = 1.0 + 0.5 * rng.random(grid8.shape)
    zero = np.zeros((3,) + grid8.shape)
    prev = entropy(rho, grid8)
    for k in range(5):
        rho = step_density(rho, zero, 1e-2, 0.1 * k, 0.1 * (k + 1), grid8).rho
        now = entropy(rho, grid8)
        assert now <= prev
        prev = now


def test_density_state_certificates():
    s = DensityState(np.array([[[1.0, 2.0]]]), 0.5)
    assert s.rho_min == 1.0 and s.rho_max == 2.0
