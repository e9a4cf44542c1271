"""Regularized continuity equation  rho_t + div(rho u) = eps * lap(rho).

Finite-volume form on the cell grid.  Interior faces carry a mass flux

    F = rho_face * w_face - eps * (rho_q - rho_p) / h

with ``w_face`` the normal velocity; boundary faces carry none (u = 0 and
zero normal density gradient).  Each substep treats diffusion implicitly and
advection explicitly with the face velocity of the new time level, so the
cell sum of rho is conserved by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import factorized

from .discrete_calculus import Grid, neumann_laplacian_matrix

__all__ = [
    "DensityState", "NegativeDensityError", "total_mass",
    "face_average", "face_velocity", "face_difference", "flux_divergence",
    "advective_flux", "diffusion_solver", "density_substep",
    "default_substeps", "step_density", "w1inf_norm", "density_envelope",
    "entropy",
]


class NegativeDensityError(RuntimeError):
    """A substep produced a non-positive density."""


@dataclass(frozen=True)
class DensityState:
    rho: np.ndarray
    time: float = 0.0

    @property
    def rho_min(self) -> float:
        return float(self.rho.min())

    @property
    def rho_max(self) -> float:
        return float(self.rho.max())


def total_mass(rho, grid: Grid) -> float:
    """Cell sum times cell volume."""
    if isinstance(rho, DensityState):
        rho = rho.rho
    return float(np.sum(grid.check_scalar(rho)) * grid.cell_volume)


# ---------------------------------------------------------------------------
# face helpers; face arrays along axis a have length N_a - 1 on that axis

def _sl(a: int, s: slice):
    idx = [slice(None)] * 3
    idx[a] = s
    return tuple(idx)


def face_average(f: np.ndarray, a: int) -> np.ndarray:
    return 0.5 * (f[_sl(a, slice(1, None))] + f[_sl(a, slice(None, -1))])


def face_difference(f: np.ndarray, a: int) -> np.ndarray:
    """``f_q - f_p`` across interior faces normal to axis a."""
    return f[_sl(a, slice(1, None))] - f[_sl(a, slice(None, -1))]


def face_velocity(u: np.ndarray) -> list[np.ndarray]:
    """Normal face velocities from a cell-centred vector field."""
    return [face_average(u[a], a) for a in range(3)]


def flux_divergence(F: list[np.ndarray], grid: Grid) -> np.ndarray:
    """Discrete divergence of face fluxes; boundary faces carry zero flux."""
    out = np.zeros(grid.shape)
    for a in range(3):
        out[_sl(a, slice(None, -1))] += F[a]
        out[_sl(a, slice(1, None))] -= F[a]
    return out / grid.h


def advective_flux(rho: np.ndarray, wf: list[np.ndarray], scheme: str = "central") -> list[np.ndarray]:
    if scheme == "central":
        return [face_average(rho, a) * wf[a] for a in range(3)]
    if scheme == "upwind":
        out = []
        for a in range(3):
            lo, hi = rho[_sl(a, slice(None, -1))], rho[_sl(a, slice(1, None))]
            out.append(np.where(wf[a] >= 0.0, lo, hi) * wf[a])
        return out
    raise ValueError(f"unknown flux scheme {scheme!r}")


@lru_cache(maxsize=16)
def diffusion_solver(grid: Grid, coeff: float):
    """Factorized ``I - coeff * L`` with L the Neumann 7-point Laplacian."""
    A = sp.identity(grid.size, format="csc") - coeff * neumann_laplacian_matrix(grid).tocsc()
    return factorized(A.tocsc())


def density_substep(rho: np.ndarray, wf: list[np.ndarray], eps: float, tau: float,
                    grid: Grid, scheme: str = "central"):
    """One substep; returns ``(rho_new, advective_fluxes)``."""
    Fa = advective_flux(rho, wf, scheme)
    rhs = rho - tau * flux_divergence(Fa, grid)
    new = diffusion_solver(grid, float(tau * eps))(rhs.ravel()).reshape(grid.shape)
    if not np.all(new > 0.0):
        raise NegativeDensityError(f"density min {new.min():.3e} after substep (tau={tau:.3e})")
    return new, Fa


def default_substeps(umax: float, eps: float, span: float, h: float, minimum: int = 2) -> int:
    return max(minimum, int(math.ceil(span * (2.0 * umax / h + 4.0 * eps / h ** 2))))


def _sampler(u, grid: Grid):
    if callable(u):
        return u
    if isinstance(u, tuple):
        times, fields = u
        times = np.asarray(times, dtype=float)
        fields = np.asarray(fields, dtype=float)

        def at(t):
            if len(times) == 1:
                return fields[0]
            j = int(np.clip(np.searchsorted(times, t) - 1, 0, len(times) - 2))
            s = min(max((t - times[j]) / (times[j + 1] - times[j]), 0.0), 1.0)
            return (1 - s) * fields[j] + s * fields[j + 1]
        return at
    field = grid.check_vector(u)
    return lambda t: field


def step_density(rho0, u, eps: float, t0: float, t1: float, grid: Grid,
                 substeps: int | None = None, scheme: str = "central") -> DensityState:
    """Advance rho from t0 to t1 under the velocity ``u``.

    ``u`` may be a steady field, ``(times, fields)`` samples, or a callable
    of time.  The substep count doubles until the CFL bound
    max|u| * tau <= h/2 holds.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    rho = rho0.rho if isinstance(rho0, DensityState) else grid.check_scalar(rho0)
    if not np.all(rho > 0):
        raise NegativeDensityError("initial density must be positive")
    at = _sampler(u, grid)
    span = t1 - t0
    if span <= 0:
        return DensityState(rho.copy(), t1)
    nsub = substeps
    if nsub is None:
        umax = max(float(np.abs(at(t0 + span * s)).max()) for s in (0.0, 0.5, 1.0))
        nsub = default_substeps(umax, eps, span, grid.h)
    while True:
        tau = span / nsub
        ws = [face_velocity(at(t0 + (m + 1) * tau)) for m in range(nsub)]
        umax = max(max(float(np.abs(w).max()) for w in wf) for wf in ws)
        if umax * tau <= 0.5 * grid.h:
            break
        nsub *= 2
    r = rho.copy()
    for wf in ws:
        r, _ = density_substep(r, wf, eps, tau, grid, scheme)
    return DensityState(r, t1)


# ---------------------------------------------------------------------------
# certificates

def w1inf_norm(u: np.ndarray, grid: Grid, grads: np.ndarray | None = None) -> float:
    """max|u| + sum_{i,j} max|d_i u_j|; ``grads[j, i] = d_i u_j`` if given."""
    from .discrete_calculus import grad
    if grads is None:
        grads = np.stack([grad(u[j], grid) for j in range(3)])
    return float(np.abs(u).max() + np.abs(grads).reshape(9, -1).max(axis=1).sum())


def density_envelope(rho_lo: float, rho_hi: float, integral: float) -> tuple[float, float]:
    """Two-sided exponential bound for given time integral of the W^{1,inf} norm."""
    return rho_lo * math.exp(-integral), rho_hi * math.exp(integral)


def entropy(rho: np.ndarray, grid: Grid) -> float:
    """Integral of rho ln rho."""
    return float(np.sum(rho * np.log(rho)) * grid.cell_volume)
