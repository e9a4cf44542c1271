"""Time-discrete nonlinear induction step.

B^k is the minimizer of the strictly convex functional (cell sums times h^3)

    |B|^2/(2 dt) + eps/2 |curl curl B|^2 + 1/(2 sigma mu) |curl B|^2
      + eps/(4 mu^2) |curl B|^4 + kappa/2 |curl B|^2 on the solid - <f, B>

with f = B'/dt + curl^T(u~ x B') + curl^T J / sigma.  Its Euler-Lagrange
equation is the weak induction equation with test fields b; the kappa term
penalizes curl B inside the insulating solid.  Gradient test fields give
div B^k = div B', so the solution stays solenoidal.  Newton with step
halving solves it; the linear solves use Jacobi-preconditioned CG.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discrete_calculus import Grid, curl_matrix, div, helmholtz_project

__all__ = [
    "MagneticState", "InductionProblem", "InductionError",
    "mean_velocity", "mollify_current", "bump", "solve_induction",
    "induction_residual", "induction_jacobian", "induction_energy_terms",
]


class InductionError(RuntimeError):
    def __init__(self, msg: str, trace: list[float] | None = None):
        if trace:
            msg += "; residual trace: " + ", ".join(f"{r:.2e}" for r in trace)
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class MagneticState:
    B: np.ndarray
    k: int = 0
    curl_solid: float = 0.0      # h^3 sum over the solid of |curl B|^2
    div_norm: float = 0.0        # discrete L2 norm of div B
    residual: float = 0.0
    f_norm: float = 0.0
    newton_iterations: int = 0
    kappa: float = 0.0


@dataclass
class InductionProblem:
    B_prev: np.ndarray
    u_mean: np.ndarray
    J: np.ndarray
    solid: np.ndarray            # boolean mask at k dt
    grid: Grid
    sigma: float
    mu: float
    eps: float
    dt: float
    kappa: float
    k: int = 1
    tol: float = 1e-12
    maxit: int = 30

    def __post_init__(self):
        for name in ("sigma", "mu", "eps", "dt", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if isinstance(self.B_prev, MagneticState):
            self.B_prev = self.B_prev.B
        self.B_prev = self.grid.check_vector(self.B_prev)
        self.u_mean = self.grid.check_vector(self.u_mean)
        self.J = self.grid.check_vector(self.J)
        self.solid = np.asarray(getattr(self.solid, "occupancy", self.solid), dtype=bool)
        if self.solid.shape != self.grid.shape:
            raise ValueError("solid mask does not match the grid")

    @classmethod
    def from_params(cls, B_prev, u_mean, J, solid, grid, params, k=1):
        return cls(B_prev, u_mean, J, solid, grid, params.sigma, params.mu, params.eps,
                   params.dt, params.kappa, k, params.newton_tol, params.newton_maxit)


# ---------------------------------------------------------------------------
# data preparation

def mean_velocity(u_history, k: int, u0: np.ndarray, dt: float | None = None) -> np.ndarray:
    """Time average of the previous sub-interval's velocity (u0 when k = 1).

    ``u_history`` is ``(times, fields)`` covering [(k-2) dt, (k-1) dt];
    trapezoid rule over the samples.
    """
    if k == 1:
        return np.array(u0, dtype=float, copy=True)
    if u_history is None:
        raise ValueError(f"velocity history required for k = {k}")
    times, fields = u_history
    times = np.asarray(times, dtype=float)
    fields = np.asarray(fields, dtype=float)
    if len(times) < 2 or len(fields) != len(times):
        raise ValueError("velocity history needs at least two samples")
    if dt is not None:
        lo, hi = (k - 2) * dt, (k - 1) * dt
        tol = 1e-9 * max(1.0, abs(hi))
        if abs(times[0] - lo) > tol or abs(times[-1] - hi) > tol:
            raise ValueError(f"history spans [{times[0]}, {times[-1]}], expected [{lo}, {hi}]")
    w = np.zeros(len(times))
    dtau = np.diff(times)
    w[:-1] += 0.5 * dtau
    w[1:] += 0.5 * dtau
    return np.tensordot(w, fields, axes=1) / (times[-1] - times[0])


def bump(s, omega: float):
    """Unnormalized bump exp(-1/(1-(s/omega)^2)) supported on |s| < omega."""
    s = np.asarray(s, dtype=float) / omega
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def mollify_current(J, dt: float, k: int, omega: float, T: float | None = None):
    """Shifted temporal mollification of J evaluated at t = k dt.

    The kernel is centred at ``t + omega (T - 2t)/T`` so its support stays in
    [0, T].  Discrete weights are bump values times trapezoid weights,
    normalized to unit sum (constants are reproduced exactly).
    """
    times, fields = J
    times = np.asarray(times, dtype=float)
    fields = np.asarray(fields, dtype=float)
    T = float(times[-1]) if T is None else float(T)
    if not 0 < omega <= T / 4 + 1e-15:
        raise ValueError(f"omega must lie in (0, T/4], got {omega}")
    t = k * dt
    centre = t + omega * (T - 2.0 * t) / T
    trap = np.zeros(len(times))
    if len(times) > 1:
        d = np.diff(times)
        trap[:-1] += 0.5 * d
        trap[1:] += 0.5 * d
    else:
        trap[:] = 1.0
    theta = bump(centre - times, omega)
    if np.count_nonzero(theta) < 4:
        raise ValueError(f"omega = {omega} spans fewer than 4 samples of J")
    w = theta * trap
    w /= w.sum()
    return np.tensordot(w, fields, axes=1)


def current_sample_times(dt: float, k: int, omega: float, T: float, per_step: int) -> np.ndarray:
    """Sample times of J covering the mollifier support at k dt."""
    t = k * dt
    centre = t + omega * (T - 2.0 * t) / T
    spacing = dt / per_step
    lo = max(0.0, centre - omega)
    hi = min(T, centre + omega)
    i0 = int(np.floor(lo / spacing + 1e-9))
    i1 = int(np.ceil(hi / spacing - 1e-9))
    return np.arange(i0, i1 + 1) * spacing


# ---------------------------------------------------------------------------
# operator

@lru_cache(maxsize=8)
def _operators(grid: Grid):
    C = curl_matrix(grid, "magnetic")
    Ct = C.T.tocsr()
    CtC = (Ct @ C).tocsr()
    Q = (CtC @ CtC).tocsr()
    return C, Ct, Q


def _rhs(p: InductionProblem) -> np.ndarray:
    C, Ct, _ = _operators(p.grid)
    mixed = np.cross(p.u_mean, p.B_prev, axis=0).ravel()
    return p.B_prev.ravel() / p.dt + Ct @ mixed + (Ct @ p.J.ravel()) / p.sigma


def _coeffs(p: InductionProblem) -> np.ndarray:
    return 1.0 / (p.sigma * p.mu) + p.kappa * p.solid.ravel().astype(float)


def induction_residual(B: np.ndarray, p: InductionProblem, f: np.ndarray | None = None) -> np.ndarray:
    C, Ct, Q = _operators(p.grid)
    b = np.asarray(B, dtype=float).ravel()
    m = p.grid.size
    c = (C @ b).reshape(3, m)
    flux = _coeffs(p) * c + (p.eps / p.mu ** 2) * (c ** 2).sum(0) * c
    f = _rhs(p) if f is None else f
    return b / p.dt + p.eps * (Q @ b) + Ct @ flux.ravel() - f


def induction_jacobian(B: np.ndarray, p: InductionProblem) -> sp.csr_matrix:
    C, Ct, Q = _operators(p.grid)
    m = p.grid.size
    c = (C @ np.asarray(B, dtype=float).ravel()).reshape(3, m)
    q = p.eps / p.mu ** 2
    base = _coeffs(p) + q * (c ** 2).sum(0)
    blocks = [[sp.diags(base * (i == j) + 2.0 * q * c[i] * c[j]) for j in range(3)] for i in range(3)]
    W = sp.bmat(blocks, format="csr")
    n = 3 * m
    return (sp.identity(n, format="csr") / p.dt + p.eps * Q + Ct @ W @ C).tocsr()


def _linear_solve(H, r, atol):
    M = sp.diags(1.0 / H.diagonal())
    x, info = spla.cg(H, r, rtol=0.0, atol=atol, maxiter=20 * H.shape[0], M=M)
    if info != 0:
        raise InductionError(f"CG failed in the Newton update (info={info})")
    return x


def solve_induction(p: InductionProblem, project: bool = True) -> MagneticState:
    """Damped Newton solve of the discrete induction equation."""
    f = _rhs(p)
    fn = float(np.linalg.norm(f))
    B = p.B_prev.ravel().copy()
    if fn == 0.0:
        B = np.zeros_like(B)
        return _state(B.reshape(p.B_prev.shape), p, 0.0, 0.0, 0)
    target = p.tol * fn
    r = induction_residual(B, p, f)
    rn = float(np.linalg.norm(r))
    trace = [rn / fn]
    it = 0
    while rn > target:
        if it >= p.maxit:
            raise InductionError(f"Newton did not converge in {p.maxit} iterations", trace)
        H = induction_jacobian(B, p)
        d = _linear_solve(H, -r, max(0.1 * target, 1e-6 * rn))
        s = 1.0
        for _ in range(40):
            Bn = B + s * d
            rn_new = float(np.linalg.norm(induction_residual(Bn, p, f)))
            if rn_new < rn or s < 1e-10:
                break
            s *= 0.5
        B = Bn
        r = induction_residual(B, p, f)
        rn = float(np.linalg.norm(r))
        trace.append(rn / fn)
        it += 1
    B = B.reshape(p.B_prev.shape)
    if project:
        B = helmholtz_project(B, p.grid)
        rn = float(np.linalg.norm(induction_residual(B, p, f)))
    return _state(B, p, rn, fn, it)


def _state(B, p: InductionProblem, rn, fn, it) -> MagneticState:
    grid = p.grid
    C, _, _ = _operators(grid)
    c = (C @ B.ravel()).reshape((3,) + grid.shape)
    curl_solid = grid.cell_volume * float(np.sum((c ** 2).sum(0)[p.solid]))
    dv = div(B, grid, "magnetic")
    div_norm = float(np.sqrt(grid.cell_volume * np.sum(dv ** 2)))
    return MagneticState(B, p.k, curl_solid, div_norm, rn, fn, it, p.kappa)


def induction_energy_terms(state: MagneticState, p: InductionProblem) -> dict[str, float]:
    """Per-step ledger increments obtained by testing with B^k / mu."""
    grid = p.grid
    C, Ct, _ = _operators(grid)
    h3 = grid.cell_volume
    b = state.B.ravel()
    c = (C @ b).reshape(3, -1)
    c2 = (c ** 2).sum(0)
    cc = Ct @ c.ravel()
    mixed = np.cross(p.u_mean, p.B_prev, axis=0).reshape(3, -1)
    dt, mu = p.dt, p.mu
    return {
        "ohmic": dt * h3 * float(c2.sum()) / (p.sigma * mu ** 2),
        "curl4": dt * h3 * p.eps * float((c2 ** 2).sum()) / mu ** 3,
        "curlcurl": dt * h3 * p.eps * float(cc @ cc) / mu,
        "pen_solid": dt * h3 * p.kappa * float(c2[p.solid.ravel()].sum()) / mu,
        "current": dt * h3 * float((p.J.reshape(3, -1) * c).sum()) / (p.sigma * mu),
        "lorentz_b": dt * h3 * float((mixed * c).sum()) / mu,
    }
