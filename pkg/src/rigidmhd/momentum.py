"""Galerkin momentum solve on one sub-interval, coupled to continuity.

The velocity lives in the span of Dirichlet sine modes
``phi_j = prod_a sqrt(2/L_a) sin(k_a pi x_a / L_a) e_{c_j}``.  Each substep
of length tau solves the linear system

    [M(rho1)/tau + K + eps W - Conv(F) - G(rho1)] c1
        = M(rho0) c0 / tau + P + <rho1 g, phi> + <curl B' x B' / mu, phi>

where F is the total face mass flux of the continuity substep.  ``Conv`` is
the face form of (rho u x u):grad(phi) built from F, and ``G`` the
antisymmetric remainder that turns it into the convective and eps-gradient
terms of the weak form.  Testing with c1 yields a discrete energy inequality
whose defect is the nonnegative numerical dissipation of implicit Euler.
Picard iteration on the face velocities couples the substeps to the density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np

from .continuity import (DensityState, density_substep, diffusion_solver,
                         face_average, face_difference, w1inf_norm)
from .discrete_calculus import Grid, curl

__all__ = [
    "GalerkinBasis", "VelocityState", "PenaltyFunction", "PicardError",
    "NonFiniteError", "build_basis", "variable_viscosity", "pressure_potential",
    "MomentumAssembler", "assemble_rhs", "step_momentum", "StepTrace",
    "lorentz_force",
]


class PicardError(RuntimeError):
    """Fixed-point iteration failed to converge."""

    def __init__(self, msg: str, history: list[float]):
        super().__init__(f"{msg}; residual history: " + ", ".join(f"{r:.2e}" for r in history))
        self.history = history


class NonFiniteError(FloatingPointError):
    """A right-hand-side term became NaN or infinite."""


# ---------------------------------------------------------------------------
# basis

@dataclass
class GalerkinBasis:
    grid: Grid
    modes: list[tuple[int, int, int]]
    comps: np.ndarray            # component index per mode
    values: np.ndarray           # (n, *shape) scalar sine products at centres
    grads: np.ndarray            # (n, 3, *shape) analytic gradients at centres
    face_normal: list[np.ndarray]  # per axis: (n, *face_shape) normal component on interior faces
    eigenvalues: np.ndarray

    @property
    def n(self) -> int:
        return len(self.modes)

    def same_component(self) -> np.ndarray:
        return self.comps[:, None] == self.comps[None, :]

    def field(self, c: np.ndarray) -> np.ndarray:
        """Reconstruct the cell-centred vector field from coefficients."""
        c = np.asarray(c, dtype=float)
        out = np.zeros((3,) + self.grid.shape)
        for k in range(3):
            sel = self.comps == k
            if sel.any():
                out[k] = np.tensordot(c[sel], self.values[sel], axes=1)
        return out

    def field_grad(self, c: np.ndarray) -> np.ndarray:
        """``out[j, i] = d_i u_j`` at cell centres."""
        out = np.zeros((3, 3) + self.grid.shape)
        for k in range(3):
            sel = self.comps == k
            if sel.any():
                out[k] = np.tensordot(c[sel], self.grads[sel], axes=1)
        return out

    def face_velocity(self, c: np.ndarray) -> list[np.ndarray]:
        return [np.tensordot(c, fn, axes=1) for fn in self.face_normal]

    def project(self, u: np.ndarray) -> np.ndarray:
        """L2 projection coefficients <u, phi_j> (midpoint rule)."""
        u = self.grid.check_vector(u)
        h3 = self.grid.cell_volume
        return np.array([h3 * np.sum(u[k] * v) for k, v in zip(self.comps, self.values)])

    def gram(self) -> np.ndarray:
        V = self.values.reshape(self.n, -1)
        return self.grid.cell_volume * (V @ V.T) * self.same_component()

    def stiffness(self) -> np.ndarray:
        """<grad phi_i, grad phi_j> by midpoint quadrature."""
        G = self.grads.reshape(self.n, 3, -1)
        S = sum(G[:, a] @ G[:, a].T for a in range(3))
        return self.grid.cell_volume * S * self.same_component()

    def sup_bound(self, c: np.ndarray) -> float:
        """Upper bound of max|u| over the box."""
        amp = float(np.prod(np.sqrt(2.0 / self.grid.lengths)))
        return amp * float(np.abs(c).sum())


def build_basis(grid: Grid, n: int) -> GalerkinBasis:
    """First n sine modes of the Dirichlet vector Laplacian, ordered by eigenvalue."""
    avail = 3 * int(np.prod([m - 1 for m in grid.shape]))
    if not 1 <= n <= avail:
        raise ValueError(f"n = {n} modes requested but the grid resolves {avail} (k <= N-1 per axis)")
    L = grid.lengths
    ks = product(*(range(1, m) for m in grid.shape))
    cand = sorted(((sum((k[a] / L[a]) ** 2 for a in range(3)), k, c) for k in ks for c in range(3)))
    chosen = cand[:n]
    modes = [k for _, k, _ in chosen]
    comps = np.array([c for _, _, c in chosen], dtype=int)
    eig = np.array([np.pi ** 2 * lam for lam, _, _ in chosen])

    def sines(axis, k, pos):
        return np.sqrt(2.0 / L[axis]) * np.sin(k * np.pi * pos / L[axis])

    def cosines(axis, k, pos):
        return np.sqrt(2.0 / L[axis]) * (k * np.pi / L[axis]) * np.cos(k * np.pi * pos / L[axis])

    xc = grid.axes
    xf = [np.arange(1, m) * grid.h for m in grid.shape]
    shape = grid.shape
    values = np.empty((n,) + shape)
    grads = np.empty((n, 3) + shape)
    face = [np.zeros((n,) + tuple(m - 1 if a == ax else m for a, m in enumerate(shape))) for ax in range(3)]
    for j, (k, c) in enumerate(zip(modes, comps)):
        s = [sines(a, k[a], xc[a]) for a in range(3)]
        d = [cosines(a, k[a], xc[a]) for a in range(3)]
        values[j] = np.einsum("i,j,k->ijk", *s)
        grads[j, 0] = np.einsum("i,j,k->ijk", d[0], s[1], s[2])
        grads[j, 1] = np.einsum("i,j,k->ijk", s[0], d[1], s[2])
        grads[j, 2] = np.einsum("i,j,k->ijk", s[0], s[1], d[2])
        f = list(s)
        f[c] = sines(c, k[c], xf[c])
        face[c][j] = np.einsum("i,j,k->ijk", *f)
    return GalerkinBasis(grid, modes, comps, values, grads, face, eig)


@dataclass(frozen=True)
class VelocityState:
    coeffs: np.ndarray
    time: float
    basis: GalerkinBasis = field(repr=False)
    trace: "StepTrace | None" = field(default=None, repr=False, compare=False)

    @property
    def u(self) -> np.ndarray:
        return self.basis.field(self.coeffs)


# ---------------------------------------------------------------------------
# coefficients

@dataclass(frozen=True)
class PenaltyFunction:
    """H(z) = z^power for z > 0, zero otherwise (C^2 and convex for power 3)."""

    power: float = 3.0

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(z > 0.0, np.maximum(z, 0.0) ** self.power, 0.0)


def variable_viscosity(chi, nu: float, lam: float, H: Callable | None = None,
                       eta: float = 1.0):
    """Penalized viscosities ``nu + H(chi)/eta`` and ``lam + H(chi)/eta``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    H = PenaltyFunction() if H is None else H
    chi = getattr(chi, "values", chi)
    pen = np.asarray(H(chi), dtype=float) / eta
    return nu + pen, lam + pen


def pressure_potential(rho, a, gamma, alpha, beta):
    """Pi(rho) split into its gamma and beta parts."""
    return a * rho ** gamma / (gamma - 1.0), alpha * rho ** beta / (beta - 1.0)


def pressure_derivative(rho, a, gamma, alpha, beta):
    return a * gamma / (gamma - 1.0) * rho ** (gamma - 1.0), alpha * beta / (beta - 1.0) * rho ** (beta - 1.0)


def lorentz_force(B: np.ndarray, grid: Grid, mu: float) -> np.ndarray:
    """(1/mu) curl B x B with the magnetic boundary parity."""
    J = curl(B, grid, "magnetic")
    return np.cross(J, B, axis=0) / mu


# ---------------------------------------------------------------------------
# assembly

class MomentumAssembler:
    """Matrices and vectors of the Galerkin system for one basis/grid."""

    def __init__(self, basis: GalerkinBasis, params):
        self.b = basis
        self.p = params
        g = basis.grid
        self.grid = g
        self.h = g.h
        self.h3 = g.cell_volume
        self.n = basis.n
        self.E = basis.same_component()
        self.V = basis.values.reshape(self.n, -1)
        self.Gr = basis.grads.reshape(self.n, 3, -1)
        self._faces = []
        for a in range(3):
            self._faces.append((face_average(basis.values.transpose(1, 2, 3, 0), a),
                                face_difference(basis.values.transpose(1, 2, 3, 0), a)))
        s = basis.values
        sl_lo = [(slice(None),) + tuple(slice(None, -1) if i == a else slice(None) for i in range(3)) for a in range(3)]
        sl_hi = [(slice(None),) + tuple(slice(1, None) if i == a else slice(None) for i in range(3)) for a in range(3)]
        self._pq = [(s[sl_lo[a]].reshape(self.n, -1), s[sl_hi[a]].reshape(self.n, -1)) for a in range(3)]
        self._fn = [fn.reshape(self.n, -1) for fn in basis.face_normal]

    # -- weighted Gram matrices
    def mass(self, rho: np.ndarray) -> np.ndarray:
        return self.h3 * ((self.V * rho.ravel()) @ self.V.T) * self.E

    def quartic(self, q: np.ndarray) -> np.ndarray:
        """<q phi_j, phi_i> with q = |w|^2."""
        return self.mass(q)

    def viscous(self, nu_f: np.ndarray, lam_f: np.ndarray) -> np.ndarray:
        nu_f = np.broadcast_to(nu_f, self.grid.shape).ravel()
        lam_f = np.broadcast_to(lam_f, self.grid.shape).ravel()
        Gr, c = self.Gr, self.b.comps
        A1 = sum((Gr[:, a] * nu_f) @ Gr[:, a].T for a in range(3)) * self.E
        A2 = np.zeros((self.n, self.n))
        for ci in range(3):
            Ii = np.nonzero(c == ci)[0]
            for cj in range(3):
                Ij = np.nonzero(c == cj)[0]
                if len(Ii) and len(Ij):
                    A2[np.ix_(Ii, Ij)] = (Gr[Ii, cj] * nu_f) @ Gr[Ij, ci].T
        d = Gr[np.arange(self.n), c]
        A3 = (d * lam_f) @ d.T
        return self.h3 * (A1 + A2 + A3)

    def convection(self, F: list[np.ndarray]) -> np.ndarray:
        """Conv_ij = h^2 sum_f F_f S_j(f) . Delta_i(f)."""
        out = np.zeros((self.n, self.n))
        for a in range(3):
            S, D = self._faces[a]
            S = S.reshape(-1, self.n)
            D = D.reshape(-1, self.n)
            out += (D * F[a].reshape(-1, 1)).T @ S
        return self.h ** 2 * out * self.E

    def eps_gradient(self, rho: np.ndarray) -> np.ndarray:
        """Antisymmetric correction G_ij (test i, trial j)."""
        out = np.zeros((self.n, self.n))
        for a in range(3):
            p, q = self._pq[a]
            dr = face_difference(rho, a).ravel()
            X = (q * dr) @ p.T
            out += X - X.T
        return self.p.eps * self.h * out * self.E

    def pressure(self, rho_face: list[np.ndarray], rho_new: np.ndarray) -> np.ndarray:
        pr = self.p
        dg, db = pressure_derivative(rho_new, pr.a, pr.gamma, pr.alpha, pr.beta)
        dP = dg + db
        out = np.zeros(self.n)
        for a in range(3):
            out -= self._fn[a] @ (rho_face[a] * face_difference(dP, a)).ravel()
        return self.h ** 2 * out

    def body_force(self, f: np.ndarray) -> np.ndarray:
        """<f, phi_j> for a cell-centred vector field f."""
        return self.h3 * np.einsum("jp,jp->j", self.V, f.reshape(3, -1)[self.b.comps])

    def gravity(self, rho: np.ndarray) -> np.ndarray:
        g = np.asarray(self.p.g, dtype=float)
        return self.h3 * g[self.b.comps] * (self.V @ rho.ravel())


def _face_density(rho, wf, scheme):
    if scheme == "central":
        return [face_average(rho, a) for a in range(3)]
    out = []
    for a in range(3):
        lo = rho[tuple(slice(None, -1) if i == a else slice(None) for i in range(3))]
        hi = rho[tuple(slice(1, None) if i == a else slice(None) for i in range(3))]
        out.append(np.where(wf[a] >= 0.0, lo, hi))
    return out


def _check(name: str, v: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite values in the {name} term")
    return v


def assemble_rhs(rho, u, chi_frozen, B_retarded, g=None, params=None, basis=None) -> np.ndarray:
    """All weak-form terms tested against each mode, for a frozen state.

    ``u`` is a coefficient vector (or VelocityState).  Returns the n-vector of
    convection + pressure - viscous + gravity + Lorentz - eps|u|^2 u
    - eps (grad u grad rho), with the same face quadratures as the solver.
    """
    if isinstance(u, VelocityState):
        basis = u.basis
        c = u.coeffs
    else:
        c = np.asarray(u, dtype=float)
    if basis is None:
        raise ValueError("a basis is needed when u is given as coefficients")
    if g is not None:
        params = params.replace(g=tuple(g))
    rho = rho.rho if isinstance(rho, DensityState) else np.asarray(rho, dtype=float)
    asm = MomentumAssembler(basis, params)
    grid = basis.grid
    wf = basis.face_velocity(c)
    rf = _face_density(rho, wf, params.flux)
    F = [rf[a] * wf[a] - params.eps * face_difference(rho, a) / grid.h for a in range(3)]
    conv = _check("convection", (asm.convection(F) + asm.eps_gradient(rho)) @ c)
    pres = _check("pressure", asm.pressure(rf, rho))
    nu_f, lam_f = variable_viscosity(chi_frozen, params.nu, params.lam, eta=params.eta)
    visc = _check("viscous", asm.viscous(nu_f, lam_f) @ c)
    grav = _check("gravity", asm.gravity(rho))
    lor = _check("Lorentz", asm.body_force(lorentz_force(B_retarded, grid, params.mu)))
    uf = basis.field(c)
    quart = _check("eps|u|^2 u", params.eps * asm.quartic((uf ** 2).sum(0)) @ c)
    return conv + pres - visc + grav + lor - quart


# ---------------------------------------------------------------------------
# time stepping

@dataclass
class StepTrace:
    """Substep history and energy bookkeeping of one sub-interval."""

    times: np.ndarray
    coeffs: np.ndarray           # (S+1, n)
    rho: np.ndarray              # (S+1, *shape)
    picard: list[float]
    w1inf: np.ndarray            # (S,) W^{1,inf} norm of the velocity per substep
    terms: dict[str, float]      # time-integrated ledger increments
    cfl_refinements: int = 0


LEDGER_MOMENTUM_TERMS = ("visc", "bulk", "u4", "rho_gamma", "rho_beta", "grav", "lorentz_u")


def _substep_count(params, umax: float, span: float, h: float) -> int:
    if params.substeps:
        base = int(params.substeps)
    else:
        base = max(8, int(math.ceil(span * (2.0 * umax / h + 4.0 * params.eps / h ** 2))))
    return max(2, base)


def step_momentum(rho0, u0: VelocityState, chi_frozen, B_retarded, params,
                  t0: float, t1: float, substeps: int | None = None):
    """Advance density and velocity over [t0, t1] by damped Picard iteration.

    Returns ``(DensityState, VelocityState)``; the velocity carries a
    :class:`StepTrace` with the substep history and energy terms.
    """
    basis = u0.basis
    grid = basis.grid
    p = params
    rho_start = rho0.rho if isinstance(rho0, DensityState) else grid.check_scalar(rho0)
    c0 = np.asarray(u0.coeffs, dtype=float)
    span = t1 - t0
    asm = MomentumAssembler(basis, p)
    nu_f, lam_f = variable_viscosity(chi_frozen, p.nu, p.lam, eta=p.eta)
    K = _check("viscous", asm.viscous(nu_f, lam_f))
    lorentz_field = lorentz_force(B_retarded, grid, p.mu)
    Lv = _check("Lorentz", asm.body_force(lorentz_field))
    S = substeps or _substep_count(p, basis.sup_bound(c0), span, grid.h)
    refinements = 0
    while True:
        try:
            out = _picard(asm, K, Lv, lorentz_field, rho_start, c0, span, S, nu_f, lam_f)
        except _CFL:
            S *= 2
            refinements += 1
            if refinements > 8:
                raise PicardError("CFL refinement limit reached", [])
            continue
        break
    rho_hist, c_hist, hist, w1, terms = out
    times = t0 + span * np.arange(S + 1) / S
    trace = StepTrace(times, c_hist, rho_hist, hist, w1, terms, refinements)
    return (DensityState(rho_hist[-1], t1), VelocityState(c_hist[-1], t1, basis, trace))


class _CFL(Exception):
    pass


def _picard(asm: MomentumAssembler, K, Lv, lorentz_field, rho_start, c0, span, S, nu_f, lam_f):
    p = asm.p
    basis = asm.b
    grid = asm.grid
    tau = span / S
    h = grid.h
    solve_diff = diffusion_solver(grid, float(tau * p.eps))
    w = np.tile(c0, (S, 1))           # iterate for c^1..c^S
    hist: list[float] = []
    damping = 1.0
    for it in range(p.picard_maxit):
        rho = rho_start
        rhos = [rho]
        c = c0
        cs = [c0]
        for m in range(S):
            wf = basis.face_velocity(w[m])
            umax = max(float(np.abs(f).max()) for f in wf)
            if umax * tau > 0.5 * h:
                raise _CFL()
            rho_new, Fa = density_substep(rho, wf, p.eps, tau, grid, p.flux)
            F = [Fa[a] - p.eps * face_difference(rho_new, a) / h for a in range(3)]
            rf = _face_density(rho, wf, p.flux)
            q = (basis.field(w[m]) ** 2).sum(0)
            A = (asm.mass(rho_new) / tau + K + p.eps * asm.quartic(q)
                 - asm.convection(F) - asm.eps_gradient(rho_new))
            rhs = (asm.mass(rho) @ c / tau + asm.pressure(rf, rho_new)
                   + asm.gravity(rho_new) + Lv)
            _check("momentum right-hand side", rhs)
            c = np.linalg.solve(A, rhs)
            rho = rho_new
            rhos.append(rho)
            cs.append(c)
        new = np.array(cs[1:])
        scale = max(float(np.abs(new).max()), float(np.abs(c0).max()), 1e-300)
        res = float(np.sqrt(((new - w) ** 2).sum(1)).max()) / scale
        hist.append(res)
        if res <= p.picard_tol or float(np.abs(new - w).max()) == 0.0:
            break
        if len(hist) >= 2 and res > 0.9 * hist[-2]:
            damping = 0.5
        w = w + damping * (new - w)
    else:
        raise PicardError(f"no convergence in {p.picard_maxit} iterations", hist)
    # CFL check on the converged velocities
    for m in range(S):
        wf = basis.face_velocity(cs[m + 1])
        if max(float(np.abs(f).max()) for f in wf) * tau > 0.5 * h:
            raise _CFL()
    c_hist = np.array(cs)
    rho_hist = np.array(rhos)
    terms, w1 = energy_terms(asm, rho_hist, c_hist, tau, nu_f, lam_f, lorentz_field)
    return rho_hist, c_hist, hist, w1, terms


def energy_terms(asm: MomentumAssembler, rho_hist, c_hist, tau, nu_f, lam_f, lorentz_field):
    """Right-endpoint time integrals of the momentum ledger terms."""
    p = asm.p
    basis = asm.b
    grid = asm.grid
    h, h3 = grid.h, grid.cell_volume
    t = dict.fromkeys(LEDGER_MOMENTUM_TERMS, 0.0)
    w1 = []
    g = np.asarray(p.g, dtype=float).reshape(3, 1, 1, 1)
    for m in range(1, len(c_hist)):
        c = c_hist[m]
        rho = rho_hist[m]
        u = basis.field(c)
        Du = basis.field_grad(c)
        D = 0.5 * (Du + Du.transpose(1, 0, 2, 3, 4))
        divu = Du[0, 0] + Du[1, 1] + Du[2, 2]
        t["visc"] += tau * h3 * float(np.sum(2.0 * nu_f * (D ** 2).sum((0, 1))))
        t["bulk"] += tau * h3 * float(np.sum(lam_f * divu ** 2))
        t["u4"] += tau * p.eps * h3 * float(np.sum((u ** 2).sum(0) ** 2))
        dg, db = pressure_derivative(rho, p.a, p.gamma, p.alpha, p.beta)
        for a in range(3):
            dr = face_difference(rho, a)
            t["rho_gamma"] += tau * p.eps * h * float(np.sum(dr * face_difference(dg, a)))
            t["rho_beta"] += tau * p.eps * h * float(np.sum(dr * face_difference(db, a)))
        t["grav"] += tau * h3 * float(np.sum(rho * (g * u).sum(0)))
        t["lorentz_u"] += tau * h3 * float(np.sum(lorentz_field * u))
        w1.append(w1inf_norm(u, grid, grads=Du))
    return t, np.array(w1)


def kinetic_energy(rho: np.ndarray, u: np.ndarray, grid: Grid) -> float:
    return 0.5 * grid.cell_volume * float(np.sum(rho * (u ** 2).sum(0)))


def potential_energy(rho: np.ndarray, params, grid: Grid) -> tuple[float, float]:
    pg, pb = pressure_potential(rho, params.a, params.gamma, params.alpha, params.beta)
    return grid.cell_volume * float(pg.sum()), grid.cell_volume * float(pb.sum())
