"""Simulation parameters and their admissibility checks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np


class Violation(NamedTuple):
    constraint: str
    detail: str

    def __str__(self) -> str:
        return f"{self.constraint}: {self.detail}"


@dataclass(frozen=True)
class BodySpec:
    shape: str
    center: tuple[float, float, float] | None = None
    radius: float | None = None
    half: tuple[float, float, float] | None = None
    a: tuple[float, float, float] | None = None
    b: tuple[float, float, float] | None = None

    def build(self):
        from .geometry import make_shape
        if self.shape == "ball":
            return make_shape("ball", center=self.center, radius=self.radius)
        if self.shape == "box":
            return make_shape("box", center=self.center, half=self.half)
        if self.shape == "capsule":
            return make_shape("capsule", a=self.a, b=self.b, radius=self.radius)
        return make_shape(self.shape)


@dataclass(frozen=True)
class SimParams:
    # physics
    nu: float = 0.1
    lam: float = 0.0
    a: float = 1.0
    gamma: float = 1.6
    sigma: float = 1.0
    mu: float = 1.0
    g: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # approximation levels
    eps: float = 1e-3
    alpha: float = 1e-3
    beta: float = 5.0
    eta: float = 1e-3
    dt: float = 1.0 / 32
    n: int = 12
    delta: float = 0.125
    kappa: float = 1e3
    omega: float | None = None
    # domain and horizon
    T: float = 1.0
    L: float = 1.0
    N: int = 16
    # bodies and data
    bodies: tuple[BodySpec, ...] = ()
    rho0: str = "1"
    m0: tuple[str, str, str] = ("0", "0", "0")
    B0: tuple[str, str, str] = ("0", "0", "0")
    J: tuple[str, str, str] = ("0", "0", "0")
    # numerics
    substeps: int = 0
    flux: str = "central"
    picard_tol: float = 1e-10
    picard_maxit: int = 50
    newton_tol: float = 1e-12
    newton_maxit: int = 30
    current_samples: int = 8

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def omega_eff(self) -> float:
        return self.dt if self.omega is None else self.omega

    def replace(self, **kw) -> "SimParams":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


def max_modes(N: int) -> int:
    return 3 * (N - 1) ** 3


def validate(p: SimParams, check_data: bool = True) -> list[Violation]:
    """Return every violated constraint (empty list means admissible)."""
    v: list[Violation] = []

    def need(ok: bool, constraint: str, detail: str):
        if not ok:
            v.append(Violation(constraint, detail))

    for name in ("nu", "a", "sigma", "mu"):
        need(getattr(p, name) > 0, f"{name} > 0", f"{name} = {getattr(p, name)}")
    need(p.nu + p.lam >= 0, "ν + λ ≥ 0", f"ν + λ = {p.nu + p.lam}")
    need(p.gamma > 1.5, "γ > 3/2", f"γ = {p.gamma}")
    need(p.beta > max(4.0, p.gamma), "β > max{4, γ}", f"β = {p.beta}, γ = {p.gamma}")
    for name in ("eps", "alpha", "eta", "dt", "delta", "kappa"):
        need(getattr(p, name) > 0, f"{name} > 0", f"{name} = {getattr(p, name)}")
    need(p.T > 0, "T > 0", f"T = {p.T}")
    need(p.L > 0, "L > 0", f"L = {p.L}")
    if p.dt > 0 and p.T > 0:
        r = p.T / p.dt
        need(abs(r - round(r)) <= 1e-9 * max(1.0, r) and round(r) >= 1,
             "T/Δt integral", f"T/Δt = {r}")
        w = p.omega_eff
        need(0 < w <= p.T / 4, "0 < ω ≤ T/4", f"ω = {w}, T = {p.T}")
    need(p.N >= 8, "N ≥ 8", f"N = {p.N}")
    need(1 <= p.n <= max_modes(max(p.N, 2)), "1 ≤ n ≤ available modes",
         f"n = {p.n}, available = {max_modes(max(p.N, 2))}")
    if p.N >= 8 and p.L > 0 and p.delta > 0:
        need(p.delta >= 2 * p.h - 1e-12, "δ ≥ 2h", f"δ = {p.delta}, h = {p.h}")
    need(p.flux in ("central", "upwind"), "flux ∈ {central, upwind}", f"flux = {p.flux!r}")
    if check_data and not v:
        v.extend(validate_data(p))
    return v


def validate_data(p: SimParams) -> list[Violation]:
    """Initial-data hypotheses: alpha <= rho0 <= alpha^(-1/(2 beta)), finite fields."""
    from .discrete_calculus import Grid
    from .expr import evaluate
    v = []
    grid = Grid.cube(p.N, p.L)
    x = grid.mesh()
    try:
        rho0 = np.broadcast_to(evaluate(p.rho0, x=x[0], y=x[1], z=x[2]), grid.shape)
    except Exception as exc:  # malformed expression
        return [Violation("rho0 expression", str(exc))]
    hi = p.alpha ** (-1.0 / (2.0 * p.beta))
    if not np.all(np.isfinite(rho0)):
        v.append(Violation("ρ0 finite", "non-finite initial density"))
    elif rho0.min() < p.alpha or rho0.max() > hi:
        v.append(Violation("α ≤ ρ0 ≤ α^(-1/(2β))",
                           f"ρ0 ∈ [{rho0.min():.4g}, {rho0.max():.4g}], bounds [{p.alpha:.4g}, {hi:.4g}]"))
    for name in ("m0", "B0", "J"):
        for comp in getattr(p, name):
            try:
                val = evaluate(comp, x=x[0], y=x[1], z=x[2], t=0.0)
            except Exception as exc:
                v.append(Violation(f"{name} expression", str(exc)))
                continue
            if not np.all(np.isfinite(val)):
                v.append(Violation(f"{name} finite", f"non-finite values in {comp!r}"))
    return v


AXES = {"eta": "eta", "dt": "dt", "eps": "eps", "n": "n", "kappa": "kappa"}
