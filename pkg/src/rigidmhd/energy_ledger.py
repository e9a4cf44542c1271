"""Discrete energy inequality bookkeeping and Rothe interpolants."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "STATE_COLUMNS", "DISSIPATION_COLUMNS", "SOURCE_COLUMNS", "DIAGNOSTIC_COLUMNS",
    "MARGIN_COLUMNS", "LEDGER_COLUMNS", "LedgerError", "MarginReport",
    "finish_row", "check_inequality", "interpolate", "write_ledger", "read_ledger",
    "evaluate_ledger", "step_increments", "state_energies",
]

STATE_COLUMNS = ("kinetic", "pot_gamma", "pot_beta", "magnetic")
DISSIPATION_COLUMNS = ("visc", "bulk", "u4", "rho_gamma", "rho_beta",
                       "ohmic", "curl4", "curlcurl", "pen_solid")
SOURCE_COLUMNS = ("grav", "current", "lorentz_u", "lorentz_b")
DIAGNOSTIC_COLUMNS = ("mass", "rho_min", "rho_max", "env_lo", "env_hi", "w1inf_int",
                      "picard_iters", "picard_res", "substeps", "newton_iters",
                      "div_B", "curl_solid", "solid_Du2", "rigid_res", "dB")
MARGIN_COLUMNS = ("lhs", "rhs", "margin", "rel_margin")
LEDGER_COLUMNS = ("k", "t") + STATE_COLUMNS + DISSIPATION_COLUMNS + SOURCE_COLUMNS \
    + DIAGNOSTIC_COLUMNS + MARGIN_COLUMNS


class LedgerError(KeyError):
    """A trajectory lacks a field the ledger needs."""


def finish_row(row: dict, prev: dict | None) -> dict:
    """Fill cumulative LHS/RHS and margins given the previous row.

    ``row`` holds the state energies at step k and the increments (time
    integrals over the step) of every dissipation and source term.  Row 0
    is the initial state with zero increments.
    """
    out = {c: 0.0 for c in LEDGER_COLUMNS}
    out.update(row)
    state = sum(out[c] for c in STATE_COLUMNS)
    if prev is None:
        diss_cum = sum(out[c] for c in DISSIPATION_COLUMNS)
        src_cum = sum(out[c] for c in SOURCE_COLUMNS)
        out["_e0"] = state + diss_cum - src_cum
        out["_diss"] = diss_cum
        out["_src"] = src_cum
    else:
        out["_e0"] = prev["_e0"]
        out["_diss"] = prev["_diss"] + sum(out[c] for c in DISSIPATION_COLUMNS)
        out["_src"] = prev["_src"] + sum(out[c] for c in SOURCE_COLUMNS)
    out["lhs"] = state + out["_diss"]
    out["rhs"] = out["_e0"] + out["_src"]
    out["margin"] = out["rhs"] - out["lhs"]
    out["rel_margin"] = out["margin"] / abs(out["rhs"]) if out["rhs"] != 0.0 else out["margin"]
    return out


def rows_from_table(rows: Sequence[dict]) -> list[dict]:
    """Recompute cumulative bookkeeping for rows read back from disk."""
    out, prev = [], None
    for r in rows:
        prev = finish_row({c: r[c] for c in LEDGER_COLUMNS if c not in MARGIN_COLUMNS}, prev)
        out.append(prev)
    return out


@dataclass(frozen=True)
class MarginReport:
    min_margin: float
    min_rel_margin: float
    worst_step: int
    first_violation: int | None
    violations: tuple[int, ...]
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.first_violation is None


def check_inequality(rows: Sequence[dict], tol: float = 1e-8) -> MarginReport:
    """Margins RHS - LHS per step; a step violates when rel_margin < -tol."""
    if not rows:
        return MarginReport(0.0, 0.0, 0, None, (), tol)
    rel = np.array([float(r["rel_margin"]) for r in rows])
    mar = np.array([float(r["margin"]) for r in rows])
    ks = [int(r["k"]) for r in rows]
    bad = tuple(k for k, m in zip(ks, rel) if m < -tol)
    i = int(np.argmin(rel))
    return MarginReport(float(mar.min()), float(rel[i]), ks[i], bad[0] if bad else None, bad, tol)


# ---------------------------------------------------------------------------
# interpolants

def interpolate(seq, t: float, dt: float, kind: str = "affine", weight: float = 1.0):
    """Rothe interpolants of ``seq[0..K]`` at time t in [0, K dt].

    affine:    ((t-(k-1)dt)/dt) h^k + ((k dt - t)/dt) h^(k-1)
    constant:  h^k on ((k-1)dt, k dt]
    retarded:  h^(k-1) on ((k-1)dt, k dt]
    norm:      affine interpolation of weight * |h^k|^2
    with h(0) = h^0 for the step interpolants.
    """
    K = len(seq) - 1
    if K < 1:
        raise ValueError("need at least two sequence values")
    T = K * dt
    if not (-1e-12 * T <= t <= T * (1 + 1e-12)):
        raise ValueError(f"t = {t} outside [0, {T}]")
    t = min(max(t, 0.0), T)
    k = max(1, min(K, int(math.ceil(t / dt - 1e-12))))
    if kind == "affine":
        s = (t - (k - 1) * dt) / dt
        return s * np.asarray(seq[k]) + (1.0 - s) * np.asarray(seq[k - 1])
    if kind == "constant":
        return np.asarray(seq[0] if t == 0.0 else seq[k])
    if kind == "retarded":
        return np.asarray(seq[0] if t == 0.0 else seq[k - 1])
    if kind == "norm":
        s = (t - (k - 1) * dt) / dt
        sq = lambda v: weight * float(np.sum(np.asarray(v, dtype=float) ** 2))
        return s * sq(seq[k]) + (1.0 - s) * sq(seq[k - 1])
    raise ValueError(f"unknown interpolant kind {kind!r}")


# ---------------------------------------------------------------------------
# term evaluation shared by the run loop and offline verification

def state_energies(rho, u, B, params, grid) -> dict:
    from .momentum import kinetic_energy, potential_energy
    pg, pb = potential_energy(rho, params, grid)
    return {
        "kinetic": kinetic_energy(rho, u, grid),
        "pot_gamma": pg,
        "pot_beta": pb,
        "magnetic": 0.5 * grid.cell_volume * float(np.sum(B ** 2)) / params.mu,
    }


def step_increments(basis, params, chi_prev, B_prev, sub_times, sub_coeffs, sub_rho,
                    problem, state) -> dict:
    """Time-integrated dissipation and source terms of one step."""
    from .momentum import MomentumAssembler, energy_terms, lorentz_force, variable_viscosity
    from .induction import induction_energy_terms
    grid = basis.grid
    nu_f, lam_f = variable_viscosity(chi_prev, params.nu, params.lam, eta=params.eta)
    tau = float(sub_times[1] - sub_times[0])
    asm = MomentumAssembler(basis, params)
    lf = lorentz_force(B_prev, grid, params.mu)
    terms, w1 = energy_terms(asm, np.asarray(sub_rho), np.asarray(sub_coeffs), tau, nu_f, lam_f, lf)
    terms.update(induction_energy_terms(state, problem))
    terms["w1inf_int"] = float(tau * np.sum(w1))
    return terms


def evaluate_ledger(traj) -> list[dict]:
    """Recompute every ledger row from the stored snapshots of a trajectory."""
    from .harness import rebuild_step_inputs
    rows, prev = [], None
    needed = ("rho", "coeffs", "B", "chi", "sub_times", "sub_coeffs", "sub_rho")
    for snap in traj.snapshots:
        for name in needed:
            if name not in snap or snap[name] is None:
                raise LedgerError(f"snapshot {snap.get('k')} lacks field {name!r}")
    for snap in traj.snapshots:
        k = int(snap["k"])
        row = {"k": k, "t": float(snap["t"])}
        basis, grid = traj.basis, traj.grid
        row.update(state_energies(snap["rho"], basis.field(snap["coeffs"]), snap["B"], traj.params, grid))
        if k > 0:
            chi_prev, B_prev, problem, state = rebuild_step_inputs(traj, k)
            row.update(step_increments(basis, traj.params, chi_prev, B_prev, snap["sub_times"],
                                       snap["sub_coeffs"], snap["sub_rho"], problem, state))
        prev = finish_row(row, prev)
        rows.append(prev)
    return rows


# ---------------------------------------------------------------------------
# CSV

def write_ledger(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_COLUMNS)
        for r in rows:
            w.writerow([int(r[c]) if c == "k" else repr(float(r.get(c, 0.0))) for c in LEDGER_COLUMNS])


def read_ledger(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        head = next(rd)
        if tuple(head) != LEDGER_COLUMNS:
            raise LedgerError(f"unexpected ledger columns in {path}")
        rows = []
        for line in rd:
            r = {c: float(v) for c, v in zip(head, line)}
            r["k"] = int(r["k"])
            rows.append(r)
    return rows_from_table(rows)
