"""Run loop, trajectories, verification and parameter sweeps."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import params_hash, params_to_text, params_from_mapping, parse_config
from .continuity import DensityState, total_mass
from .discrete_calculus import Grid, div, helmholtz_project
from .energy_ledger import (LEDGER_COLUMNS, check_inequality, finish_row, read_ledger,
                            state_energies, step_increments, write_ledger)
from .expr import evaluate
from .geometry import BodySet, FlowMap, advance_flow_map, fit_isometry, mollify_velocity, solid_region
from .induction import (InductionProblem, current_sample_times, mean_velocity, mollify_current,
                        solve_induction)
from .momentum import VelocityState, build_basis, step_momentum
from .params import SimParams, validate
from .storage import read_meta, read_snapshot, write_meta, write_snapshot

__all__ = ["InitialData", "Trajectory", "RunError", "InvalidParams", "initial_data", "run",
           "rebuild_step_inputs", "monitors", "verify", "entropy_check", "sweep", "SweepReport", "MONITORS"]

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    def __init__(self, step: int, module: str, cause: BaseException):
        super().__init__(f"step {step}: {module} failed: {type(cause).__name__}: {cause}")
        self.step, self.module, self.cause = step, module, cause


class InvalidParams(ValueError):
    def __init__(self, violations):
        super().__init__("invalid parameters: " + "; ".join(str(v) for v in violations))
        self.violations = violations


@dataclass
class InitialData:
    rho0: np.ndarray
    m0: np.ndarray
    B0: np.ndarray


def _field(exprs, x, t=None) -> np.ndarray:
    kw = dict(x=x[0], y=x[1], z=x[2])
    if t is not None:
        kw["t"] = t
    return np.stack([np.broadcast_to(evaluate(e, **kw), x.shape[1:]) for e in exprs]).astype(float)


def initial_data(params: SimParams, grid: Grid | None = None) -> InitialData:
    """Rasterize the analytic initial data; B0 is projected to be solenoidal."""
    grid = grid or Grid.cube(params.N, params.L)
    x = grid.mesh()
    rho0 = np.array(np.broadcast_to(evaluate(params.rho0, x=x[0], y=x[1], z=x[2]), grid.shape), dtype=float)
    m0 = _field(params.m0, x)
    B0 = helmholtz_project(_field(params.B0, x), grid)
    return InitialData(rho0, m0, B0)


@dataclass
class Setup:
    params: SimParams
    grid: Grid
    basis: object
    bodies: BodySet

    @classmethod
    def build(cls, params: SimParams) -> "Setup":
        grid = Grid.cube(params.N, params.L)
        basis = build_basis(grid, params.n)
        shapes = [b.build() for b in params.bodies]
        bodies = BodySet.from_shapes(shapes, grid, params.delta)
        return cls(params, grid, basis, bodies)


@dataclass
class Trajectory:
    params: SimParams
    grid: Grid
    basis: object
    bodies: BodySet
    snapshots: list[dict] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    path: Path | None = None
    elapsed: float = 0.0

    @property
    def steps_completed(self) -> int:
        return int(self.snapshots[-1]["k"]) if self.snapshots else -1

    def meta_fields(self) -> dict[str, str]:
        return {
            "format": "rigidmhd-trajectory",
            "version": f"rigidmhd {__version__}",
            "params_hash": params_hash(self.params),
            "steps": str(self.params.steps),
            "steps_completed": str(self.steps_completed),
            "grid": f"{self.grid.shape[0]} x {self.grid.shape[1]} x {self.grid.shape[2]}",
            "modes": str(self.basis.n),
            "markers": str(len(self.bodies.flow_map().points)),
            "layout": "little-endian float64, grid axes x-fastest",
        }

    def save_meta(self, path: Path) -> None:
        write_meta(path / "meta", self.meta_fields(), params_to_text(self.params))

    @classmethod
    def load(cls, path) -> "Trajectory":
        path = Path(path)
        fields, config = read_meta(path / "meta")
        params = params_from_mapping(parse_config(config))
        if fields.get("params_hash") != params_hash(params):
            raise ValueError(f"{path}: parameter hash mismatch")
        setup = Setup.build(params)
        snaps = []
        k = 0
        while (path / f"snap_{k}.bin").exists():
            snaps.append(read_snapshot(path / f"snap_{k}.bin", params.N, params.n))
            k += 1
        rows = read_ledger(path / "ledger.csv") if (path / "ledger.csv").exists() else []
        return cls(params, setup.grid, setup.basis, setup.bodies, snaps, rows, path)


# ---------------------------------------------------------------------------
# run loop

def _current(params: SimParams, grid: Grid, k: int) -> np.ndarray:
    if all(str(e).strip() in ("0", "0.0") for e in params.J):
        return np.zeros((3,) + grid.shape)
    x = grid.mesh()
    times = current_sample_times(params.dt, k, params.omega_eff, params.T, params.current_samples)
    fields = np.stack([_field(params.J, x, t) for t in times])
    return mollify_current((times, fields), params.dt, k, params.omega_eff, params.T)


def _history_fields(basis, snap) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(snap["sub_times"]), np.stack([basis.field(c) for c in snap["sub_coeffs"]])


def _solid(bodies: BodySet, X: FlowMap, grid: Grid):
    if len(bodies) == 0:
        from .geometry import SENTINEL
        return np.zeros(grid.shape, dtype=bool), np.full(grid.shape, -SENTINEL)
    union, _, chi = solid_region(X, bodies)
    return union.occupancy, chi.values


def _rigid_residual(X: FlowMap, bodies: BodySet) -> float:
    res = 0.0
    for i in range(len(bodies)):
        res = max(res, fit_isometry(X, i)[1])
    return res


def _mean_u(basis, params, k, prev_snap, u0):
    if k == 1:
        return mean_velocity(None, 1, u0)
    return mean_velocity(_history_fields(basis, prev_snap), k, u0, params.dt)


def run(params: SimParams, init: InitialData | None = None, out=None,
        restart_from: int | None = None, stop_after: int | None = None,
        progress: bool = False) -> Trajectory:
    """Integrate k = 1..T/dt; persist to ``out`` when given.

    Per step: freeze chi^(k-1); momentum + continuity over the sub-interval
    with B^(k-1); transport markers with the mollified velocity; mean velocity
    of the previous interval and mollified current; induction at k dt with
    the solid mask at k dt; ledger row.
    """
    bad = validate(params)
    if bad:
        raise InvalidParams(bad)
    p = params
    setup = Setup.build(p)
    grid, basis, bodies = setup.grid, setup.basis, setup.bodies
    traj = Trajectory(p, grid, basis, bodies)
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        traj.path = out
    t_start = time.perf_counter()

    if restart_from is None:
        init = init or initial_data(p, grid)
        X = bodies.flow_map()
        mask, chi = _solid(bodies, X, grid)
        u0 = init.m0 / init.rho0
        c = basis.project(u0)
        rho, B = init.rho0, init.B0
        snap = _snapshot(0, 0.0, rho, c, basis, B, chi, X, np.array([0.0]), c[None], rho[None])
        row = dict(k=0, t=0.0)
        row.update(state_energies(rho, basis.field(c), B, p, grid))
        row.update(_diagnostics(rho, rho[None], B, 0.0, X, bodies, grid))
        row["dB"] = 0.0
        traj.snapshots.append(snap)
        traj.rows.append(finish_row(row, None))
        if out is not None:
            write_snapshot(out / "snap_0.bin", snap, p.N, p.n)
        k0 = 1
    else:
        if out is None:
            raise ValueError("restart needs the run directory")
        prev = Trajectory.load(out)
        if params_hash(prev.params) != params_hash(p):
            raise ValueError("restart parameters differ from the stored run")
        if restart_from > prev.steps_completed:
            raise ValueError(f"no snapshot for step {restart_from}")
        traj.snapshots = prev.snapshots[:restart_from + 1]
        traj.rows = prev.rows[:restart_from + 1]
        snap = traj.snapshots[-1]
        X = bodies.flow_map()
        X.points = np.array(snap["markers"], dtype=float)
        X.time = snap["t"]
        X.flagged = bool(snap["flagged"])
        rho, c, B, chi = snap["rho"], snap["coeffs"], snap["B"], snap["chi"]
        k0 = restart_from + 1

    u_init = basis.field(traj.snapshots[0]["coeffs"])
    if out is not None:
        traj.save_meta(out)
    last = p.steps if stop_after is None else min(p.steps, stop_after)
    for k in range(k0, last + 1):
        t0, t1 = (k - 1) * p.dt, k * p.dt
        B_prev, chi_prev = B, chi
        module = "momentum"
        try:
            dens, vel = step_momentum(DensityState(rho, t0), VelocityState(c, t0, basis),
                                      chi_prev, B_prev, p, t0, t1)
            tr = vel.trace
            module = "geometry"
            if len(bodies):
                R = (tr.times, np.stack([mollify_velocity(basis.field(cm), grid, p.delta) for cm in tr.coeffs]))
                X = advance_flow_map(X, R, grid, t0, t1)
            else:
                X = X.copy()
                X.time = t1
            mask, chi = _solid(bodies, X, grid)
            module = "induction"
            u_mean = _mean_u(basis, p, k, traj.snapshots[k - 1], u_init)
            J = _current(p, grid, k)
            prob = InductionProblem.from_params(B_prev, u_mean, J, mask, grid, p, k)
            mag = solve_induction(prob)
            module = "energy_ledger"
            rho, c, B = dens.rho, vel.coeffs, mag.B
            snap = _snapshot(k, t1, rho, c, basis, B, chi, X, tr.times, tr.coeffs, tr.rho)
            row = dict(k=k, t=t1)
            row.update(state_energies(rho, basis.field(c), B, p, grid))
            row.update(step_increments(basis, p, chi_prev, B_prev, tr.times, tr.coeffs, tr.rho, prob, mag))
            row.update(_diagnostics(rho, tr.rho, B, row["w1inf_int"], X, bodies, grid,
                                    start=traj.snapshots[k - 1]["rho"]))
            row.update(picard_iters=len(tr.picard), picard_res=tr.picard[-1], substeps=len(tr.times) - 1,
                       newton_iters=mag.newton_iterations, curl_solid=mag.curl_solid, div_B=mag.div_norm,
                       solid_Du2=_solid_strain(basis, tr, chi_prev, grid),
                       dB=float(np.sqrt(grid.cell_volume * np.sum((B - B_prev) ** 2))))
        except Exception as exc:
            err = RunError(k, module, exc)
            if out is not None:
                write_ledger(traj.rows, out / "ledger.csv")
                traj.save_meta(out)
            raise err from exc
        traj.snapshots.append(snap)
        traj.rows.append(finish_row(row, traj.rows[-1]))
        if out is not None:
            write_snapshot(out / f"snap_{k}.bin", snap, p.N, p.n)
            write_ledger(traj.rows, out / "ledger.csv")
        if progress:
            r = traj.rows[-1]
            log.info("step %d/%d  E=%.6g  margin=%.3e  picard=%d  newton=%d",
                     k, p.steps, r["lhs"], r["rel_margin"], r["picard_iters"], r["newton_iters"])
    if out is not None:
        write_ledger(traj.rows, out / "ledger.csv")
        traj.save_meta(out)
    traj.elapsed = time.perf_counter() - t_start
    return traj


def _snapshot(k, t, rho, c, basis, B, chi, X, times, coeffs, rhos) -> dict:
    return dict(k=k, t=float(t), rho=np.array(rho), coeffs=np.array(c), u=basis.field(c), B=np.array(B),
                chi=np.array(chi), markers=X.points.copy(), flagged=float(X.flagged),
                sub_times=np.array(times), sub_coeffs=np.array(coeffs), sub_rho=np.array(rhos))


def _diagnostics(rho, sub_rho, B, w1int, X, bodies, grid, start=None) -> dict:
    start = rho if start is None else start
    return dict(
        mass=total_mass(rho, grid),
        rho_min=float(np.min(sub_rho)), rho_max=float(np.max(sub_rho)),
        env_lo=float(start.min() * math.exp(-w1int)), env_hi=float(start.max() * math.exp(w1int)),
        w1inf_int=w1int,
        div_B=float(np.sqrt(grid.cell_volume * np.sum(div(B, grid, "magnetic") ** 2))),
        curl_solid=0.0,
        rigid_res=_rigid_residual(X, bodies) if len(bodies) else 0.0,
    )


def _solid_strain(basis, tr, chi_prev, grid) -> float:
    """Time integral over the step of the solid-region |D(u)|^2."""
    sel = chi_prev > 0
    if not sel.any():
        return 0.0
    tau = float(tr.times[1] - tr.times[0])
    tot = 0.0
    for c in tr.coeffs[1:]:
        Du = basis.field_grad(c)
        D = 0.5 * (Du + Du.transpose(1, 0, 2, 3, 4))
        tot += tau * grid.cell_volume * float(np.sum((D ** 2).sum((0, 1))[sel]))
    return tot


def rebuild_step_inputs(traj: Trajectory, k: int):
    """Reconstruct the induction problem and state of step k from snapshots."""
    p, grid, basis = traj.params, traj.grid, traj.basis
    prev, snap = traj.snapshots[k - 1], traj.snapshots[k]
    u_init = basis.field(traj.snapshots[0]["coeffs"])
    u_mean = _mean_u(basis, p, k, prev, u_init)
    J = _current(p, grid, k)
    mask = np.asarray(snap["chi"]) > 0
    prob = InductionProblem.from_params(prev["B"], u_mean, J, mask, grid, p, k)
    from .induction import _state, induction_residual, _rhs
    f = _rhs(prob)
    rn = float(np.linalg.norm(induction_residual(snap["B"], prob, f)))
    state = _state(np.asarray(snap["B"]), prob, rn, float(np.linalg.norm(f)), 0)
    return prev["chi"], prev["B"], prob, state


# ---------------------------------------------------------------------------
# verification and monitors

@dataclass
class VerifyReport:
    checks: dict[str, tuple[bool, str]]

    @property
    def ok(self) -> bool:
        return all(v[0] for v in self.checks.values())

    def lines(self) -> list[str]:
        return [f"{'PASS' if ok else 'FAIL'}  {name}: {msg}" for name, (ok, msg) in self.checks.items()]


def verify(traj: Trajectory, tol: float = 1e-8) -> VerifyReport:
    """Re-evaluate the ledger from snapshots and check the discrete invariants."""
    from .energy_ledger import evaluate_ledger
    checks = {}
    rows = evaluate_ledger(traj)
    rep = check_inequality(rows, tol)
    steps = check_inequality(rows[1:] or rows, tol)  # row 0 has margin exactly 0
    checks["energy inequality"] = (rep.ok, f"min relative margin {steps.min_rel_margin:.3e} at step {steps.worst_step}")
    if traj.rows:
        keys = [c for c in LEDGER_COLUMNS if c in rows[0] and c not in ("picard_iters", "picard_res", "substeps",
                                                                      "newton_iters", "rigid_res", "curl_solid",
                                                                      "div_B", "solid_Du2", "dB", "mass",
                                                                      "rho_min", "rho_max", "env_lo", "env_hi")]
        worst = 0.0
        for a, b in zip(rows, traj.rows):
            for c in keys:
                scale = max(1.0, abs(b.get("rhs", 1.0)))
                worst = max(worst, abs(float(a.get(c, 0.0)) - float(b.get(c, 0.0))) / scale)
        checks["ledger reproduces stored values"] = (worst <= 1e-9, f"max relative deviation {worst:.2e}")
    m = [total_mass(s["rho"], traj.grid) for s in traj.snapshots]
    step = max((abs(b - a) / m[0] for a, b in zip(m, m[1:])), default=0.0)
    cum = abs(m[-1] - m[0]) / m[0]
    checks["mass conservation"] = (step <= 1e-10 and cum <= 1e-8, f"per step {step:.2e}, cumulative {cum:.2e}")
    env_ok, worst_env = density_envelope_check(traj)
    checks["density envelope"] = (env_ok, f"worst slack {worst_env:.3e}")
    dmax = max(float(np.sqrt(traj.grid.cell_volume * np.sum(div(s["B"], traj.grid, "magnetic") ** 2)))
               for s in traj.snapshots)
    checks["div B"] = (dmax <= 1e-8, f"max L2 norm {dmax:.2e}")
    ent_ok, ent_gap = entropy_check(traj)
    checks["renormalized entropy"] = (ent_ok, f"max step excess {ent_gap:.2e}")
    times = [s["t"] for s in traj.snapshots]
    checks["time stamps increasing"] = (all(b > a for a, b in zip(times, times[1:])), f"{len(times)} snapshots")
    return VerifyReport(checks)


def density_envelope_check(traj: Trajectory) -> tuple[bool, float]:
    """Substep-level check of rho within the exponential W^{1,inf} envelope.

    Returns (ok, worst slack) where slack < 0 signals a violation.
    """
    from .continuity import w1inf_norm
    basis, grid = traj.basis, traj.grid
    worst = np.inf
    for prev, snap in zip(traj.snapshots, traj.snapshots[1:]):
        lo0, hi0 = float(prev["rho"].min()), float(prev["rho"].max())
        times = snap["sub_times"]
        W = 0.0
        for m in range(1, len(times)):
            c = snap["sub_coeffs"][m]
            W += (times[m] - times[m - 1]) * w1inf_norm(basis.field(c), grid, grads=basis.field_grad(c))
            r = snap["sub_rho"][m]
            if not np.all(r > 0):
                return False, -1.0
            worst = min(worst, (r.min() - lo0 * math.exp(-W)) / lo0, (hi0 * math.exp(W) - r.max()) / hi0)
    if worst == np.inf:
        worst = 0.0
    return bool(worst >= 0.0), float(worst)


def entropy_check(traj: Trajectory, tol: float = 1e-10) -> tuple[bool, float]:
    """Post-hoc check of d/dt int rho ln rho <= -int rho div u, step by step.

    Returns (ok, worst excess) with excess = entropy change minus source.
    """
    from .continuity import entropy
    basis, grid = traj.basis, traj.grid
    worst = -np.inf
    for prev, snap in zip(traj.snapshots, traj.snapshots[1:]):
        times = snap["sub_times"]
        src = 0.0
        for m in range(1, len(times)):
            Du = basis.field_grad(snap["sub_coeffs"][m])
            src -= (times[m] - times[m - 1]) * grid.cell_volume * float(
                np.sum(snap["sub_rho"][m] * (Du[0, 0] + Du[1, 1] + Du[2, 2])))
        excess = entropy(snap["rho"], grid) - entropy(prev["rho"], grid) - src
        worst = max(worst, excess)
    if worst == -np.inf:
        worst = 0.0
    return bool(worst <= tol), float(worst)


def monitors(traj: Trajectory) -> dict[str, float]:
    rows = traj.rows[1:]
    if not rows:
        return {}
    out = {
        "solid_Du2": float(sum(r["solid_Du2"] for r in rows)),
        "rigid_residual": float(max(r["rigid_res"] for r in rows)),
        "rigid_residual_over_delta": float(max(r["rigid_res"] for r in rows)) / traj.params.delta,
        # affine/constant gap of B, skipping the initial layer t < T/8 where
        # B0 relaxes on the magnetic diffusion time, far below any dt
        "max_dB": float(max((r["dB"] for r in rows if r["t"] - traj.params.dt >= traj.params.T / 8 - 1e-12),
                            default=0.0)),
        "u4": float(sum(r["u4"] for r in rows)),
        "curl4": float(sum(r["curl4"] for r in rows)),
        "curlcurl": float(sum(r["curlcurl"] for r in rows)),
        "rho_reg": float(sum(r["rho_gamma"] + r["rho_beta"] for r in rows)),
        "picard_res": float(max(r["picard_res"] for r in rows)),
        "picard_iters": float(max(r["picard_iters"] for r in rows)),
        "curl_solid_int": float(sum(r["curl_solid"] for r in rows) * traj.params.dt),
        "min_rel_margin": float(min(r["rel_margin"] for r in traj.rows)),
    }
    if len(traj.bodies):
        # vertical centre of body 0 at every step
        z = [float(np.mean(s["markers"][traj.bodies.flow_map().body == 0][:, 2])) for s in traj.snapshots]
        out["body0_z_drop"] = z[0] - z[-1]
    return out


MONITORS = {"eta": "solid_Du2", "dt": "max_dB", "eps": "u4", "n": "picard_res", "kappa": "curl_solid_int"}
# values must approach the limit: eta, dt, eps go down, n and kappa go up
LIMIT_DIRECTION = {"eta": -1, "dt": -1, "eps": -1, "n": 1, "kappa": 1}


@dataclass
class SweepReport:
    axis: str
    values: list[float]
    monitor: str
    results: list[dict]
    errors: dict[float, str]
    adjusted_T: dict[float, float]

    def series(self, name: str | None = None) -> list[float]:
        name = name or self.monitor
        return [r.get(name, float("nan")) if r else float("nan") for r in self.results]

    def strictly_decreasing(self, name: str | None = None) -> bool:
        s = self.series(name)
        return all(b < a for a, b in zip(s, s[1:]))

    def table(self) -> str:
        names = sorted({k for r in self.results if r for k in r})
        head = [self.axis] + names
        lines = ["\t".join(head)]
        for v, r in zip(self.values, self.results):
            lines.append("\t".join([repr(v)] + [f"{r[n]:.6e}" if r and n in r else "nan" for n in names]))
        return "\n".join(lines) + "\n"


def _sweep_one(args):
    params, axis, value = args
    try:
        traj = run(params)
        return monitors(traj), None
    except Exception as exc:  # recorded, the sweep continues
        return None, f"{type(exc).__name__}: {exc}"


def sweep(params: SimParams, axis: str, values, out=None, workers: int = 1) -> SweepReport:
    """Run one simulation per value of ``axis``, values ordered toward the limit."""
    if axis not in MONITORS:
        raise ValueError(f"axis must be one of {sorted(MONITORS)}")
    values = [float(v) for v in values]
    sign = LIMIT_DIRECTION[axis]
    if any(sign * (b - a) <= 0 for a, b in zip(values, values[1:])):
        order = "descending" if sign < 0 else "ascending"
        raise ValueError(f"{axis} sweep values must be strictly {order}")
    jobs, adjusted = [], {}
    for v in values:
        if axis == "n":
            kw = {"n": int(v)}
        elif axis == "dt":
            T = max(1, round(params.T / v)) * v
            if abs(T - params.T) > 1e-12:
                adjusted[v] = T
            kw = {"dt": v, "T": T}
        else:
            kw = {axis: v}
        jobs.append((params.replace(**kw), axis, v))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    report = SweepReport(axis, values, MONITORS[axis], [r for r, _ in results],
                         {v: e for v, (_, e) in zip(values, results) if e}, adjusted)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.tsv").write_text(report.table())
        lines = [f"axis = {axis}", f"monitor = {report.monitor}",
                 f"strictly_decreasing = {report.strictly_decreasing()}"]
        lines += [f"adjusted_T.{v!r} = {T!r}" for v, T in adjusted.items()]
        lines += [f"error.{v!r} = {e}" for v, e in report.errors.items()]
        (out / "summary").write_text("\n".join(lines) + "\n")
    return report
