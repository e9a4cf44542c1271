import numpy as np
import pytest

from rigidmhd import harness
from rigidmhd.cli import main
from rigidmhd.config import params_to_text
from rigidmhd.energy_ledger import check_inequality
from rigidmhd.harness import InvalidParams, RunError, Trajectory, monitors, run, sweep, verify
from rigidmhd.params import BodySpec, SimParams


def small(**kw) -> SimParams:
    base = SimParams(
        N=12, n=4, delta=0.2, dt=1 / 16, T=0.5, sigma=0.5, eps=1e-2, kappa=1e2,
        g=(0.0, 0.0, -0.5),
        m0=("0.1*sin(pi*x)*cos(pi*y)", "-0.1*cos(pi*x)*sin(pi*y)", "0"),
        B0=("0.3*sin(pi*x)*cos(pi*y)", "-0.3*cos(pi*x)*sin(pi*y)", "0"),
        J=("0", "0", "0.05*sin(pi*x)*sin(pi*y)*(1 + t)"),
        bodies=(BodySpec("ball", center=(0.5, 0.5, 0.5), radius=0.3),),
    )
    return base.replace(**kw)


@pytest.fixture(scope="module")
def stored(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run(small(), out=out), out


def test_zero_forcing_stays_at_rest():
    p = small(m0=("0", "0", "0"), B0=("0", "0", "0"), J=("0", "0", "0"), g=(0.0, 0.0, 0.0), T=0.25)
    traj = run(p)
    for s in traj.snapshots:
        assert np.abs(s["coeffs"]).max() <= 1e-14
        assert np.abs(s["B"]).max() == 0.0
        assert np.abs(s["rho"] - 1.0).max() <= 1e-13
    rep = check_inequality(traj.rows)
    assert rep.min_margin >= -1e-8 * traj.rows[0]["rhs"]


def test_invalid_params_raise_before_running():
    with pytest.raises(InvalidParams) as err:
        run(small(gamma=1.2))
    assert "γ > 3/2" in str(err.value)


def test_persisted_run_loads_and_verifies(stored):
    traj, out = stored
    assert (out / "meta").exists() and (out / "ledger.csv").exists()
    assert len(list(out.glob("snap_*.bin"))) == traj.params.steps + 1
    back = Trajectory.load(out)
    assert back.params == traj.params
    assert back.steps_completed == traj.params.steps
    for a, b in zip(traj.snapshots, back.snapshots):
        for name in ("rho", "coeffs", "B", "chi", "markers", "sub_rho", "sub_coeffs"):
            assert np.array_equal(a[name], b[name])
    rep = verify(back)
    assert rep.ok, "\n".join(rep.lines())


def test_determinism(stored):
    traj, _ = stored
    again = run(traj.params)
    for a, b in zip(traj.snapshots, again.snapshots):
        assert np.array_equal(a["B"], b["B"]) and np.array_equal(a["coeffs"], b["coeffs"])


def test_restart_reproduces(stored, tmp_path):
    traj, out = stored
    import shutil
    shutil.copytree(out, tmp_path / "copy")
    resumed = run(traj.params, out=tmp_path / "copy", restart_from=3)
    for a, b in zip(traj.snapshots, resumed.snapshots):
        for name in ("rho", "coeffs", "B", "markers"):
            assert np.abs(a[name] - b[name]).max() <= 1e-12
    for a, b in zip(traj.rows, resumed.rows):
        assert a["margin"] == pytest.approx(b["margin"], abs=1e-12)


def test_restart_rejects_other_params(stored, tmp_path):
    traj, out = stored
    with pytest.raises(ValueError, match="differ"):
        run(traj.params.replace(eta=0.5), out=out, restart_from=2)


def test_run_error_names_step_and_module(tmp_path, monkeypatch):
    real = harness.solve_induction
    calls = {"n": 0}

    def flaky(problem):
        calls["n"] += 1
        if calls["n"] == 3:
            raise FloatingPointError("synthetic")
        return real(problem)

    monkeypatch.setattr(harness, "solve_induction", flaky)
    with pytest.raises(RunError) as err:
        run(small(), out=tmp_path)
    assert err.value.step == 3 and err.value.module == "induction"
    back = Trajectory.load(tmp_path)
    assert back.steps_completed == 2
    assert len(back.rows) == 3


def test_monitors_present(stored):
    m = monitors(stored[0])
    for key in harness.MONITORS.values():
        assert np.isfinite(m[key])


def test_sweep_ordering_and_errors(tmp_path):
    with pytest.raises(ValueError, match="descending"):
        sweep(small(), "eta", [0.01, 0.1])
    with pytest.raises(ValueError, match="ascending"):
        sweep(small(), "kappa", [1e3, 1e2])
    rep = sweep(small(T=0.25), "n", [4, 10 ** 6], out=tmp_path)
    assert rep.results[0] is not None and rep.results[1] is None
    assert 10 ** 6 in rep.errors and "InvalidParams" in rep.errors[10 ** 6]
    assert (tmp_path / "sweep.tsv").exists() and "error." in (tmp_path / "summary").read_text()


def test_sweep_dt_adjusts_horizon():
    rep = sweep(small(T=0.5, dt=0.1), "dt", [0.1, 0.06])
    assert rep.adjusted_T == {0.06: pytest.approx(0.48)}
    assert not rep.errors


def test_cli_run_verify_sweep(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(params_to_text(small(T=0.25)))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert "min relative margin" in capsys.readouterr().out
    assert main(["verify", "--trajectory", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert main(["sweep", "--config", str(cfg), "--axis", "eta", "--values", "1,0.1",
                 "--out", str(tmp_path / "s")]) == 0
    assert "strictly decreasing" in capsys.readouterr().out
    bad = tmp_path / "bad.cfg"
    bad.write_text("physics.gamma = 1.2\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "b")]) == 2
    bad.write_text("nonsense\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "b")]) == 2
