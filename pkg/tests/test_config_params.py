import math

import pytest
from hypothesis import given, settings, strategies as st

from rigidmhd.config import (ConfigError, params_from_mapping, params_hash, params_to_text, parse_config,
                             resolve_config, shipped_configs)
from rigidmhd.expr import ExpressionError, evaluate
from rigidmhd.params import BodySpec, SimParams, max_modes, validate

# (override, constraint label expected in the single violation)
SINGLE_VIOLATIONS = [
    (dict(nu=0.0), "nu > 0"),
    (dict(a=-1.0), "a > 0"),
    (dict(sigma=0.0), "sigma > 0"),
    (dict(mu=-2.0), "mu > 0"),
    (dict(lam=-0.5), "ν + λ ≥ 0"),
    (dict(gamma=1.5), "γ > 3/2"),
    (dict(beta=4.0), "β > max{4, γ}"),
    (dict(eps=0.0), "eps > 0"),
    (dict(alpha=-1e-3, rho0="1"), "alpha > 0"),
    (dict(eta=0.0), "eta > 0"),
    (dict(delta=0.0), "delta > 0"),
    (dict(kappa=-1.0), "kappa > 0"),
    (dict(dt=0.3, omega=0.1), "T/Δt integral"),
    (dict(omega=0.5), "0 < ω ≤ T/4"),
    (dict(N=7, delta=0.3), "N ≥ 8"),
    (dict(n=0), "1 ≤ n ≤ available modes"),
    (dict(n=max_modes(8) + 1, N=8, delta=0.25), "1 ≤ n ≤ available modes"),
    (dict(delta=0.1), "δ ≥ 2h"),
    (dict(flux="quick"), "flux ∈ {central, upwind}"),
    (dict(rho0="1e-4"), "α ≤ ρ0 ≤ α^(-1/(2β))"),
    (dict(rho0="3"), "α ≤ ρ0 ≤ α^(-1/(2β))"),
    (dict(rho0="1/(x-x)"), "ρ0 finite"),
    (dict(B0=("foo", "0", "0")), "B0 expression"),
]


def test_defaults_valid():
    assert validate(SimParams()) == []


@pytest.mark.parametrize("override, label", SINGLE_VIOLATIONS, ids=[lab for _, lab in SINGLE_VIOLATIONS])
def test_single_violation_message(override, label):
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        v = validate(SimParams(**override))
    assert [x.constraint for x in v] == [label]
    assert label in str(v[0])


def _admissible(nu, lam_frac, gamma, beta_gap, eps, alpha, eta, steps, N, delta_h, kappa):
    return SimParams(nu=nu, lam=-lam_frac * nu, gamma=gamma, beta=max(4.0, gamma) + beta_gap, eps=eps,
                     alpha=alpha, eta=eta, T=1.0, dt=1.0 / steps, N=N, delta=delta_h * 2.0 / N, kappa=kappa,
                     n=4)


params_strategy = st.builds(
    _admissible,
    st.floats(1e-3, 10), st.floats(0, 1), st.floats(1.51, 6), st.floats(1e-3, 3), st.floats(1e-6, 1),
    st.floats(1e-6, 0.9), st.floats(1e-6, 1), st.integers(4, 64), st.integers(8, 24), st.floats(1, 4),
    st.floats(1e-2, 1e6))


@settings(max_examples=60, deadline=None)
@given(params_strategy)
def test_random_admissible_params_pass(p):
    assert validate(p, check_data=False) == []


@settings(max_examples=60, deadline=None)
@given(params_strategy, st.sampled_from(["nu", "gamma", "beta", "eps", "eta", "kappa", "delta", "dt"]))
def test_random_single_breakage_detected(p, field):
    broken = {
        "nu": dict(nu=-p.nu),
        "gamma": dict(gamma=1.4, beta=p.beta),
        "beta": dict(beta=max(4.0, p.gamma)),
        "eps": dict(eps=0.0),
        "eta": dict(eta=-p.eta),
        "kappa": dict(kappa=0.0),
        "delta": dict(delta=1.5 * p.h),
        "dt": dict(dt=p.dt * 1.37),
    }[field]
    v = validate(p.replace(**broken), check_data=False)
    assert len(v) >= 1
    expected = {"nu": "nu > 0", "gamma": "γ > 3/2", "beta": "β > max{4, γ}", "eps": "eps > 0",
                "eta": "eta > 0", "kappa": "kappa > 0", "delta": "δ ≥ 2h", "dt": "T/Δt integral"}[field]
    assert expected in [x.constraint for x in v]


# ---------------------------------------------------------------------------
# config grammar

def test_parse_comments_and_expressions():
    text = """
    # header
    grid.n = 8        # trailing comment
    approx.dt = 1/16
    approx.delta = 2/8
    physics.g = 0, 0, -9.81/9.81
    init.bx = sin(pi*y)
    body.0.shape = ball
    body.0.center = 0.5, 0.5, 0.5
    body.0.radius = 0.2
    """
    p = params_from_mapping(parse_config(text))
    assert p.N == 8 and p.dt == 1 / 16 and p.g == (0.0, 0.0, -1.0)
    assert p.B0 == ("sin(pi*y)", "0", "0")
    assert p.bodies == (BodySpec("ball", center=(0.5, 0.5, 0.5), radius=0.2),)


@pytest.mark.parametrize("text, match", [
    ("grid.n 16", "expected 'key = value'"),
    ("grid.n = 8\ngrid.n = 16", "duplicate key"),
    ("grid.size = 8", "unknown key"),
    ("grid.n = 8.5", "expected an integer"),
    ("physics.g = 0, 1", "three comma-separated"),
    ("approx.dt = one", "cannot read number"),
    ("init.rho = __import__('os')", "init.rho"),
    ("body.0.center = 0.5, 0.5, 0.5", "body.0.shape missing"),
    ("body.1.shape = ball", "body indices"),
    ("grid.n =", "empty key or value"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        params_from_mapping(parse_config(text))


def test_expression_whitelist():
    assert float(evaluate("2*pi")) == pytest.approx(2 * math.pi)
    for bad in ("x.real", "[1][0]", "open('f')", "lambda: 1", "'s'"):
        with pytest.raises(ExpressionError):
            evaluate(bad, x=1.0)


@pytest.mark.parametrize("name", ["falling-ball", "conducting-channel"])
def test_shipped_configs_valid_and_roundtrip(name):
    assert name in shipped_configs()
    p = resolve_config(name)
    assert validate(p) == []
    assert p.N == 16 and p.steps == 32
    back = params_from_mapping(parse_config(params_to_text(p)))
    assert back == p
    assert params_hash(back) == params_hash(p)
    assert params_hash(p.replace(eta=0.5)) != params_hash(p)


def test_resolve_unknown_config():
    with pytest.raises(ConfigError, match="shipped"):
        resolve_config("no-such-config")
