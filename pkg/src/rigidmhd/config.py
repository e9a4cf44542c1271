"""Flat ``key = value`` configuration files.

Grammar (one entry per line)::

    # comment, also allowed after a value
    section.key = value
    body.<i>.key = value

Numbers may be arithmetic expressions (``1/32``, ``2*pi``); vectors are
comma separated; field specifications are expressions in ``x, y, z`` (and
``t`` for sources).  See README for the full key list.
"""
from __future__ import annotations

import hashlib
from importlib import resources
from pathlib import Path

from .expr import evaluate
from .params import BodySpec, SimParams

__all__ = ["ConfigError", "parse_config", "load_config", "params_from_mapping",
           "params_to_text", "params_hash", "shipped_configs", "resolve_config"]


class ConfigError(ValueError):
    pass


# key -> (SimParams field, kind)
SCALAR_KEYS = {
    "grid.n": ("N", "int"),
    "grid.length": ("L", "float"),
    "time.T": ("T", "float"),
    "physics.nu": ("nu", "float"),
    "physics.lambda": ("lam", "float"),
    "physics.a": ("a", "float"),
    "physics.gamma": ("gamma", "float"),
    "physics.sigma": ("sigma", "float"),
    "physics.mu": ("mu", "float"),
    "physics.g": ("g", "vec"),
    "approx.eps": ("eps", "float"),
    "approx.alpha": ("alpha", "float"),
    "approx.beta": ("beta", "float"),
    "approx.eta": ("eta", "float"),
    "approx.dt": ("dt", "float"),
    "approx.n": ("n", "int"),
    "approx.delta": ("delta", "float"),
    "approx.kappa": ("kappa", "float"),
    "approx.omega": ("omega", "float"),
    "init.rho": ("rho0", "expr"),
    "numerics.substeps": ("substeps", "int"),
    "numerics.flux": ("flux", "str"),
    "numerics.picard_tol": ("picard_tol", "float"),
    "numerics.picard_maxit": ("picard_maxit", "int"),
    "numerics.newton_tol": ("newton_tol", "float"),
    "numerics.newton_maxit": ("newton_maxit", "int"),
    "numerics.current_samples": ("current_samples", "int"),
}
VECTOR_EXPR_KEYS = {
    "init.m": ("m0", ("init.mx", "init.my", "init.mz")),
    "init.B": ("B0", ("init.bx", "init.by", "init.bz")),
    "source.J": ("J", ("source.jx", "source.jy", "source.jz")),
}
BODY_FIELDS = {"shape": "str", "center": "vec", "radius": "float", "half": "vec", "a": "vec", "b": "vec"}


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _number(v: str, key: str) -> float:
    try:
        return float(evaluate(v))
    except Exception as exc:
        raise ConfigError(f"{key}: cannot read number from {v!r} ({exc})") from None


def _convert(v: str, kind: str, key: str):
    if kind == "float":
        return _number(v, key)
    if kind == "int":
        x = _number(v, key)
        if x != int(x):
            raise ConfigError(f"{key}: expected an integer, got {v!r}")
        return int(x)
    if kind == "vec":
        parts = [p for p in v.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"{key}: expected three comma-separated numbers")
        return tuple(_number(p, key) for p in parts)
    if kind == "expr":
        try:
            evaluate(v, x=0.5, y=0.5, z=0.5, t=0.0)
        except Exception as exc:
            raise ConfigError(f"{key}: {exc}") from None
        return v
    return v


def params_from_mapping(entries: dict[str, str], base: SimParams | None = None) -> SimParams:
    kw: dict = {}
    vec_parts: dict[str, list[str]] = {}
    bodies: dict[int, dict] = {}
    for key, v in entries.items():
        if key in SCALAR_KEYS:
            name, kind = SCALAR_KEYS[key]
            kw[name] = _convert(v, kind, key)
            continue
        hit = False
        for group, (name, keys) in VECTOR_EXPR_KEYS.items():
            if key in keys:
                vec_parts.setdefault(name, list(getattr(base or SimParams(), name)))
                vec_parts[name][keys.index(key)] = _convert(v, "expr", key)
                hit = True
        if hit:
            continue
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "body" and parts[1].isdigit() and parts[2] in BODY_FIELDS:
            bodies.setdefault(int(parts[1]), {})[parts[2]] = _convert(v, BODY_FIELDS[parts[2]], key)
            continue
        raise ConfigError(f"unknown key {key!r}")
    for name, vals in vec_parts.items():
        kw[name] = tuple(vals)
    if bodies:
        specs = []
        for i in sorted(bodies):
            if "shape" not in bodies[i]:
                raise ConfigError(f"body.{i}.shape missing")
            specs.append(BodySpec(**bodies[i]))
        if sorted(bodies) != list(range(len(bodies))):
            raise ConfigError("body indices must be 0, 1, 2, ...")
        kw["bodies"] = tuple(specs)
    base = base or SimParams()
    return base.replace(**kw)


def load_config(path) -> SimParams:
    return params_from_mapping(parse_config(Path(path).read_text()))


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def params_to_text(p: SimParams) -> str:
    """Canonical config text; parsing it gives back ``p``."""
    lines = []
    for key, (name, kind) in SCALAR_KEYS.items():
        v = getattr(p, name)
        if v is None:
            continue
        if kind == "vec":
            lines.append(f"{key} = " + ", ".join(_fmt(float(c)) for c in v))
        else:
            lines.append(f"{key} = {_fmt(v)}")
    for group, (name, keys) in VECTOR_EXPR_KEYS.items():
        for k, v in zip(keys, getattr(p, name)):
            lines.append(f"{k} = {v}")
    for i, b in enumerate(p.bodies):
        for f, kind in BODY_FIELDS.items():
            v = getattr(b, f)
            if v is None:
                continue
            if kind == "vec":
                lines.append(f"body.{i}.{f} = " + ", ".join(_fmt(float(c)) for c in v))
            else:
                lines.append(f"body.{i}.{f} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def params_hash(p: SimParams) -> str:
    return hashlib.sha256(params_to_text(p).encode()).hexdigest()


def shipped_configs() -> dict[str, str]:
    """Names of the configs bundled with the package, mapped to their text."""
    root = resources.files("rigidmhd") / "configs"
    return {f.name[:-4]: f.read_text() for f in root.iterdir() if f.name.endswith(".cfg")}


def resolve_config(name_or_path: str) -> SimParams:
    """Load a config by file path or by shipped name (e.g. ``falling-ball``)."""
    path = Path(name_or_path)
    if path.exists():
        return load_config(path)
    shipped = shipped_configs()
    if name_or_path in shipped:
        return params_from_mapping(parse_config(shipped[name_or_path]))
    raise ConfigError(f"no config file or shipped config named {name_or_path!r} "
                      f"(shipped: {', '.join(sorted(shipped))})")
