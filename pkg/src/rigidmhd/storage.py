"""On-disk trajectory layout.

A run directory holds

``meta``         text: format version, parameter hash, config, field manifest
``ledger.csv``   one row per step, columns in :data:`LEDGER_COLUMNS` order
``snap_<k>.bin`` 16-byte header (8-byte magic, uint32 version, uint32 count
                 of float64 values) followed by little-endian float64 data

Arrays are written in manifest order.  Arrays whose trailing axes are the
grid axes are stored x-fastest (Fortran order over the grid axes, leading
axes slowest); other arrays are stored in C order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RMHDSNAP"
VERSION = 1
HEADER = struct.Struct("<8sII")

# name -> shape template; symbols: N (grid), n (modes), M (markers), S (substeps)
MANIFEST = (
    ("k", ("1",)),
    ("t", ("1",)),
    ("nsub", ("1",)),
    ("nmark", ("1",)),
    ("flagged", ("1",)),
    ("rho", ("N", "N", "N")),
    ("coeffs", ("n",)),
    ("u", ("3", "N", "N", "N")),
    ("B", ("3", "N", "N", "N")),
    ("chi", ("N", "N", "N")),
    ("markers", ("M", "3")),
    ("sub_times", ("S+1",)),
    ("sub_coeffs", ("S+1", "n")),
    ("sub_rho", ("S+1", "N", "N", "N")),
)
GRID_FIELDS = {"rho", "u", "B", "chi", "sub_rho"}


class SnapshotError(ValueError):
    pass


def manifest_text() -> str:
    return "\n".join(f"field.{name} = {' x '.join(shape)}" for name, shape in MANIFEST)


def _resolve(shape, N, n, M, S):
    sym = {"1": 1, "3": 3, "N": N, "n": n, "M": M, "S+1": S + 1}
    return tuple(sym[s] for s in shape)


def _encode(name, arr):
    arr = np.asarray(arr, dtype="<f8")
    if name in GRID_FIELDS:
        flat = arr.reshape((-1,) + arr.shape[-3:])
        return np.concatenate([f.ravel(order="F") for f in flat])
    return arr.ravel(order="C")


def _decode(name, data, shape):
    if name in GRID_FIELDS:
        grid = shape[-3:]
        lead = int(np.prod(shape[:-3])) if len(shape) > 3 else 1
        size = int(np.prod(grid))
        parts = [data[i * size:(i + 1) * size].reshape(grid, order="F") for i in range(lead)]
        return np.stack(parts).reshape(shape)
    return data.reshape(shape)


def write_snapshot(path, snap: dict, N: int, n: int) -> None:
    chunks = []
    S = len(snap["sub_times"]) - 1
    M = len(snap["markers"])
    values = dict(snap, nsub=S, nmark=M)
    for name, shape in MANIFEST:
        want = _resolve(shape, N, n, M, S)
        arr = np.asarray(values[name], dtype=float).reshape(want)
        chunks.append(_encode(name, arr))
    data = np.concatenate(chunks).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, data.size))
        fh.write(data.tobytes())


def read_snapshot(path, N: int, n: int) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise SnapshotError(f"{path}: truncated header")
    magic, version, count = HEADER.unpack(raw[:HEADER.size])
    if magic != MAGIC:
        raise SnapshotError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise SnapshotError(f"{path}: unsupported version {version}")
    data = np.frombuffer(raw[HEADER.size:], dtype="<f8")
    if data.size != count:
        raise SnapshotError(f"{path}: expected {count} values, found {data.size}")
    head = data[:5]
    S, M = int(head[2]), int(head[3])
    out, pos = {}, 0
    for name, shape in MANIFEST:
        want = _resolve(shape, N, n, M, S)
        size = int(np.prod(want))
        out[name] = _decode(name, data[pos:pos + size].copy(), want)
        pos += size
    if pos != count:
        raise SnapshotError(f"{path}: manifest covers {pos} of {count} values")
    for key in ("k", "nsub", "nmark"):
        out[key] = int(out[key][0])
    out["t"] = float(out["t"][0])
    out["flagged"] = bool(out["flagged"][0])
    return out


def write_meta(path, fields: dict[str, str], config_text: str) -> None:
    lines = [f"{k} = {v}" for k, v in fields.items()]
    lines.append(manifest_text())
    lines.append("")
    lines.extend("config." + line for line in config_text.splitlines() if line.strip())
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> tuple[dict[str, str], str]:
    fields, config = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        if key.startswith("config."):
            config.append(f"{key[len('config.'):]} = {value}")
        else:
            fields[key] = value
    return fields, "\n".join(config) + "\n"
