"""Cell-centred finite differences on a uniform box grid.

Scalars are arrays of shape ``grid.shape``; vector fields carry a leading
component axis, ``(3, *grid.shape)``.  Boundary behaviour is set through ghost
cells.  Every component/axis pair gets one of three ghost rules:

``e``  even mirror (homogeneous Neumann, tangential components)
``o``  odd mirror (homogeneous Dirichlet at the face, normal components)
``x``  cubic extrapolation (one-sided second order stencils)

Named boundary conditions map onto these rules, see :data:`VECTOR_BC`.  With
mirror ghosts the operators are central differences on the reflected periodic
lattice, so ``curl(grad f)`` and ``div(curl F)`` vanish identically, not only
in the interior.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Grid", "GridMismatchError", "PoissonError",
    "grad", "div", "curl", "laplacian", "curl_curl", "sym_grad",
    "neumann_laplacian", "helmholtz_project",
    "grad_matrix", "div_matrix", "curl_matrix", "neumann_laplacian_matrix",
    "VECTOR_BC", "SCALAR_BC",
]


class GridMismatchError(ValueError):
    """Field shape does not belong to the grid."""


class PoissonError(RuntimeError):
    """The Neumann Poisson solve did not converge."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on ``[0, Lx] x [0, Ly] x [0, Lz]``."""

    shape: tuple[int, int, int]
    h: float
    _centers: tuple = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3:
            raise ValueError("grid must be three dimensional")
        if min(shape) < 8:
            raise ValueError(f"need at least 8 cells per axis, got {shape}")
        if not self.h > 0:
            raise ValueError("spacing h must be positive")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "h", float(self.h))
        c = tuple((np.arange(n) + 0.5) * self.h for n in shape)
        object.__setattr__(self, "_centers", c)

    @classmethod
    def cube(cls, n: int, length: float = 1.0) -> "Grid":
        return cls((n, n, n), length / n)

    @property
    def lengths(self) -> np.ndarray:
        return np.array(self.shape, dtype=float) * self.h

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.h ** 3

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """1D cell-centre coordinates per axis."""
        return self._centers

    def mesh(self) -> np.ndarray:
        """Cell centres, shape ``(3, *shape)``."""
        return np.stack(np.meshgrid(*self._centers, indexing="ij"))

    def zeros(self, vector: bool = False) -> np.ndarray:
        return np.zeros(((3,) if vector else ()) + self.shape)

    def check_scalar(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            raise GridMismatchError(f"scalar field shape {f.shape} != grid {self.shape}")
        return f

    def check_vector(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        if F.shape != (3,) + self.shape:
            raise GridMismatchError(f"vector field shape {F.shape} != (3, {self.shape})")
        return F

    def integrate(self, f: np.ndarray) -> float:
        """Midpoint rule over the box."""
        return float(np.sum(f) * self.cell_volume)


# Parity tables: rule[c][a] is the ghost rule of component c along axis a.
def _table(fn) -> tuple[str, ...]:
    return tuple("".join(fn(c, a) for a in range(3)) for c in range(3))


VECTOR_BC = {
    "extrapolate": _table(lambda c, a: "x"),
    "magnetic": _table(lambda c, a: "o" if c == a else "e"),
    "axial": _table(lambda c, a: "e" if c == a else "o"),
    "noslip": _table(lambda c, a: "o"),
    "neumann": _table(lambda c, a: "e"),
}
SCALAR_BC = {"extrapolate": "xxx", "neumann": "eee", "dirichlet": "ooo"}


def _vector_rule(bc) -> tuple[str, ...]:
    if isinstance(bc, str):
        try:
            return VECTOR_BC[bc]
        except KeyError:
            raise ValueError(f"unknown vector boundary condition {bc!r}") from None
    return tuple(bc)


def _scalar_rule(bc) -> str:
    if bc in SCALAR_BC:
        return SCALAR_BC[bc]
    if isinstance(bc, str) and len(bc) == 3 and set(bc) <= set("eox"):
        return bc
    raise ValueError(f"unknown scalar boundary condition {bc!r}")


def _flip(r: str) -> str:
    return {"e": "o", "o": "e", "x": "x"}[r]


def _pad(f: np.ndarray, axis: int, rule: str) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    if rule == "e":
        lo, hi = f[0], f[-1]
    elif rule == "o":
        lo, hi = -f[0], -f[-1]
    elif rule == "x":
        lo = 4 * f[0] - 6 * f[1] + 4 * f[2] - f[3]
        hi = 4 * f[-1] - 6 * f[-2] + 4 * f[-3] - f[-4]
    else:
        raise ValueError(rule)
    out = np.concatenate([lo[None], f, hi[None]], axis=0)
    return np.moveaxis(out, 0, axis)


def _d1(f: np.ndarray, axis: int, rule: str, h: float) -> np.ndarray:
    p = np.moveaxis(_pad(f, axis, rule), axis, 0)
    return np.moveaxis((p[2:] - p[:-2]) / (2 * h), 0, axis)


def _d2(f: np.ndarray, axis: int, rule: str, h: float) -> np.ndarray:
    p = np.moveaxis(_pad(f, axis, rule), axis, 0)
    return np.moveaxis((p[2:] - 2 * p[1:-1] + p[:-2]) / h ** 2, 0, axis)


def grad(f: np.ndarray, grid: Grid, bc: str = "extrapolate") -> np.ndarray:
    """Central-difference gradient."""
    f = grid.check_scalar(f)
    r = _scalar_rule(bc)
    return np.stack([_d1(f, a, r[a], grid.h) for a in range(3)])


def div(F: np.ndarray, grid: Grid, bc="extrapolate") -> np.ndarray:
    F = grid.check_vector(F)
    r = _vector_rule(bc)
    return sum(_d1(F[a], a, r[a][a], grid.h) for a in range(3))


def _curl_rule(r) -> tuple[str, ...]:
    out = []
    for c in range(3):
        a, b = (c + 1) % 3, (c + 2) % 3
        row = ""
        for x in range(3):
            p = r[b][x] if x != a else _flip(r[b][x])
            q = r[a][x] if x != b else _flip(r[a][x])
            row += p if p == q else "x"
        out.append(row)
    return tuple(out)


def curl(F: np.ndarray, grid: Grid, bc="extrapolate") -> np.ndarray:
    F = grid.check_vector(F)
    r = _vector_rule(bc)
    h = grid.h
    out = np.empty_like(F)
    for c in range(3):
        a, b = (c + 1) % 3, (c + 2) % 3
        out[c] = _d1(F[b], a, r[b][a], h) - _d1(F[a], b, r[a][b], h)
    return out


def curl_curl(F: np.ndarray, grid: Grid, bc="extrapolate") -> np.ndarray:
    """curl(curl F); the inner result inherits the matching parity."""
    r = _vector_rule(bc)
    return curl(curl(F, grid, r), grid, _curl_rule(r))


def laplacian(f: np.ndarray, grid: Grid, bc: str = "extrapolate") -> np.ndarray:
    """Compact 7-point Laplacian of a scalar, or componentwise of a vector."""
    f = np.asarray(f, dtype=float)
    if f.shape == (3,) + grid.shape:
        r = _vector_rule(bc)
        return np.stack([sum(_d2(f[c], a, r[c][a], grid.h) for a in range(3)) for c in range(3)])
    f = grid.check_scalar(f)
    r = _scalar_rule(bc)
    return sum(_d2(f, a, r[a], grid.h) for a in range(3))


def neumann_laplacian(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Face-flux Laplacian with zero normal flux; sums to zero over the box."""
    return laplacian(f, grid, "neumann")


def sym_grad(F: np.ndarray, grid: Grid, bc="extrapolate") -> np.ndarray:
    """Symmetric gradient, shape ``(3, 3, *shape)``; ``D[i, j] = (d_j F_i + d_i F_j)/2``."""
    F = grid.check_vector(F)
    r = _vector_rule(bc)
    J = np.stack([np.stack([_d1(F[i], j, r[i][j], grid.h) for j in range(3)]) for i in range(3)])
    return 0.5 * (J + J.transpose(1, 0, 2, 3, 4))


# ---------------------------------------------------------------------------
# sparse assembly (flat index = C-order ravel of the field array)

def _d1_matrix_1d(n: int, h: float, rule: str) -> sp.csr_matrix:
    D = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        D[i, i + 1] = 1.0
        D[i, i - 1] = -1.0
    if rule == "e":
        D[0, 1], D[0, 0] = 1.0, -1.0
        D[n - 1, n - 1], D[n - 1, n - 2] = 1.0, -1.0
    elif rule == "o":
        D[0, 1], D[0, 0] = 1.0, 1.0
        D[n - 1, n - 1], D[n - 1, n - 2] = -1.0, -1.0
    elif rule == "x":
        D[0, 0:3] = [-3.0, 4.0, -1.0]
        D[n - 1, n - 3:n] = [1.0, -4.0, 3.0]
    return (D / (2 * h)).tocsr()


def _along(grid: Grid, axis: int, M1: sp.spmatrix) -> sp.csr_matrix:
    mats = [sp.identity(n, format="csr") for n in grid.shape]
    mats[axis] = M1
    return sp.kron(sp.kron(mats[0], mats[1]), mats[2], format="csr")


def _d1_matrix(grid: Grid, axis: int, rule: str) -> sp.csr_matrix:
    return _along(grid, axis, _d1_matrix_1d(grid.shape[axis], grid.h, rule))


@lru_cache(maxsize=32)
def grad_matrix(grid: Grid, bc: str = "neumann") -> sp.csr_matrix:
    r = _scalar_rule(bc)
    return sp.vstack([_d1_matrix(grid, a, r[a]) for a in range(3)], format="csr")


@lru_cache(maxsize=32)
def div_matrix(grid: Grid, bc: str = "magnetic") -> sp.csr_matrix:
    r = _vector_rule(bc)
    return sp.hstack([_d1_matrix(grid, a, r[a][a]) for a in range(3)], format="csr")


@lru_cache(maxsize=32)
def curl_matrix(grid: Grid, bc: str = "magnetic") -> sp.csr_matrix:
    """Matrix of :func:`curl`.  For ``magnetic`` input its transpose is the
    curl of ``axial`` fields, so ``C.T @ C`` is curl-curl."""
    r = _vector_rule(bc)
    m = grid.size
    blocks = [[None] * 3 for _ in range(3)]
    for c in range(3):
        a, b = (c + 1) % 3, (c + 2) % 3
        blocks[c][b] = _d1_matrix(grid, a, r[b][a])
        blocks[c][a] = -_d1_matrix(grid, b, r[a][b])
        blocks[c][c] = sp.csr_matrix((m, m))
    return sp.bmat(blocks, format="csr")


@lru_cache(maxsize=32)
def neumann_laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    mats = []
    for a, n in enumerate(grid.shape):
        L1 = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]).tolil()
        L1[0, 0] = L1[n - 1, n - 1] = -1.0
        mats.append(_along(grid, a, (L1 / grid.h ** 2).tocsr()))
    return (mats[0] + mats[1] + mats[2]).tocsr()


@lru_cache(maxsize=8)
def _projection_system(grid: Grid):
    G = grad_matrix(grid, "neumann")
    A = (G.T @ G).tocsr()
    diag = A.diagonal()
    M = sp.diags(1.0 / diag)
    return G, A, M


def helmholtz_project(F: np.ndarray, grid: Grid, rtol: float = 1e-13,
                      maxiter: int = 20000) -> np.ndarray:
    """Remove the gradient part of ``F`` (normal component zero on the box).

    Solves the Neumann problem ``-div grad phi = -div F`` with the compatible
    wide stencil by preconditioned CG and returns ``F - grad phi``.  The result
    is the orthogonal projection onto the discrete kernel of ``div``.
    """
    F = grid.check_vector(F)
    G, A, M = _projection_system(grid)
    b = G.T @ F.ravel()
    bn = np.linalg.norm(b)
    if bn == 0.0:
        return F.copy()
    b = b - b.mean()  # consistency with the constant kernel
    phi, info = spla.cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
    res = np.linalg.norm(A @ phi - b)
    if info != 0 and res > 1e3 * rtol * bn:
        raise PoissonError(f"Poisson CG did not converge: info={info}, residual={res:.3e}")
    return F - (G @ phi).reshape(F.shape)
