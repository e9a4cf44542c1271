"""Body shapes, signed distances, velocity mollification and marker transport."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .discrete_calculus import Grid

__all__ = [
    "SENTINEL", "EmptyKernelError", "DegenerateMarkersError", "OverlapError",
    "ShapeMask", "SignedDistanceField", "FlowMap", "Isometry",
    "Ball", "Box", "Capsule", "Body", "BodySet", "make_shape",
    "signed_distance", "delta_kernel", "delta_neighbourhood",
    "mollifier_weights", "mollify_velocity", "interpolate_velocity",
    "advance_flow_map", "solid_region", "fit_isometry",
]

#: Stand-in for +/- infinity in the signed distance of a full/empty mask.
SENTINEL = 1e9


class EmptyKernelError(ValueError):
    """The delta-kernel of a body has no cells."""


class DegenerateMarkersError(ValueError):
    """Marker set too small or coplanar for a rigid fit."""


class OverlapError(ValueError):
    """Two bodies touch or overlap at construction."""


@dataclass(frozen=True)
class ShapeMask:
    occupancy: np.ndarray
    grid: Grid

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != self.grid.shape:
            raise ValueError(f"mask shape {occ.shape} != grid {self.grid.shape}")
        object.__setattr__(self, "occupancy", occ)

    @property
    def empty(self) -> bool:
        return not self.occupancy.any()

    @property
    def bbox(self) -> tuple[tuple[int, int], ...] | None:
        """Inclusive-exclusive index ranges per axis, None when empty."""
        if self.empty:
            return None
        idx = np.nonzero(self.occupancy)
        return tuple((int(i.min()), int(i.max()) + 1) for i in idx)

    @property
    def volume(self) -> float:
        return float(self.occupancy.sum()) * self.grid.cell_volume

    def __or__(self, other: "ShapeMask") -> "ShapeMask":
        return ShapeMask(self.occupancy | other.occupancy, self.grid)


@dataclass(frozen=True)
class SignedDistanceField:
    values: np.ndarray
    source: ShapeMask


# ---------------------------------------------------------------------------
# analytic shapes

@dataclass(frozen=True)
class Ball:
    center: tuple[float, float, float]
    radius: float

    def sdf(self, x: np.ndarray) -> np.ndarray:
        """Analytic signed distance (positive inside) at points ``(3, ...)``."""
        c = np.asarray(self.center, dtype=float).reshape((3,) + (1,) * (x.ndim - 1))
        return self.radius - np.sqrt(((x - c) ** 2).sum(0))


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def sdf(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float).reshape((3,) + (1,) * (x.ndim - 1))
        b = np.asarray(self.half, dtype=float).reshape(c.shape)
        q = np.abs(x - c) - b
        outside = np.sqrt((np.maximum(q, 0.0) ** 2).sum(0))
        inside = np.minimum(q.max(0), 0.0)
        return -(outside + inside)


@dataclass(frozen=True)
class Capsule:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def sdf(self, x: np.ndarray) -> np.ndarray:
        shp = (3,) + (1,) * (x.ndim - 1)
        a = np.asarray(self.a, dtype=float).reshape(shp)
        ab = np.asarray(self.b, dtype=float).reshape(shp) - a
        t = np.clip(((x - a) * ab).sum(0) / float((ab ** 2).sum()), 0.0, 1.0)
        return self.radius - np.sqrt(((x - a - t * ab) ** 2).sum(0))


def make_shape(kind: str, **kw):
    kinds = {"ball": Ball, "box": Box, "capsule": Capsule}
    if kind not in kinds:
        raise ValueError(f"unknown shape {kind!r}; expected one of {sorted(kinds)}")
    return kinds[kind](**kw)


def rasterize(shape, grid: Grid) -> ShapeMask:
    return ShapeMask(shape.sdf(grid.mesh()) > 0.0, grid)


# ---------------------------------------------------------------------------
# distances and morphology

def signed_distance(mask: ShapeMask) -> SignedDistanceField:
    """Euclidean signed distance to the voxel boundary at cell centres.

    Inside cells get (distance to the nearest outside centre) - h/2, outside
    cells the negative of the mirror quantity.  Space beyond the grid counts as
    outside the mask.
    """
    occ, h = mask.occupancy, mask.grid.h
    if not occ.any():
        return SignedDistanceField(np.full(occ.shape, -SENTINEL), mask)
    inside = ndimage.distance_transform_edt(np.pad(occ, 1, constant_values=False), sampling=h)[1:-1, 1:-1, 1:-1]
    if occ.all():
        # only the domain exterior is outside
        return SignedDistanceField(inside - 0.5 * h, mask)
    outside = ndimage.distance_transform_edt(~occ, sampling=h)
    return SignedDistanceField(np.where(occ, inside - 0.5 * h, -(outside - 0.5 * h)), mask)


def delta_kernel(mask: ShapeMask, delta: float) -> ShapeMask:
    """Cells farther than ``delta`` inside the mask boundary."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    k = ShapeMask(signed_distance(mask).values > delta, mask.grid)
    if k.empty:
        raise EmptyKernelError(f"delta={delta} leaves an empty kernel")
    return k


def delta_neighbourhood(mask: ShapeMask, delta: float) -> ShapeMask:
    """Cells closer than ``delta`` to the mask (mask included)."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if mask.empty:
        return mask
    return ShapeMask(signed_distance(mask).values > -delta, mask.grid)


# ---------------------------------------------------------------------------
# mollification

def mollifier_weights(grid: Grid, delta: float) -> np.ndarray:
    """Normalized bump kernel ``exp(-1/(1-r^2))`` sampled on integer offsets."""
    m = int(np.ceil(delta / grid.h))
    if delta <= grid.h:
        w = np.zeros((1, 1, 1))
        w[0, 0, 0] = 1.0
        return w
    o = np.arange(-m, m + 1) * grid.h
    r2 = (o[:, None, None] ** 2 + o[None, :, None] ** 2 + o[None, None, :] ** 2) / delta ** 2
    w = np.zeros_like(r2)
    inside = r2 < 1.0
    w[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return w / w.sum()


def mollify_velocity(u: np.ndarray, grid: Grid, delta: float) -> np.ndarray:
    """Convolve the zero-extended field with the bump mollifier of radius delta."""
    u = grid.check_vector(u)
    w = mollifier_weights(grid, delta)
    return np.stack([ndimage.convolve(u[c], w, mode="constant", cval=0.0) for c in range(3)])


# ---------------------------------------------------------------------------
# flow map

@dataclass
class FlowMap:
    """Marker positions of the transported body kernels."""

    initial: np.ndarray
    points: np.ndarray
    body: np.ndarray
    time: float = 0.0
    flagged: bool = False

    @classmethod
    def identity(cls, markers: np.ndarray, body: np.ndarray, time: float = 0.0) -> "FlowMap":
        markers = np.asarray(markers, dtype=float)
        return cls(markers.copy(), markers.copy(), np.asarray(body, dtype=int), float(time))

    def copy(self) -> "FlowMap":
        return FlowMap(self.initial.copy(), self.points.copy(), self.body.copy(), self.time, self.flagged)

    def of_body(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        sel = self.body == i
        return self.initial[sel], self.points[sel]


def _pad_odd(R: np.ndarray) -> np.ndarray:
    # ghost = -mirror, so the interpolant vanishes on the faces
    Rp = np.pad(R, ((0, 0), (1, 1), (1, 1), (1, 1)), mode="symmetric")
    for a in range(3):
        sl = [slice(None)] * 4
        for end in (0, -1):
            sl[a + 1] = end
            Rp[tuple(sl)] *= -1.0
            sl[a + 1] = slice(None)
    return Rp


def _interp_padded(Rp: np.ndarray, h: float, pts: np.ndarray) -> np.ndarray:
    m = len(pts)
    idx = pts.T / h + 0.5
    coords = np.empty((4, 3 * m))
    coords[0] = np.repeat(np.arange(3), m)
    coords[1:] = np.tile(idx, 3)
    v = ndimage.map_coordinates(Rp, coords, order=1, mode="nearest")
    return v.reshape(3, m).T


def interpolate_velocity(R: np.ndarray, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at points ``(M, 3)``; zero on the walls."""
    return _interp_padded(_pad_odd(grid.check_vector(R)), grid.h, np.asarray(pts, dtype=float))


class _Sampled:
    """Piecewise-linear-in-time velocity with pre-padded samples."""

    def __init__(self, R, grid: Grid):
        if isinstance(R, tuple):
            times, fields = R
            self.times = np.asarray(times, dtype=float)
            self.fields = [_pad_odd(np.asarray(f, dtype=float)) for f in fields]
            self.vmax = max(float(np.abs(f).max()) for f in fields)
        else:
            self.times = np.zeros(1)
            self.fields = [_pad_odd(grid.check_vector(R))]
            self.vmax = float(np.abs(R).max())
        self.h = grid.h

    def __call__(self, t: float, pts: np.ndarray) -> np.ndarray:
        if len(self.times) == 1:
            return _interp_padded(self.fields[0], self.h, pts)
        j = int(np.clip(np.searchsorted(self.times, t) - 1, 0, len(self.times) - 2))
        s = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        s = min(max(s, 0.0), 1.0)
        v = (1.0 - s) * _interp_padded(self.fields[j], self.h, pts)
        if s > 0.0:
            v += s * _interp_padded(self.fields[j + 1], self.h, pts)
        return v


def _rk2(vel: _Sampled, pts, t0, t1, nsub):
    dt = (t1 - t0) / nsub
    x = pts.copy()
    for i in range(nsub):
        t = t0 + i * dt
        k1 = vel(t, x)
        k2 = vel(t + dt, x + dt * k1)
        x = x + 0.5 * dt * (k1 + k2)
    return x


def advance_flow_map(X: FlowMap, R, grid: Grid, t0: float, t1: float,
                     tol: float | None = 1e-7, max_substeps: int = 1 << 16) -> FlowMap:
    """Transport markers with the (mollified) velocity ``R`` from t0 to t1.

    ``R`` is a vector field (steady) or ``(times, fields)`` samples, linearly
    interpolated in time.  Heun's method; the substep count starts from the
    rule max displacement <= h/2 and doubles until two successive results
    agree to ``tol`` (absolute, length units).
    """
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    out = X.copy()
    out.time = float(t1)
    if t1 == t0 or len(X.points) == 0:
        return out
    vel = _Sampled(R, grid)
    if vel.vmax == 0.0:
        return out
    nsub = max(1, int(np.ceil(np.sqrt(3) * vel.vmax * (t1 - t0) / (0.5 * grid.h))))
    x = _rk2(vel, X.points, t0, t1, nsub)
    if tol is not None:
        while nsub < max_substeps:
            nsub *= 2
            x2 = _rk2(vel, X.points, t0, t1, nsub)
            err = float(np.abs(x2 - x).max())
            x = x2
            if err <= tol:
                break
    lo, hi = 0.0, grid.lengths
    clipped = np.clip(x, lo, hi)
    out.flagged = X.flagged or bool(np.any(clipped != x))
    out.points = clipped
    return out


# ---------------------------------------------------------------------------
# bodies

@dataclass
class Body:
    shape: object
    mask: ShapeMask
    kernel: ShapeMask
    markers: np.ndarray


def _kernel_markers(kernel: ShapeMask, min_markers: int) -> np.ndarray:
    grid = kernel.grid
    centres = grid.mesh()[:, kernel.occupancy].T
    ncell = len(centres)
    m = 1
    while ncell * m ** 3 < min_markers:
        m += 1
    if m == 1:
        return centres
    off = ((np.arange(m) + 0.5) / m - 0.5) * grid.h
    sub = np.stack(np.meshgrid(off, off, off, indexing="ij"), -1).reshape(-1, 3)
    return (centres[:, None, :] + sub[None, :, :]).reshape(-1, 3)


@dataclass
class BodySet:
    bodies: list[Body]
    grid: Grid
    delta: float

    @classmethod
    def from_shapes(cls, shapes, grid: Grid, delta: float, min_markers: int = 200) -> "BodySet":
        bodies = []
        for s in shapes:
            mask = rasterize(s, grid)
            kern = delta_kernel(mask, delta)
            bodies.append(Body(s, mask, kern, _kernel_markers(kern, min_markers)))
        for i in range(len(bodies)):
            grown = ndimage.binary_dilation(bodies[i].mask.occupancy, iterations=1)
            for j in range(i + 1, len(bodies)):
                if np.any(grown & bodies[j].mask.occupancy):
                    raise OverlapError(f"bodies {i} and {j} touch or overlap")
        return cls(bodies, grid, float(delta))

    def __len__(self) -> int:
        return len(self.bodies)

    def flow_map(self) -> FlowMap:
        if not self.bodies:
            return FlowMap.identity(np.zeros((0, 3)), np.zeros(0, dtype=int))
        pts = np.concatenate([b.markers for b in self.bodies])
        idx = np.concatenate([np.full(len(b.markers), i) for i, b in enumerate(self.bodies)])
        return FlowMap.identity(pts, idx)

    def initial_mask(self) -> ShapeMask:
        occ = np.zeros(self.grid.shape, dtype=bool)
        for b in self.bodies:
            occ |= b.mask.occupancy
        return ShapeMask(occ, self.grid)


def solid_region(X: FlowMap, bodies: BodySet, delta: float | None = None):
    """Delta-neighbourhood of the transported kernels.

    Returns ``(union_mask, per_body_masks, chi)`` with ``chi`` the signed
    distance of the union.  A cell belongs to body i when its centre lies
    within ``delta + h/2`` of a marker, the same voxel convention as
    :func:`delta_neighbourhood`, or when it contains a marker.
    """
    grid = bodies.grid
    delta = bodies.delta if delta is None else float(delta)
    centres = grid.mesh().reshape(3, -1).T
    per = []
    occ = np.zeros(grid.shape, dtype=bool)
    for i in range(len(bodies)):
        _, pts = X.of_body(i)
        m = np.zeros(grid.size, dtype=bool)
        if len(pts):
            tree = cKDTree(pts)
            d, _ = tree.query(centres, distance_upper_bound=delta + 0.5 * grid.h)
            m = np.isfinite(d)
            cell = np.clip(np.floor(pts / grid.h).astype(int), 0, np.array(grid.shape) - 1)
            m = m.reshape(grid.shape)
            m[cell[:, 0], cell[:, 1], cell[:, 2]] = True
        else:
            m = m.reshape(grid.shape)
        per.append(ShapeMask(m, grid))
        occ |= m
    union = ShapeMask(occ, grid)
    return union, per, signed_distance(union)


# ---------------------------------------------------------------------------
# rigid fit

@dataclass(frozen=True)
class Isometry:
    rotation: np.ndarray
    translation: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.translation


def fit_isometry(X: FlowMap, body_index: int) -> tuple[Isometry, float]:
    """Least-squares rigid motion taking initial markers to current ones."""
    p, q = X.of_body(body_index)
    if len(p) < 4:
        raise DegenerateMarkersError(f"body {body_index} has {len(p)} markers, need >= 4")
    pc, qc = p.mean(0), q.mean(0)
    P, Q = p - pc, q - qc
    s = np.linalg.svd(P, compute_uv=False)
    if s[0] == 0.0 or s[2] <= 1e-9 * s[0]:
        raise DegenerateMarkersError(f"markers of body {body_index} are coplanar or collinear")
    U, _, Vt = np.linalg.svd(Q.T @ P)
    d = np.sign(np.linalg.det(U @ Vt))
    Rm = U @ np.diag([1.0, 1.0, d]) @ Vt
    # re-orthonormalize to push det and orthogonality errors to roundoff
    u, _, vt = np.linalg.svd(Rm)
    Rm = u @ vt
    t = qc - Rm @ pc
    iso = Isometry(Rm, t)
    res = float(np.sqrt(np.mean(np.sum((iso(p) - q) ** 2, axis=1))))
    return iso, res
