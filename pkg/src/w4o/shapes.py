"""Convex primitives: ray casting, signed distance, support mapping, GJK distance.

All primitives are centered at their local origin; cylinders run along the
local z axis.  Dimensions are full sizes (box edge lengths, cylinder height).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .geometry import RigidTransform


@dataclass(frozen=True)
class Sphere:
    radius: float

    kind = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    @property
    def dims(self) -> Tuple[float, ...]:
        return (self.radius,)

    @property
    def bounding_radius(self) -> float:
        return self.radius

    def eroded(self, margin: float) -> "Sphere":
        return Sphere(max(self.radius - margin, 1e-9))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p, axis=-1) - self.radius

    def support_local(self, d):
        n = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        if n == 0.0:
            return (self.radius, 0.0, 0.0)
        k = self.radius / n
        return (d[0] * k, d[1] * k, d[2] * k)

    def ray_hits(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        a = np.einsum("...i,...i->...", d, d)
        b = 2.0 * (d @ o)
        c = float(o @ o) - self.radius**2
        disc = b * b - 4 * a * c
        out = np.full(a.shape, np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        out[hit] = t[hit]
        return out


@dataclass(frozen=True)
class Box:
    size: Tuple[float, float, float]

    kind = "box"

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError("box needs three positive edge lengths")

    @property
    def dims(self) -> Tuple[float, ...]:
        return self.size

    @property
    def half(self) -> np.ndarray:
        return 0.5 * np.array(self.size)

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half))

    def eroded(self, margin: float) -> "Box":
        return Box(tuple(max(s - 2 * margin, 1e-9) for s in self.size))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def support_local(self, d):
        hx, hy, hz = self.size[0] * 0.5, self.size[1] * 0.5, self.size[2] * 0.5
        return (hx if d[0] >= 0 else -hx, hy if d[1] >= 0 else -hy, hz if d[2] >= 0 else -hz)

    def ray_hits(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        h = self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        # Rays parallel to a slab: inside the slab => unconstrained, else miss.
        parallel = d == 0
        inside = np.abs(o) <= h
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tnear = lo.max(axis=-1)
        tfar = hi.min(axis=-1)
        hit = (tnear <= tfar) & (tnear > 0)
        return np.where(hit, tnear, np.inf)


@dataclass(frozen=True)
class Cylinder:
    radius: float
    height: float

    kind = "cylinder"

    def __post_init__(self):
        if not (self.radius > 0 and self.height > 0):
            raise ValueError("cylinder radius and height must be positive")

    @property
    def dims(self) -> Tuple[float, ...]:
        return (self.radius, self.height)

    @property
    def bounding_radius(self) -> float:
        return math.hypot(self.radius, 0.5 * self.height)

    def eroded(self, margin: float) -> "Cylinder":
        return Cylinder(max(self.radius - margin, 1e-9), max(self.height - 2 * margin, 1e-9))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        radial = np.linalg.norm(p[..., :2], axis=-1) - self.radius
        axial = np.abs(p[..., 2]) - 0.5 * self.height
        q = np.stack([radial, axial], axis=-1)
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    def support_local(self, d):
        hz = 0.5 * self.height
        n = math.hypot(d[0], d[1])
        z = hz if d[2] >= 0 else -hz
        if n == 0.0:
            return (0.0, 0.0, z)
        k = self.radius / n
        return (d[0] * k, d[1] * k, z)

    def ray_hits(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        hz = 0.5 * self.height
        r2 = self.radius**2
        dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
        a = dx * dx + dy * dy
        b = 2 * (o[0] * dx + o[1] * dy)
        c = o[0] ** 2 + o[1] ** 2 - r2
        best = np.full(a.shape, np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - 4 * a * c
            ok = (a > 0) & (disc >= 0)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            for sign in (-1.0, 1.0):
                t = (-b + sign * sq) / (2 * a)
                z = o[2] + t * dz
                good = ok & (t > 0) & (np.abs(z) <= hz)
                best = np.where(good & (t < best), t, best)
            for cap in (-hz, hz):
                t = (cap - o[2]) / dz
                x = o[0] + t * dx
                y = o[1] + t * dy
                good = (dz != 0) & (t > 0) & (x * x + y * y <= r2)
                best = np.where(good & (t < best), t, best)
        return best


Shape = (Sphere, Box, Cylinder)


def make_shape(kind: str, dims) -> "Sphere | Box | Cylinder":
    dims = [float(x) for x in dims]
    if kind == "sphere":
        return Sphere(dims[0])
    if kind == "box":
        return Box(tuple(dims))
    if kind == "cylinder":
        return Cylinder(dims[0], dims[1])
    raise ValueError(f"unknown shape {kind!r}")


class Posed:
    """A primitive placed in the world; caches the rotation as plain tuples for GJK."""

    __slots__ = ("shape", "pose", "_r", "_t")

    def __init__(self, shape, pose: RigidTransform):
        self.shape = shape
        self.pose = pose
        self._r = tuple(tuple(float(x) for x in row) for row in pose.rotation)
        self._t = tuple(float(x) for x in pose.translation)

    @property
    def center(self):
        return self._t

    def support(self, d):
        r = self._r
        # local direction = R^T d
        ld = (
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        )
        s = self.shape.support_local(ld)
        t = self._t
        return (
            r[0][0] * s[0] + r[0][1] * s[1] + r[0][2] * s[2] + t[0],
            r[1][0] * s[0] + r[1][1] * s[1] + r[1][2] * s[2] + t[1],
            r[2][0] * s[0] + r[2][1] * s[1] + r[2][2] * s[2] + t[2],
        )

    def aabb(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = [self.support(tuple(-e for e in axis))[i] for i, axis in enumerate(_AXES)]
        hi = [self.support(axis)[i] for i, axis in enumerate(_AXES)]
        return np.array(lo), np.array(hi)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        local = (np.asarray(points, dtype=float) - self.pose.translation) @ self.pose.rotation
        return self.shape.sdf(local)

    def ray_hits(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        rot = self.pose.rotation
        o = rot.T @ (np.asarray(origin, dtype=float) - self.pose.translation)
        d = dirs @ rot
        return self.shape.ray_hits(o, d)


_AXES = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


class PointShape:
    """Degenerate primitive used to model the gripper tool point."""

    kind = "point"
    bounding_radius = 0.0
    dims = ()

    def eroded(self, margin):
        return self

    def support_local(self, d):
        return (0.0, 0.0, 0.0)

    def sdf(self, p):
        return np.linalg.norm(p, axis=-1)


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _closest_on_simplex(pts):
    """Closest point to the origin on conv(pts) for 1..4 points.

    Returns (point, supporting subset).  Enumerates faces and keeps the
    smallest-norm affine projection whose barycentric weights are all positive.
    """
    n = len(pts)
    best = None
    best_sub = None
    best_norm = math.inf
    for mask in range(1, 1 << n):
        sub = [pts[i] for i in range(n) if mask >> i & 1]
        k = len(sub)
        if k == 1:
            p = sub[0]
            lam_ok = True
        else:
            p0 = sub[0]
            e = [_sub(s, p0) for s in sub[1:]]
            m = k - 1
            g = [[_dot(e[i], e[j]) for j in range(m)] for i in range(m)]
            rhs = [-_dot(e[i], p0) for i in range(m)]
            mu = _solve_small(g, rhs)
            if mu is None:
                continue
            lam0 = 1.0 - sum(mu)
            lam_ok = lam0 > 0 and all(x > 0 for x in mu)
            if not lam_ok:
                continue
            p = (
                p0[0] + sum(mu[i] * e[i][0] for i in range(m)),
                p0[1] + sum(mu[i] * e[i][1] for i in range(m)),
                p0[2] + sum(mu[i] * e[i][2] for i in range(m)),
            )
        nrm = _dot(p, p)
        if nrm < best_norm - 1e-30 or (best is not None and nrm <= best_norm and len(sub) < len(best_sub)):
            best, best_sub, best_norm = p, sub, nrm
    return best, best_sub


def _solve_small(a, b):
    m = len(b)
    if m == 1:
        if abs(a[0][0]) < 1e-30:
            return None
        return [b[0] / a[0][0]]
    if m == 2:
        det = a[0][0] * a[1][1] - a[0][1] * a[1][0]
        scale = abs(a[0][0] * a[1][1]) + 1e-300
        if abs(det) < 1e-14 * scale:
            return None
        return [(b[0] * a[1][1] - a[0][1] * b[1]) / det, (a[0][0] * b[1] - b[0] * a[1][0]) / det]
    arr = np.array(a)
    if abs(np.linalg.det(arr)) < 1e-14 * abs(np.prod(np.diag(arr))) + 1e-300:
        return None
    return list(np.linalg.solve(arr, np.array(b)))


def gjk_distance(a: Posed, b: Posed, max_iter: int = 64, rel_tol: float = 1e-10) -> float:
    """Euclidean distance between two convex posed primitives (0 when they overlap)."""
    d = _sub(a.center, b.center)
    if _dot(d, d) == 0.0:
        d = (1.0, 0.0, 0.0)
    v = _sub(a.support((-d[0], -d[1], -d[2])), b.support(d))
    simplex = []
    for _ in range(max_iter):
        vv = _dot(v, v)
        if vv < 1e-24:
            return 0.0
        neg = (-v[0], -v[1], -v[2])
        w = _sub(a.support(neg), b.support(v))
        # Converged: no support point gets meaningfully closer than v.
        if vv - _dot(v, w) <= rel_tol * vv + 1e-20:
            return math.sqrt(vv)
        if any(_dot(_sub(w, s), _sub(w, s)) < 1e-24 for s in simplex):
            return math.sqrt(vv)
        simplex.append(w)
        v, simplex = _closest_on_simplex(simplex)
        if v is None:
            return 0.0
        if len(simplex) == 4:
            return 0.0
    return math.sqrt(_dot(v, v))


def intersects(a: Posed, b: Posed, tolerance: float = 0.0) -> bool:
    """True iff the shapes overlap by more than ``tolerance`` (both eroded by tolerance / 2)."""
    gap = math.dist(a.center, b.center) - a.shape.bounding_radius - b.shape.bounding_radius
    if gap > 0:
        return False
    half = 0.5 * tolerance
    ea = Posed(a.shape.eroded(half), a.pose) if half > 0 else a
    eb = Posed(b.shape.eroded(half), b.pose) if half > 0 else b
    return gjk_distance(ea, eb) <= 1e-9
