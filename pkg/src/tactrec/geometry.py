"""Rigid poses, convex shapes, and exact contact queries.

Distance between convex shapes is computed by support-function iteration
(GJK); penetrating pairs are resolved by polytope expansion (EPA), which
only serves diagnostics since swept motion halts before penetration.
All lengths are meters, all frames are right-handed with Z up.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .errors import ContractViolation, InvalidArgument

TRANSLATION_STEP = 0.01
ROTATION_STEP_DEG = 15.0
SWEEP_SUBSTEPS = 10
# A substep pose closer than this to a part counts as touching.
CONTACT_EPS = 1e-5

AXIS_NAMES = ("x", "y", "z", "roll", "pitch", "yaw")
ACTION_NAMES = tuple(
    f"{'+' if code % 2 == 0 else '-'}{AXIS_NAMES[code // 2]}" for code in range(12)
)
N_ACTIONS = 12


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion."""
    w, x, y, z = float(q[0]), float(q[1]), float(q[2]), float(q[3])
    vx, vy, vz = float(v[0]), float(v[1]), float(v[2])
    # t = 2 * (u x v), result = v + w*t + u x t
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return np.array([
        vx + w * tx + (y * tz - z * ty),
        vy + w * ty + (z * tx - x * tz),
        vz + w * tz + (x * ty - y * tx),
    ])


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise InvalidArgument("rotation axis must be nonzero")
    half = 0.5 * angle_rad
    q = np.empty(4)
    q[0] = math.cos(half)
    q[1:] = (math.sin(half) / n) * axis
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class Pose6:
    """Rigid transform: position plus unit-quaternion orientation (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3).copy()
        q = np.asarray(self.orientation, dtype=float).reshape(4).copy()
        if not np.all(np.isfinite(p)):
            raise InvalidArgument("pose position must be finite")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise InvalidArgument(f"orientation norm {n!r} deviates from 1 by more than 1e-9")
        q /= n
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @staticmethod
    def identity() -> "Pose6":
        return Pose6(np.zeros(3), quat_identity())

    def transform_point(self, p_local) -> np.ndarray:
        return self.position + quat_rotate(self.orientation, p_local)

    def rotate_vector(self, v_local) -> np.ndarray:
        return quat_rotate(self.orientation, v_local)

    def inverse_point(self, p_world) -> np.ndarray:
        return quat_rotate(quat_conj(self.orientation), np.asarray(p_world) - self.position)

    def inverse_vector(self, v_world) -> np.ndarray:
        return quat_rotate(quat_conj(self.orientation), v_world)

    def compose(self, other: "Pose6") -> "Pose6":
        """self applied after other: returns self * other."""
        return Pose6(
            self.transform_point(other.position),
            quat_mul(self.orientation, other.orientation),
        )


# ---------------------------------------------------------------------------
# shapes

@dataclass(frozen=True)
class ConvexPart:
    """Convex piece of an object: explicit vertex set plus a pose in the object frame.

    The vertex set must be its own convex hull (no interior or redundant
    vertices) with at least 4 non-coplanar points.
    """

    vertices: np.ndarray
    local_pose: Pose6 = field(default_factory=Pose6.identity)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidArgument("vertices must be an (n, 3) array")
        if v.shape[0] < 4:
            raise InvalidArgument("a convex part needs at least 4 vertices")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("vertices must be finite")
        try:
            hull = ConvexHull(v)
        except Exception as exc:  # qhull rejects coplanar input
            raise InvalidArgument(f"degenerate vertex set: {exc}") from exc
        if len(hull.vertices) != v.shape[0]:
            raise InvalidArgument(
                "vertex set must equal its own convex hull vertex set "
                f"({v.shape[0]} given, {len(hull.vertices)} on the hull)"
            )
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def interior_point_local(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def support_local(self, direction) -> np.ndarray:
        return self.vertices[int(np.argmax(self.vertices @ np.asarray(direction)))]


def support_point(part: ConvexPart, direction) -> np.ndarray:
    """Vertex of ``part`` maximizing the dot product with ``direction``.

    Ties resolve to the lowest vertex index.
    """
    d = np.asarray(direction, dtype=float)
    if not np.all(np.isfinite(d)) or np.linalg.norm(d) == 0.0:
        raise InvalidArgument("support direction must be nonzero and finite")
    return part.support_local(d)


@dataclass(frozen=True)
class Sphere:
    """Analytic sphere centered on its local origin."""

    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgument("sphere radius must be positive")

    def interior_point_local(self) -> np.ndarray:
        return np.zeros(3)

    def support_local(self, direction) -> np.ndarray:
        d = np.asarray(direction, dtype=float)
        return (self.radius / np.linalg.norm(d)) * d


@dataclass(frozen=True)
class FingerShape:
    """Sensing finger: hemispherical tip plus cylindrical barrel.

    The local origin is the reference point at the apex of the hemisphere;
    the body extends along local +z, so an identity orientation points the
    finger straight down. The flat barrel end (local z = radius + length)
    is the mounting base and carries no sensing.
    """

    radius: float = 0.0125
    cylinder_length: float = 0.05

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgument("finger radius must be positive")
        if self.cylinder_length < 0:
            raise InvalidArgument("cylinder length must be non-negative")

    @property
    def total_length(self) -> float:
        return self.radius + self.cylinder_length

    def interior_point_local(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.radius])

    def support_local(self, direction) -> np.ndarray:
        d = np.asarray(direction, dtype=float)
        r = self.radius
        if d[2] <= 0.0:
            # hemisphere region (includes the equatorial rim for horizontal d)
            return np.array([0.0, 0.0, r]) + (r / np.linalg.norm(d)) * d
        h = math.hypot(d[0], d[1])
        if h == 0.0:
            return np.array([0.0, 0.0, r + self.cylinder_length])
        s = r / h
        return np.array([d[0] * s, d[1] * s, r + self.cylinder_length])

    def pointing_axis_world(self, pose: Pose6) -> np.ndarray:
        """Direction the tip points, away from the mounting base."""
        return pose.rotate_vector(np.array([0.0, 0.0, -1.0]))

    def is_sensing_point_local(self, p_local, tol: float = 1e-6) -> bool:
        """True unless the point lies on the flat mounting base."""
        z = p_local[2]
        radial = math.hypot(p_local[0], p_local[1])
        on_base = z >= self.total_length - tol and radial < self.radius - tol
        return not on_base

    def sample_sensing_surface(self, rng) -> tuple[np.ndarray, np.ndarray]:
        """Uniform point on the sensing surface with its outward normal (local frame)."""
        r = self.radius
        area_hemi = 2.0 * math.pi * r * r
        area_barrel = 2.0 * math.pi * r * self.cylinder_length
        u = rng.uniform(0.0, area_hemi + area_barrel)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        if u < area_hemi:
            # lower hemisphere of the tip sphere, uniform in cos(theta)
            cz = rng.uniform(-1.0, 0.0)
            sz = math.sqrt(1.0 - cz * cz)
            n = np.array([sz * math.cos(phi), sz * math.sin(phi), cz])
            return np.array([0.0, 0.0, r]) + r * n, n
        z = rng.uniform(r, r + self.cylinder_length)
        n = np.array([math.cos(phi), math.sin(phi), 0.0])
        return np.array([r * n[0], r * n[1], z]), n


@dataclass(frozen=True)
class Contact:
    """One geometric contact: a point on an object surface and its outward normal."""

    position: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        ln = np.linalg.norm(n)
        if abs(ln - 1.0) > 1e-6:
            raise InvalidArgument(f"contact normal must be unit length, got {ln!r}")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "normal", n)


# ---------------------------------------------------------------------------
# posed shapes in the workspace frame

class _WorldShape:
    """Shape with its pose baked in, exposing world-frame support queries."""

    __slots__ = ("shape", "pose", "_R", "_vertices_world", "center", "bound_radius")

    def __init__(self, shape, pose: Pose6):
        self.shape = shape
        self.pose = pose
        self._R = quat_to_matrix(pose.orientation)
        if isinstance(shape, ConvexPart):
            v = shape.vertices @ self._R.T + pose.position
            self._vertices_world = v
            self.center = v.mean(axis=0)
            self.bound_radius = float(np.max(np.linalg.norm(v - self.center, axis=1)))
        else:
            self._vertices_world = None
            self.center = pose.transform_point(shape.interior_point_local())
            if isinstance(shape, Sphere):
                self.bound_radius = shape.radius
            elif isinstance(shape, FingerShape):
                half = 0.5 * shape.total_length
                self.center = pose.transform_point(np.array([0.0, 0.0, half]))
                self.bound_radius = math.hypot(shape.radius, half)
            else:
                raise InvalidArgument(f"unsupported shape type {type(shape).__name__}")

    def support(self, direction: np.ndarray) -> np.ndarray:
        if self._vertices_world is not None:
            return self._vertices_world[int(np.argmax(self._vertices_world @ direction))]
        d_local = self._R.T @ direction
        return self.pose.position + self._R @ self.shape.support_local(d_local)

    def interior(self) -> np.ndarray:
        return self.center if self._vertices_world is not None else \
            self.pose.transform_point(self.shape.interior_point_local())


def place(shape, pose: Pose6) -> _WorldShape:
    return _WorldShape(shape, pose)


# ---------------------------------------------------------------------------
# GJK distance with witness points

_GJK_MAX_ITERS = 128
_GJK_REL_TOL = 1e-12


def _closest_on_simplex(W: list[np.ndarray]):
    """Closest point to the origin on the convex hull of up to 4 points.

    Returns (point, lambdas, keep_indices) where the kept vertices support
    the closest feature and lambdas are its barycentric coordinates. All
    candidate features are scored through the Gram matrix, so swapping the
    two shapes (which negates every vertex) changes nothing bitwise.
    """
    m = len(W)
    if m == 1:
        return W[0], [1.0], [0]
    ws = [(float(w[0]), float(w[1]), float(w[2])) for w in W]
    g = [[0.0] * m for _ in range(m)]
    for i in range(m):
        xi, yi, zi = ws[i]
        for j in range(i, m):
            xj, yj, zj = ws[j]
            g[i][j] = g[j][i] = xi * xj + yi * yj + zi * zj

    best_d2 = g[0][0]
    best_idx = [0]
    best_lam = [1.0]
    for i in range(1, m):
        if g[i][i] < best_d2 - 1e-18:
            best_d2, best_idx, best_lam = g[i][i], [i], [1.0]

    for i in range(m):
        for j in range(i + 1, m):
            denom = g[i][i] - 2.0 * g[i][j] + g[j][j]
            if denom <= 0.0:
                continue
            t = (g[i][i] - g[i][j]) / denom
            if 0.0 < t < 1.0:
                s = 1.0 - t
                d2 = s * s * g[i][i] + 2.0 * s * t * g[i][j] + t * t * g[j][j]
                if d2 < best_d2 - 1e-18:
                    best_d2, best_idx, best_lam = d2, [i, j], [s, t]

    if m >= 3:
        tris = ((0, 1, 2),) if m == 3 else ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))
        for i, j, k in tris:
            d00 = g[j][j] - 2.0 * g[i][j] + g[i][i]
            d01 = g[j][k] - g[i][j] - g[i][k] + g[i][i]
            d11 = g[k][k] - 2.0 * g[i][k] + g[i][i]
            det = d00 * d11 - d01 * d01
            if abs(det) <= 1e-18 * max(1.0, abs(d00 * d11)):
                continue
            d20 = g[i][i] - g[i][j]
            d21 = g[i][i] - g[i][k]
            v = (d11 * d20 - d01 * d21) / det
            w = (d00 * d21 - d01 * d20) / det
            if v > 0.0 and w > 0.0 and v + w < 1.0:
                d2 = (g[i][i] - 2.0 * v * d20 - 2.0 * w * d21
                      + v * v * d00 + 2.0 * v * w * d01 + w * w * d11)
                if d2 < best_d2 - 1e-18:
                    best_d2, best_idx, best_lam = d2, [i, j, k], [1.0 - v - w, v, w]

    if m == 4:
        # Cramer solve for the origin's barycentric coordinates in the tetra
        a0, a1, a2 = ws[0]
        e1 = (ws[1][0] - a0, ws[1][1] - a1, ws[1][2] - a2)
        e2 = (ws[2][0] - a0, ws[2][1] - a1, ws[2][2] - a2)
        e3 = (ws[3][0] - a0, ws[3][1] - a1, ws[3][2] - a2)
        r = (-a0, -a1, -a2)

        def det3(c1, c2, c3):
            return (c1[0] * (c2[1] * c3[2] - c2[2] * c3[1])
                    - c2[0] * (c1[1] * c3[2] - c1[2] * c3[1])
                    + c3[0] * (c1[1] * c2[2] - c1[2] * c2[1]))

        det = det3(e1, e2, e3)
        if abs(det) > 1e-18:
            x1 = det3(r, e2, e3) / det
            x2 = det3(e1, r, e3) / det
            x3 = det3(e1, e2, r) / det
            if x1 > 0.0 and x2 > 0.0 and x3 > 0.0 and x1 + x2 + x3 < 1.0:
                if 0.0 < best_d2 - 1e-18:
                    return (np.zeros(3), [1.0 - x1 - x2 - x3, x1, x2, x3], [0, 1, 2, 3])

    if len(best_idx) == 1:
        return W[best_idx[0]], best_lam, best_idx
    px = py = pz = 0.0
    for l, i in zip(best_lam, best_idx):
        px += l * ws[i][0]
        py += l * ws[i][1]
        pz += l * ws[i][2]
    return np.array([px, py, pz]), best_lam, best_idx


def _gjk(sa: _WorldShape, sb: _WorldShape, init_dir: np.ndarray | None = None):
    """Returns (distance, pA, pB, intersecting, simplex) for two world shapes.

    ``simplex`` holds (w, a, b) triples of the final configuration and seeds
    EPA when the shapes intersect. ``init_dir`` warm-starts the first
    support query (the result does not depend on it, only the iteration
    count does).
    """
    if init_dir is None:
        d0 = sb.interior() - sa.interior()
        if float(d0 @ d0) < 1e-20:
            d0 = np.array([1.0, 0.0, 0.0])
    else:
        d0 = init_dir
    a0 = sa.support(-d0)
    b0 = sb.support(d0)
    simplex = [(a0 - b0, a0, b0)]
    for _ in range(_GJK_MAX_ITERS):
        W = [s[0] for s in simplex]
        v, lam, idx = _closest_on_simplex(W)
        simplex = [simplex[i] for i in idx]
        vv = float(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
        if len(simplex) == 4 or vv < 1e-24:
            return 0.0, None, None, True, simplex
        d = -v
        a = sa.support(d)
        b = sb.support(-d)
        w = a - b
        # no further progress toward the origin possible
        vw = float(v[0] * w[0] + v[1] * w[1] + v[2] * w[2])
        if vv - vw <= _GJK_REL_TOL * max(1.0, vv):
            break
        dup = False
        for s in simplex:
            sw = s[0]
            if (abs(sw[0] - w[0]) < 1e-12 and abs(sw[1] - w[1]) < 1e-12
                    and abs(sw[2] - w[2]) < 1e-12):
                dup = True
                break
        if dup:
            break
        simplex.append((w, a, b))
    W = [s[0] for s in simplex]
    v, lam, idx = _closest_on_simplex(W)
    simplex = [simplex[i] for i in idx]
    pA = sum(l * s[1] for l, s in zip(lam, simplex))
    pB = sum(l * s[2] for l, s in zip(lam, simplex))
    return float(np.linalg.norm(v)), pA, pB, False, simplex


# ---------------------------------------------------------------------------
# EPA penetration depth (diagnostics and exact-touch normals)

def _orthonormal_to(d: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, ref)
    return u / np.linalg.norm(u)


def _epa(sa: _WorldShape, sb: _WorldShape, simplex):
    """Penetration depth and witness points for intersecting shapes.

    The termination simplex of the distance iteration contains the origin
    on one of its features; it is completed to a small polytope enclosing
    the origin, then expanded face by face.
    """
    mid_fallback = 0.5 * (sa.interior() + sb.interior())

    def mink(d):
        a = sa.support(d)
        b = sb.support(-d)
        return (a - b, a, b)

    pts = list(simplex)
    if len(pts) == 1:
        # shapes touch at a single point: depth is zero
        return 0.0, pts[0][1], pts[0][2]
    if len(pts) == 2:
        # origin on a segment: ring of three supports perpendicular to it
        axis = pts[1][0] - pts[0][0]
        ln = float(np.linalg.norm(axis))
        if ln < 1e-15:
            return 0.0, pts[0][1], pts[0][2]
        axis = axis / ln
        u = _orthonormal_to(axis)
        v = np.cross(axis, u)
        ring = [mink(u),
                mink(-0.5 * u + 0.8660254037844386 * v),
                mink(-0.5 * u - 0.8660254037844386 * v)]
        pts = [pts[0], pts[1]] + ring
        faces_idx = [(0, 2, 3), (0, 3, 4), (0, 4, 2), (1, 2, 3), (1, 3, 4), (1, 4, 2)]
    elif len(pts) == 3:
        # origin on a triangle: apex supports on both sides
        n = np.cross(pts[1][0] - pts[0][0], pts[2][0] - pts[0][0])
        ln = float(np.linalg.norm(n))
        if ln < 1e-15:
            return 0.0, pts[0][1], pts[0][2]
        n = n / ln
        pts = pts + [mink(n), mink(-n)]
        faces_idx = [(0, 1, 3), (1, 2, 3), (2, 0, 3), (0, 1, 4), (1, 2, 4), (2, 0, 4)]
    else:
        faces_idx = list(itertools.combinations(range(4), 3))

    verts = [p[0] for p in pts]
    wits = [(p[1], p[2]) for p in pts]

    def make_face(f):
        a, b, c = verts[f[0]], verts[f[1]], verts[f[2]]
        n = np.cross(b - a, c - a)
        ln = float(np.linalg.norm(n))
        if ln < 1e-18:
            return None
        n = n / ln
        dist = float(n @ a)
        if dist < 0.0:
            n, dist = -n, -dist
        return (f, n, dist)

    faces = [fd for fd in (make_face(f) for f in faces_idx) if fd is not None]
    if not faces:
        return 0.0, mid_fallback, mid_fallback.copy()

    def finish(face):
        f, n, dist = face
        A, B, C = verts[f[0]], verts[f[1]], verts[f[2]]
        v0, v1, v2 = B - A, C - A, dist * n - A
        d00, d01, d11 = float(v0 @ v0), float(v0 @ v1), float(v1 @ v1)
        d20, d21 = float(v2 @ v0), float(v2 @ v1)
        det = d00 * d11 - d01 * d01
        if abs(det) < 1e-24:
            lam = (1.0, 0.0, 0.0)
        else:
            bv = (d11 * d20 - d01 * d21) / det
            bw = (d00 * d21 - d01 * d20) / det
            lam = (1.0 - bv - bw, bv, bw)
        p_a = sum(l * wits[i][0] for l, i in zip(lam, f))
        p_b = sum(l * wits[i][1] for l, i in zip(lam, f))
        return dist, p_a, p_b

    for _ in range(64):
        face = min(faces, key=lambda fd: fd[2])
        _, n, dist = face
        a = sa.support(n)
        b = sb.support(-n)
        w = a - b
        if float(n @ w) - dist < 1e-9:
            return finish(face)
        if any(float((w - vv) @ (w - vv)) < 1e-20 for vv in verts):
            return finish(face)
        verts.append(w)
        wits.append((a, b))
        ni = len(verts) - 1
        visible = [fd for fd in faces if float(fd[1] @ (w - verts[fd[0][0]])) > 1e-12]
        if not visible:
            return finish(face)
        edges: dict[tuple[int, int], int] = {}
        for f, _, _ in visible:
            for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (min(e), max(e))
                edges[key] = edges.get(key, 0) + 1
        keep = [fd for fd in faces if fd not in visible]
        for (i, j), cnt in edges.items():
            if cnt == 1:
                nf = make_face((i, j, ni))
                if nf is not None:
                    keep.append(nf)
        if not keep:
            return finish(face)
        faces = keep
    return finish(min(faces, key=lambda fd: fd[2]))


def closest_points(shape_a, pose_a: Pose6, shape_b, pose_b: Pose6):
    """Minimum distance between two posed convex shapes with witness points.

    Returns (distance, p_a, p_b). Distance is 0 exactly when the shapes
    intersect, in which case the witnesses coincide at a shared point.
    """
    sa = place(shape_a, pose_a)
    sb = place(shape_b, pose_b)
    dist, pa, pb, hit, simplex = _gjk(sa, sb)
    if hit:
        depth, wa, wb = _epa(sa, sb, simplex)
        mid = 0.5 * (wa + wb)
        return 0.0, mid, mid.copy()
    return dist, pa, pb


def signed_distance(shape_a, pose_a: Pose6, shape_b, pose_b: Pose6) -> float:
    """Distance if separated, minus the penetration depth if intersecting."""
    sa = place(shape_a, pose_a)
    sb = place(shape_b, pose_b)
    dist, _, _, hit, simplex = _gjk(sa, sb)
    if not hit:
        return dist
    depth, _, _ = _epa(sa, sb, simplex)
    return -depth


# ---------------------------------------------------------------------------
# discrete 6DOF actions

def action_axis_sign(action: int) -> tuple[int, float]:
    if not isinstance(action, (int, np.integer)) or not (0 <= int(action) < N_ACTIONS):
        raise InvalidArgument(f"action code must be in 0..11, got {action!r}")
    return int(action) // 2, 1.0 if int(action) % 2 == 0 else -1.0


def action_is_translation(action: int) -> bool:
    return action_axis_sign(action)[0] < 3


def action_displacement(action: int) -> np.ndarray:
    """Reference-point displacement of the full step (zero for rotations)."""
    axis, sign = action_axis_sign(action)
    d = np.zeros(3)
    if axis < 3:
        d[axis] = sign * TRANSLATION_STEP
    return d


def opposite_action(action: int) -> int:
    return action ^ 1


def apply_action(pose: Pose6, action: int, fraction: float = 1.0) -> Pose6:
    """Pose after one discrete step: 1 cm translation or 15 degree rotation.

    Rotations are about workspace axes and pivot on the pose's reference
    point, so they leave the position unchanged. ``fraction`` scales the
    step for sweep interpolation.
    """
    axis, sign = action_axis_sign(action)
    if axis < 3:
        p = pose.position.copy()
        p[axis] += sign * TRANSLATION_STEP * fraction
        return Pose6(p, pose.orientation)
    axis_vec = np.zeros(3)
    axis_vec[axis - 3] = 1.0
    dq = quat_from_axis_angle(axis_vec, sign * math.radians(ROTATION_STEP_DEG) * fraction)
    q = quat_mul(dq, pose.orientation)
    q = q / np.linalg.norm(q)
    return Pose6(pose.position, q)


# ---------------------------------------------------------------------------
# placed objects and swept motion

class PlacedParts:
    """Convex parts of one object with a world pose baked in, plus bounds."""

    __slots__ = ("world_shapes", "interiors", "zmax", "zmin")

    def __init__(self, parts, object_pose: Pose6):
        parts = getattr(parts, "parts", parts)
        self.world_shapes = []
        self.interiors = []
        zmax, zmin = -math.inf, math.inf
        for part in parts:
            world_pose = object_pose.compose(part.local_pose)
            ws = _WorldShape(part, world_pose)
            self.world_shapes.append(ws)
            self.interiors.append(ws.interior())
            zmax = max(zmax, float(np.max(ws._vertices_world[:, 2])))
            zmin = min(zmin, float(np.min(ws._vertices_world[:, 2])))
        self.zmax = zmax
        self.zmin = zmin

    def __len__(self):
        return len(self.world_shapes)


def _finger_world(finger: FingerShape, pose: Pose6) -> _WorldShape:
    return _WorldShape(finger, pose)


def min_distance_to_parts(finger: FingerShape, pose: Pose6, placed: PlacedParts,
                          indices=None, warm: dict | None = None):
    """(distance, p_finger, p_part, part_index, intersecting) over all parts.

    ``warm`` optionally maps part index to the previous closest-gap
    direction, cutting iterations for slowly moving queries.
    """
    fw = _finger_world(finger, pose)
    best = (math.inf, None, None, -1, False)
    shapes = placed.world_shapes
    for i in (range(len(shapes)) if indices is None else indices):
        ws = shapes[i]
        gap = np.linalg.norm(ws.center - fw.center) - ws.bound_radius - fw.bound_radius
        if gap > best[0]:
            continue
        dist, pa, pb, hit, _ = _gjk(fw, ws, None if warm is None else warm.get(i))
        if hit:
            return 0.0, None, None, i, True
        if warm is not None and dist > 0.0:
            warm[i] = pb - pa
        if dist < best[0]:
            best = (dist, pa, pb, i, False)
    return best


def min_signed_distance_to_parts(finger: FingerShape, pose: Pose6, placed: PlacedParts) -> float:
    fw = _finger_world(finger, pose)
    best = math.inf
    for ws in placed.world_shapes:
        dist, _, _, hit, simplex = _gjk(fw, ws)
        if hit:
            depth, _, _ = _epa(fw, ws, simplex)
            best = min(best, -depth)
        else:
            best = min(best, dist)
    return best


def sweep_step(pose: Pose6, action: int, parts, object_pose: Pose6 | None = None,
               finger: FingerShape | None = None, substeps: int = SWEEP_SUBSTEPS):
    """Move one action step, halting at the first substep that touches the object.

    ``parts`` may be a PlacedParts cache, an object with a ``parts``
    attribute, or a plain list of ConvexPart (the latter two require
    ``object_pose``). Returns (final_pose, contacts) where contacts holds at
    most one Contact, located on the object surface with its outward normal.
    """
    if finger is None:
        finger = FingerShape()
    if isinstance(parts, PlacedParts):
        placed = parts
    else:
        if object_pose is None:
            raise InvalidArgument("object_pose is required unless parts are pre-placed")
        placed = PlacedParts(parts, object_pose)

    # broad phase over the whole sweep: parts outside the swept bound are inert
    end_pose = apply_action(pose, action)
    fw0 = _finger_world(finger, pose)
    fw1 = _finger_world(finger, end_pose)
    mid = 0.5 * (fw0.center + fw1.center)
    sweep_r = 0.5 * np.linalg.norm(fw1.center - fw0.center) + fw0.bound_radius \
        + TRANSLATION_STEP  # rotation slack: points off-center travel further
    active = [i for i, ws in enumerate(placed.world_shapes)
              if np.linalg.norm(ws.center - mid) - ws.bound_radius <= sweep_r]
    if not active:
        return end_pose, []

    warm: dict = {}
    _, _, _, _, hit0 = min_distance_to_parts(finger, pose, placed, active, warm)
    if hit0:
        raise ContractViolation("sweep starts from a penetrating pose")

    # largest single-substep displacement of any finger point, used to skip
    # substeps that provably cannot reach contact yet
    if action_is_translation(action):
        travel = TRANSLATION_STEP / substeps
    else:
        r_max = math.hypot(finger.total_length, finger.radius)
        travel = 2.0 * r_max * math.sin(math.radians(ROTATION_STEP_DEG) / (2 * substeps))

    k = 1
    while k <= substeps:
        cand = apply_action(pose, action, fraction=k / substeps)
        dist, _, _, _, hit = min_distance_to_parts(finger, cand, placed, active, warm)
        if hit or dist < CONTACT_EPS:
            prev_pose = pose if k == 1 else apply_action(pose, action,
                                                         fraction=(k - 1) / substeps)
            _, pa, pb, part_idx, hit_p = min_distance_to_parts(finger, prev_pose,
                                                               placed, active)
            if hit_p or pa is None:
                raise ContractViolation("sweep halted on an already-penetrating pose")
            n = pa - pb
            ln = np.linalg.norm(n)
            if ln < 1e-12:
                # exact touch: fall back to the direction away from the part interior
                n = pb - placed.interiors[part_idx]
                ln = np.linalg.norm(n)
            return prev_pose, [Contact(pb, n / ln)]
        k += 1 + max(0, int((dist - CONTACT_EPS) / travel))
    return end_pose, []
