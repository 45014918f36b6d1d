"""Object catalog, surface sampling, and randomized placement.

Ships ten procedural objects mixing convex and concave unions; externally
decomposed objects load from a directory of per-part triangle meshes plus
a key-value manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from .errors import InvalidArgument, PlacementInfeasible
from .geometry import ConvexPart, Pose6, quat_from_axis_angle

MAX_OBJECT_EXTENT = 0.40


@dataclass
class ObjectModel:
    """Named rigid object as a union of convex parts."""

    id: int
    name: str
    parts: list[ConvexPart]
    concave: bool = False
    _sample_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.parts:
            raise InvalidArgument("object needs at least one convex part")
        lo, hi = self.bounds()
        if np.any(hi - lo > MAX_OBJECT_EXTENT):
            raise InvalidArgument(
                f"object {self.name!r} exceeds the {MAX_OBJECT_EXTENT} m bounding cube"
            )

    def part_vertices_object_frame(self) -> list[np.ndarray]:
        return [p.local_pose.position + p.vertices @ _rot(p.local_pose).T for p in self.parts]

    def bounds(self):
        vs = np.vstack(self.part_vertices_object_frame())
        return vs.min(axis=0), vs.max(axis=0)

    @property
    def height(self) -> float:
        lo, hi = self.bounds()
        return float(hi[2] - lo[2])

    def surface_samples(self, n: int = 1000, seed: int = 0) -> np.ndarray:
        key = (n, seed)
        if key not in self._sample_cache:
            self._sample_cache[key] = sample_surface(self, n, seed)
        return self._sample_cache[key]


def _rot(pose: Pose6) -> np.ndarray:
    from .geometry import quat_to_matrix
    return quat_to_matrix(pose.orientation)


@dataclass(frozen=True)
class PlacementSpec:
    """Placement randomization: where and how objects land in the workspace."""

    half_extent: float = 0.15
    yaw_range_deg: tuple[float, float] = (0.0, 360.0)
    height_variance: float = 0.02
    require_center: bool = True
    max_rejections: int = 10_000

    def __post_init__(self):
        if self.half_extent <= 0:
            raise InvalidArgument("workspace half extent must be positive")


# ---------------------------------------------------------------------------
# procedural part builders

def _box(size, center=(0.0, 0.0, 0.0)) -> ConvexPart:
    hx, hy, hz = np.asarray(size, dtype=float) / 2.0
    c = np.asarray(center, dtype=float)
    corners = np.array([[sx, sy, sz] for sx in (-hx, hx) for sy in (-hy, hy)
                        for sz in (-hz, hz)])
    return ConvexPart(corners + c)


def _ngon_prism(radius, height, n=16, center=(0.0, 0.0, 0.0)) -> ConvexPart:
    ang = np.arange(n) * (2.0 * math.pi / n)
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    c = np.asarray(center, dtype=float)
    lo = np.column_stack([ring, np.full(n, -height / 2.0)])
    hi = np.column_stack([ring, np.full(n, height / 2.0)])
    return ConvexPart(np.vstack([lo, hi]) + c)


def _frustum(base, top, height, center_z=0.0) -> ConvexPart:
    bx, by = np.asarray(base) / 2.0
    tx, ty = np.asarray(top) / 2.0
    z0, z1 = center_z, center_z + height
    verts = [[sx * bx, sy * by, z0] for sx in (-1, 1) for sy in (-1, 1)]
    verts += [[sx * tx, sy * ty, z1] for sx in (-1, 1) for sy in (-1, 1)]
    return ConvexPart(np.asarray(verts, dtype=float))


def _wedge(length, width, height, center=(0.0, 0.0, 0.0)) -> ConvexPart:
    # right-triangular prism: vertical back face, sloped front
    l2, w2 = length / 2.0, width / 2.0
    c = np.asarray(center, dtype=float)
    verts = np.array([
        [-l2, -w2, 0.0], [-l2, w2, 0.0],
        [l2, -w2, 0.0], [l2, w2, 0.0],
        [-l2, -w2, height], [-l2, w2, height],
    ])
    return ConvexPart(verts + c)


def builtin_catalog() -> list[ObjectModel]:
    """Ten procedural objects spanning convex and concave unions, 6-25 cm tall."""
    objs = []

    objs.append(ObjectModel(0, "block", [_box((0.07, 0.07, 0.06), (0, 0, 0.03))]))
    objs.append(ObjectModel(1, "column", [_box((0.08, 0.08, 0.20), (0, 0, 0.10))]))
    objs.append(ObjectModel(2, "drum", [_ngon_prism(0.040, 0.14, center=(0, 0, 0.07))]))
    objs.append(ObjectModel(3, "taper", [_frustum((0.10, 0.10), (0.04, 0.04), 0.11)]))

    # jug: cylindrical body with a protruding loop handle
    body = _ngon_prism(0.050, 0.18, n=12, center=(0, 0, 0.09))
    arm_lo = _box((0.040, 0.024, 0.020), (0.068, 0, 0.060))
    arm_hi = _box((0.040, 0.024, 0.020), (0.068, 0, 0.130))
    grip = _box((0.020, 0.024, 0.090), (0.080, 0, 0.095))
    objs.append(ObjectModel(4, "jug", [body, arm_lo, arm_hi, grip], concave=True))

    # bracket: L-profile of two boxes
    base = _box((0.12, 0.06, 0.04), (0, 0, 0.02))
    upright = _box((0.04, 0.06, 0.06), (-0.04, 0, 0.07))
    objs.append(ObjectModel(5, "bracket", [base, upright], concave=True))

    # tray: recessed open box, four walls on a floor slab
    floor = _box((0.12, 0.12, 0.02), (0, 0, 0.01))
    wall_t = 0.015
    walls = [
        _box((0.12, wall_t, 0.10), (0, 0.06 - wall_t / 2, 0.07)),
        _box((0.12, wall_t, 0.10), (0, -0.06 + wall_t / 2, 0.07)),
        _box((wall_t, 0.12 - 2 * wall_t, 0.10), (0.06 - wall_t / 2, 0, 0.07)),
        _box((wall_t, 0.12 - 2 * wall_t, 0.10), (-0.06 + wall_t / 2, 0, 0.07)),
    ]
    objs.append(ObjectModel(6, "tray", [floor] + walls, concave=True))

    objs.append(ObjectModel(7, "ramp", [_wedge(0.12, 0.08, 0.09)]))

    # tower: wide base box with a narrower box stacked on top
    base = _box((0.12, 0.12, 0.09), (0, 0, 0.045))
    top = _box((0.06, 0.06, 0.08), (0.02, 0, 0.13))
    objs.append(ObjectModel(8, "tower", [base, top], concave=True))

    # cross: plus-shaped extrusion
    bar_a = _box((0.14, 0.05, 0.10), (0, 0, 0.05))
    bar_b = _box((0.05, 0.14, 0.10), (0, 0, 0.05))
    objs.append(ObjectModel(9, "cross", [bar_a, bar_b], concave=True))

    return objs


# ---------------------------------------------------------------------------
# surface sampling

def _triangulated_surface(obj: ObjectModel):
    """All hull triangles of all parts in the object frame, with areas."""
    tris = []
    for verts in obj.part_vertices_object_frame():
        hull = ConvexHull(verts)
        tris.append(verts[hull.simplices])
    tris = np.vstack(tris)
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    return tris, areas


def sample_surface(obj: ObjectModel, n: int, seed: int = 0) -> np.ndarray:
    """n approximately evenly spaced points on the part surfaces.

    Area-weighted candidates (4n of them) are thinned greedily by repeatedly
    keeping the candidate farthest from everything kept so far.
    """
    if n < 1:
        raise InvalidArgument("need at least one sample")
    rng = np.random.default_rng(seed)
    tris, areas = _triangulated_surface(obj)
    m = 4 * n
    idx = rng.choice(len(tris), size=m, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=(m, 1)))
    r2 = rng.uniform(size=(m, 1))
    pts = (tris[idx, 0] * (1 - r1)
           + tris[idx, 1] * r1 * (1 - r2)
           + tris[idx, 2] * r1 * r2)
    keep = np.empty(n, dtype=int)
    keep[0] = 0
    d2 = ((pts - pts[0]) ** 2).sum(axis=1)
    for i in range(1, n):
        keep[i] = int(np.argmax(d2))
        d2 = np.minimum(d2, ((pts - pts[keep[i]]) ** 2).sum(axis=1))
    return pts[keep]


# ---------------------------------------------------------------------------
# placement

def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _hull_2d(points: np.ndarray) -> np.ndarray:
    """Convex hull of 2D points (monotone chain), counter-clockwise."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]

    def build(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross2(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = build(pts)
    upper = build(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _origin_in_hull_2d(hull: np.ndarray, tol: float = 1e-12) -> bool:
    if len(hull) < 3:
        return False
    nxt = np.roll(hull, -1, axis=0)
    cross = (nxt[:, 0] - hull[:, 0]) * (-hull[:, 1]) - (nxt[:, 1] - hull[:, 1]) * (-hull[:, 0])
    return bool(np.all(cross >= -tol))


def center_occupied(obj: ObjectModel, pose: Pose6) -> bool:
    """Does the vertical line through the workspace center pierce any part?"""
    R = _rot(pose)
    for verts in obj.part_vertices_object_frame():
        world = verts @ R.T + pose.position
        if _origin_in_hull_2d(_hull_2d(world[:, :2])):
            return True
    return False


def randomize_pose(obj: ObjectModel, spec: PlacementSpec, rng) -> Pose6:
    """Uniform yaw and in-plane offset, rejected until the center is occupied.

    Roll and pitch stay zero (objects rest upright); the height offset is
    uniform within the configured variance.
    """
    lo, hi = np.radians(spec.yaw_range_deg[0]), np.radians(spec.yaw_range_deg[1])
    for _ in range(spec.max_rejections):
        yaw = rng.uniform(lo, hi)
        xy = rng.uniform(-spec.half_extent, spec.half_extent, size=2)
        dz = rng.uniform(-spec.height_variance, spec.height_variance)
        pose = Pose6(np.array([xy[0], xy[1], dz]),
                     quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw))
        if not spec.require_center or center_occupied(obj, pose):
            return pose
    raise PlacementInfeasible(
        f"no valid placement for {obj.name!r} in {spec.max_rejections} draws"
    )


# ---------------------------------------------------------------------------
# loading externally decomposed objects

def load_part_mesh(path) -> ConvexPart:
    """Read one convex part from a plain-text triangle mesh (v/f lines).

    Vertices are deduplicated and reduced to their hull vertex set, so
    meshes carrying face-interior or repeated points load cleanly.
    """
    verts = []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok or tok[0] in ("#", "f", "vn", "vt"):
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise InvalidArgument(f"malformed vertex line in {path}: {line!r}")
                verts.append([float(tok[1]), float(tok[2]), float(tok[3])])
    if len(verts) < 4:
        raise InvalidArgument(f"mesh {path} has fewer than 4 vertices")
    pts = np.unique(np.asarray(verts, dtype=float), axis=0)
    hull = ConvexHull(pts)
    return ConvexPart(pts[hull.vertices])


def load_object_dir(path) -> ObjectModel:
    """Load an object directory: a ``manifest`` plus one mesh file per part.

    Manifest lines are ``key: value``; recognized keys are name, id, scale,
    concave, and repeated part entries naming mesh files in the directory.
    """
    path = Path(path)
    manifest = path / "manifest"
    if not manifest.exists():
        raise InvalidArgument(f"missing manifest in {path}")
    name, obj_id, scale, concave = path.name, 0, 1.0, False
    part_files = []
    for ln, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise InvalidArgument(f"{manifest}:{ln}: expected 'key: value'")
        key, _, val = line.partition(":")
        key, val = key.strip(), val.strip()
        if key == "name":
            name = val
        elif key == "id":
            obj_id = int(val)
        elif key == "scale":
            scale = float(val)
        elif key == "concave":
            concave = val.lower() in ("1", "true", "yes")
        elif key == "part":
            part_files.append(val)
        else:
            raise InvalidArgument(f"{manifest}:{ln}: unknown key {key!r}")
    if not part_files:
        raise InvalidArgument(f"{manifest}: no parts listed")
    parts = []
    for fname in part_files:
        part = load_part_mesh(path / fname)
        parts.append(ConvexPart(part.vertices * scale) if scale != 1.0 else part)
    return ObjectModel(obj_id, name, parts, concave=concave)


def load_catalog_dir(path) -> list[ObjectModel]:
    """Load every object subdirectory under ``path``, sorted by id."""
    objs = [load_object_dir(p) for p in sorted(Path(path).iterdir()) if p.is_dir()]
    if not objs:
        raise InvalidArgument(f"no object directories under {path}")
    ids = [o.id for o in objs]
    if len(set(ids)) != len(ids):
        raise InvalidArgument("object ids must be unique within a catalog")
    return sorted(objs, key=lambda o: o.id)
