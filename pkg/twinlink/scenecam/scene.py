"""
Scene of analytic primitives (plane, axis-aligned box, capped
vertical cylinder, sphere), each with an object id, albedo and a
flat segmentation color.

Intersections are vectorized over rays: origins and directions are
(n, 3) arrays, results are per-ray t (inf on miss), object id (-1 on
miss) and unit normals facing the incoming ray.
"""

from dataclasses import dataclass, field
from enum import Enum
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

# PyPI
import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

# self-intersection epsilon (m)
T_EPS = 1e-6

BACKGROUND = (0, 0, 0)

# rays per vectorized batch
CHUNK = 1 << 16


class Shape(Enum):
    PLANE = 'plane'
    BOX = 'box'
    CYLINDER = 'cylinder'
    SPHERE = 'sphere'


def _first_hit(candidates: Sequence[Array]) -> Tuple[Array, Array]:
    """
    smallest t >= T_EPS among candidate t arrays (nan/inf = none),
    and the index of the winning candidate
    """
    ts = np.stack(candidates)
    ts = np.where(np.isfinite(ts) & (ts >= T_EPS), ts, np.inf)
    which = np.argmin(ts, axis=0)
    return ts[which, np.arange(ts.shape[1])], which


@dataclass(frozen=True)
class SceneObject:
    """
    params by shape:
      plane: point, normal
      box: center, half_extents
      cylinder: base (center of bottom cap), radius, height (axis is world +Z)
      sphere: center, radius
    """
    id: int
    name: str
    shape: Shape
    params: Tuple[Tuple[float, ...], ...]
    albedo: Tuple[float, float, float]
    seg_color: Tuple[int, int, int]

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"{self.name}: negative id")
        if tuple(self.seg_color) == BACKGROUND:
            raise ValueError(f"{self.name}: seg color is the background color")
        if not all(0 <= c <= 255 for c in self.seg_color):
            raise ValueError(f"{self.name}: bad seg color {self.seg_color}")
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError(f"{self.name}: albedo outside [0, 1]")

    # constructors

    @classmethod
    def plane(cls, id: int, name: str, point: Sequence[float], normal: Sequence[float],
              albedo: Sequence[float], seg_color: Sequence[int]) -> 'SceneObject':
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        return cls(id, name, Shape.PLANE, (tuple(map(float, point)), tuple(n.tolist())),
                   tuple(albedo), tuple(seg_color))  # type: ignore[arg-type]

    @classmethod
    def box(cls, id: int, name: str, center: Sequence[float], half_extents: Sequence[float],
            albedo: Sequence[float], seg_color: Sequence[int]) -> 'SceneObject':
        if min(half_extents) <= 0:
            raise ValueError(f"{name}: half extents must be positive")
        return cls(id, name, Shape.BOX, (tuple(map(float, center)), tuple(map(float, half_extents))),
                   tuple(albedo), tuple(seg_color))  # type: ignore[arg-type]

    @classmethod
    def cylinder(cls, id: int, name: str, base: Sequence[float], radius: float, height: float,
                 albedo: Sequence[float], seg_color: Sequence[int]) -> 'SceneObject':
        if radius <= 0 or height <= 0:
            raise ValueError(f"{name}: radius and height must be positive")
        return cls(id, name, Shape.CYLINDER,
                   (tuple(map(float, base)), (float(radius),), (float(height),)),
                   tuple(albedo), tuple(seg_color))  # type: ignore[arg-type]

    @classmethod
    def sphere(cls, id: int, name: str, center: Sequence[float], radius: float,
               albedo: Sequence[float], seg_color: Sequence[int]) -> 'SceneObject':
        if radius <= 0:
            raise ValueError(f"{name}: radius must be positive")
        return cls(id, name, Shape.SPHERE, (tuple(map(float, center)), (float(radius),)),
                   tuple(albedo), tuple(seg_color))  # type: ignore[arg-type]

    # geometry

    def intersect(self, o: Array, d: Array) -> Tuple[Array, Array]:
        """
        nearest hit t >= T_EPS per ray (inf on miss) and outward normals
        """
        return _INTERSECT[self.shape](self, o, d)

    def signed_distance(self, p: Array) -> Array:
        """
        implicit function: negative inside, zero on the surface
        (exact distance for plane and sphere, a bound otherwise)
        """
        p = np.asarray(p, dtype=float)
        if self.shape == Shape.PLANE:
            point, normal = (np.array(v) for v in self.params)
            return (p - point) @ normal
        if self.shape == Shape.BOX:
            center, half = (np.array(v) for v in self.params)
            return np.max(np.abs(p - center) - half, axis=-1)
        if self.shape == Shape.CYLINDER:
            base = np.array(self.params[0])
            r, h = self.params[1][0], self.params[2][0]
            rel = p - base
            radial = np.hypot(rel[..., 0], rel[..., 1]) - r
            return np.maximum(radial, np.maximum(-rel[..., 2], rel[..., 2] - h))
        center = np.array(self.params[0])
        return np.linalg.norm(p - center, axis=-1) - self.params[1][0]


def _plane(obj: SceneObject, o: Array, d: Array) -> Tuple[Array, Array]:
    point, normal = (np.array(v) for v in obj.params)
    denom = d @ normal
    with np.errstate(divide='ignore', invalid='ignore'):
        t = ((point - o) @ normal) / denom
    t = np.where(np.abs(denom) > 1e-15, t, np.inf)
    t, _ = _first_hit([t])
    return t, np.broadcast_to(normal, o.shape).copy()


def _box(obj: SceneObject, o: Array, d: Array) -> Tuple[Array, Array]:
    center, half = (np.array(v) for v in obj.params)
    lo = center - half
    hi = center + half
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    # parallel rays: inside the slab -> unbounded, outside -> empty
    parallel = d == 0.0
    in_slab = (o >= lo) & (o <= hi)
    tn = np.where(parallel, np.where(in_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tf = np.where(parallel, np.where(in_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.max(tn, axis=1)
    t_far = np.min(tf, axis=1)
    ok = t_near <= t_far
    t_in = np.where(ok, t_near, np.inf)
    t_out = np.where(ok, t_far, np.inf)
    t, which = _first_hit([t_in, t_out])
    axis = np.where(which == 0, np.argmax(tn, axis=1), np.argmin(tf, axis=1))
    rows = np.arange(len(o))
    normal = np.zeros_like(o)
    # outward normal on the hit face: sign of (hit - center) along axis
    hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    normal[rows, axis] = np.sign(hit[rows, axis] - center[axis])
    return t, normal


def _cylinder(obj: SceneObject, o: Array, d: Array) -> Tuple[Array, Array]:
    base = np.array(obj.params[0])
    r, h = obj.params[1][0], obj.params[2][0]
    rel = o - base
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (rel[:, 0] * d[:, 0] + rel[:, 1] * d[:, 1])
    c = rel[:, 0] ** 2 + rel[:, 1] ** 2 - r * r
    disc = b * b - 4 * a * c
    with np.errstate(divide='ignore', invalid='ignore'):
        sq = np.sqrt(disc)
        side = [(-b - sq) / (2 * a), (-b + sq) / (2 * a)]
        caps = [(0.0 - rel[:, 2]) / d[:, 2], (h - rel[:, 2]) / d[:, 2]]
    side = [np.where((a > 1e-18) & (disc >= 0), t, np.inf) for t in side]
    for i, t in enumerate(side):
        z = rel[:, 2] + np.where(np.isfinite(t), t, 0.0) * d[:, 2]
        side[i] = np.where((z >= 0.0) & (z <= h), t, np.inf)
    for i, t in enumerate(caps):
        tt = np.where(np.isfinite(t), t, 0.0)
        x = rel[:, 0] + tt * d[:, 0]
        y = rel[:, 1] + tt * d[:, 1]
        caps[i] = np.where(np.isfinite(t) & (x * x + y * y <= r * r), t, np.inf)
    t, which = _first_hit(side + caps)
    hit = rel + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    normal = np.zeros_like(o)
    is_side = which < 2
    normal[is_side, 0] = hit[is_side, 0] / r
    normal[is_side, 1] = hit[is_side, 1] / r
    normal[which == 2, 2] = -1.0
    normal[which == 3, 2] = 1.0
    return t, normal


def _sphere(obj: SceneObject, o: Array, d: Array) -> Tuple[Array, Array]:
    center = np.array(obj.params[0])
    r = obj.params[1][0]
    oc = o - center
    b = np.einsum('ij,ij->i', oc, d)
    c = np.einsum('ij,ij->i', oc, oc) - r * r
    disc = b * b - c
    with np.errstate(invalid='ignore'):
        sq = np.sqrt(disc)
    ok = disc >= 0
    t, _ = _first_hit([np.where(ok, -b - sq, np.inf), np.where(ok, -b + sq, np.inf)])
    hit = oc + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, hit / r


_INTERSECT = {
    Shape.PLANE: _plane,
    Shape.BOX: _box,
    Shape.CYLINDER: _cylinder,
    Shape.SPHERE: _sphere,
}


class Light(NamedTuple):
    position: Tuple[float, float, float]
    intensity: float


class Hit(NamedTuple):
    t: float
    id: int
    normal: Array


class RayHits(NamedTuple):
    t: Array            # (n,) inf on miss
    ids: Array          # (n,) int, -1 on miss
    normals: Array      # (n, 3), facing the ray; zero on miss


@dataclass(frozen=True)
class Scene:
    objects: Tuple[SceneObject, ...]
    lights: Tuple[Light, ...]
    background: Tuple[int, int, int] = BACKGROUND
    by_id: Dict[int, SceneObject] = field(init=False, repr=False, compare=False,
                                          default_factory=dict)
    albedo_table: Array = field(init=False, repr=False, compare=False,
                                default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self) -> None:
        ids = [obj.id for obj in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids {ids}")
        colors = [obj.seg_color for obj in self.objects]
        if len(set(colors)) != len(colors):
            raise ValueError("duplicate segmentation colors")
        object.__setattr__(self, 'by_id', {obj.id: obj for obj in self.objects})
        # albedo indexed by object id (rows for unused ids stay zero)
        table = np.zeros((max(ids, default=-1) + 1, 3))
        for obj in self.objects:
            table[obj.id] = obj.albedo
        object.__setattr__(self, 'albedo_table', table)

    @property
    def palette(self) -> Dict[int, Tuple[int, int, int]]:
        return {obj.id: obj.seg_color for obj in self.objects}

    def intersect_rays(self, origins: Array, dirs: Array) -> RayHits:
        """
        nearest hit over all objects, per ray (dirs unit length)
        """
        o = np.atleast_2d(np.asarray(origins, dtype=float))
        d = np.atleast_2d(np.asarray(dirs, dtype=float))
        o = np.broadcast_to(o, d.shape)
        n = len(d)
        best_t = np.full(n, np.inf)
        best_id = np.full(n, -1, dtype=np.int64)
        best_n = np.zeros((n, 3))
        for start in range(0, n, CHUNK):
            sl = slice(start, start + CHUNK)
            oo, dd = o[sl], d[sl]
            bt, bi, bn = best_t[sl], best_id[sl], best_n[sl]
            for obj in self.objects:
                t, normal = obj.intersect(oo, dd)
                closer = t < bt
                bt[closer] = t[closer]
                bi[closer] = obj.id
                bn[closer] = normal[closer]
        # face the incoming ray
        flip = np.einsum('ij,ij->i', best_n, d) > 0
        best_n[flip] *= -1
        return RayHits(best_t, best_id, best_n)

    def occluded(self, points: Array, light: Light) -> Array:
        """
        True where the segment from points (already offset from their
        surface) to the light is blocked
        """
        to_light = np.asarray(light.position, dtype=float) - points
        dist = np.linalg.norm(to_light, axis=1)
        dirs = to_light / dist[:, None]
        hits = self.intersect_rays(points, dirs)
        return hits.t < dist


def ray_intersect(scene: Scene, origin: Sequence[float], direction: Sequence[float]) -> Optional[Hit]:
    """
    nearest intersection of one ray (direction unit length), or None
    """
    d = np.asarray(direction, dtype=float)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
        raise ValueError(f"direction {direction} not unit length")
    hits = scene.intersect_rays(np.asarray(origin, dtype=float)[None, :], d[None, :])
    if hits.ids[0] < 0:
        return None
    return Hit(float(hits.t[0]), int(hits.ids[0]), hits.normals[0])


################ default scene

# object ids
FLOOR = 1
TABLE = 2
POT = 3
PLANT = range(4, 11)
STAND_1 = 11
STAND_2 = 12

PLANT_CENTER = (0.0, 0.0, 1.15)
POT_RADIUS = 0.15
POT_HEIGHT = 0.3
TABLE_TOP = 0.8


def default_scene(stand_positions: Sequence[Sequence[float]] = ((-0.95, 0.0), (0.95, 0.0)),
                  stand_height: float = TABLE_TOP) -> Scene:
    """
    floor, table, plant pot (cylinder), plant (cluster of spheres),
    two robot stands; two ceiling lights and one above each stand.
    """
    objects: List[SceneObject] = [
        SceneObject.plane(FLOOR, 'floor', (0, 0, 0), (0, 0, 1), (0.55, 0.55, 0.5), (90, 90, 90)),
        SceneObject.box(TABLE, 'table', (0, 0, TABLE_TOP / 2), (0.3, 0.3, TABLE_TOP / 2),
                        (0.6, 0.45, 0.3), (200, 120, 40)),
        SceneObject.cylinder(POT, 'pot', (0, 0, TABLE_TOP), POT_RADIUS, POT_HEIGHT,
                             (0.7, 0.35, 0.2), (255, 0, 0)),
    ]
    # plant: one crown sphere and a ring of six leaves
    cx, cy, cz = PLANT_CENTER
    leaves = [(cx, cy, cz + 0.07, 0.09)]
    for k in range(6):
        a = k * np.pi / 3
        leaves.append((cx + 0.1 * np.cos(a), cy + 0.1 * np.sin(a), cz + 0.02 * (k % 2), 0.06))
    for oid, (x, y, z, r) in zip(PLANT, leaves):
        objects.append(SceneObject.sphere(oid, f"leaf{oid - PLANT[0]}", (x, y, z), r,
                                          (0.2, 0.6 + 0.04 * (oid - PLANT[0]), 0.2),
                                          (0, 100 + 20 * (oid - PLANT[0]), 0)))
    for oid, (x, y) in zip((STAND_1, STAND_2), stand_positions):
        objects.append(SceneObject.box(oid, f"stand{oid - STAND_1 + 1}",
                                       (x, y, stand_height / 2), (0.15, 0.15, stand_height / 2),
                                       (0.3, 0.3, 0.35), (0, 0, 150 + 60 * (oid - STAND_1))))
    lights = [Light((-0.8, 0.0, 2.6), 2.5), Light((0.8, 0.0, 2.6), 2.5)]
    lights.extend(Light((float(x), float(y), 2.0), 1.0) for x, y in stand_positions)
    return Scene(tuple(objects), tuple(lights))
