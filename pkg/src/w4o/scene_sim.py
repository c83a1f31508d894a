"""Synthetic tabletop world: primitive objects, RGB-D rendering, motion and ground-truth futures."""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import PlacementFailure, SceneError, UnknownObject, UnknownTemplate, UnparsableSubtask
from .geometry import CameraModel, DepthMap, RigidTransform, compose, look_at
from .shapes import Box, Cylinder, Posed, Sphere, intersects, make_shape

UP = np.array([0.0, 0.0, 1.0])
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneParams:
    lift_height: float = 0.15
    horizontal_step: float = 0.10
    over_tolerance: float = 0.01
    collision_tolerance: float = 0.001
    away_margin: float = 0.03


@dataclass(frozen=True)
class Table:
    """Axis-aligned slab centered at the world origin; ``height`` is the z of its top face."""

    size: Tuple[float, float] = (1.0, 0.8)
    height: float = 0.75
    thickness: float = 0.05
    color: Tuple[int, int, int] = (150, 120, 90)

    def posed(self) -> Posed:
        shape = Box((self.size[0], self.size[1], self.thickness))
        return Posed(shape, RigidTransform.from_translation([0.0, 0.0, self.height - 0.5 * self.thickness]))

    def contains_xy(self, lo: np.ndarray, hi: np.ndarray) -> bool:
        hx, hy = 0.5 * self.size[0], 0.5 * self.size[1]
        return bool(lo[0] >= -hx and hi[0] <= hx and lo[1] >= -hy and hi[1] <= hy)


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: str
    shape: Union[Sphere, Box, Cylinder]
    pose: RigidTransform
    color: Tuple[int, int, int] = (200, 200, 200)

    def posed(self, pose: Optional[RigidTransform] = None) -> Posed:
        return Posed(self.shape, self.pose if pose is None else pose)

    def moved(self, pose: RigidTransform) -> "SceneObject":
        return replace(self, pose=pose)


@dataclass(frozen=True, eq=False)
class SceneState:
    objects: Tuple[SceneObject, ...]
    table: Optional[Table] = field(default_factory=Table)
    gravity_axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    params: SceneParams = field(default_factory=SceneParams)
    template: str = ""

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise SceneError("object identifiers must be unique")
        axis = np.asarray(self.gravity_axis, dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise SceneError("gravity_axis must be a unit vector")

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(o.id for o in self.objects)

    @property
    def up(self) -> np.ndarray:
        return np.asarray(self.gravity_axis, dtype=float)

    def get(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise UnknownObject(f"no object {object_id!r} in scene")

    def seg_id(self, object_id: str) -> int:
        """Value the object takes in segmentation maps (1-based position)."""
        self.get(object_id)
        return self.ids.index(object_id) + 1

    def with_pose(self, object_id: str, pose: RigidTransform) -> "SceneState":
        self.get(object_id)
        objs = tuple(o.moved(pose) if o.id == object_id else o for o in self.objects)
        return replace(self, objects=objs)

    def same_as(self, other: "SceneState", atol: float = 0.0) -> bool:
        if self.ids != other.ids or self.table != other.table or self.params != other.params:
            return False
        if tuple(self.gravity_axis) != tuple(other.gravity_axis):
            return False
        return all(
            a.shape == b.shape and a.color == b.color and a.pose.equals(b.pose, atol)
            for a, b in zip(self.objects, other.objects)
        )

    def to_dict(self, camera: Optional[CameraModel] = None) -> dict:
        doc = {
            "template": self.template,
            "table": None if self.table is None else {"size": list(self.table.size), "height": self.table.height},
            "gravity_axis": list(self.gravity_axis),
            "objects": [
                {
                    "id": o.id,
                    "shape": o.shape.kind,
                    "dims": list(o.shape.dims),
                    "pose": o.pose.to_dict(),
                    "color": list(o.color),
                }
                for o in self.objects
            ],
        }
        if camera is not None:
            doc["camera"] = camera.to_dict()
        return doc

    def pose_table(self) -> Dict[str, dict]:
        """Exact (full-precision) poses keyed by object id, for reports."""
        return {
            o.id: {"rotation": o.pose.rotation.tolist(), "translation": o.pose.translation.tolist()}
            for o in self.objects
        }


def scene_from_dict(doc: dict) -> Tuple[SceneState, Optional[CameraModel]]:
    table = None
    if doc.get("table") is not None:
        t = doc["table"]
        table = Table(size=tuple(float(s) for s in t["size"]), height=float(t["height"]))
    objects = []
    for o in doc.get("objects", []):
        objects.append(
            SceneObject(
                id=str(o["id"]),
                shape=make_shape(o["shape"], o["dims"]),
                pose=RigidTransform.from_dict(o["pose"]),
                color=tuple(int(c) for c in o.get("color", (200, 200, 200))),
            )
        )
    scene = SceneState(
        tuple(objects),
        table=table,
        gravity_axis=tuple(doc.get("gravity_axis", (0.0, 0.0, 1.0))),
        template=doc.get("template", ""),
    )
    camera = CameraModel.from_dict(doc["camera"]) if doc.get("camera") else None
    return scene, camera


def load_scene(path: Union[str, Path]) -> Tuple[SceneState, Optional[CameraModel]]:
    return scene_from_dict(json.loads(Path(path).read_text()))


def default_camera(table_height: float = 0.75, width: int = 320, height: int = 240) -> CameraModel:
    pose = look_at([0.0, -0.75, table_height + 0.65], [0.0, 0.0, table_height])
    f = 280.0 * width / 320.0
    return CameraModel(f, f, width / 2.0, height / 2.0, width, height, pose)


# ---------------------------------------------------------------- layouts

def _yaw(angle: float, translation) -> RigidTransform:
    return RigidTransform.from_rotvec([0.0, 0.0, angle], translation)


def _resting(shape, xy, yaw: float, support_height: float) -> RigidTransform:
    probe = Posed(shape, _yaw(yaw, [xy[0], xy[1], 0.0]))
    lo, _ = probe.aabb()
    return _yaw(yaw, [xy[0], xy[1], support_height - lo[2]])


def _pick_place(rng: np.random.Generator, table: Table) -> List[SceneObject]:
    specs = [
        ("tomato", Sphere(0.035), (220, 40, 30)),
        ("pan", Cylinder(0.09, 0.04), (60, 60, 70)),
        ("sponge", Box((0.09, 0.06, 0.03)), (230, 210, 60)),
    ]
    return _scatter(rng, table, specs, region=(0.3, 0.2))


def _take_off_rack(rng: np.random.Generator, table: Table) -> List[SceneObject]:
    rack = ("rack", Box((0.22, 0.14, 0.08)), (110, 80, 50))
    sponge = ("sponge", Box((0.09, 0.06, 0.03)), (230, 210, 60))
    placed = _scatter(rng, table, [rack, sponge], region=(0.3, 0.22), min_gap=0.04)
    rack_obj = placed[0]
    offset = rng.uniform([-0.03, -0.02], [0.03, 0.02])
    center = rack_obj.pose.apply(np.array([offset[0], offset[1], 0.0]))
    rack_yaw = math.atan2(rack_obj.pose.rotation[1, 0], rack_obj.pose.rotation[0, 0])
    plate_yaw = rack_yaw + rng.uniform(-0.3, 0.3)
    top = rack_obj.posed().aabb()[1][2]
    plate = Box((0.16, 0.05, 0.015))
    plate_obj = SceneObject("plate", plate, _resting(plate, center[:2], plate_yaw, top), (240, 240, 235))
    return [placed[0], plate_obj, placed[1]]


def _scatter(rng, table: Table, specs, region, min_gap: float = 0.06) -> List[SceneObject]:
    objects: List[SceneObject] = []
    for name, shape, color in specs:
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            xy = rng.uniform([-region[0], -region[1]], [region[0], region[1]])
            yaw = float(rng.uniform(-math.pi, math.pi))
            pose = _resting(shape, xy, yaw, table.height)
            cand = Posed(shape, pose)
            lo, hi = cand.aabb()
            if not table.contains_xy(lo, hi):
                continue
            r = _footprint_radius(cand)
            if all(
                np.linalg.norm(xy - o.pose.translation[:2]) >= r + _footprint_radius(o.posed()) + min_gap
                for o in objects
            ):
                objects.append(SceneObject(name, shape, pose, color))
                break
        else:
            raise PlacementFailure(f"could not place {name!r} after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return objects


def _footprint_radius(p: Posed) -> float:
    lo, hi = p.aabb()
    return 0.5 * float(np.hypot(hi[0] - lo[0], hi[1] - lo[1]))


TEMPLATES = {
    "pick-place": (_pick_place, "Put the tomato in the pan"),
    "take-off-rack": (_take_off_rack, "Take the plate off the rack"),
}


def default_task(template: str) -> str:
    if template not in TEMPLATES:
        raise UnknownTemplate(f"unknown scene template {template!r}")
    return TEMPLATES[template][1]


def sample_layout(task_template: str, seed: int, params: Optional[SceneParams] = None) -> SceneState:
    """Deterministic random arrangement for ``(task_template, seed)``."""
    if task_template not in TEMPLATES:
        raise UnknownTemplate(f"unknown scene template {task_template!r}; known: {sorted(TEMPLATES)}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    builder, _ = TEMPLATES[task_template]
    rng = np.random.default_rng([int(seed), zlib.crc32(task_template.encode())])
    table = Table()
    objects = builder(rng, table)
    return SceneState(tuple(objects), table=table, params=params or SceneParams(), template=task_template)


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True, eq=False)
class RenderedView:
    image: np.ndarray
    depth: DepthMap
    seg: np.ndarray
    ids: Tuple[str, ...] = ()

    def mask_of(self, object_id: str) -> np.ndarray:
        if object_id not in self.ids:
            return np.zeros(self.seg.shape, dtype=bool)
        return self.seg == self.ids.index(object_id) + 1


BACKGROUND_RGB = (0, 0, 0)


def render(scene: SceneState, cam: CameraModel) -> RenderedView:
    """Ray-cast depth, flat-shaded color and nearest-hit object ids (0 = background/table)."""
    h, w = cam.height, cam.width
    dirs = cam.pixel_rays()
    origin = cam.pose.translation
    depth = np.full((h, w), np.inf)
    seg = np.zeros((h, w), dtype=np.int32)
    image = np.zeros((h, w, 3), dtype=np.uint8)
    image[:] = BACKGROUND_RGB
    bodies = []
    if scene.table is not None:
        bodies.append((0, scene.table.posed(), scene.table.color))
    for i, obj in enumerate(scene.objects, start=1):
        bodies.append((i, obj.posed(), obj.color))
    for ident, posed, color in bodies:
        t = posed.ray_hits(origin, dirs)
        closer = t < depth
        depth = np.where(closer, t, depth)
        seg[closer] = ident
        image[closer] = color
    valid = np.isfinite(depth)
    depth_map = DepthMap(np.where(valid, depth, 0.0), valid)
    image.setflags(write=False)
    seg.setflags(write=False)
    return RenderedView(image, depth_map, seg, scene.ids)


def surface_distance(scene: SceneState, points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """|signed distance| of each point to the surface of the body its label names (0 = table)."""
    out = np.full(len(points), np.inf)
    for ident in np.unique(labels):
        sel = labels == ident
        if ident == 0:
            if scene.table is None:
                continue
            body = scene.table.posed()
        else:
            body = scene.objects[int(ident) - 1].posed()
        out[sel] = np.abs(body.sdf(points[sel]))
    return out


# ---------------------------------------------------------------- motion and collisions

def apply_object_motion(scene: SceneState, object_id: str, motion: RigidTransform) -> SceneState:
    """New scene with ``object_id`` moved to ``motion ∘ pose``."""
    obj = scene.get(object_id)
    return scene.with_pose(object_id, compose(motion, obj.pose))


def check_collision(
    scene: SceneState,
    object_id: str,
    candidate_pose: RigidTransform,
    tolerance: Optional[float] = None,
) -> bool:
    obj = scene.get(object_id)
    tol = scene.params.collision_tolerance if tolerance is None else tolerance
    body = obj.posed(candidate_pose)
    if scene.table is not None and intersects(body, scene.table.posed(), tol):
        return True
    return any(intersects(body, other.posed(), tol) for other in scene.objects if other.id != object_id)


# ---------------------------------------------------------------- subtask grammar

_NAME = r"(?P<obj>[a-z][a-z0-9_\- ]*?)"
_TGT = r"(?P<tgt>[a-z][a-z0-9_\- ]*?)"
_GRAMMAR = [
    ("up", re.compile(rf"^move the {_NAME} (?:vertically )?(?:upward|upwards|up)$")),
    (
        "down",
        re.compile(rf"^move the {_NAME} (?:vertically )?(?:downward|downwards|down)(?: (?:into|onto|on|in|to) the {_TGT})?$"),
    ),
    (
        "over",
        re.compile(
            rf"^move the {_NAME}(?: horizontally)?(?: to the (?:left|right|front|back))?,? "
            rf"(?:positioning it )?(?:above|over) the {_TGT}$"
        ),
    ),
    ("away", re.compile(rf"^move the {_NAME} (?:horizontally )?away from the {_TGT}$")),
    (
        "shift",
        re.compile(rf"^move the {_NAME} (?:horizontally )?(?:to the )?(?P<dir>left|right|forwards?|backwards?)$"),
    ),
    ("place", re.compile(rf"^(?:place|put) the {_NAME} (?:into|onto|in|on) the {_TGT}$")),
]

_SHIFT_DIRS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "forward": (0.0, 1.0),
    "forwards": (0.0, 1.0),
    "backward": (0.0, -1.0),
    "backwards": (0.0, -1.0),
}


@dataclass(frozen=True)
class ParsedSubtask:
    verb: str
    obj: str
    target: Optional[str] = None
    direction: Optional[str] = None


def parse_subtask(text: str) -> ParsedSubtask:
    norm = " ".join(text.strip().rstrip(".").lower().split())
    for verb, pattern in _GRAMMAR:
        m = pattern.match(norm)
        if m:
            groups = m.groupdict()
            return ParsedSubtask(verb, groups["obj"], groups.get("tgt"), groups.get("dir"))
    raise UnparsableSubtask(f"cannot parse subtask {text!r}")


def oracle_future_scene(scene: SceneState, subtask: str) -> SceneState:
    """Ground-truth scene after ``subtask``: exactly the named object is displaced."""
    parsed = parse_subtask(subtask)
    obj = scene.get(parsed.obj)
    if parsed.target is not None and parsed.target != "table":
        scene.get(parsed.target)
    p = scene.params
    up = scene.up
    pos = obj.pose.translation.copy()

    if parsed.verb == "up":
        pos = pos + p.lift_height * up
    elif parsed.verb == "shift":
        dx, dy = _SHIFT_DIRS[parsed.direction]
        pos = pos + p.horizontal_step * np.array([dx, dy, 0.0])
    elif parsed.verb == "over":
        pos = _align_over(pos, scene.get(parsed.target).pose.translation, up)
    elif parsed.verb == "down":
        pos = pos + _drop_offset(scene, obj, pos, parsed.target) * up
    elif parsed.verb == "away":
        pos = _away_position(scene, obj, parsed.target)
    elif parsed.verb == "place":
        pos = _align_over(pos, scene.get(parsed.target).pose.translation, up)
        pos = pos + _drop_offset(scene, obj, pos, parsed.target) * up
    return scene.with_pose(obj.id, RigidTransform(obj.pose.rotation, pos))


def _align_over(pos: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    horizontal = (target - pos) - np.dot(target - pos, up) * up
    return pos + horizontal


def _support_height(scene: SceneState, body: Posed, exclude: str, target: Optional[str]) -> float:
    lo, hi = body.aabb()
    if target == "table":
        if scene.table is None:
            raise UnknownObject("scene has no table")
        return scene.table.height
    if target is not None:
        return float(scene.get(target).posed().aabb()[1][2])
    best = scene.table.height if scene.table is not None else -math.inf
    for other in scene.objects:
        if other.id == exclude:
            continue
        olo, ohi = other.posed().aabb()
        overlap = lo[0] < ohi[0] and olo[0] < hi[0] and lo[1] < ohi[1] and olo[1] < hi[1]
        if overlap and ohi[2] <= lo[2] + 1e-9:
            best = max(best, float(ohi[2]))
    if not math.isfinite(best):
        raise SceneError("nothing below the object to rest on")
    return best


def _drop_offset(scene: SceneState, obj: SceneObject, pos: np.ndarray, target: Optional[str]) -> float:
    body = obj.posed(RigidTransform(obj.pose.rotation, pos))
    bottom = body.aabb()[0][2]
    return _support_height(scene, body, obj.id, target) - bottom


def _away_position(scene: SceneState, obj: SceneObject, target_id: str) -> np.ndarray:
    """Horizontal position clear of ``target_id`` where the object can later rest on the table."""
    target = scene.get(target_id)
    tcen = target.pose.translation
    pos = obj.pose.translation
    # prefer heading from the target toward open table (the table centre)
    centre = np.zeros(2) if scene.table is not None else pos[:2]
    delta = centre - tcen[:2]
    if np.linalg.norm(delta) < 1e-3:
        delta = pos[:2] - tcen[:2]
    dirs = []
    if np.linalg.norm(delta) > 1e-6:
        dirs.append(delta / np.linalg.norm(delta))
    base = math.atan2(delta[1], delta[0]) if dirs else 0.0
    for k in range(1, 16):
        # alternate either side of the preferred direction
        ang = base + ((k + 1) // 2) * (math.pi / 8) * (1 if k % 2 else -1)
        dirs.append(np.array([math.cos(ang), math.sin(ang)]))
    tbody = target.posed()
    obody = obj.posed()
    table_h = scene.table.height if scene.table is not None else 0.0
    for d in dirs:
        d3 = np.array([d[0], d[1], 0.0])
        reach_t = np.dot(np.array(tbody.support(tuple(d3))) - tcen, d3)
        reach_o = np.dot(pos - np.array(obody.support(tuple(-d3))), d3)
        dist = reach_t + reach_o + scene.params.away_margin
        new_pos = np.array([tcen[0] + d[0] * dist, tcen[1] + d[1] * dist, pos[2]])
        rest = obj.posed(RigidTransform(obj.pose.rotation, new_pos))
        drop = table_h - rest.aabb()[0][2]
        rest_pose = RigidTransform(obj.pose.rotation, new_pos + np.array([0, 0, drop]))
        lo, hi = obj.posed(rest_pose).aabb()
        if scene.table is not None and not scene.table.contains_xy(lo, hi):
            continue
        if not check_collision(scene, obj.id, rest_pose):
            return new_pos
    raise PlacementFailure(f"no free spot to move {obj.id!r} away from {target_id!r}")
