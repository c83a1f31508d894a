"""Backends that answer from simulator ground truth.

Every image the oracle renders is registered under a digest of its pixels, so
later backend calls that receive that image can recover the exact scene it
depicts.
"""

from __future__ import annotations

import hashlib
import re
import threading
from typing import Dict, List, Tuple

import numpy as np

from .errors import PlannerBackendFailure, UnparsableSubtask
from .geometry import CameraModel, CorrespondenceSet, PointCloud, compose, invert, pose_error
from .scene_sim import RenderedView, SceneState, oracle_future_scene, parse_subtask, render
from .world_agents import BackendSuite, Critic, DepthEstimator, Dreamer, Planner, ReflectionVerdict, Segmenter


def image_digest(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image)
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class UnknownImage(LookupError):
    pass


class OracleWorld:
    """Renders scenes and remembers which scene produced each image."""

    def __init__(self, camera: CameraModel):
        self.camera = camera
        self._registry: Dict[str, Tuple[SceneState, RenderedView]] = {}
        self._lock = threading.Lock()

    def observe(self, scene: SceneState) -> RenderedView:
        view = render(scene, self.camera)
        key = image_digest(view.image)
        with self._lock:
            self._registry.setdefault(key, (scene, view))
        return view

    def lookup(self, image: np.ndarray) -> Tuple[SceneState, RenderedView]:
        with self._lock:
            hit = self._registry.get(image_digest(image))
        if hit is None:
            raise UnknownImage("image was not produced by this oracle world")
        return hit


_PUT = re.compile(r"^(?:put|move|place) the (?P<obj>[a-z][\w\- ]*?) (?:in|into|on|onto) the (?P<tgt>[a-z][\w\- ]*?)$")
_TAKE = re.compile(r"^(?:take|remove) the (?P<obj>[a-z][\w\- ]*?) (?:off|off of|from) the (?P<tgt>[a-z][\w\- ]*?)$")


def expand_task(task: str) -> Tuple[List[str], List[str]]:
    """Scripted decomposition for the built-in task families."""
    norm = " ".join(task.strip().rstrip(".").lower().split())
    m = _PUT.match(norm)
    if m:
        obj, tgt = m["obj"], m["tgt"]
        subtasks = [
            f"Move the {obj} vertically upward",
            f"Move the {obj} horizontally, positioning it above the {tgt}",
            f"Move the {obj} downward into the {tgt}",
        ]
        return subtasks, [obj] * 3
    m = _TAKE.match(norm)
    if m:
        obj, tgt = m["obj"], m["tgt"]
        subtasks = [
            f"Move the {obj} vertically upward",
            f"Move the {obj} horizontally away from the {tgt}",
            f"Move the {obj} downward onto the table",
        ]
        return subtasks, [obj] * 3
    try:
        parsed = parse_subtask(task)
    except UnparsableSubtask:
        raise PlannerBackendFailure(f"oracle planner cannot decompose {task!r}") from None
    return [task], [parsed.obj]


class OraclePlanner(Planner):
    def plan(self, task, image):
        return expand_task(task)


def _first_sentence(prompt: str) -> str:
    return prompt.split(". ")[0]


class OracleDreamer(Dreamer):
    def __init__(self, world: OracleWorld):
        self.world = world

    def dream(self, image, prompt):
        scene, _ = self.world.lookup(image)
        future = oracle_future_scene(scene, _first_sentence(prompt))
        return self.world.observe(future).image


class OracleCritic(Critic):
    """Accepts iff the named object sits within (position_tol, rotation_tol) of its true future pose."""

    def __init__(self, world: OracleWorld, position_tol: float = 0.02, rotation_tol: float = 10.0):
        self.world = world
        self.position_tol = position_tol
        self.rotation_tol = rotation_tol

    def critique(self, before, after, subtask):
        scene, _ = self.world.lookup(before)
        obj = parse_subtask(subtask).obj
        expected = oracle_future_scene(scene, subtask).get(obj).pose
        try:
            produced, _ = self.world.lookup(after)
        except UnknownImage:
            return ReflectionVerdict("revise", f"{subtask}. Show the same scene with only the {obj} moved", "unrecognized scene")
        dt, dr = pose_error(produced.get(obj).pose, expected)
        if dt <= self.position_tol and dr <= self.rotation_tol:
            return ReflectionVerdict("accept", None, f"{obj} within {dt * 100:.1f} cm / {dr:.1f} deg of goal")
        return ReflectionVerdict(
            "revise",
            f"{subtask}. The {obj} is {dt * 100:.1f} cm from where it should end up",
            f"{obj} off by {dt * 100:.1f} cm / {dr:.1f} deg",
        )


class OracleDepth(DepthEstimator):
    def __init__(self, world: OracleWorld):
        self.world = world

    def estimate(self, image):
        return self.world.lookup(image)[1].depth


class OracleSegmenter(Segmenter):
    def __init__(self, world: OracleWorld):
        self.world = world

    def segment(self, image, label):
        return self.world.lookup(image)[1].mask_of(label)


class OracleMatcher:
    """Pairs points that are the same physical surface point of the object in both views.

    Each current object point is carried to the goal view through the true
    object motion; it is kept when it is visible there (inside the goal object
    mask at a depth consistent with the goal depth map).
    """

    def __init__(self, world: OracleWorld, depth_tol: float = 2e-3):
        self.world = world
        self.depth_tol = depth_tol

    def match(self, now, src: PointCloud, goal, dst: PointCloud, object_id: str):
        now_scene, _ = self.world.lookup(now.image)
        goal_scene, _ = self.world.lookup(goal.image)
        goal_depth, goal_mask = goal.depth, goal.object_mask
        motion = compose(goal_scene.get(object_id).pose, invert(now_scene.get(object_id).pose))
        moved = motion.apply(src.points)
        cam = self.world.camera
        pts_cam = invert(cam.pose).apply(moved)
        z = pts_cam[:, 2]
        keep = np.zeros(len(moved), dtype=bool)
        front = z > 1e-9
        u = np.rint(cam.fx * pts_cam[front, 0] / z[front] + cam.cx).astype(int)
        v = np.rint(cam.fy * pts_cam[front, 1] / z[front] + cam.cy).astype(int)
        inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        idx = np.flatnonzero(front)[inside]
        u, v = u[inside], v[inside]
        visible = goal_mask[v, u] & goal_depth.valid[v, u] & (np.abs(goal_depth.values[v, u] - z[idx]) <= self.depth_tol)
        keep[idx[visible]] = True
        src_idx = np.flatnonzero(keep)
        pairs = np.column_stack([src_idx, np.arange(len(src_idx))])
        return CorrespondenceSet(pairs), PointCloud(moved[keep])


def oracle_suite(camera: CameraModel) -> Tuple[BackendSuite, OracleWorld]:
    world = OracleWorld(camera)
    suite = BackendSuite(
        planner=OraclePlanner(),
        dreamer=OracleDreamer(world),
        critic=OracleCritic(world),
        depth_estimator=OracleDepth(world),
        segmenter=OracleSegmenter(world),
        matcher=OracleMatcher(world),
        name="oracle",
    )
    return suite, world
