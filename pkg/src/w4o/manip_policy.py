"""Low-level policy: correspondences, goal transform, grasp selection and collision-aware motion planning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation, Slerp

from .errors import (
    EmptyCloud,
    GoalInCollision,
    NoCandidates,
    NoFeasibleGrasp,
    ObjectMissing,
    PlanningFailure,
    StartInCollision,
    TooFewMatches,
)
from .geometry import (
    CameraModel,
    CorrespondenceSet,
    DepthMap,
    PointCloud,
    RigidTransform,
    back_project,
    compose,
    invert,
    rotation_angle,
    umeyama_align,
)
from .scene_sim import RenderedView, SceneState, apply_object_motion, check_collision
from .shapes import PointShape, Posed, gjk_distance, intersects
from .world_agents import BackendSuite, SubgoalPrediction

UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class Observation:
    image: np.ndarray
    depth: DepthMap
    cloud: PointCloud
    seg: np.ndarray
    camera: CameraModel
    ids: Tuple[str, ...] = ()

    @classmethod
    def from_view(cls, view: RenderedView, camera: CameraModel) -> "Observation":
        cloud = back_project(view.depth, camera, labels=view.seg)
        return cls(view.image, view.depth, cloud, view.seg, camera, view.ids)

    def mask_of(self, object_id: str) -> np.ndarray:
        if object_id not in self.ids:
            return np.zeros(self.seg.shape, dtype=bool)
        return self.seg == self.ids.index(object_id) + 1


@dataclass(frozen=True, eq=False)
class GraspPose:
    pose: RigidTransform
    width: float
    score: float

    def __post_init__(self):
        if not self.width > 0 or not math.isfinite(self.score):
            raise ValueError("grasp width must be positive and score finite")

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def closing_axis(self) -> np.ndarray:
        return self.pose.rotation[:, 0]

    @property
    def approach_axis(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    def to_dict(self) -> dict:
        return {"pose": _pose_row(self.pose), "width": self.width, "score": self.score}


GRIPPER_COMMANDS = ("open", "close", "hold")


@dataclass(frozen=True, eq=False)
class Trajectory:
    waypoints: Tuple[RigidTransform, ...]
    gripper_commands: Tuple[str, ...] = ()
    step: float = 0.02

    def __post_init__(self):
        wps = tuple(self.waypoints)
        cmds = tuple(self.gripper_commands) or ("hold",) * len(wps)
        object.__setattr__(self, "waypoints", wps)
        object.__setattr__(self, "gripper_commands", cmds)
        if not wps:
            raise ValueError("trajectory needs at least one waypoint")
        if len(cmds) != len(wps) or any(c not in GRIPPER_COMMANDS for c in cmds):
            raise ValueError("one open/close/hold command per waypoint")
        gaps = self.gaps()
        if len(gaps) and gaps.max() > self.step + 1e-9:
            raise ValueError(f"waypoint gap {gaps.max():.4f} m exceeds step {self.step}")

    def __len__(self):
        return len(self.waypoints)

    def gaps(self) -> np.ndarray:
        t = self.positions()
        return np.linalg.norm(np.diff(t, axis=0), axis=1)

    def positions(self) -> np.ndarray:
        return np.array([w.translation for w in self.waypoints])

    def length(self) -> float:
        return float(self.gaps().sum())

    def with_commands(self, commands: Sequence[str]) -> "Trajectory":
        return Trajectory(self.waypoints, tuple(commands), self.step)

    def __add__(self, other: "Trajectory") -> "Trajectory":
        """Concatenate; ``other`` must start where ``self`` ends (the joint waypoint is kept once)."""
        if not self.waypoints[-1].equals(other.waypoints[0], atol=1e-12):
            raise ValueError("trajectories do not join")
        return Trajectory(
            self.waypoints + other.waypoints[1:],
            self.gripper_commands + other.gripper_commands[1:],
            max(self.step, other.step),
        )

    def rows(self) -> List[list]:
        return [[i, *_pose_row(w), c] for i, (w, c) in enumerate(zip(self.waypoints, self.gripper_commands))]

    def to_dict(self) -> dict:
        return {
            "columns": ["index", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "gripper"],
            "rows": self.rows(),
        }

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "gripper"])
            writer.writerows(self.rows())


def _pose_row(t: RigidTransform) -> list:
    return [*t.quaternion().tolist(), *t.translation.tolist()]


@dataclass
class ActionRecord:
    subtask_index: int
    grasp: Optional[GraspPose] = None
    goal_transform: Optional[RigidTransform] = None
    trajectory: Optional[Trajectory] = None
    outcome: str = "succeeded"
    reason: str = ""
    error: str = ""
    registration_rmse: Optional[float] = None
    matches: int = 0

    def __post_init__(self):
        if self.outcome not in ("succeeded", "failed"):
            raise ValueError("outcome must be succeeded or failed")
        if self.outcome == "failed" and not self.reason:
            raise ValueError("failed records need a reason")

    @property
    def succeeded(self) -> bool:
        return self.outcome == "succeeded"

    def to_dict(self) -> dict:
        return {
            "subtask_index": self.subtask_index,
            "outcome": self.outcome,
            "reason": self.reason,
            "error": self.error,
            "grasp": None if self.grasp is None else self.grasp.to_dict(),
            "goal_transform": None if self.goal_transform is None else _pose_row(self.goal_transform),
            "registration_rmse": self.registration_rmse,
            "matches": self.matches,
            "trajectory": None if self.trajectory is None else self.trajectory.to_dict(),
        }


@dataclass(frozen=True)
class PolicyConfig:
    grasp_threshold: float = 0.05
    max_grasps: int = 10
    gripper_max_width: float = 0.08
    step: float = 0.02
    rotation_step_deg: float = 5.0
    pregrasp_height: float = 0.10
    via_attempts: int = 50
    trim_fraction: float = 0.2
    trim_rmse: float = 0.005
    optimized_candidates: int = 0
    clearance_weight: float = 0.01
    home: Tuple[float, float, float] = (0.0, -0.25, 1.25)
    seed: int = 0

    def home_pose(self) -> RigidTransform:
        return RigidTransform(TOP_DOWN, self.home)


# Gripper frame: x = closing axis, z = approach axis (pointing down for top-down grasps).
TOP_DOWN = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


# ---------------------------------------------------------------- correspondences

class Matches(NamedTuple):
    corr: CorrespondenceSet
    src: PointCloud
    dst: PointCloud


class NearestNeighborMatcher:
    """Geometric fallback: pre-align by centroid and principal axes, then pair nearest neighbours.

    Among pre-alignments whose mean pairing distance is within ``slack`` of the
    best one, the smallest rotation wins, so near-symmetric objects are not
    spun around for nothing.
    """

    def __init__(self, slack: float = 1e-3):
        self.slack = slack

    def match(self, now, src: PointCloud, goal, dst: PointCloud, object_id: str):
        x, y = src.points, dst.points
        cx, cy = x.mean(axis=0), y.mean(axis=0)
        ax = _principal_axes(x - cx)
        ay = _principal_axes(y - cy)
        tree = cKDTree(y)
        candidates = [np.eye(3)]
        for signs in ((1, 1, 1), (-1, -1, 1), (-1, 1, -1), (1, -1, -1)):
            candidates.append(ay @ np.diag(signs) @ ax.T)
        trials = []
        for rot in candidates:
            dist, idx = tree.query((x - cx) @ rot.T + cy)
            trials.append((float(np.mean(dist)), rotation_angle(rot), idx))
        best = min(t[0] for t in trials)
        _, _, idx = min((t for t in trials if t[0] <= best + self.slack), key=lambda t: t[1])
        pairs = np.column_stack([np.arange(len(x)), idx])
        return CorrespondenceSet(pairs), dst


def _principal_axes(centered: np.ndarray) -> np.ndarray:
    _, vecs = np.linalg.eigh(centered.T @ centered)
    axes = vecs[:, ::-1]
    if np.linalg.det(axes) < 0:
        axes[:, 2] *= -1
    return axes


def match_correspondences(
    now: Observation,
    goal: SubgoalPrediction,
    object_id: str,
    matcher=None,
    now_mask: Optional[np.ndarray] = None,
) -> Matches:
    """Pairs between the object's points in the current view and in the subgoal."""
    if now_mask is None:
        now_mask = now.mask_of(object_id)
    if not np.any(now_mask):
        raise ObjectMissing(f"{object_id!r} not visible in the current observation")
    if not np.any(goal.object_mask):
        raise ObjectMissing(f"{object_id!r} not visible in the subgoal")
    src = back_project(now.depth, now.camera, now_mask)
    dst = back_project(goal.depth, now.camera, goal.object_mask)
    if src.n == 0 or dst.n == 0:
        raise ObjectMissing(f"{object_id!r} has no valid depth in one of the views")
    matcher = matcher or NearestNeighborMatcher()
    corr, dst_cloud = matcher.match(now, src, goal, dst, object_id)
    if len(corr) < 3:
        raise TooFewMatches(f"only {len(corr)} correspondences for {object_id!r}")
    corr.check_bounds(src.n, dst_cloud.n)
    return Matches(corr, src, dst_cloud)


def estimate_goal_transform(
    corr: CorrespondenceSet,
    now_cloud: PointCloud,
    goal_cloud: PointCloud,
    trim_fraction: float = 0.2,
    trim_rmse: float = 0.005,
) -> Tuple[RigidTransform, float]:
    """Rigid motion carrying the matched current points onto the goal points.

    When the first fit leaves an rmse above ``trim_rmse`` the worst
    ``trim_fraction`` of pairs (by residual) is dropped and the fit is redone once.
    """
    corr.check_bounds(now_cloud.n, goal_cloud.n)
    src = now_cloud.points[corr.pairs[:, 0]]
    dst = goal_cloud.points[corr.pairs[:, 1]]
    transform, _, rmse = umeyama_align(src, dst, weights=corr.weights)
    if rmse > trim_rmse and trim_fraction > 0:
        resid = np.linalg.norm(dst - transform.apply(src), axis=1)
        n_keep = max(3, len(src) - int(math.floor(trim_fraction * len(src))))
        keep = np.sort(np.argsort(resid, kind="stable")[:n_keep])
        weights = None if corr.weights is None else corr.weights[keep]
        transform, _, rmse = umeyama_align(src[keep], dst[keep], weights=weights)
    return transform, rmse


# ---------------------------------------------------------------- grasps

def propose_grasps(
    object_cloud: PointCloud,
    max_k: int = 10,
    max_width: float = 0.08,
    up: Sequence[float] = (0.0, 0.0, 1.0),
    slice_half_width: float = 0.01,
    width_margin: float = 0.005,
) -> List[GraspPose]:
    """Top-down antipodal candidates across the object's long horizontal axis, best first.

    Each candidate closes perpendicular to the long axis on one slice of the
    cloud.  Score is the mean of (1 - normalized distance of the grasp center
    from the centroid) and the alignment of the approach axis with gravity.
    """
    pts = object_cloud.points
    if len(pts) == 0:
        raise EmptyCloud("object cloud is empty")
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    centroid = pts.mean(axis=0)
    rel = pts - centroid
    e1 = np.cross(up, [1.0, 0.0, 0.0] if abs(up[0]) < 0.9 else [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    planar = np.column_stack([rel @ e1, rel @ e2])
    vals, vecs = np.linalg.eigh(planar.T @ planar)
    major = vecs[:, 1]
    if major[0] < 0 or (major[0] == 0 and major[1] < 0):
        major = -major
    long_axis = major[0] * e1 + major[1] * e2
    close_axis = np.cross(up, long_axis)
    approach = -up
    frame = np.column_stack([close_axis, np.cross(approach, close_axis), approach])

    along = rel @ long_axis
    across = rel @ close_axis
    height = pts @ up
    lo, hi = float(along.min()), float(along.max())
    half_extent = max(abs(lo), abs(hi), 1e-9)
    offsets = [0.0] if max_k == 1 or hi - lo < 2 * slice_half_width else list(np.linspace(lo + slice_half_width, hi - slice_half_width, max_k))

    out = []
    for off in offsets:
        sel = np.abs(along - off) <= slice_half_width
        if np.count_nonzero(sel) < 3:
            continue
        a_lo, a_hi = across[sel].min(), across[sel].max()
        width = float(a_hi - a_lo) + width_margin
        if width > max_width:
            continue
        h = height[sel]
        center = centroid + off * long_axis + 0.5 * (a_lo + a_hi) * close_axis
        center = center + (0.5 * (h.min() + h.max()) - center @ up) * up
        dist = min(1.0, float(np.linalg.norm((center - centroid) - ((center - centroid) @ up) * up)) / half_extent)
        align = float(approach @ -up)
        score = 0.5 * (1.0 - dist) + 0.5 * align
        out.append(GraspPose(RigidTransform(frame, center), width, score))
    if not out:
        raise NoCandidates(f"object is wider than the {max_width * 100:.0f} cm gripper everywhere")
    order = sorted(range(len(out)), key=lambda i: -out[i].score)
    return [out[i] for i in order]


def filter_grasps(grasps: Sequence[GraspPose], target_points: PointCloud, threshold: float) -> GraspPose:
    """Highest-scoring grasp whose center lies within ``threshold`` of a target point.

    Ties go to the earliest grasp in the input order.
    """
    if not grasps:
        raise ValueError("no grasps to filter")
    if target_points.n == 0:
        raise ValueError("no target points")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    centers = np.array([g.center for g in grasps])
    dist, _ = cKDTree(target_points.points).query(centers)
    kept = [i for i in range(len(grasps)) if dist[i] <= threshold]
    if not kept:
        raise NoFeasibleGrasp(f"no grasp within {threshold} m of the target points (closest {dist.min():.4f} m)")
    best = max(kept, key=lambda i: (grasps[i].score, -i))
    return grasps[best]


# ---------------------------------------------------------------- motion planning

@dataclass(frozen=True)
class CollisionModel:
    """Moving bodies for a planning query: the tool point plus an optionally attached object."""

    scene: SceneState
    attached: Optional[str] = None
    attach_offset: Optional[RigidTransform] = None
    ignore: Tuple[str, ...] = ()

    def obstacles(self, exclude: Sequence[str]) -> List[Posed]:
        bodies = [o.posed() for o in self.scene.objects if o.id not in exclude]
        if self.scene.table is not None:
            bodies.append(self.scene.table.posed())
        return bodies

    def collides(self, tcp: RigidTransform) -> bool:
        tol = self.scene.params.collision_tolerance
        skip = set(self.ignore)
        if self.attached:
            skip.add(self.attached)
        tool = Posed(PointShape(), tcp)
        if any(intersects(tool, body, tol) for body in self.obstacles(tuple(skip))):
            return True
        if self.attached:
            return check_collision(self.scene, self.attached, compose(tcp, self.attach_offset))
        return False

    def clearance(self, tcp: RigidTransform) -> float:
        skip = set(self.ignore)
        if self.attached:
            skip.add(self.attached)
        obstacles = self.obstacles(tuple(skip))
        tool = Posed(PointShape(), tcp)
        best = min((gjk_distance(tool, b) for b in obstacles), default=math.inf)
        if self.attached:
            obj = self.scene.get(self.attached)
            moving = obj.posed(compose(tcp, self.attach_offset))
            others = [b for b in self.obstacles((self.attached,))]
            best = min(best, min((gjk_distance(moving, b) for b in others), default=math.inf))
        return best


def collision_model(
    scene: SceneState, start: RigidTransform, attached_object: Optional[str] = None, ignore: Sequence[str] = ()
) -> CollisionModel:
    offset = None
    if attached_object is not None:
        offset = compose(invert(start), scene.get(attached_object).pose)
    return CollisionModel(scene, attached_object, offset, tuple(ignore))


def interpolate(start: RigidTransform, goal: RigidTransform, step: float = 0.02, rotation_step_deg: float = 5.0) -> List[RigidTransform]:
    """Linear translation and geodesic rotation from ``start`` to ``goal``, endpoints exact."""
    dist = float(np.linalg.norm(goal.translation - start.translation))
    rel = start.rotation.T @ goal.rotation
    angle = math.degrees(Rotation.from_matrix(rel).magnitude())
    if dist == 0.0 and angle < 1e-12:
        return [start]
    n = max(1, math.ceil(dist / step - 1e-9), math.ceil(angle / rotation_step_deg - 1e-9))
    fractions = np.arange(1, n) / n
    slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([start.rotation, goal.rotation])))
    mids = slerp(fractions).as_matrix() if n > 1 else []
    out = [start]
    for f, rot in zip(fractions, mids):
        out.append(RigidTransform(rot, (1 - f) * start.translation + f * goal.translation))
    out.append(goal)
    return out


def _via_path(start, goal, rng, step, rot_step) -> List[RigidTransform]:
    mid = 0.5 * (start.translation + goal.translation)
    via_t = mid + rng.uniform([-0.15, -0.15, 0.0], [0.15, 0.15, 0.25])
    rot = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([start.rotation, goal.rotation])))([0.5]).as_matrix()[0]
    via = RigidTransform(rot, via_t)
    return interpolate(start, via, step, rot_step) + interpolate(via, goal, step, rot_step)[1:]


def _path_free(model: CollisionModel, path: Sequence[RigidTransform]) -> bool:
    # endpoints were checked by the caller
    return not any(model.collides(p) for p in path[1:-1])


def _prepare(start, goal, scene, attached_object, ignore):
    model = collision_model(scene, start, attached_object, ignore)
    if model.collides(start):
        raise StartInCollision("start pose is in collision")
    if model.collides(goal):
        raise GoalInCollision("goal pose is in collision")
    return model


def plan_trajectory(
    start: RigidTransform,
    goal: RigidTransform,
    scene: SceneState,
    attached_object: Optional[str] = None,
    *,
    ignore: Sequence[str] = (),
    step: float = 0.02,
    rotation_step_deg: float = 5.0,
    via_attempts: int = 50,
    seed: int = 0,
) -> Trajectory:
    """Straight interpolation, falling back to seeded random via-points when it collides."""
    model = _prepare(start, goal, scene, attached_object, ignore)
    path = interpolate(start, goal, step, rotation_step_deg)
    if _path_free(model, path):
        return Trajectory(tuple(path), step=step)
    rng = np.random.default_rng(seed)
    for _ in range(via_attempts):
        path = _via_path(start, goal, rng, step, rotation_step_deg)
        if _path_free(model, path):
            return Trajectory(tuple(path), step=step)
    raise PlanningFailure(f"no collision-free path after {via_attempts} via-point attempts")


def trajectory_clearance(model: CollisionModel, traj: Trajectory, floor: float = 1e-3) -> float:
    """Smallest obstacle distance over interior waypoints (all waypoints if there are none)."""
    wps = traj.waypoints[1:-1] or traj.waypoints
    return max(min(model.clearance(w) for w in wps), floor)


def trajectory_cost(model: CollisionModel, traj: Trajectory, weight: float = 0.01) -> float:
    return traj.length() + weight / trajectory_clearance(model, traj)


def plan_trajectory_optimized(
    start: RigidTransform,
    goal: RigidTransform,
    scene: SceneState,
    attached_object: Optional[str] = None,
    candidates: int = 8,
    *,
    ignore: Sequence[str] = (),
    step: float = 0.02,
    rotation_step_deg: float = 5.0,
    via_attempts: int = 50,
    weight: float = 0.01,
    seed: int = 0,
    return_candidates: bool = False,
):
    """Lowest-cost path among ``candidates`` collision-free ones (straight first, then via-points).

    cost = path length + weight / minimum clearance.
    """
    if candidates < 1:
        raise ValueError("candidates must be >= 1")
    model = _prepare(start, goal, scene, attached_object, ignore)
    found: List[Trajectory] = []
    straight = interpolate(start, goal, step, rotation_step_deg)
    if _path_free(model, straight):
        found.append(Trajectory(tuple(straight), step=step))
    rng = np.random.default_rng(seed)
    attempts = 0
    budget = via_attempts * candidates
    while len(found) < candidates and attempts < budget:
        attempts += 1
        path = _via_path(start, goal, rng, step, rotation_step_deg)
        if _path_free(model, path):
            found.append(Trajectory(tuple(path), step=step))
    if not found:
        raise PlanningFailure(f"no collision-free candidate after {attempts} attempts")
    if len(found) == 1:
        best = found[0]
        costs = [trajectory_cost(model, best, weight)] if return_candidates else []
    else:
        costs = [trajectory_cost(model, t, weight) for t in found]
        best = found[int(np.argmin(costs))]
    if return_candidates:
        return best, found, costs
    return best


# ---------------------------------------------------------------- subtask execution

def _plan(config: PolicyConfig, start, goal, scene, attached=None, ignore=(), seed=0) -> Trajectory:
    kwargs = dict(
        ignore=ignore,
        step=config.step,
        rotation_step_deg=config.rotation_step_deg,
        via_attempts=config.via_attempts,
        seed=seed,
    )
    if config.optimized_candidates > 1:
        return plan_trajectory_optimized(
            start, goal, scene, attached, config.optimized_candidates, weight=config.clearance_weight, **kwargs
        )
    return plan_trajectory(start, goal, scene, attached, **kwargs)


def execute_subtask(
    now: Observation,
    goal: SubgoalPrediction,
    scene: SceneState,
    config: PolicyConfig = PolicyConfig(),
    suite: Optional[BackendSuite] = None,
    subtask_index: int = 0,
    object_id: Optional[str] = None,
) -> Tuple[ActionRecord, SceneState]:
    """Register, grasp, and carry the target object toward its subgoal pose.

    Any stage error is captured in the returned record and leaves the scene unchanged.
    """
    record = ActionRecord(subtask_index)
    object_id = object_id or goal.target
    try:
        if suite is not None and suite.segmenter is not None:
            now_mask = np.asarray(suite.segmenter.segment(now.image, object_id), dtype=bool)
        else:
            now_mask = now.mask_of(object_id)
        matcher = suite.matcher if suite is not None else None
        matches = match_correspondences(now, goal, object_id, matcher, now_mask=now_mask)
        record.matches = len(matches.corr)
        transform, rmse = estimate_goal_transform(
            matches.corr, matches.src, matches.dst, config.trim_fraction, config.trim_rmse
        )
        record.goal_transform, record.registration_rmse = transform, rmse

        grasps = propose_grasps(matches.src, config.max_grasps, config.gripper_max_width, scene.up)
        grasp = filter_grasps(grasps, matches.src, config.grasp_threshold)
        record.grasp = grasp

        seed = config.seed * 1000 + 10 * subtask_index
        home = config.home_pose()
        pregrasp = RigidTransform(grasp.pose.rotation, grasp.pose.translation + config.pregrasp_height * scene.up)
        approach = _plan(config, home, pregrasp, scene, ignore=(object_id,), seed=seed)
        descend = _plan(config, pregrasp, grasp.pose, scene, ignore=(object_id,), seed=seed + 1)
        place = compose(transform, grasp.pose)
        carry = _plan(config, grasp.pose, place, scene, attached=object_id, seed=seed + 2)

        reach = approach + descend
        reach = reach.with_commands(["open"] * (len(reach) - 1) + ["close"])
        carry = carry.with_commands(["close"] + ["hold"] * max(len(carry) - 2, 0) + (["open"] if len(carry) > 1 else []))
        record.trajectory = reach + carry
        motion = compose(carry.waypoints[-1], invert(grasp.pose))
        new_scene = apply_object_motion(scene, object_id, motion)
    except Exception as exc:  # any stage failure becomes a failed record
        record.outcome = "failed"
        record.error = type(exc).__name__
        record.reason = f"{type(exc).__name__}: {exc}"
        return record, scene
    return record, new_scene
