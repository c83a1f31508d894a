"""Episode runner, success evaluation and benchmark aggregation."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, SubgoalChainError
from .gateway import Gateway, GatewayConfig, RemoteCritic, RemoteDepth, RemoteDreamer, RemotePlanner, RemoteSegmenter
from .geometry import RigidTransform, pose_error
from .manip_policy import ActionRecord, Observation, PolicyConfig, execute_subtask
from .mocks import mock_suite
from .oracle import OracleWorld, oracle_suite
from .scene_sim import TEMPLATES, SceneState, default_camera, default_task, oracle_future_scene, render, sample_layout
from .shapes import Box, Cylinder, Sphere
from .world_agents import BackendSuite, chain_subgoals, plan_subtasks, reflective_generate

log = logging.getLogger(__name__)

BACKENDS = ("oracle", "mock", "remote")
MODES = ("open_loop", "closed_loop")


@dataclass(frozen=True)
class EpisodeConfig:
    template: str = "pick-place"
    seed: int = 1
    task: Optional[str] = None
    backend: str = "oracle"
    slot_backends: Tuple[Tuple[str, str], ...] = ()
    max_iters: int = 3
    grasp_threshold: float = 0.05
    mode: str = "open_loop"
    position_tol: float = 0.02
    rotation_tol: float = 10.0
    planner_seed: int = 0
    backend_url: Optional[str] = None

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if not (self.position_tol > 0 and self.rotation_tol > 0):
            raise ConfigError("tolerances must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        for slot, choice in (("*", self.backend), *self.slot_backends):
            if choice not in BACKENDS:
                raise ConfigError(f"backend for {slot} must be one of {BACKENDS}, got {choice!r}")
            if slot != "*" and slot not in BackendSuite.SLOTS:
                raise ConfigError(f"unknown backend slot {slot!r}")
        if self.template not in TEMPLATES:
            raise ConfigError(f"unknown scene template {self.template!r}")

    @property
    def resolved_task(self) -> str:
        return self.task or default_task(self.template)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["slot_backends"] = dict(self.slot_backends)
        doc["task"] = self.resolved_task
        return doc


@dataclass
class EpisodeReport:
    config: dict
    plan: Optional[dict] = None
    records: List[ActionRecord] = field(default_factory=list)
    subgoals: List[dict] = field(default_factory=list)
    success: bool = False
    failure: Optional[dict] = None
    target: Optional[str] = None
    final_scene: Optional[dict] = None
    goal_scene: Optional[dict] = None
    final_error: Optional[dict] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        doc = {
            "config": self.config,
            "plan": self.plan,
            "subgoals": self.subgoals,
            "records": [r.to_dict() for r in self.records],
            "target": self.target,
            "final_scene": self.final_scene,
            "goal_scene": self.goal_scene,
            "final_error": self.final_error,
            "failure": self.failure,
            "success": self.success,
        }
        if include_timings:
            doc["timings"] = self.timings
        return doc


# ---------------------------------------------------------------- success

def _symmetric_rotation_error(shape, a: np.ndarray, b: np.ndarray) -> float:
    if isinstance(shape, Sphere):
        return 0.0
    if isinstance(shape, Cylinder):
        cos = abs(float(a[:, 2] @ b[:, 2]))
        return math.degrees(math.acos(min(1.0, cos)))
    rel = a.T @ b
    flips = (np.eye(3), np.diag([1.0, -1.0, -1.0]), np.diag([-1.0, 1.0, -1.0]), np.diag([-1.0, -1.0, 1.0]))
    return min(pose_error(RigidTransform(), RigidTransform(rel @ f))[1] for f in flips)


def object_pose_error(final: SceneState, goal: SceneState, object_id: str) -> Tuple[float, float]:
    """(translation error, rotation error modulo the shape's symmetries)."""
    a = final.get(object_id)
    b = goal.get(object_id)
    dt = float(np.linalg.norm(a.pose.translation - b.pose.translation))
    dr = _symmetric_rotation_error(a.shape, a.pose.rotation, b.pose.rotation)
    return dt, dr


def evaluate_success(
    final: SceneState, goal: SceneState, object_id: str, tol: Tuple[float, float] = (0.02, 10.0)
) -> bool:
    dt, dr = object_pose_error(final, goal, object_id)
    return dt <= tol[0] and dr <= tol[1]


def recompute_success(report: dict) -> bool:
    """Success flag from a serialized report alone."""
    if not report.get("final_scene") or not report.get("goal_scene"):
        return False
    if any(r["outcome"] != "succeeded" for r in report["records"]):
        return False
    if report["plan"] is None or len(report["records"]) != len(report["plan"]["subtasks"]):
        return False
    obj = report["target"]
    fin = report["final_scene"]["poses"][obj]
    gol = report["goal_scene"]["poses"][obj]
    kind = report["final_scene"]["shapes"][obj]
    shape = {"sphere": Sphere(1.0), "cylinder": Cylinder(1.0, 1.0), "box": Box((1.0, 1.0, 1.0))}[kind]
    dt = float(np.linalg.norm(np.subtract(fin["translation"], gol["translation"])))
    dr = _symmetric_rotation_error(shape, np.array(fin["rotation"]), np.array(gol["rotation"]))
    cfg = report["config"]
    return dt <= cfg["position_tol"] and dr <= cfg["rotation_tol"]


def _scene_doc(scene: SceneState) -> dict:
    return {"poses": scene.pose_table(), "shapes": {o.id: o.shape.kind for o in scene.objects}}


# ---------------------------------------------------------------- episodes

def build_suite(config: EpisodeConfig, camera) -> Tuple[BackendSuite, OracleWorld]:
    slots = dict(config.slot_backends)
    choices = {s: slots.get(s, config.backend) for s in BackendSuite.SLOTS}
    oracle, world = oracle_suite(camera)
    mock, _ = mock_suite(camera, world=world)
    remote = None
    if "remote" in choices.values():
        url = config.backend_url or GatewayConfig().base_url
        remote = Gateway(GatewayConfig(base_url=url))
    remote_cls = {
        "planner": RemotePlanner,
        "dreamer": RemoteDreamer,
        "critic": RemoteCritic,
        "depth_estimator": RemoteDepth,
        "segmenter": RemoteSegmenter,
    }
    suite = BackendSuite(name=config.backend, matcher=oracle.matcher)
    for slot, choice in choices.items():
        if choice == "oracle":
            setattr(suite, slot, getattr(oracle, slot))
        elif choice == "mock":
            setattr(suite, slot, getattr(mock, slot))
        else:
            setattr(suite, slot, remote_cls[slot](remote))
    if config.backend == "remote" and not slots:
        suite.matcher = None
    return suite, world


def _root_cause(exc: BaseException) -> BaseException:
    seen = set()
    while id(exc) not in seen:
        seen.add(id(exc))
        nxt = getattr(exc, "cause", None)
        if isinstance(nxt, BaseException):
            exc = nxt
            continue
        break
    return exc


def run_episode(
    config: EpisodeConfig,
    suite: Optional[BackendSuite] = None,
    world: Optional[OracleWorld] = None,
    policy: Optional[PolicyConfig] = None,
) -> EpisodeReport:
    """Plan, imagine subgoals, execute them and score the result; never raises for stage errors."""
    report = EpisodeReport(config=config.to_dict())
    timings = report.timings
    stage = "setup"
    index = None
    t0 = time.perf_counter()
    try:
        scene = sample_layout(config.template, config.seed)
        camera = default_camera()
        if suite is None:
            suite, world = build_suite(config, camera)
        suite.validate()
        observe = world.observe if world is not None else (lambda s: render(s, camera))
        policy = policy or PolicyConfig(grasp_threshold=config.grasp_threshold, seed=config.planner_seed)
        now = Observation.from_view(observe(scene), camera)
        timings["setup"] = time.perf_counter() - t0

        stage = "plan"
        t = time.perf_counter()
        plan = plan_subtasks(config.resolved_task, now.image, suite.planner)
        report.plan = plan.to_dict()
        report.target = plan.targets[-1] if plan.targets else None
        timings["plan"] = time.perf_counter() - t

        stage = "goal"
        goal_scene = scene
        for subtask in plan.subtasks:
            goal_scene = oracle_future_scene(goal_scene, subtask)
        report.goal_scene = _scene_doc(goal_scene)

        timings["world_model"] = 0.0
        timings["policy"] = 0.0
        predictions = []
        if config.mode == "open_loop":
            stage = "world_model"
            t = time.perf_counter()
            predictions = chain_subgoals(now.image, plan, suite, config.max_iters, reference=now)
            report.subgoals = [p.metadata() for p in predictions]
            timings["world_model"] += time.perf_counter() - t

        for i, subtask in enumerate(plan.subtasks):
            index = i
            if i > 0:
                now = Observation.from_view(observe(scene), camera)
            if config.mode == "closed_loop":
                stage = "world_model"
                t = time.perf_counter()
                pred = reflective_generate(
                    now.image, subtask, suite, config.max_iters, target=plan.targets[i], reference=now
                )
                report.subgoals.append(pred.metadata())
                timings["world_model"] += time.perf_counter() - t
            else:
                pred = predictions[i]
            stage = "policy"
            t = time.perf_counter()
            record, scene = execute_subtask(now, pred, scene, policy, suite, subtask_index=i, object_id=plan.targets[i])
            timings["policy"] += time.perf_counter() - t
            report.records.append(record)
            if not record.succeeded:
                report.failure = {"stage": "policy", "subtask_index": i, "error": record.error, "reason": record.reason}
                break

        index = None
        stage = "evaluate"
        report.final_scene = _scene_doc(scene)
        dt, dr = object_pose_error(scene, goal_scene, report.target)
        report.final_error = {"position": dt, "rotation_deg": dr}
        all_ok = len(report.records) == len(plan.subtasks) and all(r.succeeded for r in report.records)
        report.success = all_ok and evaluate_success(scene, goal_scene, report.target, (config.position_tol, config.rotation_tol))
        if all_ok and not report.success:
            report.failure = {"stage": "evaluate", "subtask_index": None, "error": "OutOfTolerance",
                              "reason": f"final pose off by {dt * 100:.2f} cm / {dr:.2f} deg"}
    except Exception as exc:  # the harness must survive any stage failure
        root = _root_cause(exc)
        if isinstance(exc, SubgoalChainError):
            index = exc.index
            report.subgoals = [p.metadata() for p in exc.predictions]
        report.success = False
        report.failure = {
            "stage": stage,
            "subtask_index": index,
            "error": type(root).__name__,
            "reason": f"{type(exc).__name__}: {exc}",
        }
        log.info("episode %s/%d failed at %s: %s", config.template, config.seed, stage, exc)
    timings["total"] = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class TaskSpec:
    template: str
    task: Optional[str] = None
    name: Optional[str] = None

    @property
    def label(self) -> str:
        return self.name or self.template


@dataclass
class TaskResult:
    name: str
    successes: int
    trials: int
    failures: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.successes <= self.trials):
            raise ValueError("successes must lie in [0, trials]")


@dataclass
class BenchmarkReport:
    tasks: List[TaskResult]
    seeds: Tuple[int, ...] = ()
    trials_per_seed: int = 0
    backend: str = "oracle"
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def total_successes(self) -> int:
        return sum(t.successes for t in self.tasks)

    @property
    def total_trials(self) -> int:
        return sum(t.trials for t in self.tasks)

    @property
    def average_defined(self) -> bool:
        return self.total_trials > 0

    @property
    def average_success_rate(self) -> float:
        """Percent: all successes over all trials (0 when there were no trials)."""
        if not self.average_defined:
            return 0.0
        return 100.0 * self.total_successes / self.total_trials

    def to_dict(self, include_timings: bool = True) -> dict:
        doc = {
            "backend": self.backend,
            "seeds": list(self.seeds),
            "trials_per_seed": self.trials_per_seed,
            "tasks": [asdict(t) for t in self.tasks],
            "total_successes": self.total_successes,
            "total_trials": self.total_trials,
            "average_success_rate": self.average_success_rate,
            "average_defined": self.average_defined,
        }
        if include_timings:
            doc["timings"] = self.timings
        return doc


def run_benchmark(
    suite: Sequence[TaskSpec],
    seeds: Sequence[int],
    trials_per_seed: int,
    config: EpisodeConfig = EpisodeConfig(),
    workers: int = 1,
) -> BenchmarkReport:
    """Every task x seed x trial; the trial index only changes the motion-planner seed."""
    if not suite:
        raise ValueError("benchmark suite is empty")
    if trials_per_seed < 0:
        raise ValueError("trials_per_seed must be >= 0")
    t0 = time.perf_counter()
    jobs = []
    for k, spec in enumerate(suite):
        for seed in seeds:
            for trial in range(trials_per_seed):
                cfg = replace(config, template=spec.template, task=spec.task, seed=int(seed), planner_seed=trial)
                jobs.append((k, cfg))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda job: run_episode(job[1]), jobs))
    else:
        reports = [run_episode(cfg) for _, cfg in jobs]
    results = [TaskResult(spec.label, 0, 0) for spec in suite]
    for (k, _), rep in zip(jobs, reports):
        res = results[k]
        res.trials += 1
        if rep.success:
            res.successes += 1
        else:
            err = (rep.failure or {}).get("error", "Unknown")
            res.failures[err] = res.failures.get(err, 0) + 1
    for res in results:
        res.failures = dict(sorted(res.failures.items()))
    return BenchmarkReport(results, tuple(int(s) for s in seeds), trials_per_seed, config.backend, {"total": time.perf_counter() - t0})


def format_percent(value: float) -> str:
    if abs(value - round(value)) < 1e-9:
        return f"{int(round(value))}%"
    return f"{value:.1f}%"


def format_report(report: BenchmarkReport) -> str:
    """Plain-text table: one row per task as "successes / trials", then the average."""
    rows = [(t.name, f"{t.successes} / {t.trials}", format_percent(100.0 * t.successes / t.trials) if t.trials else "n/a")
            for t in report.tasks]
    avg = format_percent(report.average_success_rate)
    if not report.average_defined:
        avg += " (no trials)"
    rows.append(("Average", f"{report.total_successes} / {report.total_trials}", avg))
    headers = ("Task", "Success", "Rate")
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(3)]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(headers), "-+-".join("-" * w for w in widths)]
    out += [line(r) for r in rows[:-1]]
    out.append("-+-".join("-" * w for w in widths))
    out.append(line(rows[-1]))
    return "\n".join(out)


def format_summary_row(report: BenchmarkReport, label: str = "Ours") -> str:
    """Single-line layout: label, one "s / n" cell per task, average percentage last."""
    cells = [label] + [f"{t.successes} / {t.trials}" for t in report.tasks] + [format_percent(report.average_success_rate)]
    return " | ".join(cells)
