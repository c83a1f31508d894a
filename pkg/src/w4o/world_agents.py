"""Task decomposition, the generate/critique/revise subgoal loop, and subgoal lifting."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Tuple

import numpy as np

from .errors import (
    AgentError,
    BackendCallError,
    EmptyPlan,
    ObjectNotFound,
    PlannerBackendFailure,
    ReflectionBudgetExhausted,
    ScaleCalibrationFailure,
    SubgoalChainError,
)
from .geometry import DepthMap, PointCloud, back_project

if TYPE_CHECKING:
    from .manip_policy import Observation

log = logging.getLogger(__name__)

MIN_SHARED_BACKGROUND = 100
DEFAULT_MAX_ITERS = 3


@dataclass(frozen=True)
class SubtaskPlan:
    task: str
    subtasks: Tuple[str, ...]
    targets: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.subtasks or any(not s.strip() for s in self.subtasks):
            raise EmptyPlan("plan must hold at least one non-empty subtask")
        if self.targets and len(self.targets) != len(self.subtasks):
            raise ValueError("one target object per subtask")

    def __len__(self):
        return len(self.subtasks)

    def to_dict(self) -> dict:
        return {"task": self.task, "subtasks": list(self.subtasks), "targets": list(self.targets)}


@dataclass(frozen=True)
class ReflectionVerdict:
    decision: str
    revised_prompt: Optional[str] = None
    rationale: str = ""

    def __post_init__(self):
        if self.decision not in ("accept", "revise"):
            raise ValueError(f"decision must be accept or revise, got {self.decision!r}")
        if self.decision == "revise" and not (self.revised_prompt and self.revised_prompt.strip()):
            raise ValueError("a revise verdict needs a non-empty revised prompt")
        if self.decision == "accept" and self.revised_prompt is not None:
            raise ValueError("an accept verdict carries no revised prompt")

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"


@dataclass(frozen=True, eq=False)
class SubgoalPrediction:
    image: np.ndarray
    depth: DepthMap
    cloud: PointCloud
    object_mask: np.ndarray
    iterations_used: int
    prompt_history: Tuple[str, ...]
    target: str = ""
    depth_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "prompt_history", tuple(self.prompt_history))
        if self.iterations_used < 1 or len(self.prompt_history) != self.iterations_used:
            raise ValueError("prompt_history must have one prompt per iteration used")

    def metadata(self) -> dict:
        return {
            "target": self.target,
            "iterations_used": self.iterations_used,
            "prompt_history": list(self.prompt_history),
            "depth_scale": self.depth_scale,
            "object_pixels": int(np.count_nonzero(self.object_mask)),
        }


# ---------------------------------------------------------------- backend slots

class Planner:
    def plan(self, task: str, image: np.ndarray) -> Tuple[List[str], List[str]]:
        """Return (subtasks, target object id per subtask)."""
        raise NotImplementedError


class Dreamer:
    def dream(self, image: np.ndarray, prompt: str) -> np.ndarray:
        raise NotImplementedError


class Critic:
    def critique(self, before: np.ndarray, after: np.ndarray, subtask: str) -> ReflectionVerdict:
        raise NotImplementedError


class DepthEstimator:
    def estimate(self, image: np.ndarray) -> DepthMap:
        raise NotImplementedError


class Segmenter:
    def segment(self, image: np.ndarray, label: str) -> np.ndarray:
        raise NotImplementedError


@dataclass
class BackendSuite:
    planner: Optional[Planner] = None
    dreamer: Optional[Dreamer] = None
    critic: Optional[Critic] = None
    depth_estimator: Optional[DepthEstimator] = None
    segmenter: Optional[Segmenter] = None
    # Correspondence matcher for the low-level policy; None selects the geometric fallback.
    matcher: Optional[object] = None
    name: str = "custom"

    SLOTS = ("planner", "dreamer", "critic", "depth_estimator", "segmenter")

    def validate(self) -> None:
        missing = [s for s in self.SLOTS if getattr(self, s) is None]
        if missing:
            raise ValueError(f"backend suite is missing: {', '.join(missing)}")


# ---------------------------------------------------------------- operations

def plan_subtasks(task: str, image: np.ndarray, backend: Planner) -> SubtaskPlan:
    if not task or not task.strip():
        raise ValueError("task must be a non-empty string")
    try:
        subtasks, targets = backend.plan(task, image)
    except AgentError:
        raise
    except Exception as exc:
        raise PlannerBackendFailure(f"planner failed: {exc}") from exc
    if not subtasks:
        raise EmptyPlan(f"planner returned no subtasks for {task!r}")
    return SubtaskPlan(task, tuple(subtasks), tuple(targets))


def segment_object(image: np.ndarray, label: str, backend: Segmenter) -> np.ndarray:
    if not label:
        raise ValueError("label must be non-empty")
    mask = np.asarray(backend.segment(image, label), dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if not mask.any():
        raise ObjectNotFound(f"no pixels labelled {label!r}")
    return mask


def shared_background(reference: "Observation", object_mask: np.ndarray, predicted: DepthMap) -> np.ndarray:
    """Pixels that are background in both views and carry depth in both."""
    return (reference.seg == 0) & ~object_mask & reference.depth.valid & predicted.valid


def _lift(image, suite: BackendSuite, reference: "Observation", object_mask: np.ndarray):
    predicted = suite.depth_estimator.estimate(image)
    cam = reference.camera
    if predicted.values.shape != cam.shape:
        raise ValueError(f"depth backend returned {predicted.values.shape}, camera is {cam.shape}")
    background = shared_background(reference, object_mask, predicted)
    n = int(np.count_nonzero(background))
    if n < MIN_SHARED_BACKGROUND:
        raise ScaleCalibrationFailure(f"only {n} shared background pixels (need {MIN_SHARED_BACKGROUND})")
    ratios = reference.depth.values[background] / predicted.values[background]
    scale = float(np.median(ratios))
    depth = predicted.scaled(scale)
    return depth, scale, background


def lift_subgoal(
    image: np.ndarray,
    suite: BackendSuite,
    reference: "Observation",
    object_mask: Optional[np.ndarray] = None,
) -> Tuple[DepthMap, PointCloud]:
    """Metric depth and world cloud for a generated image.

    Predicted depth is rescaled by the median ratio of reference to predicted
    depth over pixels that are background in both views.
    """
    if object_mask is None:
        object_mask = np.zeros(reference.camera.shape, dtype=bool)
    depth, _, _ = _lift(image, suite, reference, np.asarray(object_mask, dtype=bool))
    return depth, back_project(depth, reference.camera)


def reflective_generate(
    image: np.ndarray,
    subtask: str,
    suite: BackendSuite,
    max_iters: int = DEFAULT_MAX_ITERS,
    *,
    target: str,
    reference: "Observation",
) -> SubgoalPrediction:
    """Generate a subgoal image for ``subtask`` and lift it once the critic accepts."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    prompt = subtask
    prompts: List[str] = []
    verdicts: List[ReflectionVerdict] = []
    candidate = None
    accepted = False
    for k in range(max_iters):
        prompts.append(prompt)
        try:
            candidate = np.asarray(suite.dreamer.dream(image, prompt))
            verdict = suite.critic.critique(image, candidate, subtask)
        except Exception as exc:
            raise BackendCallError(f"backend failed at reflection iteration {k}: {exc}", k, exc) from exc
        verdicts.append(verdict)
        log.debug("iteration %d prompt=%r verdict=%s", k, prompt, verdict.decision)
        if verdict.accepted:
            accepted = True
            break
        prompt = verdict.revised_prompt
    if not accepted:
        raise ReflectionBudgetExhausted(
            f"critic rejected all {max_iters} candidates for {subtask!r}", candidate, verdicts
        )

    iteration = len(prompts) - 1
    try:
        mask = segment_object(candidate, target, suite.segmenter)
        depth, scale, background = _lift(candidate, suite, reference, mask)
    except AgentError:
        raise
    except Exception as exc:
        raise BackendCallError(f"lifting failed after iteration {iteration}: {exc}", iteration, exc) from exc
    labels = np.where(mask, 1, 0)
    cloud = back_project(depth, reference.camera, mask | background, labels=labels)
    return SubgoalPrediction(
        image=candidate,
        depth=depth,
        cloud=cloud,
        object_mask=mask,
        iterations_used=len(prompts),
        prompt_history=tuple(prompts),
        target=target,
        depth_scale=scale,
    )


def chain_subgoals(
    initial: np.ndarray,
    plan: SubtaskPlan,
    suite: BackendSuite,
    max_iters: int = DEFAULT_MAX_ITERS,
    *,
    reference: "Observation",
) -> List[SubgoalPrediction]:
    """Open-loop chaining: subgoal i+1 is dreamed from generated subgoal image i."""
    if not plan.targets:
        raise ValueError("plan carries no target objects")
    predictions: List[SubgoalPrediction] = []
    current = initial
    for i, (subtask, target) in enumerate(zip(plan.subtasks, plan.targets)):
        try:
            pred = reflective_generate(current, subtask, suite, max_iters, target=target, reference=reference)
        except Exception as exc:
            raise SubgoalChainError(f"subtask {i} ({subtask!r}) failed: {exc}", i, predictions, exc) from exc
        predictions.append(pred)
        current = pred.image
    return predictions
