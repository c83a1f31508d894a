"""Deterministic in-process mock backends with call recording."""

from __future__ import annotations

import threading
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import CameraModel, DepthMap
from .oracle import OracleCritic, OracleDepth, OracleDreamer, OracleMatcher, OraclePlanner, OracleSegmenter, OracleWorld
from .world_agents import BackendSuite, Critic, DepthEstimator, Dreamer, Planner, ReflectionVerdict, Segmenter


class Recorder:
    """Mixin keeping an ordered log of the arguments each call received."""

    def __init__(self):
        self.calls: List[tuple] = []
        self._rec_lock = threading.Lock()

    def _record(self, *args):
        with self._rec_lock:
            self.calls.append(args)

    @property
    def call_count(self) -> int:
        return len(self.calls)


class ScriptedPlanner(Planner, Recorder):
    def __init__(self, subtasks: Sequence[str], targets: Sequence[str]):
        Recorder.__init__(self)
        self.subtasks = list(subtasks)
        self.targets = list(targets)

    def plan(self, task, image):
        self._record(task, image)
        return list(self.subtasks), list(self.targets)


class EchoDreamer(Dreamer, Recorder):
    """Returns the input image unchanged (or ``transform(image, prompt)`` when given)."""

    def __init__(self, transform=None):
        Recorder.__init__(self)
        self.transform = transform

    def dream(self, image, prompt):
        self._record(image, prompt)
        return image.copy() if self.transform is None else self.transform(image, prompt)


class ScriptedCritic(Critic, Recorder):
    """Replays verdicts in order; the last one repeats once the script runs out.

    A ``{subtask}`` placeholder in a revised prompt is filled with the
    instruction under review.
    """

    def __init__(self, verdicts: Sequence[ReflectionVerdict]):
        Recorder.__init__(self)
        if not verdicts:
            raise ValueError("script needs at least one verdict")
        self.verdicts = list(verdicts)

    @classmethod
    def accept_at(cls, k: Optional[int]) -> "ScriptedCritic":
        """Reject k-1 times then accept on call k (1-based); ``None`` rejects forever."""
        if k is None:
            return cls([ReflectionVerdict("revise", "{subtask}. Try again", "scripted reject")])
        script = [ReflectionVerdict("revise", f"{{subtask}}. Revision {i + 1}", "scripted reject") for i in range(k - 1)]
        return cls(script + [ReflectionVerdict("accept", None, "scripted accept")])

    def critique(self, before, after, subtask):
        self._record(before, after, subtask)
        verdict = self.verdicts[min(len(self.calls) - 1, len(self.verdicts) - 1)]
        if verdict.revised_prompt and "{subtask}" in verdict.revised_prompt:
            verdict = replace(verdict, revised_prompt=verdict.revised_prompt.replace("{subtask}", subtask))
        return verdict


class ConstantDepth(DepthEstimator, Recorder):
    def __init__(self, depth: DepthMap):
        Recorder.__init__(self)
        self.depth = depth

    def estimate(self, image):
        self._record(image)
        return self.depth


class ConstantSegmenter(Segmenter, Recorder):
    def __init__(self, mask: np.ndarray):
        Recorder.__init__(self)
        self.mask = np.asarray(mask, dtype=bool)

    def segment(self, image, label):
        self._record(image, label)
        return self.mask


class ScaledDepth(DepthEstimator, Recorder):
    """Wraps a depth backend and multiplies its output by a constant (unknown-scale monocular depth)."""

    def __init__(self, inner: DepthEstimator, factor: float):
        Recorder.__init__(self)
        self.inner = inner
        self.factor = factor

    def estimate(self, image):
        self._record(image)
        return self.inner.estimate(image).scaled(self.factor)


class FirstTryLazyDreamer(Dreamer, Recorder):
    """Returns the input unchanged on the first prompt of each reflection loop, then defers to ``inner``.

    A loop is recognised by the input image: the first call for a given image
    is the lazy one.
    """

    def __init__(self, inner: Dreamer):
        Recorder.__init__(self)
        self.inner = inner
        self._seen = set()

    def dream(self, image, prompt):
        self._record(image, prompt)
        key = image.tobytes()
        if key not in self._seen:
            self._seen.add(key)
            return image.copy()
        return self.inner.dream(image, prompt)


class RecordingWrapper(Recorder):
    """Forwards any backend method while logging its positional arguments."""

    def __init__(self, inner, method: str):
        Recorder.__init__(self)
        self.inner = inner
        self.method = method

    def __getattr__(self, name):
        if name == self.method:
            target = getattr(self.inner, name)

            def call(*args):
                self._record(*args)
                return target(*args)

            return call
        raise AttributeError(name)


def mock_suite(
    camera: CameraModel, depth_factor: float = 0.5, world: Optional[OracleWorld] = None
) -> Tuple[BackendSuite, OracleWorld]:
    """Ground-truth world behind imperfect backends.

    The dreamer ignores the first prompt of every loop (forcing one revision)
    and depth comes back at a wrong constant scale, so both the reflection
    loop and the scale calibration are exercised.
    """
    world = world or OracleWorld(camera)
    suite = BackendSuite(
        planner=OraclePlanner(),
        dreamer=FirstTryLazyDreamer(OracleDreamer(world)),
        critic=OracleCritic(world),
        depth_estimator=ScaledDepth(OracleDepth(world), depth_factor),
        segmenter=OracleSegmenter(world),
        matcher=OracleMatcher(world),
        name="mock",
    )
    return suite, world
