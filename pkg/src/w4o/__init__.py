"""Tabletop manipulation by imagined subgoals.

A planner splits an instruction into subtasks, a generative world model
imagines the scene after each subtask (checked by a critic and revised when
needed), and a geometric policy registers the imagined object against the
current one, picks a grasp and plans a collision-free path to realize it.
Every learned component sits behind a small backend interface; the package
ships ground-truth (oracle) and mock backends driven by a built-in simulator,
plus an HTTP client for remote ones.
"""

from .errors import W4OError
from .geometry import CameraModel, DepthMap, PointCloud, RigidTransform, back_project, project, umeyama_align
from .orchestrator import EpisodeConfig, run_benchmark, run_episode
from .scene_sim import SceneState, render, sample_layout

__version__ = "0.1.0"

__all__ = [
    "W4OError",
    "CameraModel",
    "DepthMap",
    "PointCloud",
    "RigidTransform",
    "back_project",
    "project",
    "umeyama_align",
    "EpisodeConfig",
    "run_benchmark",
    "run_episode",
    "SceneState",
    "render",
    "sample_layout",
]
