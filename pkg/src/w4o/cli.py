"""Command-line entry point: ``w4o run | bench | export-cloud | mock-server``.

Exit codes: 0 when everything succeeded, 1 when an episode or benchmark ran
to completion with failures, 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .errors import ConfigError, PortUnavailable, W4OError
from .geometry import back_project, write_ply
from .orchestrator import (
    BACKENDS,
    MODES,
    EpisodeConfig,
    TaskSpec,
    format_report,
    run_benchmark,
    run_episode,
)
from .scene_sim import TEMPLATES, default_camera, load_scene, render

EXIT_OK, EXIT_FAILURES, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("w4o")


def parse_seeds(text: str) -> List[int]:
    """``"1..5"`` (inclusive range), ``"3"`` or ``"1,4,9"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(p) for p in text.split("..", 1))
            if hi < lo:
                raise ConfigError(f"empty seed range {text!r}")
            seeds = list(range(lo, hi + 1))
        else:
            seeds = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    return seeds


def load_suite(path: str) -> List[TaskSpec]:
    """Suite file: a JSON list (or ``{"tasks": [...]}``) of template names or ``{template, task, name}`` objects."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read suite {path}: {exc}") from None
    entries = doc.get("tasks") if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        raise ConfigError("suite must be a non-empty list of tasks")
    specs = []
    for entry in entries:
        if isinstance(entry, str):
            entry = {"template": entry}
        if not isinstance(entry, dict) or entry.get("template") not in TEMPLATES:
            raise ConfigError(f"bad suite entry {entry!r}; templates: {sorted(TEMPLATES)}")
        specs.append(TaskSpec(entry["template"], entry.get("task"), entry.get("name")))
    return specs


def _write_json(doc: dict, out: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _slot_overrides(items: Sequence[str]):
    pairs = []
    for item in items or ():
        slot, sep, choice = item.partition("=")
        if not sep:
            raise ConfigError(f"--slot expects SLOT=BACKEND, got {item!r}")
        pairs.append((slot.strip(), choice.strip()))
    return tuple(pairs)


def _episode_config(args, **overrides) -> EpisodeConfig:
    fields = dict(
        template=getattr(args, "scene_template", "pick-place"),
        seed=getattr(args, "seed", 1),
        task=getattr(args, "task", None),
        backend=args.backend,
        slot_backends=_slot_overrides(args.slot),
        max_iters=args.max_iters,
        grasp_threshold=args.grasp_threshold,
        mode=args.mode,
        position_tol=args.position_tol,
        rotation_tol=args.rotation_tol,
        backend_url=args.backend_url,
    )
    fields.update(overrides)
    return EpisodeConfig(**fields)


def cmd_run(args) -> int:
    report = run_episode(_episode_config(args))
    _write_json(report.to_dict(), args.out)
    status = "success" if report.success else f"failed ({(report.failure or {}).get('reason')})"
    print(f"{report.config['template']} seed {report.config['seed']}: {status}", file=sys.stderr)
    return EXIT_OK if report.success else EXIT_FAILURES


def cmd_bench(args) -> int:
    suite = load_suite(args.suite)
    seeds = parse_seeds(args.seeds)
    if args.trials < 0:
        raise ConfigError("--trials must be >= 0")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    base = _episode_config(args, template=suite[0].template, seed=seeds[0])
    report = run_benchmark(suite, seeds, args.trials, base, workers=args.workers)
    _write_json(report.to_dict(), args.out)
    print(format_report(report), file=sys.stderr if args.out is None else sys.stdout)
    return EXIT_OK if report.total_successes == report.total_trials else EXIT_FAILURES


def cmd_export_cloud(args) -> int:
    try:
        scene, camera = load_scene(args.scene)
    except (OSError, ValueError, KeyError, W4OError) as exc:
        raise ConfigError(f"cannot load scene {args.scene}: {exc}") from None
    camera = camera or default_camera()
    view = render(scene, camera)
    cloud = back_project(view.depth, camera, labels=view.seg)
    write_ply(cloud, args.out)
    print(f"wrote {cloud.n} points to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_mock_server(args) -> int:
    from .gateway import MockServer

    try:
        script = json.loads(Path(args.script).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read script {args.script}: {exc}") from None
    try:
        server = MockServer(script, args.port)
    except (ValueError, PortUnavailable) as exc:
        raise ConfigError(str(exc)) from None
    print(f"mock backend listening on {server.url}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


def _add_episode_args(p: argparse.ArgumentParser, single: bool) -> None:
    if single:
        p.add_argument("--scene-template", default="pick-place", choices=sorted(TEMPLATES))
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--task", default=None, help="instruction; defaults to the template's task")
    p.add_argument("--backend", default="oracle", choices=BACKENDS)
    p.add_argument("--slot", action="append", metavar="SLOT=BACKEND", help="per-slot backend override (repeatable)")
    p.add_argument("--backend-url", default=None, help="remote backend base URL (W4O_BACKEND_URL wins)")
    p.add_argument("--mode", default="open_loop", choices=MODES)
    p.add_argument("--max-iters", type=int, default=3)
    p.add_argument("--grasp-threshold", type=float, default=0.05)
    p.add_argument("--position-tol", type=float, default=0.02)
    p.add_argument("--rotation-tol", type=float, default=10.0)
    p.add_argument("--out", default=None, help="JSON report path (stdout when omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="w4o", description="Subgoal-imagination manipulation pipeline on a tabletop simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one episode")
    _add_episode_args(p, single=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run a benchmark suite")
    p.add_argument("--suite", required=True, help="JSON list of task templates")
    p.add_argument("--seeds", default="1..5")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    _add_episode_args(p, single=False)
    p.set_defaults(func=cmd_bench, task=None)

    p = sub.add_parser("export-cloud", help="render a scene file and write its point cloud as PLY")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_cloud)

    p = sub.add_parser("mock-server", help="serve scripted backend responses")
    p.add_argument("--script", required=True)
    p.add_argument("--port", type=int, default=8700)
    p.set_defaults(func=cmd_mock_server)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
