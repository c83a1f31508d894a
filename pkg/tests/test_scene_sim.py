import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from w4o.errors import SceneError, UnknownObject, UnknownTemplate, UnparsableSubtask
from w4o.geometry import CameraModel, RigidTransform, back_project, invert, project_points
from w4o.scene_sim import (
    SceneObject,
    SceneState,
    apply_object_motion,
    check_collision,
    default_camera,
    default_task,
    load_scene,
    oracle_future_scene,
    parse_subtask,
    render,
    sample_layout,
    surface_distance,
)
from w4o.shapes import Box, Cylinder, PointShape, Posed, Sphere, gjk_distance, intersects


# ---------------------------------------------------------------- shapes

def test_shape_validation():
    with pytest.raises(ValueError):
        Sphere(0.0)
    with pytest.raises(ValueError):
        Box((0.1, -0.1, 0.1))
    with pytest.raises(ValueError):
        Cylinder(0.1, 0.0)


@pytest.mark.parametrize(
    "shape, point, expected",
    [
        (Sphere(0.5), [1.0, 0, 0], 0.5),
        (Sphere(0.5), [0.0, 0, 0], -0.5),
        (Box((1.0, 2.0, 4.0)), [0.0, 0, 0], -0.5),
        (Box((1.0, 2.0, 4.0)), [1.5, 2.0, 0], math.hypot(1.0, 1.0)),
        (Cylinder(0.5, 2.0), [0.0, 0, 1.5], 0.5),
        (Cylinder(0.5, 2.0), [2.0, 0, 0], 1.5),
        (Cylinder(0.5, 2.0), [0.0, 0, 0.2], -0.5),
    ],
)
def test_sdf_hand_values(shape, point, expected):
    assert float(shape.sdf(np.array([point]))[0]) == pytest.approx(expected, abs=1e-15)


def test_ray_hits_sphere_box_cylinder():
    o = np.array([0.0, 0.0, -5.0])
    d = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    np.testing.assert_allclose(Sphere(1.0).ray_hits(o, d), [4.0, np.inf])
    np.testing.assert_allclose(Box((2.0, 2.0, 2.0)).ray_hits(o, d), [4.0, np.inf])
    np.testing.assert_allclose(Cylinder(1.0, 2.0).ray_hits(o, d), [4.0, np.inf])
    # side entry into a cylinder
    side = Cylinder(1.0, 2.0).ray_hits(np.array([-3.0, 0.0, 0.0]), np.array([[1.0, 0.0, 0.0]]))
    assert side[0] == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("gap", [0.3, 0.05, 0.001])
def test_gjk_matches_analytic_sphere_box_distance(gap):
    box = Posed(Box((1.0, 1.0, 1.0)), RigidTransform())
    ball = Posed(Sphere(0.2), RigidTransform.from_translation([0.5 + 0.2 + gap, 0.1, -0.2]))
    assert gjk_distance(box, ball) == pytest.approx(gap, abs=1e-9)


def test_gjk_rotated_boxes():
    a = Posed(Box((1.0, 1.0, 1.0)), RigidTransform())
    # a cube rotated 45 deg about z reaches sqrt(0.5) along x
    b = Posed(Box((1.0, 1.0, 1.0)), RigidTransform.from_rotvec([0, 0, math.pi / 4], [0.5 + math.sqrt(0.5) + 0.1, 0, 0]))
    assert gjk_distance(a, b) == pytest.approx(0.1, abs=1e-9)


def test_intersects_tolerance_semantics():
    a = Posed(Sphere(0.1), RigidTransform())
    touching = Posed(Sphere(0.1), RigidTransform.from_translation([0.2, 0, 0]))
    overlap = Posed(Sphere(0.1), RigidTransform.from_translation([0.195, 0, 0]))
    apart = Posed(Sphere(0.1), RigidTransform.from_translation([0.3, 0, 0]))
    assert not intersects(a, touching, tolerance=0.001)
    assert intersects(a, overlap, tolerance=0.001)
    assert not intersects(a, apart, tolerance=0.0)


def test_point_shape_inside_box():
    box = Posed(Box((0.2, 0.2, 0.2)), RigidTransform())
    assert intersects(Posed(PointShape(), RigidTransform()), box)
    assert not intersects(Posed(PointShape(), RigidTransform.from_translation([0.2, 0, 0])), box)


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(-0.6, 0.6), y=st.floats(-0.6, 0.6), z=st.floats(-0.6, 0.6),
    yaw=st.floats(-math.pi, math.pi),
)
def test_gjk_agrees_with_sdf_for_sphere_probe(x, y, z, yaw):
    body = Posed(Cylinder(0.1, 0.3), RigidTransform.from_rotvec([0.4, 0, yaw]))
    centre = np.array([x, y, z])
    sdf = float(body.sdf(centre[None])[0])
    probe = Posed(Sphere(0.05), RigidTransform.from_translation(centre))
    if sdf > 0.05 + 1e-6:
        assert gjk_distance(body, probe) == pytest.approx(sdf - 0.05, abs=1e-7)
    elif sdf < 0.05 - 1e-6:
        assert gjk_distance(body, probe) == 0.0


# ---------------------------------------------------------------- layouts

def test_layout_is_deterministic():
    a = sample_layout("pick-place", 3)
    b = sample_layout("pick-place", 3)
    assert a.same_as(b)
    for oa, ob in zip(a.objects, b.objects):
        np.testing.assert_array_equal(oa.pose.translation, ob.pose.translation)
        np.testing.assert_array_equal(oa.pose.rotation, ob.pose.rotation)


@pytest.mark.parametrize("template", ["pick-place", "take-off-rack"])
def test_seeds_give_distinct_collision_free_layouts(template):
    scenes = [sample_layout(template, s) for s in range(1, 6)]
    for i in range(5):
        for j in range(i + 1, 5):
            for oid in scenes[i].ids:
                assert not scenes[i].get(oid).pose.equals(scenes[j].get(oid).pose, atol=1e-6)
    for scene in scenes:
        for oid in scene.ids:
            assert not check_collision(scene, oid, scene.get(oid).pose)


def test_unknown_template():
    with pytest.raises(UnknownTemplate):
        sample_layout("stack-cups", 1)
    with pytest.raises(UnknownTemplate):
        default_task("stack-cups")


def test_template_default_tasks():
    assert default_task("pick-place") == "Put the tomato in the pan"
    assert default_task("take-off-rack") == "Take the plate off the rack"


def test_objects_rest_on_table():
    scene = sample_layout("pick-place", 2)
    for obj in scene.objects:
        lo, _ = obj.posed().aabb()
        assert lo[2] == pytest.approx(scene.table.height, abs=1e-9)


def test_duplicate_ids_rejected():
    ball = SceneObject("a", Sphere(0.1), RigidTransform())
    with pytest.raises(SceneError):
        SceneState((ball, ball))


def test_scene_json_round_trip(tmp_path):
    scene = sample_layout("take-off-rack", 4)
    cam = default_camera()
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(scene.to_dict(cam)))
    back, back_cam = load_scene(path)
    assert back.same_as(scene, atol=1e-12)
    assert back_cam.pose.equals(cam.pose, atol=1e-12)


# ---------------------------------------------------------------- rendering

def test_empty_scene_renders_nothing():
    view = render(SceneState((), table=None), default_camera())
    assert not view.depth.valid.any()
    assert (view.seg == 0).all()


def test_unit_sphere_on_axis_depth():
    cam = CameraModel(100.0, 100.0, 50.0, 50.0, 101, 101)
    scene = SceneState((SceneObject("ball", Sphere(1.0), RigidTransform.from_translation([0, 0, 2.0])),), table=None)
    view = render(scene, cam)
    assert view.depth.values[50, 50] == pytest.approx(1.0, abs=1e-12)
    assert view.seg[50, 50] == 1


def test_sphere_mask_area_matches_projected_disk():
    cam = CameraModel(400.0, 400.0, 199.5, 199.5, 400, 400)
    r, z = 0.1, 1.0
    scene = SceneState((SceneObject("ball", Sphere(r), RigidTransform.from_translation([0, 0, z])),), table=None)
    mask = render(scene, cam).mask_of("ball")
    # silhouette of a sphere seen head-on: a disk of angular radius asin(r/z)
    rad_px = cam.fx * math.tan(math.asin(r / z))
    assert mask.sum() == pytest.approx(math.pi * rad_px**2, rel=0.02)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_rendered_points_lie_on_surfaces(seed):
    scene = sample_layout("take-off-rack", seed)
    cam = default_camera()
    view = render(scene, cam)
    cloud = back_project(view.depth, cam, labels=view.seg)
    assert cloud.n > 1000
    assert surface_distance(scene, cloud.points, cloud.labels).max() < 1e-6


def test_render_round_trip_through_projection():
    scene = sample_layout("pick-place", 7)
    cam = default_camera()
    view = render(scene, cam)
    cloud = back_project(view.depth, cam)
    uvd = project_points(invert(cam.pose).apply(cloud.points), cam)
    v, u = np.nonzero(view.depth.valid)
    assert np.abs(uvd[:, 0] - u).max() < 1e-9
    assert np.abs(uvd[:, 1] - v).max() < 1e-9
    assert np.abs(uvd[:, 2] - view.depth.values[v, u]).max() < 1e-9


def test_render_ids_map_to_objects():
    scene = sample_layout("pick-place", 1)
    view = render(scene, default_camera())
    assert view.ids == scene.ids
    for oid in scene.ids:
        assert (view.seg[view.mask_of(oid)] == scene.seg_id(oid)).all()
    assert not view.mask_of("nothing").any()


# ---------------------------------------------------------------- motion / collision

def test_apply_motion_examples():
    scene = sample_layout("pick-place", 1)
    same = apply_object_motion(scene, "tomato", RigidTransform())
    assert same.same_as(scene)
    up = apply_object_motion(scene, "tomato", RigidTransform.from_translation([0, 0, 0.1]))
    delta = up.get("tomato").pose.translation - scene.get("tomato").pose.translation
    np.testing.assert_allclose(delta, [0, 0, 0.1], atol=1e-15)
    assert up.get("pan").pose is scene.get("pan").pose


def test_motion_then_inverse_restores_scene():
    scene = sample_layout("take-off-rack", 2)
    m = RigidTransform.from_rotvec([0.2, -0.1, 0.7], [0.05, 0.02, 0.3])
    back = apply_object_motion(apply_object_motion(scene, "plate", m), "plate", invert(m))
    assert back.same_as(scene, atol=1e-12)


def test_apply_motion_unknown_object():
    with pytest.raises(UnknownObject):
        apply_object_motion(sample_layout("pick-place", 1), "banana", RigidTransform())


def test_sphere_inside_box_collides():
    scene = SceneState(
        (
            SceneObject("box", Box((0.2, 0.2, 0.2)), RigidTransform.from_translation([0, 0, 1.0])),
            SceneObject("ball", Sphere(0.02), RigidTransform.from_translation([0.5, 0, 1.0])),
        ),
        table=None,
    )
    assert not check_collision(scene, "ball", scene.get("ball").pose)
    assert check_collision(scene, "ball", RigidTransform.from_translation([0, 0, 1.0]))


@pytest.mark.parametrize("tol", [0.0, 0.001])
def test_sweep_flips_at_analytic_entry_and_exit(tol):
    r, half, step = 0.05, 0.1, 1e-4
    scene = SceneState(
        (
            SceneObject("box", Box((2 * half, 2 * half, 2 * half)), RigidTransform()),
            SceneObject("ball", Sphere(r), RigidTransform.from_translation([-1, 0, 0])),
        ),
        table=None,
    )
    xs = np.arange(-0.3, 0.3 + 1e-12, step)
    flags = np.array(
        [check_collision(scene, "ball", RigidTransform.from_translation([x, 0, 0]), tolerance=tol) for x in xs]
    )
    flips = np.flatnonzero(np.diff(flags.astype(int)))
    assert len(flips) == 2
    # contact within the tolerance is not a collision, so the boundary sits tol inside the touching pose
    boundary = half + r - tol
    entry, exit_ = xs[flips[0] + 1], xs[flips[1]]
    assert abs(entry + boundary) <= step + 1e-9
    assert abs(exit_ - boundary) <= step + 1e-9


def test_table_counts_as_obstacle():
    scene = sample_layout("pick-place", 1)
    sunk = RigidTransform.from_translation(scene.get("tomato").pose.translation - [0, 0, 0.02])
    assert check_collision(scene, "tomato", sunk)


# ---------------------------------------------------------------- subtask grammar

@pytest.mark.parametrize(
    "text, verb, obj, target",
    [
        ("Move the tomato vertically upward", "up", "tomato", None),
        ("Move the tomato horizontally, positioning it above the pan", "over", "tomato", "pan"),
        ("Move the tomato horizontally to the right, positioning it above the pan", "over", "tomato", "pan"),
        ("Move the tomato downward into the pan", "down", "tomato", "pan"),
        ("Move the plate horizontally away from the rack", "away", "plate", "rack"),
        ("Move the plate downward onto the table", "down", "plate", "table"),
        ("Put the tomato in the pan.", "place", "tomato", "pan"),
    ],
)
def test_parse_subtask(text, verb, obj, target):
    parsed = parse_subtask(text)
    assert (parsed.verb, parsed.obj, parsed.target) == (verb, obj, target)


def test_unparsable_subtask():
    with pytest.raises(UnparsableSubtask):
        parse_subtask("Juggle the tomato")


def test_lift_moves_along_up_only():
    scene = sample_layout("pick-place", 1)
    after = oracle_future_scene(scene, "Move the tomato vertically upward")
    before = scene.get("tomato").pose
    moved = after.get("tomato").pose
    np.testing.assert_allclose(moved.translation - before.translation, [0, 0, 0.15], atol=1e-15)
    np.testing.assert_array_equal(moved.rotation, before.rotation)
    for oid in ("pan", "sponge"):
        assert after.get(oid).pose is scene.get(oid).pose


def test_future_scene_unknown_object():
    with pytest.raises(UnknownObject):
        oracle_future_scene(sample_layout("pick-place", 1), "Move the banana vertically upward")


@pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
def test_up_over_down_lands_in_pan(seed):
    scene = sample_layout("pick-place", seed)
    for step in (
        "Move the tomato vertically upward",
        "Move the tomato horizontally, positioning it above the pan",
        "Move the tomato downward into the pan",
    ):
        scene = oracle_future_scene(scene, step)
    tomato = scene.get("tomato").pose.translation
    pan = scene.get("pan")
    assert np.linalg.norm(tomato[:2] - pan.pose.translation[:2]) < 0.01
    # rests on the pan's top face
    assert tomato[2] - 0.035 == pytest.approx(pan.posed().aabb()[1][2], abs=1e-9)


@pytest.mark.parametrize("seed", [1, 2, 3, 38])
def test_take_off_rack_ends_on_clear_table(seed):
    scene = sample_layout("take-off-rack", seed)
    for step in (
        "Move the plate vertically upward",
        "Move the plate horizontally away from the rack",
        "Move the plate downward onto the table",
    ):
        scene = oracle_future_scene(scene, step)
    plate = scene.get("plate")
    assert plate.posed().aabb()[0][2] == pytest.approx(scene.table.height, abs=1e-9)
    assert not check_collision(scene, "plate", plate.pose)
    assert render(scene, default_camera()).mask_of("plate").sum() > 50
