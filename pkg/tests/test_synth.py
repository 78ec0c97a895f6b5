import math

import numpy as np
import pytest

from bevlandmarks.geometry import Pose2, invert, local_to_global
from bevlandmarks.synth import (PRESETS, SceneSpec, SensorSpec, cast_rays, generate_scene, generate_trajectory,
                                simulate_scan)

NOISELESS = SensorSpec(noise_sigma=0.0)


def _brute_corners(segs):
    pts = []
    for i in range(len(segs)):
        for j in range(i + 1, len(segs)):
            a, b = segs[i], segs[j]
            # solve a0 + t (a1 - a0) = b0 + u (b1 - b0) with Cramer's rule
            m = np.array([[a[2] - a[0], -(b[2] - b[0])], [a[3] - a[1], -(b[3] - b[1])]])
            if abs(np.linalg.det(m)) < 1e-12:
                continue
            t, u = np.linalg.solve(m, [b[0] - a[0], b[1] - a[1]])
            if -1e-9 <= t <= 1 + 1e-9 and -1e-9 <= u <= 1 + 1e-9:
                p = (a[0] + t * (a[2] - a[0]), a[1] + t * (a[3] - a[1]))
                if all(math.dist(p, q) > 1e-6 for q in pts):
                    pts.append(p)
    return np.array(pts)


@pytest.mark.parametrize("preset", PRESETS)
def test_scene_deterministic_and_inside(preset):
    a, b = generate_scene(3, preset), generate_scene(3, preset)
    assert np.array_equal(a.segments, b.segments) and np.array_equal(a.pillars, b.pillars)
    W, H = a.extent
    assert (a.segments[:, [0, 2]] >= 0).all() and (a.segments[:, [0, 2]] <= W).all()
    assert (a.segments[:, [1, 3]] >= 0).all() and (a.segments[:, [1, 3]] <= H).all()
    if preset == "pillars":
        assert len(a.pillars) >= 12 and len(a.corners) == 0
    else:
        assert len(a.corners) >= 8


@pytest.mark.parametrize("preset", ["rooms", "campus"])
def test_corners_match_enumeration(preset):
    scene = generate_scene(7, preset)
    got = {tuple(np.round(p, 6)) for p in scene.corners}
    want = {tuple(np.round(p, 6)) for p in _brute_corners(scene.segments)}
    assert got == want


def test_different_seeds_differ():
    assert not np.array_equal(generate_scene(1).segments, generate_scene(2).segments)


def test_empty_circular_room():
    scene = SceneSpec((40.0, 40.0), [], [(20.0, 20.0, 10.0)])
    cloud = simulate_scan(scene, Pose2(20, 20, 0.3), NOISELESS)
    r = np.hypot(cloud[:, 0], cloud[:, 1])
    assert len(cloud) == 720 * 8
    np.testing.assert_allclose(r, 10.0, atol=1e-12)


def test_pillar_dead_ahead():
    scene = SceneSpec((40.0, 40.0), [], [(25.0, 20.0, 1.0)])
    r = cast_rays(scene, (20.0, 20.0), np.array([0.0]), 50.0)
    assert r[0] == pytest.approx(4.0, abs=1e-12)
    cloud = simulate_scan(scene, Pose2(20, 20, 0.0), NOISELESS)
    assert np.hypot(cloud[:, 0], cloud[:, 1]).min() == pytest.approx(4.0, abs=1e-12)


def test_noise_sigma():
    scene = SceneSpec((40.0, 40.0), [], [(20.0, 20.0, 15.0)])
    noisy = simulate_scan(scene, Pose2(20, 20, 0), SensorSpec(beams=10_000, z_layers=1), seed=1)
    dr = np.hypot(noisy[:, 0], noisy[:, 1]) - 15.0
    assert abs(dr.std(ddof=1) - 0.02) <= 0.002


def _surface_distance(scene, xy):
    return scene.clearance(xy)


@pytest.mark.parametrize("preset", PRESETS)
def test_noiseless_points_on_surfaces(preset):
    scene = generate_scene(5, preset)
    traj = generate_trajectory(scene, 0.5)
    for pose in traj[::40]:
        cloud = simulate_scan(scene, pose, NOISELESS)
        g = local_to_global(pose, cloud[:, :2])
        assert _surface_distance(scene, g).max() <= 1e-9


def _transform_scene(scene, pose):
    inv = invert(pose)
    segs = np.hstack([local_to_global(inv, scene.segments[:, :2]), local_to_global(inv, scene.segments[:, 2:])])
    pil = np.column_stack([local_to_global(inv, scene.pillars[:, :2]), scene.pillars[:, 2]]) \
        if len(scene.pillars) else np.zeros((0, 3))
    return SceneSpec(scene.extent, segs, pil)


def test_frame_consistency():
    scene = generate_scene(2, "rooms")
    pose = Pose2(12.0, 11.0, 0.9)
    a = simulate_scan(scene, pose, NOISELESS)
    b = simulate_scan(_transform_scene(scene, pose), Pose2(), NOISELESS)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_scan_deterministic():
    scene = generate_scene(0)
    p = Pose2(10, 10, 0.0)
    assert np.array_equal(simulate_scan(scene, p, seed=4), simulate_scan(scene, p, seed=4))
    assert not np.array_equal(simulate_scan(scene, p, seed=4), simulate_scan(scene, p, seed=5))


@pytest.mark.parametrize("preset", PRESETS)
def test_trajectory_spacing_and_clearance(preset):
    scene = generate_scene(7, preset)
    traj = generate_trajectory(scene, 0.5)
    xy = np.array([[p.x, p.y] for p in traj])
    d = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    np.testing.assert_allclose(d, 0.5, atol=1e-9)
    assert (scene.clearance(xy) >= 0.5).all()
    assert len(traj) >= 100 or preset == "campus"
    again = generate_trajectory(scene, 0.5)
    assert [(p.x, p.y, p.yaw) for p in again] == [(p.x, p.y, p.yaw) for p in traj]
    # headings are tangent to the path
    for p, q in zip(traj[:-1], traj[1:]):
        step = math.atan2(q.y - p.y, q.x - p.x)
        assert abs(math.remainder(step - q.yaw, 2 * math.pi)) <= math.pi / 4 + 1e-9


def test_blocked_path():
    scene = SceneSpec((40.0, 40.0), [(20.0, 0.0, 20.0, 40.0)], [], route=[(10, 10), (30, 10), (30, 30), (10, 30)])
    with pytest.raises(ValueError, match="blocked"):
        generate_trajectory(scene)
    with pytest.raises(ValueError):
        generate_trajectory(scene, 0.0)


def test_scene_file_roundtrip(tmp_path):
    scene = generate_scene(9)
    scene.save(tmp_path / "s.txt")
    back = SceneSpec.load(tmp_path / "s.txt")
    np.testing.assert_allclose(back.segments, scene.segments, atol=1e-6)
    np.testing.assert_allclose(back.pillars, scene.pillars, atol=1e-6)
    np.testing.assert_allclose(back.route, scene.route, atol=1e-6)
