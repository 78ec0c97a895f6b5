import pytest

from bevlandmarks.bev import BevConfig
from bevlandmarks.landmarks import LandmarkInitConfig, init_landmarks
from bevlandmarks.synth import SensorSpec, generate_scene, generate_trajectory, simulate_scan
from bevlandmarks.trainer import prepare_frame

TINY_BEV = BevConfig(16, 16, 1.0, 0.2)


@pytest.fixture(scope="session")
def tiny_problem():
    """A dozen 16x16 frames from the rooms preset plus their initial landmarks (d_p=2)."""
    scene = generate_scene(1, "rooms")
    poses = generate_trajectory(scene, 2.0)[:12]
    sensor = SensorSpec(beams=180, z_layers=2)
    frames = [prepare_frame(f"f{i:02d}", p, simulate_scan(scene, p, sensor, seed=i), TINY_BEV)
              for i, p in enumerate(poses)]
    lm = init_landmarks(poses, TINY_BEV, LandmarkInitConfig(d_p=2))
    return frames, lm


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
