"""End-to-end desk-scale pipeline: synthetic reference/query data, training, localization, evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bev import BevConfig
from .evaluation import EvalReport, EvalThresholds, evaluate
from .geometry import Pose2
from .landmarks import LandmarkInitConfig, LandmarkSet, init_landmarks, keyframe_select
from .localizer import LocalizationResult, LocalizerConfig, localize
from .synth import SceneSpec, SensorSpec, generate_scene, generate_trajectory, simulate_scan
from .trainer import TrainConfig, TrainResult, prepare_frame, train


@dataclass
class ScanSet:
    ids: list[str]
    poses: list[Pose2]
    clouds: list[np.ndarray]

    def __len__(self):
        return len(self.ids)


def reference_scans(scene: SceneSpec, spacing: float, sensor: SensorSpec, seed: int,
                    keyframe_threshold: float = 0.5) -> ScanSet:
    traj = generate_trajectory(scene, spacing)
    keep = keyframe_select([[p.x, p.y] for p in traj], keyframe_threshold)
    poses = [traj[i] for i in keep]
    ids = [f"ref{i:05d}" for i in range(len(poses))]
    clouds = [simulate_scan(scene, p, sensor, seed=seed * 100_003 + i) for i, p in enumerate(poses)]
    return ScanSet(ids, poses, clouds)


def sample_queries(scene: SceneSpec, ref: list[Pose2], n: int, dist_range: tuple[float, float], seed: int,
                   sensor: SensorSpec, prefix: str = "q", clearance: float = 0.5,
                   max_tries: int = 200_000) -> ScanSet:
    """Query poses whose distance to the closest reference pose lies in ``dist_range``."""
    rng = np.random.default_rng(seed)
    ref_xy = np.array([[p.x, p.y] for p in ref])
    lo, hi = dist_range
    W, H = scene.extent
    poses: list[Pose2] = []
    for _ in range(max_tries):
        if len(poses) == n:
            break
        if hi <= 2.0:
            base = ref_xy[rng.integers(len(ref_xy))]
            r, a = hi * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
            xy = base + r * np.array([math.cos(a), math.sin(a)])
        else:
            xy = rng.uniform([0.0, 0.0], [W, H])
        d = float(np.sqrt(((ref_xy - xy) ** 2).sum(1)).min())
        if not lo <= d <= hi:
            continue
        if not (0.0 < xy[0] < W and 0.0 < xy[1] < H):
            continue
        if scene.clearance(xy)[0] < clearance or scene.inside_pillar(xy)[0]:
            continue
        poses.append(Pose2(float(xy[0]), float(xy[1]), float(rng.uniform(-math.pi, math.pi))))
    if len(poses) < n:
        raise RuntimeError(f"could only place {len(poses)} of {n} queries in {dist_range}")
    ids = [f"{prefix}{i:04d}" for i in range(n)]
    clouds = [simulate_scan(scene, p, sensor, seed=seed * 7919 + i + 1) for i, p in enumerate(poses)]
    return ScanSet(ids, poses, clouds)


@dataclass
class DeskSetup:
    preset: str = "rooms"
    scene_seed: int = 7
    spacing: float = 0.5
    bev: BevConfig = field(default_factory=BevConfig)
    init: LandmarkInitConfig = field(default_factory=LandmarkInitConfig)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    n_queries: int = 50
    near_range: tuple[float, float] = (0.0, 2.0)
    far_range: tuple[float, float] = (8.0, 12.0)


@dataclass
class DeskRun:
    scene: SceneSpec
    reference: ScanSet
    landmarks: LandmarkSet
    result: TrainResult
    near: EvalReport
    far: EvalReport


def localize_all(bundle, scans: ScanSet, cfg: LocalizerConfig) -> list[LocalizationResult]:
    return [localize(c, bundle, cfg, seed=cfg.seed + i) for i, c in enumerate(scans.clouds)]


def run_desk(setup: DeskSetup, reference: ScanSet | None = None, scene: SceneSpec | None = None,
             queries: tuple[ScanSet, ScanSet] | None = None, **train_kw) -> DeskRun:
    scene = scene or generate_scene(setup.scene_seed, setup.preset)
    reference = reference or reference_scans(scene, setup.spacing, setup.sensor, setup.scene_seed)
    landmarks = init_landmarks(reference.poses, setup.bev, setup.init)
    frames = [prepare_frame(i, p, c, setup.bev) for i, p, c in zip(reference.ids, reference.poses, reference.clouds)]
    result = train(frames, landmarks, setup.bev, setup.train, **train_kw)
    if queries is None:
        queries = make_queries(scene, reference, setup)
    reports = []
    for qs in queries:
        res = localize_all(result.bundle, qs, setup.localizer)
        reports.append(evaluate(res, qs.poses, reference.poses, EvalThresholds(), qs.ids))
    return DeskRun(scene, reference, landmarks, result, reports[0], reports[1])


def make_queries(scene, reference: ScanSet, setup: DeskSetup) -> tuple[ScanSet, ScanSet]:
    near = sample_queries(scene, reference.poses, setup.n_queries, setup.near_range,
                          setup.scene_seed + 1000, setup.sensor, "near")
    far = sample_queries(scene, reference.poses, setup.n_queries, setup.far_range,
                         setup.scene_seed + 2000, setup.sensor, "far")
    return near, far


def corner_distance(landmarks, corners) -> float:
    """Mean distance from each landmark to its nearest scene corner."""
    lm = np.asarray(landmarks, dtype=float)
    c = np.asarray(corners, dtype=float)
    d = np.sqrt(((lm[:, None, :] - c[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return float(d.mean())
