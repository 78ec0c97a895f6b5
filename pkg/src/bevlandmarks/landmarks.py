"""Global landmark set: initialization, density control, nearest queries, text I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bev import BevConfig
from .geometry import Pose2, local_to_global

LINEAR_SCAN_LIMIT = 10_000


@dataclass(frozen=True)
class LandmarkInitConfig:
    d_p: int = 4
    rho_lm: float = 0.2

    def __post_init__(self):
        if self.d_p <= 0:
            raise ValueError("d_p must be positive")
        if not 0.0 < self.rho_lm <= 1.5:
            raise ValueError("rho_lm must lie in (0, 1.5]")

    def l_patch(self, bev: BevConfig) -> float:
        return bev.width_px * bev.pixel_size / self.d_p

    def s_grid(self, bev: BevConfig) -> float:
        return self.l_patch(bev) / math.sqrt(self.rho_lm)


@dataclass
class LandmarkSet:
    coords: np.ndarray
    learnable: bool = True

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        if len(self.coords) < 1:
            raise ValueError("landmark set is empty")
        if not np.isfinite(self.coords).all():
            raise ValueError("non-finite landmark coordinates")

    def __len__(self) -> int:
        return len(self.coords)

    def min_pairwise_distance(self) -> float:
        if len(self) < 2:
            return math.inf
        c = self.coords
        d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        return float(d.min())

    def save(self, path) -> None:
        Path(path).write_text(format_landmarks(self.coords))

    @classmethod
    def load(cls, path) -> "LandmarkSet":
        return cls(parse_landmarks(Path(path).read_text()))


def format_landmarks(coords) -> str:
    return "".join(f"{i} {x:.6f} {y:.6f}\n" for i, (x, y) in enumerate(np.asarray(coords)))


def parse_landmarks(text: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'index x y', got {line!r}")
        idx = int(parts[0])
        if idx != len(rows):
            raise ValueError(f"line {lineno}: index {idx} out of sequence")
        rows.append((float(parts[1]), float(parts[2])))
    return np.array(rows, dtype=float).reshape(-1, 2)


def patch_centers_local(bev: BevConfig, d_p: int) -> np.ndarray:
    if bev.width_px % d_p or bev.height_px % d_p:
        raise ValueError(f"d_p={d_p} must divide the image size {bev.shape}")
    pw, ph = bev.width_px // d_p, bev.height_px // d_p
    cx = ((np.arange(d_p) + 0.5) * pw - bev.width_px / 2) * bev.pixel_size
    cy = ((np.arange(d_p) + 0.5) * ph - bev.height_px / 2) * bev.pixel_size
    gx, gy = np.meshgrid(cx, cy)  # row-major: rows follow y
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def patch_centers_for_pose(pose: Pose2, bev: BevConfig, d_p: int) -> np.ndarray:
    return local_to_global(pose, patch_centers_local(bev, d_p))


def grid_average_filter(points, s_grid: float) -> np.ndarray:
    if s_grid <= 0:
        raise ValueError("s_grid must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros((0, 2))
    keys = np.floor(pts / s_grid).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.stack([np.bincount(inverse, weights=pts[:, k]) for k in range(2)], axis=1)
    return sums / counts[:, None]


def init_landmarks(trajectory, bev: BevConfig, cfg: LandmarkInitConfig) -> LandmarkSet:
    poses = list(trajectory)
    if not poses:
        raise ValueError("trajectory is empty")
    candidates = np.concatenate([patch_centers_for_pose(p, bev, cfg.d_p) for p in poses])
    coords = grid_average_filter(candidates, cfg.s_grid(bev))
    return LandmarkSet(coords)


def keyframe_select(positions, threshold: float = 0.5) -> list[int]:
    """Greedy minimum-separation filter; returns kept indices."""
    pts = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return []
    kept = [0]
    last = pts[0]
    for i in range(1, len(pts)):
        if math.hypot(*(pts[i] - last)) >= threshold:
            kept.append(i)
            last = pts[i]
    return kept


class LandmarkIndex:
    """Exact nearest-landmark lookup, lowest index on ties.

    Linear scan up to ``linear_limit`` landmarks, uniform grid above.
    """

    def __init__(self, coords, linear_limit: int = LINEAR_SCAN_LIMIT, cell: float | None = None):
        self.coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        if len(self.coords) == 0:
            raise ValueError("no landmarks")
        self.use_grid = len(self.coords) > linear_limit
        if self.use_grid:
            lo = self.coords.min(axis=0)
            span = np.maximum(self.coords.max(axis=0) - lo, 1e-9)
            if cell is None:
                cell = float(np.sqrt(span[0] * span[1] / len(self.coords))) or 1.0
            self.cell = cell
            self.origin = lo
            keys = np.floor((self.coords - lo) / cell).astype(np.int64)
            self.nx, self.ny = keys.max(axis=0) + 1
            self.buckets: dict[tuple[int, int], np.ndarray] = {}
            order = np.lexsort((np.arange(len(keys)), keys[:, 1], keys[:, 0]))
            for k, idx in _group(keys[order], order):
                self.buckets[k] = idx

    def query(self, q) -> tuple[int, float]:
        q = np.asarray(q, dtype=float)
        if not self.use_grid:
            d2 = (self.coords[:, 0] - q[0]) ** 2 + (self.coords[:, 1] - q[1]) ** 2
            j = int(np.argmin(d2))
            return j, float(math.sqrt(d2[j]))
        return self._grid_query(q)

    def query_many(self, qs) -> tuple[np.ndarray, np.ndarray]:
        qs = np.asarray(qs, dtype=float).reshape(-1, 2)
        out = [self.query(q) for q in qs]
        return np.array([o[0] for o in out], dtype=np.int64), np.array([o[1] for o in out])

    def _grid_query(self, q):
        cx, cy = np.floor((q - self.origin) / self.cell).astype(np.int64)
        best_d2, best_j = math.inf, -1
        max_ring = int(max(abs(cx), abs(cy), abs(self.nx - cx), abs(self.ny - cy))) + 1
        for r in range(max_ring + 1):
            for key in _ring(int(cx), int(cy), r):
                idx = self.buckets.get(key)
                if idx is None:
                    continue
                c = self.coords[idx]
                d2 = (c[:, 0] - q[0]) ** 2 + (c[:, 1] - q[1]) ** 2
                k = int(np.argmin(d2))
                if d2[k] < best_d2 or (d2[k] == best_d2 and idx[k] < best_j):
                    best_d2, best_j = float(d2[k]), int(idx[k])
                    # equal distances inside a bucket: argmin already took the lowest index
            # points in rings > r are at least r * cell away
            if best_j >= 0 and math.sqrt(best_d2) < r * self.cell:
                break
        return best_j, math.sqrt(best_d2)


def _group(keys, order):
    start = 0
    for i in range(1, len(keys) + 1):
        if i == len(keys) or (keys[i] != keys[start]).any():
            yield (int(keys[start, 0]), int(keys[start, 1])), order[start:i]
            start = i


def _ring(cx: int, cy: int, r: int):
    if r == 0:
        yield (cx, cy)
        return
    for dx in range(-r, r + 1):
        yield (cx + dx, cy - r)
        yield (cx + dx, cy + r)
    for dy in range(-r + 1, r):
        yield (cx - r, cy + dy)
        yield (cx + r, cy + dy)


def nearest_landmark(landmarks, q) -> tuple[int, float]:
    coords = landmarks.coords if isinstance(landmarks, LandmarkSet) else landmarks
    return LandmarkIndex(coords).query(q)
