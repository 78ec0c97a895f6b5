"""Deterministic synthetic scenes, 2D ray-cast LiDAR scans and reference trajectories."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose2

PRESETS = ("rooms", "campus", "pillars")


@dataclass
class SceneSpec:
    extent: tuple[float, float]
    segments: np.ndarray  # (S, 4) x1 y1 x2 y2
    pillars: np.ndarray  # (P, 3) cx cy r
    seed: int = 0
    route: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # closed loop waypoints

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=float).reshape(-1, 4)
        self.pillars = np.asarray(self.pillars, dtype=float).reshape(-1, 3)
        self.route = np.asarray(self.route, dtype=float).reshape(-1, 2)

    @property
    def corners(self) -> np.ndarray:
        return segment_intersections(self.segments, self.extent)

    def clearance(self, xy) -> np.ndarray:
        """Distance from each query point to the nearest wall or pillar surface."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        d = np.full(len(xy), np.inf)
        if len(self.segments):
            d = np.minimum(d, _point_segment_distance(xy, self.segments).min(axis=1))
        if len(self.pillars):
            c = self.pillars
            dc = np.sqrt(((xy[:, None, :] - c[None, :, :2]) ** 2).sum(-1)) - c[None, :, 2]
            d = np.minimum(d, np.abs(dc).min(axis=1))
        return d

    def inside_pillar(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if not len(self.pillars):
            return np.zeros(len(xy), dtype=bool)
        c = self.pillars
        dc = np.sqrt(((xy[:, None, :] - c[None, :, :2]) ** 2).sum(-1)) - c[None, :, 2]
        return (dc < 0).any(axis=1)

    def save(self, path) -> None:
        lines = [f"EXTENT {self.extent[0]:.6f} {self.extent[1]:.6f}", "SEGMENTS"]
        lines += [" ".join(f"{v:.6f}" for v in s) for s in self.segments]
        lines.append("PILLARS")
        lines += [" ".join(f"{v:.6f}" for v in p) for p in self.pillars]
        if len(self.route):
            lines.append("ROUTE")
            lines += [f"{x:.6f} {y:.6f}" for x, y in self.route]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SceneSpec":
        extent = (0.0, 0.0)
        sections: dict[str, list] = {"SEGMENTS": [], "PILLARS": [], "ROUTE": []}
        current = None
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "EXTENT":
                extent = (float(parts[1]), float(parts[2]))
            elif parts[0] in sections:
                current = parts[0]
            elif current is None:
                raise ValueError(f"{path}:{lineno}: data before section header")
            else:
                sections[current].append([float(p) for p in parts])
        return cls(extent, sections["SEGMENTS"], sections["PILLARS"], route=sections["ROUTE"])


@dataclass(frozen=True)
class SensorSpec:
    beams: int = 720
    max_range: float = 50.0
    noise_sigma: float = 0.02
    z_layers: int = 8
    z_min: float = 0.0
    z_max: float = 2.0

    def __post_init__(self):
        if self.beams <= 0 or self.max_range <= 0 or self.z_layers <= 0 or self.noise_sigma < 0:
            raise ValueError("sensor parameters must be positive")


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def segment_intersections(segments, extent, tol: float = 1e-9) -> np.ndarray:
    segs = np.asarray(segments, dtype=float).reshape(-1, 4)
    out: list[tuple[float, float]] = []
    for i in range(len(segs)):
        for j in range(i + 1, len(segs)):
            p = _intersect(segs[i], segs[j], tol)
            if p is None:
                continue
            if not (-tol <= p[0] <= extent[0] + tol and -tol <= p[1] <= extent[1] + tol):
                continue
            if all(math.hypot(p[0] - q[0], p[1] - q[1]) > 1e-6 for q in out):
                out.append(p)
    return np.array(out, dtype=float).reshape(-1, 2)


def _intersect(a, b, tol):
    px, py = a[0], a[1]
    rx, ry = a[2] - a[0], a[3] - a[1]
    qx, qy = b[0], b[1]
    sx, sy = b[2] - b[0], b[3] - b[1]
    den = _cross(rx, ry, sx, sy)
    if abs(den) < 1e-12:
        return None  # parallel; collinear overlaps are not corners
    t = _cross(qx - px, qy - py, sx, sy) / den
    u = _cross(qx - px, qy - py, rx, ry) / den
    if -tol <= t <= 1 + tol and -tol <= u <= 1 + tol:
        return (px + t * rx, py + t * ry)
    return None


def _point_segment_distance(xy, segs) -> np.ndarray:
    a = segs[None, :, :2]
    d = segs[None, :, 2:] - segs[None, :, :2]
    p = xy[:, None, :]
    L2 = np.maximum((d ** 2).sum(-1), 1e-18)
    t = np.clip(((p - a) * d).sum(-1) / L2, 0.0, 1.0)
    proj = a + t[..., None] * d
    return np.sqrt(((p - proj) ** 2).sum(-1))


def _box(x0, y0, x1, y1):
    return [(x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0)]


def _rooms(rng: np.random.Generator) -> SceneSpec:
    E = 40.0
    segs = _box(0.0, 0.0, E, E)
    # partition walls from the boundary inward, each with a doorway where the loop crosses
    j = lambda: float(rng.uniform(-1.0, 1.0))
    mid_x, mid_y = 20.0 + j(), 20.0 + j()
    door = 3.0
    # vertical partitions (x = mid_x) top and bottom, horizontal (y = mid_y) left and right
    segs += [(mid_x, 0.0, mid_x, 10.0 - door / 2), (mid_x, 10.0 + door / 2, mid_x, 15.0)]
    segs += [(mid_x, 25.0, mid_x, 30.0 - door / 2), (mid_x, 30.0 + door / 2, mid_x, E)]
    segs += [(0.0, mid_y, 10.0 - door / 2, mid_y), (10.0 + door / 2, mid_y, 15.0, mid_y)]
    segs += [(25.0, mid_y, 30.0 - door / 2, mid_y), (30.0 + door / 2, mid_y, E, mid_y)]
    # short stub walls (T-junctions) off the boundary
    for x in (6.0 + j(), 34.0 + j()):
        segs.append((x, 0.0, x, 4.0 + j()))
        segs.append((x, E, x, E - 4.0 - j()))
    for y in (6.0 + j(), 34.0 + j()):
        segs.append((0.0, y, 4.0 + j(), y))
        segs.append((E, y, E - 4.0 - j(), y))
    # inner L-shaped structure and an oblique wall, clear of the center
    c = 14.5 + j() * 0.5
    segs += [(c, c + 3.5, c, c), (c, c, c + 3.5, c)]
    segs += [(23.0 + j() * 0.5, 26.0, 26.0, 23.0 + j() * 0.5)]
    pillars = []
    for cx, cy in ((14.0, 5.0), (26.0, 35.0), (5.0, 26.0), (35.0, 14.0)):
        pillars.append((cx + j(), cy + j(), 0.3 + 0.2 * rng.uniform()))
    route = np.array([(10.0, 10.0), (30.0, 10.0), (30.0, 30.0), (10.0, 30.0)])
    segs, pillars = _clutter(rng, E, route, segs, pillars, n_corners=22, n_pillars=14)
    return SceneSpec((E, E), segs, pillars, route=route)


def _clutter(rng, E, route, segs, pillars, n_corners: int, n_pillars: int, keep_out: float = 1.5):
    """Scatter L-shaped wall pieces and pillars so that local views are distinctive."""
    segs, pillars = list(segs), list(pillars)
    centers = [(x, y) for x, y, _ in pillars]
    def free(xy, r):
        if _route_distance(np.asarray(xy), route) < r + keep_out:
            return False
        return all(math.hypot(xy[0] - cx, xy[1] - cy) >= r + 2.0 for cx, cy in centers)
    placed, tries = 0, 0
    while placed < n_corners and tries < 10_000:
        tries += 1
        x, y = rng.uniform(1.0, E - 1.0, size=2)
        a = float(rng.uniform(0.0, 2 * math.pi))
        la, lb = rng.uniform(1.0, 3.0, size=2)
        turn = a + float(rng.choice([-1.0, 1.0])) * math.pi / 2
        ends = [(x + la * math.cos(a), y + la * math.sin(a)), (x + lb * math.cos(turn), y + lb * math.sin(turn))]
        pts = [(x, y)] + ends
        if not all(0.5 <= px <= E - 0.5 and 0.5 <= py <= E - 0.5 for px, py in pts):
            continue
        if not all(free(pt, 0.0) for pt in pts + [(x + (ex - x) / 2, y + (ey - y) / 2) for ex, ey in ends]):
            continue
        segs += [(float(x), float(y), float(ex), float(ey)) for ex, ey in ends]
        centers += pts
        placed += 1
    placed, tries = 0, 0
    while placed < n_pillars and tries < 10_000:
        tries += 1
        x, y = rng.uniform(1.0, E - 1.0, size=2)
        r = float(rng.uniform(0.15, 0.5))
        if not free((x, y), r):
            continue
        pillars.append((float(x), float(y), r))
        centers.append((x, y))
        placed += 1
    return segs, pillars


def _campus(rng: np.random.Generator) -> SceneSpec:
    E = 60.0
    segs = []
    for x0, y0 in ((4.0, 4.0), (40.0, 4.0), (4.0, 40.0), (40.0, 40.0)):
        w, h = rng.uniform(12.0, 18.0, size=2)
        segs += _box(x0, y0, x0 + w, y0 + h)
    route = np.array([(24.0, 24.0), (36.0, 24.0), (36.0, 36.0), (24.0, 36.0)])
    pillars = [(30.0 + float(dx), 30.0 + float(dy), 0.4) for dx, dy in rng.uniform(-2.0, 2.0, size=(3, 2))]
    return SceneSpec((E, E), segs, pillars, route=route)


def _pillars(rng: np.random.Generator) -> SceneSpec:
    E = 40.0
    route = np.array([(10.0, 10.0), (30.0, 10.0), (30.0, 30.0), (10.0, 30.0)])
    pillars: list[tuple[float, float, float]] = []
    while len(pillars) < 30:
        x, y = rng.uniform(1.0, E - 1.0, size=2)
        r = float(rng.uniform(0.2, 0.6))
        if _route_distance(np.array([x, y]), route) < r + 1.0:
            continue
        if any(math.hypot(x - px, y - py) < r + pr + 1.0 for px, py, pr in pillars):
            continue
        pillars.append((float(x), float(y), r))
    return SceneSpec((E, E), np.zeros((0, 4)), pillars, route=route)


def _route_distance(p, route) -> float:
    closed = np.vstack([route, route[:1]])
    segs = np.hstack([closed[:-1], closed[1:]])
    return float(_point_segment_distance(p.reshape(1, 2), segs).min())


def generate_scene(seed: int = 0, preset: str = "rooms") -> SceneSpec:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    rng = np.random.default_rng(seed)
    scene = {"rooms": _rooms, "campus": _campus, "pillars": _pillars}[preset](rng)
    scene.seed = seed
    return scene


def cast_rays(scene: SceneSpec, origin, angles, max_range: float) -> np.ndarray:
    """Nearest hit distance along each global ray direction; inf when nothing within range."""
    ox, oy = float(origin[0]), float(origin[1])
    dx, dy = np.cos(angles), np.sin(angles)
    best = np.full(len(angles), np.inf)
    if len(scene.segments):
        s = scene.segments
        ax, ay = s[:, 0][None, :], s[:, 1][None, :]
        ex, ey = (s[:, 2] - s[:, 0])[None, :], (s[:, 3] - s[:, 1])[None, :]
        rx, ry = dx[:, None], dy[:, None]
        den = _cross(rx, ry, ex, ey)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = _cross(ax - ox, ay - oy, ex, ey) / den
            u = _cross(ax - ox, ay - oy, rx, ry) / den
        hit = (np.abs(den) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
        t = np.where(hit, t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    if len(scene.pillars):
        c = scene.pillars
        fx, fy = ox - c[:, 0][None, :], oy - c[:, 1][None, :]
        b = fx * dx[:, None] + fy * dy[:, None]
        cc = fx ** 2 + fy ** 2 - c[:, 2][None, :] ** 2
        disc = b ** 2 - cc
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(disc)
        # a circle enclosing the sensor acts as a round wall: take the far intersection
        t = np.where(cc < 0, -b + sq, -b - sq)
        t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    return np.where(best <= max_range, best, np.inf)


def simulate_scan(scene: SceneSpec, pose: Pose2, sensor: SensorSpec = SensorSpec(), seed: int = 0) -> np.ndarray:
    """Local-frame point cloud (N, 3)."""
    local = np.arange(sensor.beams) * (2 * math.pi / sensor.beams)
    r = cast_rays(scene, (pose.x, pose.y), local + pose.yaw, sensor.max_range)
    ok = np.isfinite(r)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sensor.noise_sigma, size=sensor.beams) if sensor.noise_sigma > 0 else np.zeros(sensor.beams)
    r = r[ok] + noise[ok]
    a = local[ok]
    xy = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    zs = np.linspace(sensor.z_min, sensor.z_max, sensor.z_layers)
    pts = np.concatenate([np.column_stack([xy, np.full(len(xy), z)]) for z in zs]) if len(xy) else np.zeros((0, 3))
    return pts


def _walk_polyline(points: np.ndarray, spacing: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Positions exactly ``spacing`` apart (Euclidean) along a polyline, with segment directions."""
    out = []
    seg = 0
    cur = points[0].astype(float)
    d0 = points[1] - points[0]
    out.append((cur.copy(), d0 / np.linalg.norm(d0)))
    while True:
        found = False
        for k in range(seg, len(points) - 1):
            a, b = points[k], points[k + 1]
            d = b - a
            L2 = float(d @ d)
            # solve |a + t d - cur| = spacing for the largest t in [0, 1]
            f = a - cur
            B = 2 * float(f @ d)
            C = float(f @ f) - spacing ** 2
            disc = B * B - 4 * L2 * C
            if disc < 0:
                continue
            t = (-B + math.sqrt(disc)) / (2 * L2)
            tmin = 0.0
            if k == seg and out:
                # must advance past the current point along this segment
                tmin = float(((cur - a) @ d) / L2)
            if tmin - 1e-12 <= t <= 1.0 + 1e-12 and t > tmin:
                nxt = a + t * d
                # re-project onto the exact circle to keep the spacing exact
                off = nxt - cur
                nxt = cur + off * (spacing / math.hypot(*off))
                cur = nxt
                seg = k
                out.append((cur.copy(), d / math.sqrt(L2)))
                found = True
                break
        if not found:
            return out


def generate_trajectory(scene: SceneSpec, spacing: float = 0.5, clearance: float = 0.5) -> list[Pose2]:
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if len(scene.route) < 2:
        raise ValueError("scene has no route")
    loop = np.vstack([scene.route, scene.route[:1]])
    walked = _walk_polyline(loop, spacing)
    if len(walked) > 2 and np.linalg.norm(walked[-1][0] - walked[0][0]) < 1e-6:
        walked = walked[:-1]  # closed loop: last sample duplicates the start
    poses = [Pose2(p[0], p[1], math.atan2(d[1], d[0])) for p, d in walked]
    xy = np.array([[p.x, p.y] for p in poses])
    clear = scene.clearance(xy)
    if (clear < clearance).any() or scene.inside_pillar(xy).any():
        bad = int(np.argmin(clear))
        raise ValueError(f"path blocked near ({xy[bad, 0]:.2f}, {xy[bad, 1]:.2f})")
    return poses
