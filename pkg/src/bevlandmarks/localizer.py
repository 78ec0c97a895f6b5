"""Inference: heatmap peaks -> correspondence lookup -> 2-point RANSAC 3-DoF pose."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bev import BevConfig, pixel_center_local, project_bev, voxel_downsample
from .geometry import Pose2, angle_diff


@dataclass(frozen=True)
class LocalizerConfig:
    n: int = 64
    min_peak_distance: int = 3
    peak_threshold: float | None = None  # None: min + 0.1 * (max - min) of the heatmap
    peak_threshold_rel: float = 0.1
    ransac_iterations: int = 2000
    inlier_threshold: float = 1.0
    min_inliers: int = 4
    min_sample_separation: float = 0.5
    refine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("n must be >= 3")
        if self.min_inliers < 2:
            raise ValueError("min_inliers must be >= 2")


@dataclass(frozen=True)
class CorrespondencePair:
    local: tuple[float, float]
    landmark: int
    global_xy: tuple[float, float]
    score: float


@dataclass
class LocalizationResult:
    pose: Pose2 | None
    inliers: list[CorrespondencePair] = field(default_factory=list)
    total_pairs: int = 0
    rms: float = math.nan
    diagnostic: str = ""

    @property
    def ok(self) -> bool:
        return self.pose is not None

    def record(self, frame_id: str) -> str:
        if self.pose is None:
            return f"{frame_id} NONE nan nan nan {len(self.inliers)} {self.total_pairs} nan"
        p = self.pose
        return (f"{frame_id} OK {p.x:.6f} {p.y:.6f} {math.degrees(p.yaw):.6f} "
                f"{len(self.inliers)} {self.total_pairs} {self.rms:.6f}")


def parse_record(line: str) -> tuple[str, LocalizationResult]:
    parts = line.split()
    if len(parts) != 8:
        raise ValueError(f"bad result record: {line!r}")
    fid, status = parts[0], parts[1]
    pose = None
    if status == "OK":
        pose = Pose2(float(parts[2]), float(parts[3]), math.radians(float(parts[4])))
    elif status != "NONE":
        raise ValueError(f"bad status {status!r}")
    res = LocalizationResult(pose, [], int(parts[6]), float(parts[7]))
    res.inliers = [None] * int(parts[5])  # counts only; pairs are not persisted
    return fid, res


def _threshold(h: np.ndarray, cfg: LocalizerConfig) -> float:
    if cfg.peak_threshold is not None:
        return cfg.peak_threshold
    lo, hi = float(h.min()), float(h.max())
    return lo + cfg.peak_threshold_rel * (hi - lo)


def detect_peaks(heatmap, cfg: LocalizerConfig = LocalizerConfig()) -> list[tuple[tuple[int, int], float]]:
    """Local maxima as ((u, v), score), strongest first.

    A pixel qualifies when it is >= every pixel within Chebyshev radius
    ``min_peak_distance``, strictly above at least one of them, has no equal-valued
    neighbour earlier in row-major order, and clears the threshold.
    """
    h = np.asarray(heatmap, dtype=float)
    h = h.reshape(h.shape[-2:])
    r = cfg.min_peak_distance
    size = 2 * r + 1
    hmax = ndimage.maximum_filter(h, size=size, mode="constant", cval=-np.inf)
    hmin = ndimage.minimum_filter(h, size=size, mode="constant", cval=np.inf)
    cand = (h >= hmax) & (h > hmin) & (h >= _threshold(h, cfg))
    H, W = h.shape
    peaks = []
    for v, u in zip(*np.nonzero(cand)):
        val = h[v, u]
        win = h[max(v - r, 0): v + r + 1, max(u - r, 0): u + r + 1]
        if (win == val).sum() > 1:
            vv, uu = np.nonzero(win == val)
            first = (vv[0] + max(v - r, 0)) * W + (uu[0] + max(u - r, 0))
            if first != v * W + u:
                continue
        peaks.append(((int(u), int(v)), float(val)))
    peaks.sort(key=lambda p: (-p[1], p[0][1] * W + p[0][0]))
    return peaks[: cfg.n]


def detect_peaks_bruteforce(heatmap, cfg: LocalizerConfig = LocalizerConfig()):
    h = np.asarray(heatmap, dtype=float)
    h = h.reshape(h.shape[-2:])
    H, W = h.shape
    r = cfg.min_peak_distance
    thr = _threshold(h, cfg)
    out = []
    for v in range(H):
        for u in range(W):
            val = h[v, u]
            if val < thr:
                continue
            ok, lower = True, False
            for dv in range(-r, r + 1):
                for du in range(-r, r + 1):
                    if dv == 0 and du == 0:
                        continue
                    y, x = v + dv, u + du
                    if not (0 <= y < H and 0 <= x < W):
                        continue
                    if h[y, x] > val or (h[y, x] == val and y * W + x < v * W + u):
                        ok = False
                    elif h[y, x] < val:
                        lower = True
            if ok and lower:
                out.append(((u, v), float(val)))
    out.sort(key=lambda p: (-p[1], p[0][1] * W + p[0][0]))
    return out[: cfg.n]


def pixel_to_local(pixel, bev: BevConfig) -> np.ndarray:
    u, v = pixel
    if not (0 <= u < bev.width_px and 0 <= v < bev.height_px):
        raise ValueError(f"pixel {pixel} outside {bev.width_px}x{bev.height_px}")
    return pixel_center_local(u, v, bev)


def lookup_correspondence(corr, pixel, landmarks, image_shape) -> tuple[int, np.ndarray]:
    c = np.asarray(corr)
    L, dh, dw = c.shape
    H, W = image_shape
    u, v = pixel
    cu, cv = (u * dw) // W, (v * dh) // H
    j = int(np.argmax(c[:, cv, cu]))  # first maximum on ties
    return j, np.asarray(landmarks)[j]


def _residuals(R, t, loc, glo):
    return np.sqrt((((loc @ R.T) + t - glo) ** 2).sum(axis=1))


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def fit_rigid_2d(loc, glo) -> tuple[float, np.ndarray]:
    """Closed-form least-squares rotation angle and translation with glo ~ R loc + t."""
    mu_l, mu_g = loc.mean(axis=0), glo.mean(axis=0)
    a, b = loc - mu_l, glo - mu_g
    theta = math.atan2(float((a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum()),
                       float((a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]).sum()))
    return theta, mu_g - _rot(theta) @ mu_l


def ransac_pose(pairs: list[CorrespondencePair], cfg: LocalizerConfig = LocalizerConfig(),
                rng: np.random.Generator | None = None) -> LocalizationResult:
    n = len(pairs)
    if n < 2:
        return LocalizationResult(None, [], n, math.nan, "fewer than 2 pairs")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    loc = np.array([p.local for p in pairs], dtype=float)
    glo = np.array([p.global_xy for p in pairs], dtype=float)
    k = cfg.ransac_iterations
    i = rng.integers(0, n, size=k)
    j = (i + rng.integers(1, n, size=k)) % n  # distinct second index
    dl, dg = loc[j] - loc[i], glo[j] - glo[i]
    valid = (np.hypot(dl[:, 0], dl[:, 1]) >= cfg.min_sample_separation) & (np.hypot(dg[:, 0], dg[:, 1]) > 1e-9)
    if not valid.any():
        return LocalizationResult(None, [], n, math.nan, "all samples degenerate")
    i, j, dl, dg = i[valid], j[valid], dl[valid], dg[valid]
    theta = np.arctan2(dg[:, 1], dg[:, 0]) - np.arctan2(dl[:, 1], dl[:, 0])
    c, s_ = np.cos(theta), np.sin(theta)
    ml, mg = 0.5 * (loc[i] + loc[j]), 0.5 * (glo[i] + glo[j])
    tx = mg[:, 0] - (c * ml[:, 0] - s_ * ml[:, 1])
    ty = mg[:, 1] - (s_ * ml[:, 0] + c * ml[:, 1])
    px = c[:, None] * loc[None, :, 0] - s_[:, None] * loc[None, :, 1] + tx[:, None]
    py = s_[:, None] * loc[None, :, 0] + c[:, None] * loc[None, :, 1] + ty[:, None]
    res = np.sqrt((px - glo[None, :, 0]) ** 2 + (py - glo[None, :, 1]) ** 2)
    masks = res <= cfg.inlier_threshold
    counts = masks.sum(axis=1)
    sq = np.where(masks, res ** 2, 0.0).sum(axis=1)
    rms_all = np.sqrt(sq / np.maximum(counts, 1))
    # most inliers, then lowest RMS, then earliest sample
    b = int(np.lexsort((np.arange(len(counts)), rms_all, -counts))[0])
    best = (int(counts[b]), float(rms_all[b]), float(theta[b]), np.array([tx[b], ty[b]]), masks[b])
    cnt, rms, theta, t, mask = best
    if cfg.refine and cnt >= 2:
        th2, t2 = fit_rigid_2d(loc[mask], glo[mask])
        res2 = _residuals(_rot(th2), t2, loc, glo)
        mask2 = res2 <= cfg.inlier_threshold
        if mask2.sum() >= cnt:
            theta, t, mask = th2, t2, mask2
            cnt = int(mask.sum())
            rms = float(np.sqrt((res2[mask] ** 2).mean()))
    inliers = [p for p, m in zip(pairs, mask) if m]
    if cnt < cfg.min_inliers:
        return LocalizationResult(None, inliers, n, rms, f"best model has {cnt} < {cfg.min_inliers} inliers")
    return LocalizationResult(Pose2(float(t[0]), float(t[1]), theta), inliers, n, rms)


def correspondences(heatmap, corr, landmarks, bev: BevConfig, cfg: LocalizerConfig) -> list[CorrespondencePair]:
    pairs = []
    for (u, v), score in detect_peaks(heatmap, cfg):
        j, g = lookup_correspondence(corr, (u, v), landmarks, heatmap.shape[-2:])
        xy = pixel_to_local((u, v), bev)
        pairs.append(CorrespondencePair((float(xy[0]), float(xy[1])), j, (float(g[0]), float(g[1])), score))
    return pairs


def localize(cloud, bundle, cfg: LocalizerConfig = LocalizerConfig(), seed: int | None = None) -> LocalizationResult:
    """Full query pipeline on a raw local point cloud using a loaded bundle."""
    from .model import predict

    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return LocalizationResult(None, [], 0, math.nan, "empty cloud")
    bev = bundle.bev
    img = project_bev(voxel_downsample(pts, bev.voxel_size), bev)
    if not img.count.any():
        return LocalizationResult(None, [], 0, math.nan, "no points inside the BEV window")
    heat, corr = predict(bundle.model, img)
    lm = bundle.model.landmarks.detach().cpu().numpy().astype(float)
    pairs = correspondences(heat, corr, lm, bev, cfg)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return ransac_pose(pairs, cfg, rng)


def pose_errors(est: Pose2, gt: Pose2) -> tuple[float, float]:
    """Translation error (m) and absolute rotation error (deg)."""
    return math.hypot(est.x - gt.x, est.y - gt.y), abs(math.degrees(angle_diff(est.yaw, gt.yaw)))
