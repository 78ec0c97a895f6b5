"""BEV density images, per-pixel global coordinate maps, and augmentation.

Pixel convention: pixel (u, v) covers local x in [(u - W/2) s, (u - W/2 + 1) s)
and y likewise with v and H.  Rasters are stored row-major as ``arr[v, u]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2, Similarity2

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BevConfig:
    width_px: int = 64
    height_px: int = 64
    pixel_size: float = 0.25
    voxel_size: float = 0.1

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("image dimensions must be positive")
        if self.pixel_size <= 0 or self.voxel_size <= 0:
            raise ValueError("pixel_size and voxel_size must be positive")

    @classmethod
    def paper_scale(cls) -> "BevConfig":
        return cls(512, 512, 0.2, 0.1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    @property
    def extent_m(self) -> tuple[float, float]:
        return (self.width_px * self.pixel_size, self.height_px * self.pixel_size)


def finite_points(cloud) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    ok = np.isfinite(cloud).all(axis=1)
    if not ok.all():
        log.warning("dropped %d non-finite points", int((~ok).sum()))
        cloud = cloud[ok]
    return cloud


def voxel_downsample(cloud, voxel_size: float) -> np.ndarray:
    """One centroid per occupied voxel, ordered by voxel index."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = finite_points(cloud)
    if len(pts) == 0:
        return np.zeros((0, 3))
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    out = np.stack([np.bincount(inverse, weights=pts[:, k]) for k in range(3)], axis=1)
    return out / counts[:, None]


def pixel_of(xy, config: BevConfig) -> tuple[np.ndarray, np.ndarray]:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    u = np.floor(xy[:, 0] / config.pixel_size + config.width_px / 2).astype(np.int64)
    v = np.floor(xy[:, 1] / config.pixel_size + config.height_px / 2).astype(np.int64)
    return u, v


def pixel_center_local(u, v, config: BevConfig) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    x = (u - config.width_px / 2 + 0.5) * config.pixel_size
    y = (v - config.height_px / 2 + 0.5) * config.pixel_size
    return np.stack([x, y], axis=-1)


@dataclass
class BevImage:
    config: BevConfig
    density: np.ndarray
    count: np.ndarray

    @classmethod
    def from_counts(cls, config: BevConfig, count: np.ndarray) -> "BevImage":
        count = np.asarray(count, dtype=np.int64)
        peak = count.max() if count.size else 0
        density = count / peak if peak > 0 else np.zeros(count.shape)
        return cls(config, density, count)

    @property
    def occupancy(self) -> np.ndarray:
        return self.count > 0


def project_bev(cloud, config: BevConfig) -> BevImage:
    pts = finite_points(cloud)
    u, v = pixel_of(pts[:, :2], config)
    inside = (u >= 0) & (u < config.width_px) & (v >= 0) & (v < config.height_px)
    flat = v[inside] * config.width_px + u[inside]
    count = np.bincount(flat, minlength=config.width_px * config.height_px)
    return BevImage.from_counts(config, count.reshape(config.shape))


@dataclass
class CoordinateMap:
    """Global (x, y) per pixel, held as an affine map of centered pixel coords.

    ``affine`` is 2x3 and maps (xi, eta, 1) -> global xy, where
    xi = u + 0.5 - W/2 and eta = v + 0.5 - H/2 (units: pixels).
    """

    config: BevConfig
    affine: np.ndarray
    _grids: tuple | None = field(default=None, repr=False, compare=False)

    def grids(self) -> tuple[np.ndarray, np.ndarray]:
        if self._grids is None:
            H, W = self.config.shape
            xi = np.arange(W) + 0.5 - W / 2
            eta = np.arange(H) + 0.5 - H / 2
            a = self.affine
            gx = a[0, 0] * xi[None, :] + a[0, 1] * eta[:, None] + a[0, 2]
            gy = a[1, 0] * xi[None, :] + a[1, 1] * eta[:, None] + a[1, 2]
            self._grids = (gx, gy)
        return self._grids

    @property
    def gx(self) -> np.ndarray:
        return self.grids()[0]

    @property
    def gy(self) -> np.ndarray:
        return self.grids()[1]

    def stacked(self) -> np.ndarray:
        """(2, H, W) array."""
        return np.stack(self.grids())


def build_coordinate_map(pose: Pose2, config: BevConfig) -> CoordinateMap:
    s = config.pixel_size
    a = np.zeros((2, 3))
    a[:, :2] = pose.rotation() * s
    a[:, 2] = (pose.x, pose.y)
    return CoordinateMap(config, a)


@dataclass(frozen=True)
class AugmentParams:
    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        tx, ty = self.translation
        if not (-0.25 <= tx <= 0.25 and -0.25 <= ty <= 0.25):
            raise ValueError(f"translation fractions outside [-0.25, 0.25]: {self.translation}")
        if not 0.0 <= self.rotation < 2 * math.pi:
            raise ValueError(f"rotation outside [0, 2pi): {self.rotation}")
        if not 0.5 <= self.scale <= 1.5:
            raise ValueError(f"scale outside [0.5, 1.5]: {self.scale}")

    def similarity(self, config: BevConfig) -> Similarity2:
        """Pixel-space warp about the image center."""
        t = (self.translation[0] * config.width_px, self.translation[1] * config.height_px)
        return Similarity2(self.rotation, t, self.scale)


@dataclass(frozen=True)
class AugmentRanges:
    max_translation: float = 0.25
    rotate: bool = True
    scale_range: tuple[float, float] = (0.5, 1.5)

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        t = rng.uniform(-self.max_translation, self.max_translation, size=2)
        rot = rng.uniform(0.0, 2 * math.pi) if self.rotate else 0.0
        lo, hi = self.scale_range
        scale = rng.uniform(lo, hi) if hi > lo else lo
        return AugmentParams((float(t[0]), float(t[1])), float(rot) % (2 * math.pi), float(scale))


def augment(image: BevImage, cmap: CoordinateMap, params: AugmentParams) -> tuple[BevImage, CoordinateMap]:
    if image.config != cmap.config:
        raise ValueError("image and coordinate map configs differ")
    cfg = image.config
    sim = params.similarity(cfg)
    if sim.is_identity():
        return (BevImage(cfg, image.density.copy(), image.count.copy()),
                CoordinateMap(cfg, cmap.affine.copy()))
    inv = sim.invert().matrix()
    H, W = cfg.shape
    xi = np.arange(W) + 0.5 - W / 2
    eta = np.arange(H) + 0.5 - H / 2
    sx = inv[0, 0] * xi[None, :] + inv[0, 1] * eta[:, None] + inv[0, 2]
    sy = inv[1, 0] * xi[None, :] + inv[1, 1] * eta[:, None] + inv[1, 2]
    su = np.floor(sx + W / 2).astype(np.int64)
    sv = np.floor(sy + H / 2).astype(np.int64)
    ok = (su >= 0) & (su < W) & (sv >= 0) & (sv < H)
    count = np.zeros_like(image.count)
    density = np.zeros_like(image.density)
    count[ok] = image.count[sv[ok], su[ok]]
    density[ok] = image.density[sv[ok], su[ok]]
    # composing with the inverse warp keeps the map exactly affine
    a = np.vstack([cmap.affine, [0.0, 0.0, 1.0]]) @ inv
    return BevImage(cfg, density, count), CoordinateMap(cfg, a[:2])
