"""Planar rigid-body math: poses, similarities, angle wrapping."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to the half-open interval (-pi, pi]."""
    w = math.remainder(a, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


def angle_diff(a: float, b: float) -> float:
    return wrap_angle(a - b)


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite point {self}")


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.yaw)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.yaw})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous transform, local -> global."""
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = (self.x, self.y)
        return m


def local_to_global(pose: Pose2, p) -> np.ndarray:
    """Map local xy (shape (2,) or (N, 2)) into the global frame."""
    p = np.asarray(p, dtype=float)
    return p @ pose.rotation().T + pose.xy


def global_to_local(pose: Pose2, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return (q - pose.xy) @ pose.rotation()


def compose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def invert(a: Pose2) -> Pose2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(-(c * a.x + s * a.y), s * a.x - c * a.y, -a.yaw)


@dataclass(frozen=True)
class Similarity2:
    """x -> scale * R(rotation) x + translation."""

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        m = np.eye(3)
        m[:2, :2] = self.scale * np.array([[c, -s], [s, c]])
        m[:2, 2] = self.translation
        return m

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        m = self.matrix()
        return p @ m[:2, :2].T + m[:2, 2]

    def compose(self, other: "Similarity2") -> "Similarity2":
        """self after other."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        ox, oy = other.translation
        tx = self.scale * (c * ox - s * oy) + self.translation[0]
        ty = self.scale * (s * ox + c * oy) + self.translation[1]
        return Similarity2(self.rotation + other.rotation, (tx, ty), self.scale * other.scale)

    def invert(self) -> "Similarity2":
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty = self.translation
        k = 1.0 / self.scale
        return Similarity2(-self.rotation, (-k * (c * tx + s * ty), -k * (-s * tx + c * ty)), k)

    def is_identity(self) -> bool:
        return self.rotation == 0.0 and self.translation == (0.0, 0.0) and self.scale == 1.0
