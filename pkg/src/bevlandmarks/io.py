"""File formats: point clouds (xyz text / little-endian float32 binary), trajectories, PGM dumps."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import Pose2

FORMATS = ("xyz-text", "xyz-bin")
_REC = np.dtype("<f4")


class FormatError(ValueError):
    pass


def guess_format(path) -> str:
    return "xyz-bin" if str(path).endswith(".bin") else "xyz-text"


def read_cloud(path, fmt: str | None = None) -> np.ndarray:
    fmt = fmt or guess_format(path)
    if fmt == "xyz-bin":
        raw = Path(path).read_bytes()
        if len(raw) % 12:
            whole = len(raw) // 12 * 12
            raise FormatError(f"{path}: truncated record at byte offset {whole} ({len(raw)} bytes total)")
        return np.frombuffer(raw, dtype=_REC).reshape(-1, 3).astype(np.float64)
    if fmt == "xyz-text":
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 3:
                    raise FormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
                try:
                    rows.append([float(p) for p in parts])
                except ValueError as e:
                    raise FormatError(f"{path}:{lineno}: {e}") from None
        return np.array(rows, dtype=float).reshape(-1, 3)
    raise FormatError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")


def write_cloud(path, cloud, fmt: str | None = None) -> None:
    fmt = fmt or guess_format(path)
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if fmt == "xyz-bin":
        Path(path).write_bytes(cloud.astype(_REC).tobytes())
    elif fmt == "xyz-text":
        Path(path).write_text("".join(f"{x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in cloud))
    else:
        raise FormatError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")


def read_trajectory(path) -> list[tuple[str, Pose2]]:
    out: list[tuple[str, Pose2]] = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'frame_id x y yaw_rad'")
            fid = parts[0]
            if fid in seen:
                raise FormatError(f"{path}:{lineno}: duplicate frame id {fid!r}")
            try:
                pose = Pose2(float(parts[1]), float(parts[2]), float(parts[3]))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            seen.add(fid)
            out.append((fid, pose))
    return out


def write_trajectory(path, frames) -> None:
    Path(path).write_text("".join(f"{fid} {p.x:.9f} {p.y:.9f} {p.yaw:.12f}\n" for fid, p in frames))


def write_pgm(path, density) -> None:
    """8-bit grayscale, density*255 rounded; top row is the largest v (y up)."""
    img = np.clip(np.rint(np.asarray(density) * 255.0), 0, 255).astype(np.uint8)[::-1]
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data[::-1].copy()
