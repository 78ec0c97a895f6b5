"""Success rate and median pose errors, overall and binned by distance to the reference trajectory."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2, angle_diff


@dataclass(frozen=True)
class EvalThresholds:
    te_max: float = 2.0
    re_max_deg: float = 5.0

    def __post_init__(self):
        if self.te_max <= 0 or self.re_max_deg <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class FrameRecord:
    frame_id: str
    status: str
    te: float
    re_deg: float
    success: bool
    ref_distance: float


@dataclass
class EvalReport:
    sr: float
    median_te: float
    median_re_deg: float
    n_frames: int
    n_posed: int
    bins: list[tuple[float, float, int, float]]  # (lo, hi, count, SR%)
    records: list[FrameRecord] = field(default_factory=list)
    bin_width: float = 3.0

    def text(self) -> str:
        lines = [
            "# medians are over frames where a pose was produced; NONE results count as SR failures",
            f"frames {self.n_frames}",
            f"posed {self.n_posed}",
            f"SR={self.sr:.2f}",
            f"median_TE_m={_fmt(self.median_te)}",
            f"median_RE_deg={_fmt(self.median_re_deg)}",
            f"# SR by distance to closest reference pose ({self.bin_width:g} m bins): lo hi count SR",
        ]
        lines += [f"bin {lo:g} {hi:g} {n} {sr:.2f}" for lo, hi, n, sr in self.bins]
        lines.append("# frame_id status TE_m RE_deg success ref_dist_m")
        lines += [f"frame {r.frame_id} {r.status} {_fmt(r.te)} {_fmt(r.re_deg)} {int(r.success)} {r.ref_distance:.3f}"
                  for r in self.records]
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.6f}"


def lower_median(values) -> float:
    v = sorted(values)
    if not v:
        return math.nan
    return float(v[(len(v) - 1) // 2])


def evaluate(results, gt: list[Pose2], ref_traj: list[Pose2], thresholds: EvalThresholds = EvalThresholds(),
             frame_ids: list[str] | None = None, bin_width: float = 3.0) -> EvalReport:
    results = list(results)
    if len(results) != len(gt):
        raise ValueError(f"{len(results)} results but {len(gt)} ground-truth poses")
    ids = frame_ids if frame_ids is not None else [str(i) for i in range(len(gt))]
    ref = np.array([[p.x, p.y] for p in ref_traj], dtype=float).reshape(-1, 2)
    records = []
    for fid, res, g in zip(ids, results, gt):
        pose = getattr(res, "pose", res)
        dref = float(np.sqrt(((ref - [g.x, g.y]) ** 2).sum(1)).min()) if len(ref) else math.nan
        if pose is None:
            records.append(FrameRecord(fid, "NONE", math.nan, math.nan, False, dref))
            continue
        te = math.hypot(pose.x - g.x, pose.y - g.y)
        re = abs(math.degrees(angle_diff(pose.yaw, g.yaw)))
        ok = te < thresholds.te_max and re < thresholds.re_max_deg
        records.append(FrameRecord(fid, "OK", te, re, ok, dref))
    n = len(records)
    sr = 100.0 * sum(r.success for r in records) / n if n else 0.0
    posed = [r for r in records if r.status == "OK"]
    bins = []
    if n and len(ref):
        keys = [int(math.floor(r.ref_distance / bin_width)) for r in records]
        for k in sorted(set(keys)):
            members = [r for r, kk in zip(records, keys) if kk == k]
            bins.append((k * bin_width, (k + 1) * bin_width, len(members),
                         100.0 * sum(m.success for m in members) / len(members)))
    return EvalReport(sr, lower_median([r.te for r in posed]), lower_median([r.re_deg for r in posed]),
                      n, len(posed), bins, records, bin_width)
