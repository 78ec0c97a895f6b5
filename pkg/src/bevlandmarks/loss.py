"""Patch soft-argmax landmark estimates and the distance / correspondence objective.

All tensors are torch; gradients w.r.t. heatmap, correspondence logits and the
landmark table come from autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

IGNORE = -1
LABELED, EMPTY, TOO_FAR = "labeled", "empty-patch", "too-far"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 30.0
    gamma: float = 3.0
    d_p: int = 4
    dist_reduction: str = "sum"
    corr_reduction: str = "mean"
    empty_in_dist: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dist_reduction not in ("sum", "mean") or self.corr_reduction not in ("sum", "mean"):
            raise ValueError("reductions must be 'sum' or 'mean'")


@dataclass
class PatchView:
    index: int
    heatmap: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    occupied: bool


@dataclass
class CorrespondenceLabel:
    patch: int
    landmark: int
    reason: str


@dataclass
class LossOutput:
    total: torch.Tensor
    dist: torch.Tensor
    corr: torch.Tensor
    estimates: torch.Tensor  # (P, 2)
    nearest: torch.Tensor  # (P,) arg-min landmark per patch
    labels: torch.Tensor  # (P,) landmark index or IGNORE
    occupied: torch.Tensor  # (P,) bool
    diagnostics: dict = field(default_factory=dict)


def to_patches(x: torch.Tensor, d_p: int) -> torch.Tensor:
    """(..., H, W) -> (..., d_p*d_p, H/d_p * W/d_p), patches in row-major order."""
    *lead, H, W = x.shape
    if H % d_p or W % d_p:
        raise ValueError(f"d_p={d_p} must divide {H}x{W}")
    ph, pw = H // d_p, W // d_p
    x = x.reshape(*lead, d_p, ph, d_p, pw)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3)
    return x.reshape(*lead, d_p * d_p, ph * pw)


def partition_patches(heatmap, coords, occupancy, d_p: int) -> list[PatchView]:
    """Numpy view of the patch split (used for inspection and tests)."""
    h = np.asarray(heatmap)
    y = np.asarray(coords)
    occ = np.asarray(occupancy, dtype=bool)
    H, W = h.shape[-2:]
    if H % d_p or W % d_p:
        raise ValueError(f"d_p={d_p} must divide {H}x{W}")
    h = h.reshape(H, W)
    ph, pw = H // d_p, W // d_p
    out = []
    for r in range(d_p):
        for c in range(d_p):
            sl = (slice(r * ph, (r + 1) * ph), slice(c * pw, (c + 1) * pw))
            out.append(PatchView(r * d_p + c, h[sl], y[0][sl], y[1][sl], bool(occ[sl].any())))
    return out


def soft_argmax_coords(logits: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """logits (P, K), coords (P, K, 2) -> expected global xy (P, 2)."""
    w = torch.softmax(logits, dim=-1)  # max-subtracted internally
    return (w.unsqueeze(-1) * coords).sum(dim=-2)


def soft_argmax_patch(patch: PatchView) -> np.ndarray:
    logits = torch.as_tensor(patch.heatmap, dtype=torch.float64).reshape(1, -1)
    coords = torch.as_tensor(np.stack([patch.gx.ravel(), patch.gy.ravel()], axis=1), dtype=torch.float64)
    return soft_argmax_coords(logits, coords.unsqueeze(0))[0].numpy()


def nearest_assignment(estimates: torch.Tensor, landmarks: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        d2 = ((estimates[:, None, :] - landmarks[None, :, :]) ** 2).sum(-1)
        return torch.argmin(d2, dim=1)  # first minimum on ties


def _pair_distance(estimates, landmarks, nearest):
    diff = estimates - landmarks[nearest]
    return torch.linalg.vector_norm(diff, dim=-1)


def distance_loss(estimates, landmarks, gamma: float, nearest=None, reduction: str = "sum"):
    if len(estimates) == 0:
        return landmarks.sum() * 0.0
    if nearest is None:
        nearest = nearest_assignment(estimates, landmarks)
    terms = torch.log1p(gamma * _pair_distance(estimates, landmarks, nearest))
    return terms.sum() if reduction == "sum" else terms.mean()


def correspondence_labels(estimates, landmarks, occupied, patch_diagonal: float, nearest=None):
    """Per-patch label tensor (landmark index or IGNORE) and reasons."""
    if nearest is None:
        nearest = nearest_assignment(estimates, landmarks)
    with torch.no_grad():
        d = _pair_distance(estimates, landmarks, nearest)
    occupied = torch.as_tensor(occupied, dtype=torch.bool)
    too_far = d > patch_diagonal / 2
    labels = torch.where(occupied & ~too_far, nearest, torch.full_like(nearest, IGNORE))
    reasons = [EMPTY if not o else (TOO_FAR if f else LABELED) for o, f in zip(occupied.tolist(), too_far.tolist())]
    return labels, reasons


def correspondence_loss(corr_logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean"):
    """corr_logits (P, L); mean cross-entropy over non-ignored patches."""
    keep = labels != IGNORE
    if not bool(keep.any()):
        return corr_logits.sum() * 0.0
    return F.cross_entropy(corr_logits[keep], labels[keep], reduction=reduction)


def patch_diagonal_m(width_px: int, pixel_size: float, d_p: int) -> float:
    return width_px * pixel_size / d_p * math.sqrt(2.0)


def total_loss(heatmap, corr, coords, occupancy, landmarks, cfg: LossConfig,
               patch_diagonal: float, nearest=None) -> LossOutput:
    """heatmap (H, W), corr (L, d_p, d_p), coords (2, H, W), occupancy (H, W), landmarks (L, 2).

    ``nearest`` freezes the per-patch arg-min assignment (used by finite-difference checks).
    """
    d_p = cfg.d_p
    heatmap = heatmap.reshape(heatmap.shape[-2:])
    logits = to_patches(heatmap, d_p)  # (P, K)
    pc = to_patches(coords.to(heatmap.dtype), d_p).permute(1, 2, 0)  # (P, K, 2)
    occ = to_patches(torch.as_tensor(occupancy, dtype=torch.bool), d_p).any(dim=-1)
    est = soft_argmax_coords(logits, pc)
    if nearest is None:
        nearest = nearest_assignment(est, landmarks)
    in_dist = torch.ones_like(occ) if cfg.empty_in_dist else occ
    dist = distance_loss(est[in_dist], landmarks, cfg.gamma, nearest[in_dist], cfg.dist_reduction)
    labels, reasons = correspondence_labels(est, landmarks, occ, patch_diagonal, nearest)
    corr_logits = corr.reshape(corr.shape[-3], -1).T  # (P, L)
    lc = correspondence_loss(corr_logits, labels, cfg.corr_reduction)
    total = cfg.alpha * dist + cfg.beta * lc
    diag = {
        "occupied": int(occ.sum()),
        "labeled": int((labels != IGNORE).sum()),
        "empty_dist": not bool(in_dist.any()),
        "all_ignored": not bool((labels != IGNORE).any()),
        "reasons": reasons,
    }
    return LossOutput(total, dist, lc, est, nearest, labels, occ, diag)
