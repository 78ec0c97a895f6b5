"""Joint optimization of network weights and landmark coordinates."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bev import AugmentRanges, BevConfig, BevImage, CoordinateMap, augment, build_coordinate_map, project_bev, voxel_downsample
from .bundle import Bundle, save_bundle
from .geometry import Pose2
from .landmarks import LandmarkSet
from .loss import LossConfig, patch_diagonal_m, total_loss
from .model import LandmarkNet, ModelConfig, image_tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised on a non-finite loss or gradient; ``checkpoint`` holds the last good state when known."""

    checkpoint = None


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1
    lr_initial: float = 4e-4
    lr_final: float = 4e-5
    lr_factor: float = 0.1
    lr_milestone: int | None = None  # default: ceil(2 * epochs / 3)
    momentum: float = 0.9
    val_fraction: float = 0.03
    freeze_landmarks: bool = False
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    deterministic: bool = True

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")


@dataclass
class Frame:
    frame_id: str
    pose: Pose2
    image: BevImage
    cmap: CoordinateMap


def prepare_frame(frame_id: str, pose: Pose2, cloud, bev: BevConfig) -> Frame:
    img = project_bev(voxel_downsample(cloud, bev.voxel_size), bev)
    return Frame(frame_id, pose, img, build_coordinate_map(pose, bev))


def split_train_val(frames: list, val_fraction: float, seed: int) -> tuple[list, list]:
    n = len(frames)
    if n < 2:
        raise ValueError("need at least 2 frames to split")
    n_val = min(n - 1, max(1, math.floor(n * val_fraction + 1e-9)))
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [f for i, f in enumerate(frames) if i not in val_idx]
    val = [f for i, f in enumerate(frames) if i in val_idx]
    return train, val


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay by ``lr_factor`` every milestone epochs, clamped at ``lr_final``."""
    E = cfg.epochs
    if cfg.lr_milestone is not None:
        m = cfg.lr_milestone
    else:
        m = max(1, min(math.ceil(2 * E / 3), E - 1))
    lr = cfg.lr_initial * cfg.lr_factor ** (epoch // m)
    return max(lr, cfg.lr_final)


class MomentumSGD:
    """v <- mu * v + g ; p <- p - lr * v"""

    def __init__(self, named_params, momentum: float = 0.9, frozen: tuple[str, ...] = ()):
        self.params = dict(named_params)
        self.momentum = momentum
        self.frozen = set(frozen)
        self.buffers = {n: torch.zeros_like(p) for n, p in self.params.items() if n not in self.frozen}

    @torch.no_grad()
    def step(self, lr: float, grads: dict | None = None) -> None:
        for name, p in self.params.items():
            if name in self.frozen:
                continue
            g = grads[name] if grads is not None else p.grad
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient in {name}")
            v = self.buffers[name]
            v.mul_(self.momentum).add_(g)
            p.sub_(lr * v)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    bundle: Bundle
    history: list[dict]
    summary: dict
    final_landmarks: np.ndarray
    initial_landmarks: np.ndarray


def frame_loss(model: LandmarkNet, image: BevImage, cmap: CoordinateMap, loss_cfg: LossConfig, diag: float):
    dtype = model.landmarks.dtype
    out = model(image_tensor(image, dtype))
    coords = torch.as_tensor(cmap.stacked(), dtype=dtype)
    return total_loss(out.heatmap[0, 0], out.correspondence[0], coords, image.count > 0,
                      model.landmarks, loss_cfg, diag)


def validation_loss(model, frames: list[Frame], loss_cfg: LossConfig, diag: float) -> float:
    if not frames:
        return math.nan
    with torch.no_grad():
        vals = [float(frame_loss(model, f.image, f.cmap, loss_cfg, diag).total) for f in frames]
    return float(np.mean(vals))


def _snapshot(model) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def _restore(model, snap) -> None:
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(snap[n])


def mean_displacement(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=1).mean())


def train(frames: list[Frame], landmarks: LandmarkSet, bev: BevConfig, cfg: TrainConfig,
          model_cfg: ModelConfig | None = None, resume: Bundle | None = None,
          checkpoint_path=None, log_path=None, on_epoch=None) -> TrainResult:
    if cfg.deterministic:
        torch.set_num_threads(1)
    if model_cfg is None:
        model_cfg = ModelConfig(height=bev.height_px, width=bev.width_px, d_p=cfg.loss.d_p,
                                num_landmarks=len(landmarks), seed=cfg.seed)
    if model_cfg.num_landmarks != len(landmarks) or model_cfg.d_p != cfg.loss.d_p:
        raise ValueError("model config disagrees with landmark count or d_p")
    diag = patch_diagonal_m(bev.width_px, bev.pixel_size, cfg.loss.d_p)
    train_frames, val_frames = split_train_val(frames, cfg.val_fraction, cfg.seed)
    model = LandmarkNet(model_cfg, landmarks.coords.astype(np.float32))
    initial = model.landmarks.detach().numpy().astype(float).copy()
    frozen = ("landmarks",) if cfg.freeze_landmarks else ()
    opt = MomentumSGD(model.named_parameters(), cfg.momentum, frozen)
    rng = np.random.default_rng(cfg.seed)
    start_epoch, history = 0, []
    best_val, best = math.inf, _snapshot(model)
    if resume is not None:
        st = resume.optimizer["state"]
        tensors = resume.optimizer["tensors"]
        _restore(model, {n: torch.as_tensor(tensors["param:" + n]) for n, _ in model.named_parameters()})
        for n in opt.buffers:
            opt.buffers[n].copy_(torch.as_tensor(tensors["momentum:" + n]))
        best = {n: torch.as_tensor(tensors["best:" + n]) for n, _ in model.named_parameters()}
        initial = tensors["init:landmarks"].astype(float)
        rng.bit_generator.state = st["rng"]
        start_epoch, history, best_val = st["epoch"], st["history"], st["best_val"]
        if best_val is None:
            best_val = math.inf

    log_fh = open(log_path, "a" if resume is not None else "w") if log_path else None
    last_good = None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            last_good = (_snapshot(model), {n: v.clone() for n, v in opt.buffers.items()}, rng.bit_generator.state,
                         list(history), best_val)
            lr = lr_schedule(epoch, cfg)
            losses = []
            for k in rng.permutation(len(train_frames)):
                f = train_frames[k]
                params = cfg.augment.sample(rng)
                img, cm = augment(f.image, f.cmap, params)
                out = frame_loss(model, img, cm, cfg.loss, diag)
                if not torch.isfinite(out.total):
                    raise DivergenceError(f"loss became {float(out.total.detach())} at epoch {epoch}")
                opt.zero_grad()
                out.total.backward()
                opt.step(lr)
                losses.append(float(out.total.detach()))
            val = validation_loss(model, val_frames, cfg.loss, diag)
            lm_now = model.landmarks.detach().numpy().astype(float)
            rec = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else math.nan,
                   "val_loss": val, "lr": lr, "lambda_mean_disp": mean_displacement(lm_now, initial)}
            history.append(rec)
            if val < best_val or not math.isfinite(best_val):
                best_val, best = val, _snapshot(model)
            line = f"{rec['epoch']} {rec['train_loss']:.6f} {val:.6f} {lr:.3e} {rec['lambda_mean_disp']:.6f}"
            log.info(line)
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
            if checkpoint_path:
                save_bundle(checkpoint_path, _checkpoint(model, bev, opt, best, initial, rng, epoch + 1,
                                                         history, best_val))
            if on_epoch:
                on_epoch(rec)
    except DivergenceError as e:
        snap, bufs, rng_state, hist, bv = last_good
        _restore(model, snap)
        for n, v in bufs.items():
            opt.buffers[n].copy_(v)
        rng.bit_generator.state = rng_state
        e.checkpoint = _checkpoint(model, bev, opt, best, initial, rng, len(hist), hist, bv)
        if checkpoint_path:
            save_bundle(checkpoint_path, e.checkpoint)
        raise
    finally:
        if log_fh:
            log_fh.close()

    final_lm = model.landmarks.detach().numpy().astype(float).copy()
    if history:
        _restore(model, best)
    released = model.landmarks.detach().numpy().astype(float)
    summary = {
        "epochs": cfg.epochs,
        "train_frames": len(train_frames),
        "val_frames": len(val_frames),
        "num_landmarks": len(landmarks),
        "freeze_landmarks": cfg.freeze_landmarks,
        "best_val_loss": best_val if math.isfinite(best_val) else None,
        "first_train_loss": history[0]["train_loss"] if history else None,
        "last_train_loss": history[-1]["train_loss"] if history else None,
        "landmark_displacement": _disp_stats(released, initial),
        "min_landmark_spacing": LandmarkSet(released).min_pairwise_distance(),
    }
    meta = {"seed": cfg.seed, "freeze_landmarks": cfg.freeze_landmarks, "epochs": cfg.epochs}
    return TrainResult(Bundle(model, bev, meta), history, summary, final_lm, initial)


def _disp_stats(a, b) -> dict:
    d = np.linalg.norm(np.asarray(a) - np.asarray(b), axis=1)
    return {"mean": float(d.mean()), "median": float(np.median(d)), "max": float(d.max()),
            "moved_over_0.1m": float((d > 0.1).mean())}


def _checkpoint(model, bev, opt, best, initial, rng, epoch, history, best_val) -> Bundle:
    tensors = {"param:" + n: p.detach().numpy().copy() for n, p in model.named_parameters()}
    tensors.update({"momentum:" + n: v.numpy().copy() for n, v in opt.buffers.items()})
    tensors.update({"best:" + n: v.numpy().copy() for n, v in best.items()})
    tensors["init:landmarks"] = np.asarray(initial, dtype=np.float32)
    state = {"epoch": epoch, "rng": rng.bit_generator.state, "history": history,
             "best_val": best_val if math.isfinite(best_val) else None}
    snap = copy.deepcopy(model)
    _restore(snap, best)
    return Bundle(snap, bev, {"checkpoint": True}, {"state": state, "tensors": tensors})


def write_summary(path, result: TrainResult) -> None:
    Path(path).write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
