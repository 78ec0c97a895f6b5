"""Landmark detector network: residual encoder, feature-pyramid heatmap branch,
low-resolution correspondence branch, with the landmark table embedded as a parameter."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bev import BevImage

NORM_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    d_p: int = 4
    num_landmarks: int = 16
    base_channels: int = 16
    depth: int = 3
    leaky_slope: float = 0.01
    seed: int = 0
    max_mult: int = 3

    def __post_init__(self):
        if self.height % self.d_p or self.width % self.d_p:
            raise ConfigError(f"d_p={self.d_p} must divide {self.height}x{self.width}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.height % (2 ** self.depth) or self.width % (2 ** self.depth):
            raise ConfigError(f"2^depth must divide {self.height}x{self.width}")
        if self.num_landmarks < 1:
            raise ConfigError("need at least one landmark")
        if self.corr_pool < 1:
            raise ConfigError("correspondence level resolution is below d_p")

    @classmethod
    def paper_scale(cls, num_landmarks: int = 614) -> "ModelConfig":
        return cls(height=512, width=512, d_p=16, num_landmarks=num_landmarks,
                   base_channels=32, depth=6, max_mult=8)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * min(2 ** k, self.max_mult) for k in range(self.depth + 1)]

    @property
    def corr_level(self) -> int:
        """Deepest encoder level whose resolution is still >= d_p."""
        k = 0
        while k < self.depth and min(self.height, self.width) // 2 ** (k + 1) >= self.d_p:
            k += 1
        return k

    @property
    def corr_pool(self) -> int:
        res = self.height // 2 ** self.corr_level
        if res % self.d_p or (self.width // 2 ** self.corr_level) != res * self.width // self.height:
            return 0
        return res // self.d_p

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, slope, kernel=3):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, padding=kernel // 2)
        self.norm = nn.GroupNorm(1, cout, eps=NORM_EPS)
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, slope):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(1, cout, eps=NORM_EPS)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, cout, eps=NORM_EPS)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None
        self.slope = slope

    def forward(self, x):
        y = F.leaky_relu(self.norm1(self.conv1(x)), self.slope)
        y = self.norm2(self.conv2(y))
        s = x if self.skip is None else self.skip(x)
        return F.leaky_relu(y + s, self.slope)


class DownBlock(nn.Module):
    def __init__(self, cin, cout, slope):
        super().__init__()
        self.res = ResBlock(cin, cout, slope)

    def forward(self, x):
        return self.res(F.max_pool2d(x, 2))


@dataclass
class ForwardOutput:
    heatmap: torch.Tensor  # (B, 1, H, W)
    correspondence: torch.Tensor  # (B, L, d_p, d_p)


class LandmarkNet(nn.Module):
    def __init__(self, config: ModelConfig, landmarks=None):
        super().__init__()
        self.config = config
        c = config.channels
        a = config.leaky_slope
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.stem = ConvBlock(1, c[0], a)
            self.enc0 = ResBlock(c[0], c[0], a)
            self.down = nn.ModuleList(DownBlock(c[k - 1], c[k], a) for k in range(1, config.depth + 1))
            f = c[0]
            self.lateral = nn.ModuleList(nn.Conv2d(c[k], f, 1) for k in range(1, config.depth + 1))
            self.heat_block = ConvBlock(f, f, a)
            self.heat_out = nn.Conv2d(f, 1, 1)
            cc = 2 * c[0]
            self.corr_block1 = ConvBlock(c[config.corr_level], cc, a)
            self.corr_block2 = ConvBlock(cc, cc, a)
            self.corr_out = nn.Conv2d(cc, config.num_landmarks, 1)
        init = torch.zeros(config.num_landmarks, 2) if landmarks is None else torch.as_tensor(
            np.asarray(landmarks), dtype=torch.float32)
        if init.shape != (config.num_landmarks, 2):
            raise ConfigError(f"landmark table shape {tuple(init.shape)} != ({config.num_landmarks}, 2)")
        self.landmarks = nn.Parameter(init.clone())

    def network_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n != "landmarks"]

    def forward(self, image: torch.Tensor) -> ForwardOutput:
        cfg = self.config
        if image.dim() == 3:
            image = image.unsqueeze(1)
        if image.shape[-2:] != (cfg.height, cfg.width) or image.shape[1] != 1:
            raise ConfigError(f"input shape {tuple(image.shape)} does not match ({cfg.height}, {cfg.width})")
        feats = [self.enc0(self.stem(image))]
        for blk in self.down:
            feats.append(blk(feats[-1]))
        top = self.lateral[-1](feats[-1])
        for k in range(cfg.depth - 1, 0, -1):
            lat = self.lateral[k - 1](feats[k])
            top = lat + F.interpolate(top, size=lat.shape[-2:], mode="bilinear", align_corners=False)
        h = self.heat_out(self.heat_block(top))
        heat = F.interpolate(h, size=(cfg.height, cfg.width), mode="bicubic", align_corners=False)
        c = feats[cfg.corr_level]
        if cfg.corr_pool > 1:
            c = F.max_pool2d(c, cfg.corr_pool)
        corr = self.corr_out(self.corr_block2(self.corr_block1(c)))
        return ForwardOutput(heat, corr)


def image_tensor(image, dtype=torch.float32) -> torch.Tensor:
    arr = image.density if isinstance(image, BevImage) else np.asarray(image)
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype).reshape(1, 1, *arr.shape)


@torch.no_grad()
def predict(model: LandmarkNet, image) -> tuple[np.ndarray, np.ndarray]:
    """Heatmap (H, W) and correspondence logits (L, d_p, d_p) as numpy arrays."""
    dtype = next(model.parameters()).dtype
    out = model(image_tensor(image, dtype))
    return out.heatmap[0, 0].numpy(), out.correspondence[0].numpy()


def param_count(config: ModelConfig) -> int:
    with torch.device("meta"):
        net = LandmarkNet(config)
    return sum(p.numel() for p in net.parameters())


def forward_with_gradients(model: LandmarkNet, image, grad_heatmap, grad_corr) -> dict[str, torch.Tensor]:
    """Backpropagate upstream gradients on (heatmap, correspondence) into every parameter.

    The landmark table is not used by the forward pass, so its gradient here is zero;
    it receives gradient only through the loss.
    """
    dtype = next(model.parameters()).dtype
    x = image if isinstance(image, torch.Tensor) else image_tensor(image, dtype)
    out = model(x)
    params = dict(model.named_parameters())
    g = torch.autograd.grad(
        [out.heatmap, out.correspondence],
        list(params.values()),
        grad_outputs=[torch.as_tensor(grad_heatmap, dtype=dtype).reshape(out.heatmap.shape),
                      torch.as_tensor(grad_corr, dtype=dtype).reshape(out.correspondence.shape)],
        allow_unused=True,
    )
    return {n: (torch.zeros_like(p) if gi is None else gi) for (n, p), gi in zip(params.items(), g)}
