"""SSIM and distance metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError

# Reference operating point for the SSIM regularizer weight.
DEFAULT_SSIM_WEIGHT = 3.0


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ParameterError(f"window_size must be odd and positive, got {self.window_size}")
        if self.dynamic_range <= 0:
            raise ParameterError("dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def effective_window(self, height: int, width: int) -> int:
        """Largest odd window not exceeding the configured one or the image."""
        size = min(self.window_size, height, width)
        if size % 2 == 0:
            size -= 1
        return max(size, 1)


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Separable 2-D Gaussian window normalized to unit sum."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() == 4:
        return x
    raise ParameterError(f"expected (C,H,W) or (N,C,H,W), got shape {tuple(x.shape)}")


def ssim_map(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """SSIM at every valid window position, shape (N, C, H', W')."""
    if x.shape != y.shape:
        raise ParameterError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    x, y = _as_batch(x), _as_batch(y)
    n, c, h, w = x.shape
    size = cfg.effective_window(h, w)
    win = gaussian_window(size, cfg.sigma, dtype=x.dtype).to(x.device)
    win = win.expand(c, 1, size, size)

    def filt(img):
        return F.conv2d(img, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = cfg.c1, cfg.c2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Mean SSIM over window positions, channels and batch."""
    return ssim_map(x, y, cfg).mean()


def ssim_per_image(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    return ssim_map(x, y, cfg).flatten(1).mean(1)


def ssim_loss(x: torch.Tensor, y: torch.Tensor, weight: float = DEFAULT_SSIM_WEIGHT,
              cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """weight * (1 - SSIM(x, y))."""
    if weight < 0:
        raise ParameterError("SSIM weight must be nonnegative")
    return weight * (1.0 - ssim(x, y, cfg))


def linf_dist(x: torch.Tensor, y: torch.Tensor) -> float:
    if x.shape != y.shape:
        raise ParameterError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.numel() == 0:
        return 0.0
    return float((x - y).abs().max())


def linf_dist_per_image(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ParameterError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().flatten(1).max(1).values


def psnr(x: torch.Tensor, y: torch.Tensor, dynamic_range: float = 1.0) -> float:
    mse = float(((x - y) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(dynamic_range ** 2 / mse)
