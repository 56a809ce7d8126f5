"""Hybrid restoration loss (multi-scale structural similarity + L1 + total
variation) and the reference metrics PSNR / SSIM.

All loss terms are built from taped tensor ops, so the total differentiates
through the tape. Reductions are resolution-independent: L1 uses the mean,
and each TV gradient norm is divided by the square root of its element
count, keeping the three loss weights balanced across image sizes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DepthwiseKernel,
    Tensor4,
    absolute,
    add,
    crop,
    depthwise_conv2d,
    div,
    downsample2x_avg,
    mean_all,
    mul,
    power,
    relu,
    sqrt,
    sub,
    sum_all,
)

__all__ = [
    "SsimParams",
    "LossWeights",
    "ssim",
    "ms_ssim_loss",
    "l1_loss",
    "tv_loss",
    "total_loss",
    "psnr",
]

_MS_BETAS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

_log = logging.getLogger(__name__)


@dataclass
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0
    scales: int = 5
    betas: tuple[float, ...] = _MS_BETAS

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stability constants must be positive")
        if abs(sum(self.betas) - 1.0) > 1e-3:
            raise ValueError("per-scale exponents must sum to 1")

    @property
    def c1(self) -> float:
        return (self.k1 * self.peak) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.peak) ** 2


@dataclass
class LossWeights:
    structure: float = 0.85  # multi-scale similarity term
    pixel: float = 0.15  # L1 term
    smooth: float = 0.01  # total variation term

    def __post_init__(self):
        if min(self.structure, self.pixel, self.smooth) < 0:
            raise ValueError("loss weights must be non-negative")


def _gaussian_window(size: int, sigma: float, channels: int, dtype) -> DepthwiseKernel:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k2d = np.outer(g, g)
    k2d /= k2d.sum()
    w = np.broadcast_to(k2d.astype(dtype), (channels, 1, size, size)).copy()
    return DepthwiseKernel(Tensor4(w))


def _effective_window(h: int, w: int, requested: int) -> int:
    """Largest odd window <= min(requested, h, w); images smaller than the
    default window get a shrunken one instead of an error."""
    m = min(requested, h, w)
    if m < 1:
        raise ValueError("image has no spatial extent")
    return m if m % 2 == 1 else m - 1


def ssim(a: Tensor4, b: Tensor4, p: SsimParams | None = None) -> tuple[Tensor4, Tensor4, Tensor4]:
    """Mean structural similarity plus the (luminance, contrast-structure)
    maps over valid Gaussian windows. Returns (scalar, l map, cs map)."""
    p = p or SsimParams()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    n, c, h, w = a.shape
    win = _effective_window(h, w, p.window_size)
    g = _gaussian_window(win, p.sigma, c, a.dtype)

    mu_a = depthwise_conv2d(a, g)
    mu_b = depthwise_conv2d(b, g)
    mu_aa = mul(mu_a, mu_a)
    mu_bb = mul(mu_b, mu_b)
    mu_ab = mul(mu_a, mu_b)
    var_a = sub(depthwise_conv2d(mul(a, a), g), mu_aa)
    var_b = sub(depthwise_conv2d(mul(b, b), g), mu_bb)
    cov = sub(depthwise_conv2d(mul(a, b), g), mu_ab)

    l_map = div(add(mul(mu_ab, 2.0), p.c1), add(add(mu_aa, mu_bb), p.c1))
    cs_map = div(add(mul(cov, 2.0), p.c2), add(add(var_a, var_b), p.c2))
    score = mean_all(mul(l_map, cs_map))
    return score, l_map, cs_map


def _scale_count(h: int, w: int, p: SsimParams) -> int:
    win = _effective_window(h, w, p.window_size)
    m = min(p.scales, int(math.floor(math.log2(min(h, w) / win))) + 1)
    if m < 1:
        raise ValueError(f"image {h}x{w} too small for multi-scale similarity")
    if m < p.scales:
        _log.warning("image %dx%d supports only %d of %d similarity scales", h, w, m, p.scales)
    return m


def ms_ssim_loss(pred: Tensor4, target: Tensor4, p: SsimParams | None = None) -> Tensor4:
    """1 - (coarsest-scale similarity)^beta_M * prod_j mean(cs_j)^beta_j.

    Scales are linked by factor-2 average downsampling. The scale count
    shrinks automatically for small images (down to plain 1 - SSIM at one
    scale) and the exponents renormalize over the scales actually used.
    Negative contrast-structure means are rectified before the fractional
    power.
    """
    p = p or SsimParams()
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    m = _scale_count(pred.shape[2], pred.shape[3], p)
    betas = np.asarray(p.betas[:m], dtype=np.float64)
    betas = betas / betas.sum()

    value: Tensor4 | None = None
    a, b = pred, target
    for j in range(m):
        score, l_map, cs_map = ssim(a, b, p)
        if j < m - 1:
            term = power(relu(mean_all(cs_map)), float(betas[j]))
            a, b = downsample2x_avg(a), downsample2x_avg(b)
        else:
            term = power(relu(score), float(betas[j]))
        value = term if value is None else mul(value, term)
    return sub(mul(value, -1.0), -1.0)  # 1 - value


def l1_loss(pred: Tensor4, target: Tensor4) -> Tensor4:
    """Mean absolute difference."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return mean_all(absolute(sub(pred, target)))


def tv_loss(pred: Tensor4) -> Tensor4:
    """Root-mean normalized L2 norms of forward differences along height
    and width; zero exactly when the image is constant."""
    n, c, h, w = pred.shape
    if h < 2 or w < 2:
        raise ValueError(f"total variation needs at least 2x2 spatial extent, got {h}x{w}")
    dh = sub(crop(pred, top=1), crop(pred, bottom=1))
    dw = sub(crop(pred, left=1), crop(pred, right=1))
    norm_h = sqrt(sum_all(mul(dh, dh)))
    norm_w = sqrt(sum_all(mul(dw, dw)))
    nh = math.sqrt(n * c * (h - 1) * w)
    nw = math.sqrt(n * c * h * (w - 1))
    return add(mul(norm_h, 1.0 / nh), mul(norm_w, 1.0 / nw))


def total_loss(
    pred: Tensor4,
    target: Tensor4,
    weights: LossWeights | None = None,
    p: SsimParams | None = None,
) -> tuple[Tensor4, dict[str, float]]:
    """Weighted sum of the three terms plus a per-term breakdown for logging."""
    weights = weights or LossWeights()
    terms = {
        "ms_ssim": ms_ssim_loss(pred, target, p),
        "l1": l1_loss(pred, target),
        "tv": tv_loss(pred),
    }
    total = add(
        add(mul(terms["ms_ssim"], weights.structure), mul(terms["l1"], weights.pixel)),
        mul(terms["tv"], weights.smooth),
    )
    breakdown = {k: v.item() for k, v in terms.items()}
    breakdown["total"] = total.item()
    return total, breakdown


def psnr(a: Tensor4 | np.ndarray, b: Tensor4 | np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; identical inputs report +inf."""
    da = a.data if isinstance(a, Tensor4) else np.asarray(a)
    db = b.data if isinstance(b, Tensor4) else np.asarray(b)
    if da.shape != db.shape:
        raise ValueError(f"shape mismatch: {da.shape} vs {db.shape}")
    mse = float(np.mean((da - db) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
