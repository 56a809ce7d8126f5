"""Independent reference implementations used only by the tests.

These deliberately avoid the engine's einsum/stride-tricks machinery:
convolutions are plain nested loops or shifted-slice sums, statistics are
direct formulas, so agreement with the engine is a two-route check.
"""

from __future__ import annotations

import numpy as np


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, margin: int) -> np.ndarray:
    """Six nested loops over (n, o, p, q, c, taps); zero padding."""
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    assert ci == c
    xp = np.zeros((n, c, h + 2 * margin, wd + 2 * margin), dtype=x.dtype)
    xp[:, :, margin : margin + h, margin : margin + wd] = x
    oh, ow = h + 2 * margin - kh + 1, wd + 2 * margin - kw + 1
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for p in range(oh):
                for q in range(ow):
                    acc = 0.0
                    for cc in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[oi, cc, i, j] * xp[ni, cc, p + i, q + j]
                    out[ni, oi, p, q] = acc + (b[oi] if b is not None else 0.0)
    return out


def depthwise_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, margin: int) -> np.ndarray:
    n, c, h, wd = x.shape
    assert w.shape[0] == c and w.shape[1] == 1
    kh, kw = w.shape[2], w.shape[3]
    xp = np.zeros((n, c, h + 2 * margin, wd + 2 * margin), dtype=x.dtype)
    xp[:, :, margin : margin + h, margin : margin + wd] = x
    oh, ow = h + 2 * margin - kh + 1, wd + 2 * margin - kw + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for cc in range(c):
            for p in range(oh):
                for q in range(ow):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[cc, 0, i, j] * xp[ni, cc, p + i, q + j]
                    out[ni, cc, p, q] = acc + (b[cc] if b is not None else 0.0)
    return out


def corr_valid_2d(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of a single plane by shifted-slice sums."""
    s0, s1 = k.shape
    oh, ow = img.shape[0] - s0 + 1, img.shape[1] - s1 + 1
    out = np.zeros((oh, ow), dtype=img.dtype)
    for i in range(s0):
        for j in range(s1):
            out += k[i, j] * img[i : i + oh, j : j + ow]
    return out


def gaussian_window_2d(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_maps_ref(a: np.ndarray, b: np.ndarray, win: int, sigma: float, c1: float, c2: float):
    """Per-plane luminance and contrast-structure maps over valid windows."""
    g = gaussian_window_2d(win, sigma)
    n, c = a.shape[0], a.shape[1]
    ls, css = [], []
    for ni in range(n):
        for ci in range(c):
            pa, pb = a[ni, ci], b[ni, ci]
            mu_a = corr_valid_2d(pa, g)
            mu_b = corr_valid_2d(pb, g)
            va = corr_valid_2d(pa * pa, g) - mu_a**2
            vb = corr_valid_2d(pb * pb, g) - mu_b**2
            cov = corr_valid_2d(pa * pb, g) - mu_a * mu_b
            ls.append((2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1))
            css.append((2 * cov + c2) / (va + vb + c2))
    return np.stack(ls), np.stack(css)


def downsample2x_ref(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def ms_ssim_loss_ref(
    a: np.ndarray,
    b: np.ndarray,
    scales: int,
    betas,
    win: int = 11,
    sigma: float = 1.5,
    c1: float = 1e-4,
    c2: float = 9e-4,
) -> float:
    """Straightforward multi-scale recombination of the per-scale statistics."""
    m = min(scales, int(np.floor(np.log2(min(a.shape[2], a.shape[3]) / win))) + 1)
    bs = np.asarray(betas[:m], dtype=np.float64)
    bs = bs / bs.sum()
    value = 1.0
    for j in range(m):
        l, cs = ssim_maps_ref(a, b, win, sigma, c1, c2)
        if j < m - 1:
            value *= max(cs.mean(), 0.0) ** bs[j]
            a, b = downsample2x_ref(a), downsample2x_ref(b)
        else:
            value *= max((l * cs).mean(), 0.0) ** bs[j]
    return 1.0 - value
