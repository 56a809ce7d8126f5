"""Seeded synthetic degradations: atmospheric haze, additive rain streaks,
and multiplicative low-light dimming, plus a procedural clean-image
generator so datasets need no binary assets.

Every generator is a pure function of (input, params, seed); re-running
with the same seed reproduces output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor4

__all__ = [
    "HazeParams",
    "RainParams",
    "LowLightParams",
    "DegradedPair",
    "make_haze",
    "make_rain",
    "make_lowlight",
    "make_clean_image",
    "gen_dataset",
    "format_param_log",
]

SCENES = ("haze", "rain", "lowlight")


@dataclass
class HazeParams:
    """I = J*t + A*(1-t). transmission: ("constant", t) | ("vramp", top, bottom)
    | ("beta", beta) with a linear synthetic depth ramp."""

    atmosphere: float | tuple[float, float, float] = 0.95
    transmission: tuple = ("vramp", 0.4, 0.9)


@dataclass
class RainParams:
    count: int = 60
    angle_deg: float = 10.0  # from vertical
    length: float = 12.0
    width: float = 1.2
    intensity: float = 0.35
    fade: float = 0.3  # along-streak tail-end intensity multiplier
    seed: int = 0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("streak dimensions must be positive")
        if not 0 < self.intensity <= 1:
            raise ValueError("intensity must be in (0, 1]")


@dataclass
class LowLightParams:
    """illumination: ("constant", L) | ("field", L_min, L_max) where the field
    is a smooth low-frequency random surface."""

    illumination: tuple = ("field", 0.15, 0.45)
    seed: int = 0


@dataclass
class DegradedPair:
    pair_id: str
    scene: str
    degraded: Tensor4
    clean: Tensor4
    params: dict = field(default_factory=dict)


def _image_array(x: Tensor4) -> np.ndarray:
    return x.data


def _transmission_map(spec: tuple, h: int, w: int) -> np.ndarray:
    kind = spec[0]
    if kind == "constant":
        t = np.full((h, w), float(spec[1]))
    elif kind == "vramp":
        top, bottom = float(spec[1]), float(spec[2])
        col = np.linspace(top, bottom, h).reshape(h, 1)
        t = np.broadcast_to(col, (h, w)).copy()
    elif kind == "beta":
        depth = np.linspace(1.0, 0.0, h).reshape(h, 1)  # far at the top
        t = np.exp(-float(spec[1]) * np.broadcast_to(depth, (h, w)))
    else:
        raise ValueError(f"unknown transmission spec {spec!r}")
    if t.min() <= 0 or t.max() > 1:
        raise ValueError("transmission must lie in (0, 1]")
    return t


def make_haze(clean: Tensor4, p: HazeParams) -> Tensor4:
    """Blend toward the atmospheric light: I = J*t + A*(1-t)."""
    j = _image_array(clean)
    n, c, h, w = j.shape
    t = _transmission_map(p.transmission, h, w).astype(j.dtype)
    a = np.asarray(p.atmosphere, dtype=j.dtype).reshape(1, -1, 1, 1)
    out = j * t + a * (1.0 - t)
    return Tensor4(out)


def _render_streaks(h: int, w: int, p: RainParams, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased line segments: coverage falls off linearly within one
    pixel of the streak's half-width, with an optional along-length fade."""
    layer = np.zeros((h, w))
    theta = np.deg2rad(p.angle_deg)
    dy, dx = np.cos(theta), np.sin(theta)  # mostly vertical fall direction
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(p.count):
        cy = rng.uniform(-p.length / 2, h + p.length / 2)
        cx = rng.uniform(-p.length / 2, w + p.length / 2)
        half = p.length / 2
        # signed coordinates of every pixel in the streak frame
        ry, rx = ys - cy, xs - cx
        along = ry * dy + rx * dx
        across = np.abs(-ry * dx + rx * dy)
        coverage = np.clip(p.width / 2 + 0.5 - across, 0.0, 1.0)
        inside = np.abs(along) <= half
        fade = 1.0 + (p.fade - 1.0) * (along + half) / p.length
        layer += np.where(inside, coverage * np.clip(fade, 0.0, 1.0), 0.0) * p.intensity
    return np.clip(layer, 0.0, None)


def make_rain(clean: Tensor4, p: RainParams) -> tuple[Tensor4, Tensor4]:
    """Returns (rainy, streak layer); rainy = clip(clean + streaks, 0, 1)."""
    o = _image_array(clean)
    n, c, h, w = o.shape
    rng = np.random.default_rng(p.seed)
    s = np.zeros_like(o)
    for k in range(n):
        layer = _render_streaks(h, w, p, rng).astype(o.dtype)
        s[k] = layer  # same streaks on all channels: rain is achromatic
    rainy = np.clip(o + s, 0.0, 1.0)
    return Tensor4(rainy), Tensor4(s)


def _illumination_map(spec: tuple, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    kind = spec[0]
    if kind == "constant":
        lum = np.full((h, w), float(spec[1]))
    elif kind == "field":
        lo, hi = float(spec[1]), float(spec[2])
        coarse = rng.uniform(0.0, 1.0, size=(4, 4))
        ys = np.linspace(0, 3, h)
        xs = np.linspace(0, 3, w)
        y0 = np.floor(ys).astype(int).clip(0, 2)
        x0 = np.floor(xs).astype(int).clip(0, 2)
        fy = (ys - y0).reshape(h, 1)
        fx = (xs - x0).reshape(1, w)
        c00 = coarse[y0][:, x0]
        c01 = coarse[y0][:, x0 + 1]
        c10 = coarse[y0 + 1][:, x0]
        c11 = coarse[y0 + 1][:, x0 + 1]
        smooth = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
        lum = lo + (hi - lo) * smooth
    else:
        raise ValueError(f"unknown illumination spec {spec!r}")
    if lum.min() <= 0 or lum.max() >= 1:
        raise ValueError("illumination must lie in (0, 1)")
    return lum


def make_lowlight(clean: Tensor4, p: LowLightParams) -> Tensor4:
    """Multiplicative dimming: I = L * R, so R = I / L wherever L > 0."""
    r = _image_array(clean)
    n, c, h, w = r.shape
    rng = np.random.default_rng(p.seed)
    lum = _illumination_map(p.illumination, h, w, rng).astype(r.dtype)
    return Tensor4(r * lum)


# ---------------------------------------------------------------------------
# procedural clean images


def make_clean_image(size: int, rng: np.random.Generator, dtype=np.float64) -> Tensor4:
    """Gradient background plus random rectangles, disks, and a sinusoid;
    enough structure for edges, attention, and similarity metrics to bite."""
    h = w = size
    img = np.zeros((3, h, w), dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w] / max(h - 1, 1)
    gdir = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(gdir) * ys + np.sin(gdir) * xs + 1.0) / 2.0
    base = rng.uniform(0.2, 0.8, size=3)
    tint = rng.uniform(-0.3, 0.3, size=3)
    for ch in range(3):
        img[ch] = base[ch] + tint[ch] * ramp

    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.1, 0.9, size=3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h, 2)
            hh = int(rng.integers(max(2, h // 8), max(3, h // 2)))
            ww = int(rng.integers(max(2, w // 8), max(3, w // 2)))
            img[:, y0 : y0 + hh, x0 : x0 + ww] = color.reshape(3, 1, 1)
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(size / 10, size / 4)
            mask = (np.mgrid[0:h, 0:w][0] - cy) ** 2 + (np.mgrid[0:h, 0:w][1] - cx) ** 2 <= rad**2
            img[:, mask] = color.reshape(3, 1)

    freq = rng.uniform(1.5, 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.08 * np.sin(2 * np.pi * freq * xs + phase)
    img += wave
    return Tensor4(np.clip(img, 0.02, 0.98).astype(dtype)[None])


# ---------------------------------------------------------------------------
# paired datasets


def _degrade_one(clean: Tensor4, scene: str, seed: int) -> tuple[Tensor4, dict]:
    rng = np.random.default_rng(seed)
    if scene == "haze":
        top = float(rng.uniform(0.25, 0.5))
        bottom = float(rng.uniform(0.75, 0.95))
        a = float(rng.uniform(0.85, 1.0))
        p = HazeParams(atmosphere=a, transmission=("vramp", top, bottom))
        out = make_haze(clean, p)
        info = {"A": a, "t_top": top, "t_bottom": bottom}
    elif scene == "rain":
        count = int(rng.integers(30, 80))
        angle = float(rng.uniform(-15.0, 15.0))
        p = RainParams(count=count, angle_deg=angle, seed=seed)
        out, _ = make_rain(clean, p)
        info = {"count": count, "angle_deg": round(angle, 3), "intensity": p.intensity}
    elif scene == "lowlight":
        lo = float(rng.uniform(0.1, 0.25))
        hi = float(rng.uniform(0.3, 0.5))
        p = LowLightParams(illumination=("field", lo, hi), seed=seed)
        out = make_lowlight(clean, p)
        info = {"L_min": round(lo, 4), "L_max": round(hi, 4)}
    else:
        raise ValueError(f"unknown scene {scene!r}")
    return out, info


def gen_dataset(
    cleans: Iterable[Tensor4] | None,
    scene: str,
    seed: int,
    count: int | None = None,
    size: int = 32,
) -> list[DegradedPair]:
    """Deterministic paired set. With cleans=None, ``count`` procedural clean
    images of ``size`` are generated first. scene='mixed' draws the scene type
    uniformly per item."""
    master = np.random.SeedSequence(seed)
    if cleans is None:
        if not count:
            raise ValueError("need either clean images or a count to generate them")
        gen_seeds = master.spawn(count)
        cleans = [make_clean_image(size, np.random.default_rng(s)) for s in gen_seeds]
    else:
        cleans = list(cleans)
        if not cleans:
            raise ValueError("empty clean image set")
    item_seeds = np.random.SeedSequence((seed, 1)).spawn(len(cleans))
    scene_rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    pairs = []
    for i, clean in enumerate(cleans):
        this_scene = scene
        if scene == "mixed":
            this_scene = SCENES[scene_rng.integers(0, len(SCENES))]
        elif scene not in SCENES:
            raise ValueError(f"unknown scene {scene!r}")
        item_seed = int(np.random.default_rng(item_seeds[i]).integers(0, 2**31 - 1))
        degraded, info = _degrade_one(clean, this_scene, item_seed)
        pairs.append(
            DegradedPair(
                pair_id=f"{i:04d}",
                scene=this_scene,
                degraded=degraded,
                clean=clean,
                params=info,
            )
        )
    return pairs


def format_param_log(pairs: list[DegradedPair]) -> str:
    """One line per pair: id, scene, then the generator parameters."""
    lines = []
    for p in pairs:
        kv = " ".join(f"{k}={v}" for k, v in p.params.items())
        lines.append(f"id={p.pair_id} scene={p.scene} {kv}".rstrip())
    return "\n".join(lines) + "\n"
