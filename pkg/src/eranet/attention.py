"""Channel and spatial attention gates.

Channel attention pools each channel to a single value (avg and max), runs
both pooled vectors through a shared two-layer bias-free MLP, and gates
with a sigmoid. Spatial attention pools across channels per pixel, stacks
the avg/max planes, and gates with a sigmoided 7x7 convolution. Both return
the attention map; callers multiply it against their feature tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvKernel,
    Tensor4,
    add,
    concat_channels,
    conv2d,
    global_pool_spatial,
    pool_over_channels,
    relu,
    sigmoid,
)

__all__ = ["CamWeights", "SamWeights", "init_cam", "init_sam", "channel_attention", "spatial_attention"]


@dataclass
class CamWeights:
    """Shared MLP of the channel gate: 1x1 reduce (C -> C/r) and expand, no biases."""

    mlp_reduce: ConvKernel
    mlp_expand: ConvKernel
    reduction: int
    hidden_act: str = "relu"  # rectifier between the two layers; "none" disables

    def __post_init__(self):
        c = self.mlp_reduce.in_channels
        if c % self.reduction != 0:
            raise ValueError(f"reduction {self.reduction} does not divide {c} channels")
        if self.mlp_reduce.out_channels != c // self.reduction:
            raise ValueError("reduce layer width must be C / reduction")
        if self.mlp_expand.in_channels != c // self.reduction or self.mlp_expand.out_channels != c:
            raise ValueError("expand layer must map C/r back to C")
        if self.mlp_reduce.bias is not None or self.mlp_expand.bias is not None:
            raise ValueError("attention MLP layers are bias-free")

    @property
    def channels(self) -> int:
        return self.mlp_reduce.in_channels


@dataclass
class SamWeights:
    """7x7 convolution over the stacked per-pixel avg/max planes."""

    conv7: ConvKernel

    def __post_init__(self):
        if self.conv7.in_channels != 2 or self.conv7.out_channels != 1:
            raise ValueError("spatial attention conv must map 2 channels to 1")
        if self.conv7.ksize != (7, 7):
            raise ValueError("spatial attention kernel must be 7x7")


def _uniform(rng: np.random.Generator, shape, dtype):
    fan_in = shape[1] * shape[2] * shape[3]
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor4(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_cam(rng: np.random.Generator, channels: int, reduction: int = 8, dtype=np.float64) -> CamWeights:
    hidden = channels // reduction
    if hidden == 0 or channels % reduction != 0:
        raise ValueError(f"reduction {reduction} incompatible with {channels} channels")
    return CamWeights(
        mlp_reduce=ConvKernel(_uniform(rng, (hidden, channels, 1, 1), dtype)),
        mlp_expand=ConvKernel(_uniform(rng, (channels, hidden, 1, 1), dtype)),
        reduction=reduction,
    )


def init_sam(rng: np.random.Generator, dtype=np.float64) -> SamWeights:
    w = _uniform(rng, (1, 2, 7, 7), dtype)
    b = Tensor4(np.zeros((1, 1, 1, 1), dtype=dtype), requires_grad=True)
    return SamWeights(ConvKernel(w, b))


def _mlp(v: Tensor4, w: CamWeights) -> Tensor4:
    h = conv2d(v, w.mlp_reduce, padding=0)
    if w.hidden_act == "relu":
        h = relu(h)
    elif w.hidden_act != "none":
        raise ValueError(f"unknown hidden activation {w.hidden_act!r}")
    return conv2d(h, w.mlp_expand, padding=0)


def channel_attention(x: Tensor4, w: CamWeights) -> Tensor4:
    """Per-channel gate in (0,1), shape (n, C, 1, 1)."""
    if x.shape[1] != w.channels:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs CAM {w.channels}")
    avg = _mlp(global_pool_spatial(x, "avg"), w)
    mx = _mlp(global_pool_spatial(x, "max"), w)
    return sigmoid(add(avg, mx))


def spatial_attention(x: Tensor4, w: SamWeights) -> Tensor4:
    """Per-pixel gate in (0,1), shape (n, 1, h, w); 7x7 conv, zero pad 3."""
    stacked = concat_channels([pool_over_channels(x, "avg"), pool_over_channels(x, "max")])
    return sigmoid(conv2d(stacked, w.conv7, padding=3))
