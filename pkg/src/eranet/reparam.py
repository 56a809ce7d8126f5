"""Kirsch-guided reparameterization: multi-branch training forward and its
closed-form fusion into a single 3x3 convolution.

The training-time block sums ten branches: one dense 3x3 convolution, one
1x1 expand -> 3x3 squeeze pair, and eight 1x1 -> scaled-depthwise-Kirsch
pairs. Each two-stage branch pads its intermediate feature with that
stage's own bias vector before the second convolution; under that padding
rule the whole block collapses exactly (borders included) into one dense
3x3 kernel:

    fused_w[o, c, dy, dx] = sum_d first_w[d, c] * second_w[o, d, dy, dx]
    fused_b[o] = sum_{d, dy, dx} second_w[o, d, dy, dx] * first_b[d] + second_b[o]

applied branch-wise and summed. The inference form runs the fused kernel
with plain zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kirsch import KirschBank, kirsch_bank
from .tensor import (
    ConvKernel,
    DepthwiseKernel,
    Tensor4,
    _finish,
    add,
    channel_vector,
    conv2d,
    depthwise_conv2d,
    mul,
    pad_channel_constant,
)

__all__ = [
    "KrmWeights",
    "FusedConv",
    "init_krm",
    "krm_forward_training",
    "krm_forward_fused",
    "fuse_expand_squeeze",
    "fuse_kirsch_branch",
    "fuse_krm",
    "krm_param_count",
    "fused_param_count",
]


@dataclass
class KrmWeights:
    """Trainable parameters of one reparameterization block (channel width C).

    normal      dense 3x3, C -> C
    expand      1x1, C -> D (D = expand factor * C)
    squeeze     dense 3x3, D -> C
    kirsch_pre  per edge direction: 1x1, C -> C
    kirsch_scale/kirsch_bias  per direction: per-channel (1,C,1,1) tensors
    """

    normal: ConvKernel
    expand: ConvKernel
    squeeze: ConvKernel
    kirsch_pre: list[ConvKernel]
    kirsch_scale: list[Tensor4]
    kirsch_bias: list[Tensor4]
    bank: KirschBank = field(default_factory=kirsch_bank)

    def __post_init__(self):
        c = self.normal.in_channels
        if self.normal.out_channels != c:
            raise ValueError("normal branch must map C -> C")
        if self.expand.in_channels != c or self.squeeze.out_channels != c:
            raise ValueError("expand/squeeze endpoints must match channel width")
        if self.squeeze.in_channels != self.expand.out_channels:
            raise ValueError("squeeze input must match expand output")
        if self.expand.ksize != (1, 1):
            raise ValueError("expand branch must be 1x1")
        if not (len(self.kirsch_pre) == len(self.kirsch_scale) == len(self.kirsch_bias) == len(self.bank)):
            raise ValueError("edge branch lists must match the bank size")

    @property
    def channels(self) -> int:
        return self.normal.in_channels

    def named_tensors(self) -> list[tuple[str, Tensor4]]:
        out = [
            ("normal.weight", self.normal.weights),
            ("normal.bias", self.normal.bias),
            ("expand.weight", self.expand.weights),
            ("expand.bias", self.expand.bias),
            ("squeeze.weight", self.squeeze.weights),
            ("squeeze.bias", self.squeeze.bias),
        ]
        for i, (pre, sc, bi) in enumerate(zip(self.kirsch_pre, self.kirsch_scale, self.kirsch_bias)):
            out.append((f"pre{i}.weight", pre.weights))
            out.append((f"pre{i}.bias", pre.bias))
            out.append((f"scale{i}", sc))
            out.append((f"edge_bias{i}", bi))
        return out


@dataclass
class FusedConv:
    """Inference form of a KRM: one dense 3x3 convolution."""

    kernel: ConvKernel

    @property
    def channels(self) -> int:
        return self.kernel.in_channels


def _uniform_kernel(rng: np.random.Generator, out_c: int, in_c: int, k: int, dtype) -> ConvKernel:
    bound = 1.0 / np.sqrt(in_c * k * k)
    w = rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(dtype)
    b = np.zeros(out_c, dtype=dtype)
    return ConvKernel(Tensor4(w, requires_grad=True), channel_vector(b, requires_grad=True, dtype=dtype))


def init_krm(
    rng: np.random.Generator,
    channels: int,
    expand_factor: int = 2,
    bank: KirschBank | None = None,
    dtype=np.float64,
) -> KrmWeights:
    """Fresh KRM weights: fan-in uniform convs, zero biases, scales 1/#branches."""
    bank = bank or kirsch_bank()
    d = expand_factor * channels
    pre = [_uniform_kernel(rng, channels, channels, 1, dtype) for _ in range(len(bank))]
    scale0 = 1.0 / len(bank)
    scales = [
        channel_vector(np.full(channels, scale0, dtype=dtype), requires_grad=True, dtype=dtype)
        for _ in range(len(bank))
    ]
    biases = [
        channel_vector(np.zeros(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        for _ in range(len(bank))
    ]
    return KrmWeights(
        normal=_uniform_kernel(rng, channels, channels, 3, dtype),
        expand=_uniform_kernel(rng, d, channels, 1, dtype),
        squeeze=_uniform_kernel(rng, channels, d, 3, dtype),
        kirsch_pre=pre,
        kirsch_scale=scales,
        kirsch_bias=biases,
        bank=bank,
    )


# ---------------------------------------------------------------------------
# training-time forward


def _scaled_depthwise(scale: Tensor4, kernel_2d: np.ndarray, bias: Tensor4, dtype) -> DepthwiseKernel:
    """Depthwise kernel scale_c * K, built through tape ops so scale stays learnable."""
    c = scale.shape[1]
    k = Tensor4(np.broadcast_to(kernel_2d.astype(dtype), (c, 1, 3, 3)).copy())
    w = mul(k, _as_depthwise_axis(scale))
    return DepthwiseKernel(w, bias)


def _as_depthwise_axis(scale: Tensor4) -> Tensor4:
    """View a (1,C,1,1) parameter as (C,1,1,1) with gradient routed back."""
    c = scale.shape[1]

    def bw(gy):
        return [(scale, gy.reshape(1, c, 1, 1))]

    return _finish([scale], scale.data.reshape(c, 1, 1, 1).copy(), bw)


def krm_forward_training(x: Tensor4, w: KrmWeights) -> Tensor4:
    """Sum of all branches; two-stage branches pad intermediates with their
    own bias so training and fused outputs agree at image borders."""
    if x.shape[1] != w.channels:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs KRM {w.channels}")
    out = conv2d(x, w.normal, padding=1)

    mid = conv2d(x, w.expand, padding=0)
    mid = pad_channel_constant(mid, 1, w.expand.bias)
    out = add(out, conv2d(mid, w.squeeze, padding=0))

    for i in range(len(w.bank)):
        pre = w.kirsch_pre[i]
        z = conv2d(x, pre, padding=0)
        z = pad_channel_constant(z, 1, pre.bias)
        dw = _scaled_depthwise(w.kirsch_scale[i], w.bank.kernels[i], w.kirsch_bias[i], x.dtype)
        out = add(out, depthwise_conv2d(z, dw, padding=0))
    return out


def krm_forward_fused(x: Tensor4, f: FusedConv) -> Tensor4:
    if x.shape[1] != f.channels:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs fused conv {f.channels}")
    return conv2d(x, f.kernel, padding=1)


# ---------------------------------------------------------------------------
# fusion algebra (plain numpy; fusion happens once at freeze time)


def _np_bias(kernel: ConvKernel) -> np.ndarray:
    if kernel.bias is None:
        return np.zeros(kernel.out_channels, dtype=kernel.weights.dtype)
    return kernel.bias.data.reshape(-1)


def fuse_expand_squeeze(expand: ConvKernel, squeeze: ConvKernel) -> ConvKernel:
    """Collapse 1x1 expand followed by 3x3 squeeze into one dense 3x3 kernel.

    Exact (borders included) against a sequential forward whose intermediate
    is padded with the expand bias.
    """
    if expand.ksize != (1, 1):
        raise ValueError("expand kernel must be 1x1")
    if squeeze.in_channels != expand.out_channels:
        raise ValueError(
            f"shape mismatch: squeeze expects {squeeze.in_channels} channels, expand yields {expand.out_channels}"
        )
    we = expand.weights.data[:, :, 0, 0]  # (D, C)
    ws = squeeze.weights.data  # (C_out, D, 3, 3)
    wf = np.einsum("dc,odij->ocij", we, ws, optimize=True)
    bf = np.einsum("odij,d->o", ws, _np_bias(expand), optimize=True) + _np_bias(squeeze)
    return ConvKernel(Tensor4(wf), channel_vector(bf, dtype=wf.dtype))


def fuse_kirsch_branch(pre: ConvKernel, scale, kirsch: np.ndarray, bias) -> ConvKernel:
    """Collapse 1x1 pre-mix followed by a scaled depthwise edge kernel.

    The depthwise stage has (diagonal) dense form delta_{o,d} * scale_o * K,
    so the fused dense kernel is pre_w[o, c] * scale_o * K[dy, dx] and the
    fused bias is scale_o * sum(K) * pre_b[o] + edge_bias_o.
    """
    if pre.ksize != (1, 1):
        raise ValueError("pre-mix kernel must be 1x1")
    if pre.out_channels != pre.in_channels:
        raise ValueError("pre-mix kernel must map C -> C")
    s = scale.data.reshape(-1) if isinstance(scale, Tensor4) else np.asarray(scale, dtype=np.float64).reshape(-1)
    be = bias.data.reshape(-1) if isinstance(bias, Tensor4) else np.asarray(bias, dtype=np.float64).reshape(-1)
    if s.size != pre.out_channels or be.size != pre.out_channels:
        raise ValueError("scale/bias length must match channel width")
    k = np.asarray(kirsch, dtype=pre.weights.dtype)
    wk = s[:, None, None] * k  # (C, 3, 3)
    wp = pre.weights.data[:, :, 0, 0]  # (C, C)
    wf = np.einsum("oij,oc->ocij", wk, wp, optimize=True)
    bf = wk.sum(axis=(1, 2)) * _np_bias(pre) + be
    return ConvKernel(Tensor4(wf), channel_vector(bf, dtype=wf.dtype))


def fuse_krm(w: KrmWeights) -> FusedConv:
    """Sum the fused forms of every branch into the single inference kernel."""
    wf = w.normal.weights.data.copy()
    bf = _np_bias(w.normal).copy()
    es = fuse_expand_squeeze(w.expand, w.squeeze)
    wf += es.weights.data
    bf += _np_bias(es)
    for i in range(len(w.bank)):
        branch = fuse_kirsch_branch(w.kirsch_pre[i], w.kirsch_scale[i], w.bank.kernels[i], w.kirsch_bias[i])
        wf += branch.weights.data
        bf += _np_bias(branch)
    return FusedConv(ConvKernel(Tensor4(wf), channel_vector(bf, dtype=wf.dtype)))


# ---------------------------------------------------------------------------
# bookkeeping


def krm_param_count(channels: int, expand_factor: int = 2, branches: int = 8) -> int:
    """Scalar parameter count of the training form."""
    c, d = channels, expand_factor * channels
    normal = c * c * 9 + c
    expand = d * c + d
    squeeze = c * d * 9 + c
    pre = branches * (c * c + c)
    scale_bias = branches * (c + c)
    return normal + expand + squeeze + pre + scale_bias


def fused_param_count(channels: int) -> int:
    """Scalar parameter count of the fused form: one dense 3x3 plus bias."""
    return channels * channels * 9 + channels
