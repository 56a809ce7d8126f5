"""Dense NCHW tensor substrate with taped reverse-mode differentiation.

Every value is a rank-4 array (batch, channel, height, width). Operations
are pure functions; when a Tape is active and an input carries
``requires_grad``, the operation appends a backward closure to the tape.
``backward(tape, scalar)`` then walks the tape in reverse execution order
and accumulates gradients into the ``requires_grad`` leaves.

Convolution semantics are cross-correlation, stride 1, with either zero
padding or per-channel constant padding (the latter is what makes
sequential->fused convolution equivalence exact at image borders).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor4",
    "Tape",
    "ConvKernel",
    "DepthwiseKernel",
    "PadSpec",
    "backward",
    "conv2d",
    "depthwise_conv2d",
    "pad_channel_constant",
    "crop",
    "crop_center",
    "global_pool_spatial",
    "pool_over_channels",
    "prelu",
    "relu",
    "sigmoid",
    "layer_norm_channel",
    "concat_channels",
    "downsample2x_avg",
    "add",
    "sub",
    "mul",
    "div",
    "absolute",
    "sqrt",
    "power",
    "clamp",
    "sum_all",
    "mean_all",
    "channel_vector",
    "numeric_gradient",
    "gradient_check",
]


# ---------------------------------------------------------------------------
# value type and tape


class Tensor4:
    """Rank-4 dense tensor, NCHW layout, optionally gradient-tracked."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ValueError(f"Tensor4 requires rank-4 data, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor4":
        return Tensor4(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor4(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar used by loss code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Single-writer: one training step owns one tape. Entering the context
    makes the tape active; ops executed inside record themselves when any
    input requires gradients.
    """

    def __init__(self):
        self._nodes: list[tuple[int, Callable[[np.ndarray], list]]] = []
        self._outputs: set[int] = set()
        self._leaves: dict[int, Tensor4] = {}
        self._keep: list[Tensor4] = []  # pin objects so ids stay unique

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, inputs: Sequence, output: Tensor4, backward_fn) -> None:
        self._nodes.append((id(output), backward_fn))
        self._outputs.add(id(output))
        self._keep.append(output)
        for t in inputs:
            if isinstance(t, Tensor4):
                self._keep.append(t)
                if t.requires_grad and id(t) not in self._outputs:
                    self._leaves[id(t)] = t


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _finish(inputs: Sequence, out_data: np.ndarray, backward_fn) -> Tensor4:
    """Wrap an op result; record on the active tape if gradients are needed."""
    needs = any(isinstance(t, Tensor4) and t.requires_grad for t in inputs)
    out = Tensor4(out_data, requires_grad=needs)
    tape = _active_tape()
    if tape is not None and needs:
        tape._record(inputs, out, backward_fn)
    return out


def backward(tape: Tape, scalar_output: Tensor4) -> dict[Tensor4, np.ndarray]:
    """Reverse sweep: gradients of a (1,1,1,1) output w.r.t. all leaves.

    Returns a dict mapping each requires_grad leaf to its gradient array and
    also stores it on ``leaf.grad``. Each tape node is visited exactly once,
    in reverse execution order.
    """
    if scalar_output.shape != (1, 1, 1, 1):
        raise ValueError(f"backward needs a (1,1,1,1) output, got {scalar_output.shape}")
    if id(scalar_output) not in tape._outputs:
        raise ValueError("output was not produced by operations recorded on this tape")
    grads: dict[int, np.ndarray] = {
        id(scalar_output): np.ones((1, 1, 1, 1), dtype=scalar_output.data.dtype)
    }
    for out_id, backward_fn in reversed(tape._nodes):
        gy = grads.get(out_id)
        if gy is None:
            continue
        for tensor, contrib in backward_fn(gy):
            tid = id(tensor)
            if tid in grads:
                grads[tid] = grads[tid] + contrib
            else:
                grads[tid] = contrib
    result: dict[Tensor4, np.ndarray] = {}
    for tid, leaf in tape._leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# kernel containers


def _as_bias(bias, out_channels: int, dtype) -> Tensor4 | None:
    if bias is None:
        return None
    if isinstance(bias, Tensor4):
        b = bias
    else:
        b = Tensor4(np.asarray(bias, dtype=dtype).reshape(1, -1, 1, 1))
    if b.shape != (1, out_channels, 1, 1):
        raise ValueError(f"bias shape {b.shape} does not match {out_channels} output channels")
    return b


@dataclass
class ConvKernel:
    """Dense convolution weights (out, in, kh, kw) plus optional bias."""

    weights: Tensor4
    bias: Tensor4 | None = None

    def __post_init__(self):
        o, i, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel spatial dims must be odd, got {kh}x{kw}")
        self.bias = _as_bias(self.bias, o, self.weights.dtype)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def ksize(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class DepthwiseKernel:
    """One 3x3 spatial kernel per channel, shape (channels, 1, kh, kw)."""

    weights: Tensor4
    bias: Tensor4 | None = None

    def __post_init__(self):
        c, one, kh, kw = self.weights.shape
        if one != 1:
            raise ValueError(f"depthwise weights need shape (c,1,kh,kw), got {self.weights.shape}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel spatial dims must be odd, got {kh}x{kw}")
        self.bias = _as_bias(self.bias, c, self.weights.dtype)

    @property
    def channels(self) -> int:
        return self.weights.shape[0]


@dataclass
class PadSpec:
    """Zero padding (values=None) or per-channel constant padding."""

    margin: int
    values: Tensor4 | None = None


def channel_vector(values, requires_grad: bool = False, dtype=np.float64) -> Tensor4:
    """Per-channel parameter vector stored as a (1, c, 1, 1) tensor."""
    arr = np.asarray(values, dtype=dtype).reshape(1, -1, 1, 1)
    return Tensor4(arr, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# raw convolution kernels (numpy-level, no tape)

_BAND_BYTES = 64 << 20  # cap on the implicit im2col scratch


def _pad_zero(x: np.ndarray, m: int) -> np.ndarray:
    if m == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * m, w + 2 * m), dtype=x.dtype)
    out[:, :, m : m + h, m : m + w] = x
    return out


def _windows(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, oh, ow, kh, kw), (s[0], s[1], s[2], s[3], s[2], s[3]), writeable=False
    )


def _corr(xp: np.ndarray, w: np.ndarray, spec: str) -> np.ndarray:
    """Banded cross-correlation over a padded input.

    spec is the einsum signature: 'ncpqij,ocij->nopq' for dense kernels,
    'ncpqij,cij->ncpq' for depthwise. Output rows are computed in bands so
    the windowed view never expands into an oversized scratch buffer.
    """
    n, c, hp, wp = xp.shape
    kh, kw = w.shape[-2], w.shape[-1]
    oh, ow = hp - kh + 1, wp - kw + 1
    per_row = n * c * ow * kh * kw * xp.itemsize
    if n * c * oh * ow * kh * kw * xp.itemsize <= _BAND_BYTES:
        return np.einsum(spec, _windows(xp, kh, kw), w, optimize=True)
    out_ch = w.shape[0] if spec.endswith("nopq") else c
    y = np.empty((n, out_ch, oh, ow), dtype=xp.dtype)
    band = max(1, _BAND_BYTES // max(1, per_row))
    for r0 in range(0, oh, band):
        r1 = min(oh, r0 + band)
        win = _windows(xp[:, :, r0 : r1 + kh - 1, :], kh, kw)
        y[:, :, r0:r1, :] = np.einsum(spec, win, w, optimize=True)
    return y


def _conv_grad_input(gy: np.ndarray, w: np.ndarray, margin: int, spec: str) -> np.ndarray:
    """Gradient w.r.t. the (unpadded) conv input; shared dense/depthwise core."""
    kh, kw = w.shape[-2], w.shape[-1]
    gyp = np.zeros(
        (gy.shape[0], gy.shape[1], gy.shape[2] + 2 * (kh - 1), gy.shape[3] + 2 * (kw - 1)),
        dtype=gy.dtype,
    )
    gyp[:, :, kh - 1 : kh - 1 + gy.shape[2], kw - 1 : kw - 1 + gy.shape[3]] = gy
    wf = w[..., ::-1, ::-1]
    if spec == "dense":
        gxp = _corr(gyp, np.ascontiguousarray(wf.transpose(1, 0, 2, 3)), "ncpqij,ocij->nopq")
    else:
        gxp = _corr(gyp, np.ascontiguousarray(wf[:, 0]), "ncpqij,cij->ncpq")
    if margin:
        gxp = gxp[:, :, margin:-margin, margin:-margin]
    return gxp


def _check_spatial(x: Tensor4):
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ValueError(f"empty spatial dims: {x.shape}")


def _resolve_pad(padding) -> PadSpec:
    if isinstance(padding, PadSpec):
        return padding
    return PadSpec(int(padding), None)


# ---------------------------------------------------------------------------
# convolution ops


def conv2d(x: Tensor4, kernel: ConvKernel, padding=0) -> Tensor4:
    """Dense cross-correlation, stride 1.

    ``padding`` is an int margin (zero padding) or a PadSpec carrying a
    per-channel constant. Output spatial size is h + 2*margin - kh + 1.
    """
    spec = _resolve_pad(padding)
    if kernel.in_channels != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.in_channels}"
        )
    _check_spatial(x)
    if spec.values is not None:
        x = pad_channel_constant(x, spec.margin, spec.values)
        margin = 0
    else:
        margin = spec.margin

    w, b = kernel.weights, kernel.bias
    kh, kw = kernel.ksize
    if x.shape[2] + 2 * margin < kh or x.shape[3] + 2 * margin < kw:
        raise ValueError(f"input {x.shape} too small for {kh}x{kw} kernel with margin {margin}")
    xp = _pad_zero(x.data, margin)
    y = _corr(xp, w.data, "ncpqij,ocij->nopq")
    if b is not None:
        y = y + b.data

    def bw(gy: np.ndarray):
        out = []
        if x.requires_grad:
            out.append((x, _conv_grad_input(gy, w.data, margin, "dense")))
        if w.requires_grad:
            gw = np.einsum("ncpqij,nopq->ocij", _windows(xp, kh, kw), gy, optimize=True)
            out.append((w, gw))
        if b is not None and b.requires_grad:
            out.append((b, gy.sum(axis=(0, 2, 3), keepdims=True)))
        return out

    return _finish([x, w, b], y, bw)


def depthwise_conv2d(x: Tensor4, kernel: DepthwiseKernel, padding=0) -> Tensor4:
    """Per-channel cross-correlation: output channel i sees only input channel i."""
    spec = _resolve_pad(padding)
    if kernel.channels != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, depthwise kernel has {kernel.channels}"
        )
    _check_spatial(x)
    if spec.values is not None:
        x = pad_channel_constant(x, spec.margin, spec.values)
        margin = 0
    else:
        margin = spec.margin

    w, b = kernel.weights, kernel.bias
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad_zero(x.data, margin)
    y = _corr(xp, w.data[:, 0], "ncpqij,cij->ncpq")
    if b is not None:
        y = y + b.data

    def bw(gy: np.ndarray):
        out = []
        if x.requires_grad:
            out.append((x, _conv_grad_input(gy, w.data, margin, "depthwise")))
        if w.requires_grad:
            gw = np.einsum("ncpqij,ncpq->cij", _windows(xp, kh, kw), gy, optimize=True)
            out.append((w, gw[:, None, :, :]))
        if b is not None and b.requires_grad:
            out.append((b, gy.sum(axis=(0, 2, 3), keepdims=True)))
        return out

    return _finish([x, w, b], y, bw)


def pad_channel_constant(x: Tensor4, margin: int, values) -> Tensor4:
    """Grow the spatial extent by ``margin``, filling the border with a
    per-channel constant. ``values`` may be a (1,c,1,1) tensor (gradients
    then flow into it through the border) or a plain length-c array."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    n, c, h, w = x.shape
    vt = values if isinstance(values, Tensor4) else channel_vector(values, dtype=x.dtype)
    if vt.shape[1] != c:
        raise ValueError(f"padding values length {vt.shape[1]} != channels {c}")
    if margin == 0:
        return _finish([x, vt], x.data.copy(), lambda gy: [(x, gy)] if x.requires_grad else [])

    out = np.empty((n, c, h + 2 * margin, w + 2 * margin), dtype=x.dtype)
    out[:] = vt.data
    out[:, :, margin : margin + h, margin : margin + w] = x.data

    def bw(gy: np.ndarray):
        res = []
        if x.requires_grad:
            res.append((x, gy[:, :, margin : margin + h, margin : margin + w]))
        if vt.requires_grad:
            ring = gy.sum(axis=(0, 2, 3), keepdims=True) - gy[
                :, :, margin : margin + h, margin : margin + w
            ].sum(axis=(0, 2, 3), keepdims=True)
            res.append((vt, ring))
        return res

    return _finish([x, vt], out, bw)


def crop(x: Tensor4, top: int = 0, bottom: int = 0, left: int = 0, right: int = 0) -> Tensor4:
    """Trim rows/columns from the spatial borders."""
    n, c, h, w = x.shape
    if top + bottom >= h or left + right >= w:
        raise ValueError(f"crop ({top},{bottom},{left},{right}) exhausts shape {x.shape}")
    y = x.data[:, :, top : h - bottom, left : w - right]

    def bw(gy: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, :, top : h - bottom, left : w - right] = gy
        return [(x, gx)]

    return _finish([x], y.copy(), bw)


def crop_center(x: Tensor4, margin: int) -> Tensor4:
    return crop(x, margin, margin, margin, margin)


# ---------------------------------------------------------------------------
# pooling


def _first_max_mask(data: np.ndarray, axis_flat: int) -> np.ndarray:
    """One-hot mask of the first maximum along a flattened axis."""
    idx = data.argmax(axis=axis_flat)
    mask = np.zeros_like(data)
    np.put_along_axis(mask, np.expand_dims(idx, axis_flat), 1.0, axis=axis_flat)
    return mask


def global_pool_spatial(x: Tensor4, mode: str = "avg") -> Tensor4:
    """Reduce (h, w) to (1, 1) per sample and channel."""
    _check_spatial(x)
    n, c, h, w = x.shape
    if mode == "avg":
        y = x.data.mean(axis=(2, 3), keepdims=True)

        def bw(gy):
            return [(x, np.broadcast_to(gy / (h * w), x.shape).copy())]

    elif mode == "max":
        flat = x.data.reshape(n, c, h * w)
        y = flat.max(axis=2).reshape(n, c, 1, 1)
        mask = _first_max_mask(flat, 2).reshape(n, c, h, w)

        def bw(gy):
            return [(x, mask * gy)]

    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return _finish([x], y, bw)


def pool_over_channels(x: Tensor4, mode: str = "avg") -> Tensor4:
    """Reduce the channel axis to 1, per pixel."""
    n, c, h, w = x.shape
    if c < 1:
        raise ValueError("need at least one channel")
    if mode == "avg":
        y = x.data.mean(axis=1, keepdims=True)

        def bw(gy):
            return [(x, np.broadcast_to(gy / c, x.shape).copy())]

    elif mode == "max":
        y = x.data.max(axis=1, keepdims=True)
        mask = _first_max_mask(x.data, 1)

        def bw(gy):
            return [(x, mask * gy)]

    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return _finish([x], y, bw)


def downsample2x_avg(x: Tensor4) -> Tensor4:
    """Non-overlapping 2x2 mean; odd trailing row/column is dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"spatial dims too small to downsample: {x.shape}")
    v = x.data[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    y = v.mean(axis=(3, 5))

    def bw(gy):
        gx = np.zeros_like(x.data)
        spread = np.broadcast_to(gy[:, :, :, None, :, None] / 4.0, (n, c, h2, 2, w2, 2))
        gx[:, :, : 2 * h2, : 2 * w2] = spread.reshape(n, c, 2 * h2, 2 * w2)
        return [(x, gx)]

    return _finish([x], y, bw)


# ---------------------------------------------------------------------------
# activations and normalization


def prelu(x: Tensor4, slopes) -> Tensor4:
    """y = x for x >= 0, slope_c * x otherwise; one slope per channel."""
    s = slopes if isinstance(slopes, Tensor4) else channel_vector(slopes, dtype=x.dtype)
    if s.shape[1] != x.shape[1]:
        raise ValueError(f"slope count {s.shape[1]} != channels {x.shape[1]}")
    neg = x.data < 0
    y = np.where(neg, s.data * x.data, x.data)

    def bw(gy):
        out = []
        if x.requires_grad:
            out.append((x, np.where(neg, s.data * gy, gy)))
        if s.requires_grad:
            gs = np.where(neg, x.data * gy, 0.0).sum(axis=(0, 2, 3), keepdims=True)
            out.append((s, gs))
        return out

    return _finish([x, s], y, bw)


def relu(x: Tensor4) -> Tensor4:
    y = np.maximum(x.data, 0.0)
    pos = x.data > 0

    def bw(gy):
        return [(x, gy * pos)]

    return _finish([x], y, bw)


def sigmoid(x: Tensor4) -> Tensor4:
    """Numerically stable logistic; no overflow for any finite input."""
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)

    def bw(gy):
        return [(x, gy * y * (1.0 - y))]

    return _finish([x], y, bw)


def layer_norm_channel(x: Tensor4, gain, shift, epsilon: float = 1e-5, scope: str = "channel") -> Tensor4:
    """Normalize then apply a per-channel affine.

    scope='channel' normalizes each (sample, channel) plane over its spatial
    extent; scope='sample' normalizes each sample over (c, h, w) jointly.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    g = gain if isinstance(gain, Tensor4) else channel_vector(gain, dtype=x.dtype)
    b = shift if isinstance(shift, Tensor4) else channel_vector(shift, dtype=x.dtype)
    if scope == "channel":
        axes = (2, 3)
    elif scope == "sample":
        axes = (1, 2, 3)
    else:
        raise ValueError(f"unknown layer norm scope {scope!r}")

    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu) * inv
    y = g.data * xhat + b.data

    def bw(gy):
        out = []
        if x.requires_grad:
            hy = gy * g.data
            m1 = hy.mean(axis=axes, keepdims=True)
            m2 = (hy * xhat).mean(axis=axes, keepdims=True)
            out.append((x, inv * (hy - m1 - xhat * m2)))
        if g.requires_grad:
            out.append((g, (gy * xhat).sum(axis=(0, 2, 3), keepdims=True)))
        if b.requires_grad:
            out.append((b, gy.sum(axis=(0, 2, 3), keepdims=True)))
        return out

    return _finish([x, g, b], y, bw)


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting over NCHW)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor4, b) -> Tensor4:
    if not isinstance(b, Tensor4):
        y = a.data + float(b)
        return _finish([a], y, lambda gy: [(a, gy)])
    y = a.data + b.data

    def bw(gy):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(gy, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(gy, b.shape)))
        return out

    return _finish([a, b], y, bw)


def sub(a: Tensor4, b) -> Tensor4:
    if not isinstance(b, Tensor4):
        return add(a, -float(b))
    y = a.data - b.data

    def bw(gy):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(gy, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-gy, b.shape)))
        return out

    return _finish([a, b], y, bw)


def mul(a: Tensor4, b) -> Tensor4:
    if not isinstance(b, Tensor4):
        s = float(b)
        return _finish([a], a.data * s, lambda gy: [(a, gy * s)])
    y = a.data * b.data

    def bw(gy):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(gy * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(gy * a.data, b.shape)))
        return out

    return _finish([a, b], y, bw)


def div(a: Tensor4, b) -> Tensor4:
    if not isinstance(b, Tensor4):
        return mul(a, 1.0 / float(b))
    y = a.data / b.data

    def bw(gy):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(gy / b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-gy * a.data / (b.data * b.data), b.shape)))
        return out

    return _finish([a, b], y, bw)


def absolute(x: Tensor4) -> Tensor4:
    y = np.abs(x.data)
    sign = np.sign(x.data)

    def bw(gy):
        return [(x, gy * sign)]

    return _finish([x], y, bw)


def sqrt(x: Tensor4) -> Tensor4:
    y = np.sqrt(x.data)

    def bw(gy):
        return [(x, gy / (2.0 * y))]

    return _finish([x], y, bw)


def power(x: Tensor4, p: float) -> Tensor4:
    """x**p for a scalar exponent; subgradient 0 where x == 0."""
    y = np.power(x.data, p)

    def bw(gy):
        base = np.where(x.data != 0.0, np.power(np.where(x.data != 0.0, x.data, 1.0), p - 1.0), 0.0)
        return [(x, gy * p * base)]

    return _finish([x], y, bw)


def clamp(x: Tensor4, lo: float = 0.0, hi: float = 1.0) -> Tensor4:
    y = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bw(gy):
        return [(x, gy * inside)]

    return _finish([x], y, bw)


def concat_channels(tensors: Iterable[Tensor4]) -> Tensor4:
    ts = list(tensors)
    y = np.concatenate([t.data for t in ts], axis=1)
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]

    def bw(gy):
        pieces = np.split(gy, splits, axis=1)
        return [(t, g) for t, g in zip(ts, pieces) if t.requires_grad]

    return _finish(ts, y, bw)


def sum_all(x: Tensor4) -> Tensor4:
    y = np.full((1, 1, 1, 1), x.data.sum(), dtype=x.dtype)

    def bw(gy):
        return [(x, np.broadcast_to(gy, x.shape).copy())]

    return _finish([x], y, bw)


def mean_all(x: Tensor4) -> Tensor4:
    size = x.data.size
    y = np.full((1, 1, 1, 1), x.data.mean(), dtype=x.dtype)

    def bw(gy):
        return [(x, np.broadcast_to(gy / size, x.shape).copy())]

    return _finish([x], y, bw)


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_gradient(f: Callable[[], float], param: Tensor4, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every element of param."""
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_check(
    run: Callable[[], Tensor4],
    params: Sequence[Tensor4],
    step: float = 1e-4,
    zero_floor: float = 1e-9,
) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``run`` builds the scalar loss from the current parameter values. The
    analytic pass records on a fresh tape; the numeric pass re-evaluates the
    loss untaped. The error for each parameter tensor is the max-norm of the
    difference divided by the max-norm of the gradients themselves, so the
    comparison is not dominated by finite-difference noise on near-zero
    elements.
    """
    with Tape() as tape:
        loss = run()
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    def scalar():
        return run().item()

    worst = 0.0
    for p, g_tape in zip(params, analytic):
        g_num = numeric_gradient(scalar, p, step=step)
        scale = max(float(np.abs(g_tape).max()), float(np.abs(g_num).max()))
        if scale < zero_floor:
            continue
        rel = float(np.abs(g_tape - g_num).max()) / scale
        worst = max(worst, rel)
    return worst
