"""Network assembly: ConvL units, edge-guided attention residual blocks,
the five-block trunk, dual-mode (training/fused) execution, parameter
accounting, and the ERAW weight container.

Block wiring: u = ConvL(PReLU(KRM(x))), then y = x + SAM(u) * (CAM(u) * u).
The trunk is head ConvL (3 -> C) -> blocks -> tail conv (C -> 3) with a
global residual from the network input; inference clamps to [0, 1].
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .attention import CamWeights, SamWeights, channel_attention, init_cam, init_sam, spatial_attention
from .kirsch import BANK_NAMES, alt_operator_bank
from .reparam import (
    FusedConv,
    KrmWeights,
    fuse_krm,
    fused_param_count,
    init_krm,
    krm_forward_fused,
    krm_forward_training,
)
from .tensor import (
    ConvKernel,
    Tensor4,
    add,
    channel_vector,
    clamp,
    conv2d,
    layer_norm_channel,
    mul,
    prelu,
)

__all__ = [
    "EraNetConfig",
    "ConvLWeights",
    "EarbWeights",
    "EraNetModel",
    "WeightFormatError",
    "init_model",
    "convl_forward",
    "earb_forward",
    "eranet_forward",
    "fuse_model",
    "param_count",
    "analytic_macs",
    "save_weights",
    "load_weights",
    "read_container",
]

LN_EPSILON = 1e-5
PRELU_INIT = 0.25

_EDGE_CHOICES = BANK_NAMES + ("plain",)
_LN_SCOPES = ("channel", "sample")
_CAM_ACTS = ("relu", "none")


@dataclass
class EraNetConfig:
    """Architecture switches; defaults match the published network."""

    channels: int = 32
    blocks: int = 5
    reduction: int = 8
    expand_factor: int = 2
    edge_operator: str = "kirsch"  # one of BANK_NAMES, or "plain" for a bare conv
    use_cam: bool = True
    use_sam: bool = True
    ln_scope: str = "channel"
    cam_hidden_act: str = "relu"
    global_residual: bool = True

    def __post_init__(self):
        if self.edge_operator not in _EDGE_CHOICES:
            raise ValueError(f"edge_operator must be one of {_EDGE_CHOICES}")
        if self.ln_scope not in _LN_SCOPES or self.cam_hidden_act not in _CAM_ACTS:
            raise ValueError("bad ln_scope or cam_hidden_act")

    def encode(self) -> np.ndarray:
        return np.array(
            [
                self.channels,
                self.blocks,
                self.reduction,
                self.expand_factor,
                _EDGE_CHOICES.index(self.edge_operator),
                int(self.use_cam),
                int(self.use_sam),
                _LN_SCOPES.index(self.ln_scope),
                _CAM_ACTS.index(self.cam_hidden_act),
                int(self.global_residual),
            ],
            dtype=np.float32,
        )

    @staticmethod
    def decode(vec: np.ndarray) -> "EraNetConfig":
        v = [int(round(float(x))) for x in vec]
        if len(v) != 10:
            raise WeightFormatError(f"config tensor must have 10 entries, got {len(v)}")
        return EraNetConfig(
            channels=v[0],
            blocks=v[1],
            reduction=v[2],
            expand_factor=v[3],
            edge_operator=_EDGE_CHOICES[v[4]],
            use_cam=bool(v[5]),
            use_sam=bool(v[6]),
            ln_scope=_LN_SCOPES[v[7]],
            cam_hidden_act=_CAM_ACTS[v[8]],
            global_residual=bool(v[9]),
        )


@dataclass
class ConvLWeights:
    conv: ConvKernel
    ln_gain: Tensor4
    ln_shift: Tensor4
    slopes: Tensor4  # PReLU, one per channel


@dataclass
class EarbWeights:
    krm: KrmWeights | ConvKernel | None  # None once fused weights replace it
    krm_act: Tensor4
    convl: ConvLWeights
    cam: CamWeights | None
    sam: SamWeights | None


@dataclass
class EraNetModel:
    config: EraNetConfig
    head: ConvLWeights
    blocks: list[EarbWeights]
    tail: ConvKernel
    mode: str = "training"
    fused_cache: list[FusedConv] | None = None

    @property
    def dtype(self):
        return self.head.conv.weights.dtype

    def named_parameters(self) -> list[tuple[str, Tensor4]]:
        return [(n, t) for n, t in self.named_tensors() if n != "config" and t.requires_grad]

    def named_tensors(self) -> list[tuple[str, Tensor4]]:
        """Canonical (name, tensor) list; order defines the file layout."""
        cfg_t = Tensor4(self.config.encode().reshape(1, -1, 1, 1))
        out: list[tuple[str, Tensor4]] = [("config", cfg_t)]
        out += _convl_tensors("head", self.head)
        for i, blk in enumerate(self.blocks):
            p = f"block{i}"
            if self.mode == "fused":
                fk = self.fused_cache[i].kernel
                out += [(f"{p}.krm_fused.weight", fk.weights), (f"{p}.krm_fused.bias", fk.bias)]
            elif isinstance(blk.krm, KrmWeights):
                out += [(f"{p}.krm.{n}", t) for n, t in blk.krm.named_tensors()]
            else:
                out += [(f"{p}.krm_plain.weight", blk.krm.weights), (f"{p}.krm_plain.bias", blk.krm.bias)]
            out.append((f"{p}.act", blk.krm_act))
            out += _convl_tensors(f"{p}.convl", blk.convl)
            if blk.cam is not None:
                out += [
                    (f"{p}.cam.reduce.weight", blk.cam.mlp_reduce.weights),
                    (f"{p}.cam.expand.weight", blk.cam.mlp_expand.weights),
                ]
            if blk.sam is not None:
                out += [(f"{p}.sam.conv.weight", blk.sam.conv7.weights), (f"{p}.sam.conv.bias", blk.sam.conv7.bias)]
        out += [("tail.weight", self.tail.weights), ("tail.bias", self.tail.bias)]
        return out

    def astype(self, dtype) -> "EraNetModel":
        """Rebuilt copy with every tensor cast to dtype."""
        arrays = {n: t.data.astype(dtype) for n, t in self.named_tensors()}
        return _model_from_arrays(self.config, self.mode, arrays, dtype)

    def clone(self) -> "EraNetModel":
        return self.astype(self.dtype)


def _convl_tensors(prefix: str, w: ConvLWeights) -> list[tuple[str, Tensor4]]:
    return [
        (f"{prefix}.conv.weight", w.conv.weights),
        (f"{prefix}.conv.bias", w.conv.bias),
        (f"{prefix}.ln.gain", w.ln_gain),
        (f"{prefix}.ln.shift", w.ln_shift),
        (f"{prefix}.act", w.slopes),
    ]


# ---------------------------------------------------------------------------
# initialization


def _uniform_kernel(rng, out_c, in_c, k, dtype) -> ConvKernel:
    bound = 1.0 / np.sqrt(in_c * k * k)
    w = Tensor4(rng.uniform(-bound, bound, size=(out_c, in_c, k, k)).astype(dtype), requires_grad=True)
    b = channel_vector(np.zeros(out_c, dtype=dtype), requires_grad=True, dtype=dtype)
    return ConvKernel(w, b)


def _init_convl(rng, in_c, out_c, dtype) -> ConvLWeights:
    return ConvLWeights(
        conv=_uniform_kernel(rng, out_c, in_c, 3, dtype),
        ln_gain=channel_vector(np.ones(out_c, dtype=dtype), requires_grad=True, dtype=dtype),
        ln_shift=channel_vector(np.zeros(out_c, dtype=dtype), requires_grad=True, dtype=dtype),
        slopes=channel_vector(np.full(out_c, PRELU_INIT, dtype=dtype), requires_grad=True, dtype=dtype),
    )


def init_model(config: EraNetConfig | None = None, seed: int = 0, dtype=np.float64) -> EraNetModel:
    cfg = config or EraNetConfig()
    rng = np.random.default_rng(seed)
    c = cfg.channels
    head = _init_convl(rng, 3, c, dtype)
    blocks = []
    for _ in range(cfg.blocks):
        if cfg.edge_operator == "plain":
            krm: KrmWeights | ConvKernel = _uniform_kernel(rng, c, c, 3, dtype)
        else:
            krm = init_krm(rng, c, cfg.expand_factor, alt_operator_bank(cfg.edge_operator), dtype)
        cam = init_cam(rng, c, cfg.reduction, dtype) if cfg.use_cam else None
        if cam is not None:
            cam.hidden_act = cfg.cam_hidden_act
        blocks.append(
            EarbWeights(
                krm=krm,
                krm_act=channel_vector(np.full(c, PRELU_INIT, dtype=dtype), requires_grad=True, dtype=dtype),
                convl=_init_convl(rng, c, c, dtype),
                cam=cam,
                sam=init_sam(rng, dtype) if cfg.use_sam else None,
            )
        )
    tail = _uniform_kernel(rng, 3, c, 3, dtype)
    return EraNetModel(config=cfg, head=head, blocks=blocks, tail=tail)


# ---------------------------------------------------------------------------
# forward passes


def convl_forward(x: Tensor4, w: ConvLWeights, ln_scope: str = "channel") -> Tensor4:
    """Convolution -> layer norm -> PReLU, same spatial size."""
    kh = w.conv.ksize[0]
    y = conv2d(x, w.conv, padding=(kh - 1) // 2)
    y = layer_norm_channel(y, w.ln_gain, w.ln_shift, epsilon=LN_EPSILON, scope=ln_scope)
    return prelu(y, w.slopes)


def earb_forward(
    x: Tensor4,
    w: EarbWeights,
    mode: str = "training",
    fused: FusedConv | None = None,
    ln_scope: str = "channel",
) -> Tensor4:
    """Residual block: x + SAM(u) * (CAM(u) * u) with u = ConvL(PReLU(KRM(x)))."""
    if mode == "fused":
        if fused is None:
            raise ValueError("fused mode requested but no fused convolution is cached")
        edge = krm_forward_fused(x, fused)
    elif isinstance(w.krm, KrmWeights):
        edge = krm_forward_training(x, w.krm)
    elif isinstance(w.krm, ConvKernel):
        edge = conv2d(x, w.krm, padding=1)
    else:
        raise ValueError("block has no trainable edge module; run in fused mode")
    u = convl_forward(prelu(edge, w.krm_act), w.convl, ln_scope)
    gated = u
    if w.cam is not None:
        gated = mul(channel_attention(u, w.cam), gated)
    if w.sam is not None:
        gated = mul(spatial_attention(u, w.sam), gated)
    return add(x, gated)


def eranet_forward(x: Tensor4, m: EraNetModel, clip_output: bool | None = None) -> Tensor4:
    """Full trunk. ``clip_output=None`` clamps only outside a taped (training)
    context; pass an explicit bool to override."""
    if x.shape[1] != 3:
        raise ValueError(f"network expects 3-channel input, got {x.shape[1]}")
    y = convl_forward(x, m.head, m.config.ln_scope)
    for i, blk in enumerate(m.blocks):
        fused = m.fused_cache[i] if m.fused_cache is not None else None
        y = earb_forward(y, blk, m.mode, fused, m.config.ln_scope)
    y = conv2d(y, m.tail, padding=1)
    if m.config.global_residual:
        y = add(y, x)
    if clip_output is None:
        from .tensor import _active_tape

        clip_output = _active_tape() is None
    return clamp(y, 0.0, 1.0) if clip_output else y


def fuse_model(m: EraNetModel) -> EraNetModel:
    """Fused clone for inference: every KRM collapsed to its single conv,
    training-only branch weights dropped. The input model is untouched."""
    if m.mode != "training":
        raise ValueError("model is already fused")
    out = m.clone()
    cache = []
    for blk in out.blocks:
        if isinstance(blk.krm, KrmWeights):
            cache.append(fuse_krm(blk.krm))
        else:
            cache.append(FusedConv(blk.krm))
        blk.krm = None
    out.mode = "fused"
    out.fused_cache = cache
    return out


# ---------------------------------------------------------------------------
# accounting


def param_count(m: EraNetModel) -> tuple[int, int, list[tuple[str, int]]]:
    """(total scalar parameters, single-precision byte size, per-tensor rows)."""
    rows = [(n, t.data.size) for n, t in m.named_tensors() if n != "config"]
    total = sum(c for _, c in rows)
    return total, total * 4, rows


def analytic_macs(cfg: EraNetConfig, h: int, w: int, fused: bool) -> int:
    """Multiply-accumulate count of one forward pass (convolutions only;
    each weight element touches every output pixel under same-padding)."""
    c = cfg.channels
    px = h * w
    macs = (c * 3 * 9 + c) * px  # head conv
    for _ in range(cfg.blocks):
        if fused or cfg.edge_operator == "plain":
            macs += fused_param_count(c) * px
        else:
            branches = len(alt_operator_bank(cfg.edge_operator))
            d = cfg.expand_factor * c
            macs += (c * c * 9 + c) * px  # normal branch
            macs += (d * c + d) * px + (c * d * 9 + c) * px  # expand + squeeze
            macs += branches * ((c * c + c) * px + (c * 9 + c) * px)  # pre-mix + depthwise
        macs += (c * c * 9 + c) * px  # ConvL
        if cfg.use_cam:
            hidden = c // cfg.reduction
            macs += 2 * (c * hidden + hidden * c)  # MLP on pooled vectors
        if cfg.use_sam:
            macs += (2 * 49 + 1) * px
    macs += (3 * c * 9 + 3) * px  # tail
    return macs


# ---------------------------------------------------------------------------
# ERAW weight container

MAGIC = b"ERAW"
VERSION = 1


class WeightFormatError(ValueError):
    """Raised for malformed, truncated, or architecture-incompatible files."""


def save_weights(m: EraNetModel, sink) -> None:
    """Write the bit-exact container: magic, version, mode, tensor table, CRC-32."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("B", 0 if m.mode == "training" else 1)
    tensors = m.named_tensors()
    buf += struct.pack("<I", len(tensors))
    for name, t in tensors:
        arr = _disk_shape(name, t.data)
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4").tobytes(order="C")
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    if hasattr(sink, "write"):
        sink.write(bytes(buf))
    else:
        with open(sink, "wb") as fh:
            fh.write(bytes(buf))


def _disk_shape(name: str, arr: np.ndarray) -> np.ndarray:
    """Weights stay rank 4; per-channel vectors flatten to rank 1 on disk."""
    if name.endswith(".weight"):
        return arr
    if name == "config" or arr.shape[0] == 1 and arr.shape[2] == arr.shape[3] == 1:
        return arr.reshape(-1)
    return arr


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise WeightFormatError(
                f"truncated file: needed {n} bytes for {what} at offset {self.pos}, "
                f"file ends at {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def read_container(source) -> tuple[str, list[tuple[str, tuple, np.ndarray]]]:
    """Parse an ERAW blob into (mode, [(name, shape, float32 array)]).

    Validates magic, version, mode byte, table completeness, and the
    trailing CRC-32 before returning.
    """
    if hasattr(source, "read"):
        blob = source.read()
    else:
        with open(source, "rb") as fh:
            blob = fh.read()
    if len(blob) < 4 + 4 + 1 + 4 + 4:
        raise WeightFormatError(f"file too short ({len(blob)} bytes) to be a weight container")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise WeightFormatError(f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    r = _Reader(blob[:-4])
    if r.take(4, "magic") != MAGIC:
        raise WeightFormatError("bad magic bytes; not an ERAW weight file")
    version = struct.unpack("<I", r.take(4, "version"))[0]
    if version != VERSION:
        raise WeightFormatError(f"unsupported container version {version}")
    mode_byte = r.take(1, "mode")[0]
    if mode_byte not in (0, 1):
        raise WeightFormatError(f"bad mode byte {mode_byte}")
    count = struct.unpack("<I", r.take(4, "tensor count"))[0]
    tensors = []
    for _ in range(count):
        nlen = struct.unpack("<H", r.take(2, "name length"))[0]
        name = r.take(nlen, "tensor name").decode("utf-8")
        rank = r.take(1, f"rank of {name}")[0]
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)), f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        tensors.append((name, dims, arr))
    if r.pos != len(r.blob):
        raise WeightFormatError(f"{len(r.blob) - r.pos} trailing bytes after tensor table at offset {r.pos}")
    return ("training" if mode_byte == 0 else "fused"), tensors


def load_weights(source) -> EraNetModel:
    """Rebuild a model from a container; shapes are checked against the
    architecture implied by its config record."""
    mode, tensors = read_container(source)
    table = dict((n, a) for n, _, a in tensors)
    if len(table) != len(tensors):
        raise WeightFormatError("duplicate tensor names in container")
    if "config" not in table:
        raise WeightFormatError("container lacks the architecture config record")
    cfg = EraNetConfig.decode(table["config"])
    model = _model_from_arrays(cfg, mode, table, np.float32)
    expected = {n for n, _ in model.named_tensors()}
    extra = set(table) - expected
    if extra:
        raise WeightFormatError(f"unexpected tensors for this architecture: {sorted(extra)}")
    return model


def _model_from_arrays(cfg: EraNetConfig, mode: str, table: dict, dtype) -> EraNetModel:
    """Assemble a model by pulling named arrays; missing names or shape
    mismatches raise WeightFormatError."""
    c = cfg.channels

    def pull(name: str, shape: tuple) -> Tensor4:
        if name not in table:
            raise WeightFormatError(f"missing tensor {name!r}")
        arr = np.asarray(table[name], dtype=dtype)
        flat_ok = arr.ndim == 1 and arr.size == int(np.prod(shape))
        if arr.shape != shape and not flat_ok:
            raise WeightFormatError(f"tensor {name!r} has shape {arr.shape}, architecture needs {shape}")
        return Tensor4(arr.reshape(shape).copy(), requires_grad=True)

    def kern(prefix: str, out_c: int, in_c: int, k: int, bias: bool = True) -> ConvKernel:
        w = pull(f"{prefix}.weight", (out_c, in_c, k, k))
        b = pull(f"{prefix}.bias", (1, out_c, 1, 1)) if bias else None
        return ConvKernel(w, b)

    def convl(prefix: str, in_c: int) -> ConvLWeights:
        return ConvLWeights(
            conv=kern(f"{prefix}.conv", c, in_c, 3),
            ln_gain=pull(f"{prefix}.ln.gain", (1, c, 1, 1)),
            ln_shift=pull(f"{prefix}.ln.shift", (1, c, 1, 1)),
            slopes=pull(f"{prefix}.act", (1, c, 1, 1)),
        )

    head = convl("head", 3)
    blocks: list[EarbWeights] = []
    cache: list[FusedConv] = []
    for i in range(cfg.blocks):
        p = f"block{i}"
        krm: KrmWeights | ConvKernel | None
        if mode == "fused":
            cache.append(FusedConv(kern(f"{p}.krm_fused", c, c, 3)))
            krm = None
        elif cfg.edge_operator == "plain":
            krm = kern(f"{p}.krm_plain", c, c, 3)
        else:
            bank = alt_operator_bank(cfg.edge_operator)
            d = cfg.expand_factor * c
            krm = KrmWeights(
                normal=kern(f"{p}.krm.normal", c, c, 3),
                expand=kern(f"{p}.krm.expand", d, c, 1),
                squeeze=kern(f"{p}.krm.squeeze", c, d, 3),
                kirsch_pre=[kern(f"{p}.krm.pre{j}", c, c, 1) for j in range(len(bank))],
                kirsch_scale=[pull(f"{p}.krm.scale{j}", (1, c, 1, 1)) for j in range(len(bank))],
                kirsch_bias=[pull(f"{p}.krm.edge_bias{j}", (1, c, 1, 1)) for j in range(len(bank))],
                bank=bank,
            )
        cam = None
        if cfg.use_cam:
            hidden = c // cfg.reduction
            cam = CamWeights(
                mlp_reduce=kern(f"{p}.cam.reduce", hidden, c, 1, bias=False),
                mlp_expand=kern(f"{p}.cam.expand", c, hidden, 1, bias=False),
                reduction=cfg.reduction,
                hidden_act=cfg.cam_hidden_act,
            )
        sam = SamWeights(kern(f"{p}.sam.conv", 1, 2, 7)) if cfg.use_sam else None
        blocks.append(
            EarbWeights(
                krm=krm,
                krm_act=pull(f"{p}.act", (1, c, 1, 1)),
                convl=convl(f"{p}.convl", c),
                cam=cam,
                sam=sam,
            )
        )
    tail = kern("tail", 3, c, 3)
    return EraNetModel(
        config=cfg,
        head=head,
        blocks=blocks,
        tail=tail,
        mode=mode,
        fused_cache=cache if mode == "fused" else None,
    )
