"""Command-line surface: synth, train, fuse, enhance, metrics, bench, inspect.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 weight-file error.
Every command honoring --seed is bit-reproducible; timing output is not.
An optional config file (key = value lines) supplies defaults for any flag;
explicitly passed flags win.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import os
import statistics
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import imageio
from .degrade import gen_dataset, format_param_log
from .losses import psnr, ssim
from .model import (
    EraNetConfig,
    WeightFormatError,
    analytic_macs,
    eranet_forward,
    fuse_model,
    init_model,
    load_weights,
    param_count,
    read_container,
    save_weights,
)
from .tensor import Tensor4
from .trainer import Schedule, evaluate, format_curve, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_WEIGHTS = 3

IMAGE_SUFFIXES = (".png", ".eraf")


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Overlay key = value defaults from --config; explicit flags win because
    only values still at their parser default are replaced."""
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    overrides = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        overrides[key.replace("-", "_")] = val
    for key, raw in overrides.items():
        if not hasattr(args, key):
            raise DataError(f"{path}: unknown option {key!r}")
        current = getattr(args, key)
        default = parser.get_default(key)
        if current != default:
            continue  # flag was given explicitly
        if isinstance(default, bool):
            setattr(args, key, raw.lower() in ("1", "true", "yes", "on"))
        elif isinstance(default, int):
            setattr(args, key, int(raw))
        elif isinstance(default, float):
            setattr(args, key, float(raw))
        else:
            setattr(args, key, raw)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise UsageError(f"bad --size {text!r}, expected WxH") from exc


def _list_images(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [path]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = gen_dataset(None, args.scene, seed=args.seed, count=args.count, size=args.size)
    for p in pairs:
        imageio.save_image(p.degraded, out / f"{p.pair_id}_degraded.png")
        imageio.save_image(p.clean, out / f"{p.pair_id}_clean.png")
    (out / "params.log").write_text(format_param_log(pairs))
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def _load_pairs(data_dir: Path):
    from .degrade import DegradedPair

    degraded = sorted(data_dir.glob("*_degraded.png")) + sorted(data_dir.glob("*_degraded.eraf"))
    if not degraded:
        raise DataError(f"no *_degraded images under {data_dir}")
    pairs = []
    for dpath in degraded:
        cpath = dpath.with_name(dpath.name.replace("_degraded", "_clean"))
        if not cpath.exists():
            raise DataError(f"missing clean counterpart for {dpath.name}")
        pairs.append(
            DegradedPair(
                pair_id=dpath.name.split("_")[0],
                scene="unknown",
                degraded=imageio.load_image(dpath),
                clean=imageio.load_image(cpath),
            )
        )
    return pairs


def cmd_train(args) -> int:
    if args.data:
        pairs = _load_pairs(Path(args.data))
    else:
        pairs = gen_dataset(None, args.scene, seed=args.seed, count=args.count, size=args.size)
    cfg = EraNetConfig(
        channels=args.channels,
        blocks=args.blocks,
        reduction=args.reduction,
        edge_operator=args.operator,
    )
    model = init_model(cfg, seed=args.seed)
    schedule = Schedule(base_lr=args.lr)
    curve = train(
        model,
        pairs,
        schedule,
        seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch,
        clip_norm=1.0 if args.clip else None,
    )
    save_weights(model, args.out)
    if args.curve:
        Path(args.curve).write_text(format_curve(curve))
    if curve:
        print(f"trained {args.epochs} epochs; loss {curve[0].loss:.4f} -> {curve[-1].loss:.4f}")
    print(f"weights written to {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = load_weights(args.infile)
    if model.mode != "training":
        raise WeightFormatError(f"{args.infile} is already fused")
    fused = fuse_model(model)
    before, before_bytes, _ = param_count(model)
    after, after_bytes, _ = param_count(fused)
    save_weights(fused, args.out)
    print(f"parameters: {before} ({before_bytes / 1024:.1f} KB) -> {after} ({after_bytes / 1024:.1f} KB)")
    print(f"reduction: {before / after:.2f}x")
    print(f"fused weights written to {args.out}")
    return EXIT_OK


def _enhance_one(model, src: Path, dst_dir: Path) -> tuple[str, float]:
    img = imageio.load_image(src)
    t0 = time.perf_counter()
    out = eranet_forward(Tensor4(img.data.astype(model.dtype)), model, clip_output=True)
    dt = time.perf_counter() - t0
    imageio.save_image(out, dst_dir / src.name)
    return src.name, dt


def cmd_enhance(args) -> int:
    model = load_weights(args.weights)
    if args.fused_only and model.mode != "fused":
        raise WeightFormatError(f"{args.weights} holds training-mode weights but --fused-only was given")
    if model.mode == "training" and not args.no_fuse:
        model = fuse_model(model)
    src = Path(args.infile)
    images = _list_images(src)
    if not images:
        raise DataError(f"no images found at {src}")
    dst = Path(args.out)
    dst.mkdir(parents=True, exist_ok=True)

    workers = int(os.environ.get("ERA_THREADS", "1"))
    failures = 0
    results: list[tuple[str, float]] = []
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_enhance_one, model, p, dst): p for p in images}
            for fut in concurrent.futures.as_completed(futs):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    print(f"warning: skipped {futs[fut].name}: {exc}", file=sys.stderr)
                    failures += 1
    else:
        for p in images:
            try:
                results.append(_enhance_one(model, p, dst))
            except Exception as exc:
                print(f"warning: skipped {p.name}: {exc}", file=sys.stderr)
                failures += 1
    for name, dt in sorted(results):
        print(f"{name}: {dt * 1000:.1f} ms")
    if failures == len(images):
        raise DataError("all inputs failed to decode")
    return EXIT_OK


def cmd_metrics(args) -> int:
    restored = _list_images(Path(args.restored))
    reference = {p.name: p for p in _list_images(Path(args.reference))}
    if not restored:
        raise DataError(f"no images at {args.restored}")
    rows = 0
    for rpath in restored:
        ref = reference.get(rpath.name)
        if ref is None:
            print(f"warning: no reference for {rpath.name}", file=sys.stderr)
            continue
        a = imageio.load_image(rpath)
        b = imageio.load_image(ref)
        if a.shape != b.shape:
            raise DataError(f"{rpath.name}: shape {a.shape} vs reference {b.shape}")
        print(f"{rpath.stem} {psnr(a, b)} {ssim(a, b)[0].item():.6f}")
        rows += 1
    if rows == 0:
        raise DataError("no matching restored/reference pairs")
    return EXIT_OK


def cmd_bench(args) -> int:
    w, h = _parse_size(args.size)
    if w < 8 or h < 8:
        raise UsageError("bench size must be at least 8x8")
    if args.weights:
        model = load_weights(args.weights)
        if model.mode == "fused":
            raise WeightFormatError("bench needs training-mode weights to compare both forms")
    else:
        model = init_model(EraNetConfig(), seed=0, dtype=np.float32)
    fused = fuse_model(model)
    cfg = model.config

    macs_train = analytic_macs(cfg, h, w, fused=False)
    macs_fused = analytic_macs(cfg, h, w, fused=True)
    assert macs_fused < macs_train, "fused form must cost fewer operations"
    print(f"analytic MACs at {w}x{h}: training {macs_train:,} fused {macs_fused:,} "
          f"ratio {macs_train / macs_fused:.2f}x")

    rng = np.random.default_rng(0)
    x = Tensor4(rng.uniform(0, 1, (1, 3, h, w)).astype(model.dtype))
    for _ in range(args.warmup):
        eranet_forward(x, fused, clip_output=True)
    if args.iters <= 0:
        print("warmup only, no timing requested")
        return EXIT_OK

    def time_model(m):
        times = []
        for _ in range(args.iters):
            t0 = time.perf_counter()
            eranet_forward(x, m, clip_output=True)
            times.append(time.perf_counter() - t0)
        times.sort()
        p95 = times[min(len(times) - 1, int(round(0.95 * (len(times) - 1))))]
        return statistics.mean(times), statistics.median(times), p95

    for label, m in (("training", model), ("fused", fused)):
        mean, med, p95 = time_model(m)
        print(f"{label:9s} mean {mean * 1000:8.2f} ms  median {med * 1000:8.2f} ms  "
              f"p95 {p95 * 1000:8.2f} ms  ({1.0 / mean:.2f} fps)")
    tm = time_model(model)[0]
    tf = time_model(fused)[0]
    print(f"measured fused speedup: {tm / tf:.2f}x")
    return EXIT_OK


def cmd_inspect(args) -> int:
    mode, tensors = read_container(args.infile)
    print(f"file: {args.infile}")
    print(f"mode: {mode}")
    print(f"tensors: {len(tensors)}")
    total = 0
    for name, dims, arr in tensors:
        crc = zlib.crc32(arr.tobytes()) & 0xFFFFFFFF
        total += arr.size
        print(f"  {name:40s} shape={'x'.join(map(str, dims)):>14s} crc32={crc:08x}")
    print(f"total parameters: {total} ({total * 4 / 1024:.1f} KB single precision)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    ap = _Parser(prog="eranet", description="multi-scene visibility enhancement engine")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value file supplying flag defaults")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate synthetic degraded/clean pairs")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scene", default="mixed", choices=["haze", "rain", "lowlight", "mixed"])
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on paired data")
    common(p)
    p.add_argument("--data", help="directory of *_degraded/*_clean pairs (default: generate)")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--curve", help="write per-epoch loss curve here")
    p.add_argument("--scene", default="mixed", choices=["haze", "rain", "lowlight", "mixed"])
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--reduction", type=int, default=8)
    p.add_argument("--operator", default="kirsch")
    p.add_argument("--clip", action="store_true", help="clip gradient norm at 1.0")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fuse", help="collapse training weights for inference")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("enhance", help="restore images with trained weights")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="infile", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fused-only", action="store_true", help="reject training-mode weight files")
    p.add_argument("--no-fuse", action="store_true", help="run training-mode weights without fusing")
    p.set_defaults(fn=cmd_enhance)

    p = sub.add_parser("metrics", help="pairwise PSNR/SSIM report")
    common(p)
    p.add_argument("--restored", required=True)
    p.add_argument("--reference", required=True)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("bench", help="latency of training vs fused execution")
    common(p)
    p.add_argument("--weights", help="training-mode weight file (default: fresh random weights)")
    p.add_argument("--size", default="256x256")
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="dump weight container header and tensor table")
    common(p)
    p.add_argument("infile")
    p.set_defaults(fn=cmd_inspect)

    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args, parser)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except WeightFormatError as exc:
        print(f"weight file error: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS


if __name__ == "__main__":
    sys.exit(main())
