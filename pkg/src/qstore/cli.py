"""Command-line front end.

Subcommands: pack, unpack, inspect, entropy, quantize, bench.  Every
command takes ``--json`` for machine-readable output and honors the
``QSTORE_THREADS`` environment variable over ``--threads``.  Exit codes:
0 success, 1 validation/usage error, 2 I/O or corruption error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

from .archive import read_manifest
from .entropy import DEFAULT_CHUNK_SIZE
from .errors import CorruptionError, FormatError, GeometryError
from .metrics import grouping_entropy_report, size_report
from .pipeline import PipelineConfig, pipelined_load, pipelined_save, timed_bundle_load
from .quantize import QuantizedPair, load_spec_sidecar, quantize_rtn, save_spec_sidecar
from .synthetic import KINDS, synthetic_model
from .tensors import DType, ModelTensors, load_tensor_bundle, store_tensor_bundle

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors: exit 1
        raise _UsageError(message)


def _threads(args) -> int:
    env = os.environ.get("QSTORE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise _UsageError(f"QSTORE_THREADS={env!r} is not an integer") from None
    return args.threads


def _config(args, mode=None) -> PipelineConfig:
    return PipelineConfig(
        codec_threads=_threads(args),
        mode=mode or getattr(args, "mode", "pipelined"),
        throttle_mbps=getattr(args, "throttle_mbps", None),
    )


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=1, sort_keys=True) if args.json else text)


# -- pack ------------------------------------------------------------------------


def cmd_pack(args) -> int:
    if len(args.low) != len(args.spec):
        raise _UsageError("each --low bundle needs a matching --spec sidecar")
    if not args.low:
        raise _UsageError("pack needs at least one --low level")
    levels = []
    for low_path, spec_path in zip(args.low, args.spec):
        low = load_tensor_bundle(low_path)
        levels.append((low, load_spec_sidecar(spec_path, low)))
    levels.append((load_tensor_bundle(args.high), None))
    names = args.level_names.split(",") if args.level_names else None
    manifest, save_rep = pipelined_save(
        levels,
        args.out,
        config=_config(args),
        level_names=names,
        chunk_size=args.chunk_size,
    )
    report = size_report(args.out)
    _emit(
        args,
        {"archive": str(args.out), "levels": [lv.name for lv in manifest.levels],
         "save": save_rep.to_dict(), "size": report.to_dict()},
        f"packed {len(manifest.levels)} levels into {args.out}\n" + report.to_text(),
    )
    return 0


def cmd_unpack(args) -> int:
    model, rep = pipelined_load(args.archive, args.level, _config(args))
    store_tensor_bundle(model, args.out, format=args.format)
    _emit(
        args,
        {"out": str(args.out), "tensors": len(model), "load": rep.to_dict()},
        f"unpacked level {args.level!r} ({len(model)} tensors) to {args.out} "
        f"in {rep.wall_seconds:.3f}s",
    )
    return 0


def cmd_inspect(args) -> int:
    manifest = read_manifest(args.archive)
    report = size_report(args.archive)
    chain = " -> ".join(lv.name for lv in manifest.levels)
    text = [f"levels: {chain}"]
    if manifest.passthrough_tensors:
        text.append(f"passthrough: {', '.join(manifest.passthrough_tensors)}")
    text.append(report.to_text())
    _emit(
        args,
        {
            "levels": [
                {"name": lv.name, "dtype": lv.dtype.value, "role": lv.role,
                 "file": lv.file, "depends_on": lv.depends_on}
                for lv in manifest.levels
            ],
            "tensor_count": len(manifest.tensors),
            "passthrough_tensors": manifest.passthrough_tensors,
            "size": report.to_dict(),
        },
        "\n".join(text),
    )
    return 0


def cmd_entropy(args) -> int:
    high = load_tensor_bundle(args.high)
    low = load_tensor_bundle(args.low)
    specs = load_spec_sidecar(args.spec, low)
    pairs = []
    for name in low.names:
        if name not in high:
            raise GeometryError(f"tensor {name!r} missing from the high bundle")
        pairs.append(QuantizedPair(high[name], low[name], specs[name]))
    report = grouping_entropy_report(pairs, seed=args.seed)
    _emit(args, report.to_dict(), report.to_text())
    return 0


def cmd_quantize(args) -> int:
    if bool(args.synthetic) == bool(args.input):
        raise _UsageError("quantize needs exactly one of --synthetic or --in")
    if args.synthetic:
        try:
            rows, cols, count = (int(x) for x in args.synthetic.lower().split("x"))
        except ValueError:
            raise _UsageError("--synthetic wants ROWSxCOLSxTENSORS, e.g. 512x512x4") from None
        model = synthetic_model(
            rows, cols, count, kind=args.kind, seed=args.seed,
            dtype=DType.parse(args.dtype.upper()), sigma=args.sigma,
        )
        if not args.out_high:
            raise _UsageError("--synthetic needs --out-high to keep the generated model")
    else:
        model = load_tensor_bundle(args.input)
    lows, specs = [], {}
    for t in model:
        pair = quantize_rtn(
            t, bit_width=args.bits, block_axis=args.block_axis, block_size=args.block_size
        )
        lows.append(pair.low)
        specs[t.name] = pair.spec
    low_model = ModelTensors(lows)
    if args.out_high:
        store_tensor_bundle(model, args.out_high, format=args.format)
    store_tensor_bundle(low_model, args.out_low, format=args.format)
    save_spec_sidecar(specs, Path(args.out_spec))
    _emit(
        args,
        {"tensors": len(model), "bits": args.bits, "low": str(args.out_low),
         "spec": str(args.out_spec), "high": str(args.out_high) if args.out_high else None},
        f"quantized {len(model)} tensors to {args.bits}-bit at {args.out_low}",
    )
    return 0


def cmd_bench(args) -> int:
    throttle = args.throttle_mbps if args.throttle_mbps else math.inf
    result: dict = {"throttle_mbps": None if math.isinf(throttle) else throttle}
    model, rep = pipelined_load(
        args.archive,
        args.level,
        PipelineConfig(codec_threads=_threads(args), mode=args.mode, throttle_mbps=throttle),
    )
    result["archive_load"] = rep.to_dict()
    result["archive_bytes"] = rep.bytes_read
    text = [
        f"archive level {args.level!r}: {rep.wall_seconds:.3f}s wall "
        f"({rep.read_seconds:.3f}s read, {rep.decode_seconds:.3f}s decode, "
        f"{rep.bytes_read:,} bytes)"
    ]
    if args.baseline_bundle:
        base_model, base_rep = timed_bundle_load(args.baseline_bundle, throttle)
        result["baseline_load"] = base_rep.to_dict()
        result["baseline_bytes"] = base_rep.bytes_read
        result["speedup_vs_baseline"] = base_rep.wall_seconds / rep.wall_seconds
        result["size_ratio"] = base_rep.bytes_read / rep.bytes_read
        text.append(
            f"baseline bundle: {base_rep.wall_seconds:.3f}s wall "
            f"({base_rep.bytes_read:,} bytes); speedup "
            f"{result['speedup_vs_baseline']:.2f}x, size ratio {result['size_ratio']:.2f}x"
        )
        if args.online_quant_bits:
            t0 = time.perf_counter()
            for t in base_model:
                quantize_rtn(
                    t, bit_width=args.online_quant_bits,
                    block_axis=args.block_axis, block_size=args.block_size,
                )
            q_seconds = time.perf_counter() - t0
            total = base_rep.wall_seconds + q_seconds
            result["online_quant_seconds"] = q_seconds
            result["online_quant_total_seconds"] = total
            result["speedup_vs_online_quant"] = total / rep.wall_seconds
            text.append(
                f"online quantization: {q_seconds:.3f}s (+load = {total:.3f}s); "
                f"loading the stored low model is {total / rep.wall_seconds:.2f}x faster"
            )
    _emit(args, result, "\n".join(text))
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qstore", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=0,
                        help="codec threads (0 = all cores; QSTORE_THREADS overrides)")
        sp.add_argument("--json", action="store_true", help="machine-readable output")

    sp = sub.add_parser("pack", help="pack bundles into an archive")
    sp.add_argument("--high", required=True, help="high-precision bundle (top level)")
    sp.add_argument("--low", action="append", default=[],
                    help="low-precision bundle; repeat low-to-high for chains")
    sp.add_argument("--spec", action="append", default=[],
                    help="spec sidecar JSON matching each --low")
    sp.add_argument("--out", required=True, help="archive directory to create")
    sp.add_argument("--chunk-size", type=int, default=DEFAULT_CHUNK_SIZE)
    sp.add_argument("--mode", choices=("pipelined", "serial"), default="pipelined")
    sp.add_argument("--level-names", default=None, help="comma-separated override")
    common(sp)
    sp.set_defaults(func=cmd_pack)

    sp = sub.add_parser("unpack", help="extract one precision level")
    sp.add_argument("--archive", required=True)
    sp.add_argument("--level", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=("directory", "single_file"), default="directory")
    sp.add_argument("--mode", choices=("pipelined", "serial"), default="pipelined")
    common(sp)
    sp.set_defaults(func=cmd_unpack)

    sp = sub.add_parser("inspect", help="show levels and exact size accounting")
    sp.add_argument("--archive", required=True)
    common(sp)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("entropy", help="grouping-entropy report for a pair")
    sp.add_argument("--high", required=True)
    sp.add_argument("--low", required=True)
    sp.add_argument("--spec", required=True)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_entropy)

    sp = sub.add_parser("quantize", help="reference RTN quantizer / test-pair generator")
    sp.add_argument("--in", dest="input", default=None, help="high-precision bundle")
    sp.add_argument("--synthetic", default=None, metavar="RxCxT",
                    help="generate a synthetic model instead of --in")
    sp.add_argument("--kind", choices=KINDS, default="gaussian")
    sp.add_argument("--dtype", choices=("fp16", "bf16"), default="bf16")
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bits", type=int, choices=(8, 4), default=8)
    sp.add_argument("--block-axis", choices=("per_row", "flat_groups"), default="per_row")
    sp.add_argument("--block-size", type=int, default=0)
    sp.add_argument("--out-high", default=None)
    sp.add_argument("--out-low", required=True)
    sp.add_argument("--out-spec", required=True)
    sp.add_argument("--format", choices=("directory", "single_file"), default="directory")
    common(sp)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("bench", help="timed loads, optionally throttled")
    sp.add_argument("--archive", required=True)
    sp.add_argument("--level", required=True)
    sp.add_argument("--throttle-mbps", type=float, default=None)
    sp.add_argument("--mode", choices=("pipelined", "serial"), default="pipelined")
    sp.add_argument("--baseline-bundle", default=None,
                    help="uncompressed bundle to load through the same throttle")
    sp.add_argument("--online-quant-bits", type=int, choices=(8, 4), default=None,
                    help="also time RTN-quantizing the baseline after loading it")
    sp.add_argument("--block-axis", choices=("per_row", "flat_groups"), default="per_row")
    sp.add_argument("--block-size", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (GeometryError, ValueError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 1
    except (FormatError, CorruptionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
