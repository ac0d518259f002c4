"""Load-time behavior under constrained bandwidth, and versus on-the-fly
quantization.

The archive's win grows as bandwidth shrinks: the decoder keeps up with the
disk, so load time approaches stored-bytes / bandwidth.  At cloud-download
rates the smaller archive is the whole story.  Loading the stored low model
also beats the common habit of downloading the full-precision model and
quantizing it in memory.

Run:  python demos/04_throttled_loading.py
CLI:  qstore bench --archive archive/ --level bf16 --throttle-mbps 20 \
          --baseline-bundle high.qt --online-quant-bits 8 --json
"""

import tempfile
import time
from pathlib import Path

from qstore import (
    ModelTensors,
    PipelineConfig,
    pipelined_load,
    quantize_rtn,
    store_tensor_bundle,
    synthetic_model,
    timed_bundle_load,
    write_archive,
)

high = synthetic_model(512, 512, tensors=12, kind="gaussian", seed=8)
lows, specs = [], {}
for t in high:
    p = quantize_rtn(t, bit_width=8, block_axis="flat_groups", block_size=65536)
    lows.append(p.low)
    specs[t.name] = p.spec
low = ModelTensors(lows)

with tempfile.TemporaryDirectory() as d:
    root = Path(d)
    arch = root / "archive"
    write_archive([(low, specs), (high, None)], arch)
    store_tensor_bundle(high, root / "high.qt", format="single_file")
    store_tensor_bundle(low, root / "low.qt", format="single_file")

    print("loading the full pair, archive vs uncompressed bundles:")
    print(f"{'bandwidth':>12}  {'archive':>9}  {'uncompressed':>12}  {'speedup':>7}")
    for mbps in (500.0, 100.0, 20.0):
        _, rq = pipelined_load(arch, "bf16", PipelineConfig(throttle_mbps=mbps))
        _, rh = timed_bundle_load(root / "high.qt", mbps)
        _, rl = timed_bundle_load(root / "low.qt", mbps)
        base = rh.wall_seconds + rl.wall_seconds
        print(f"{mbps:>9.0f} MB/s  {rq.wall_seconds:>8.3f}s  {base:>11.3f}s  "
              f"{base / rq.wall_seconds:>6.2f}x")

    print()
    print("getting the INT8 model at 100 MB/s:")
    _, rq = pipelined_load(arch, "int8", PipelineConfig(throttle_mbps=100.0))
    loaded_high, rh = timed_bundle_load(root / "high.qt", 100.0)
    t0 = time.perf_counter()
    for t in loaded_high:
        quantize_rtn(t, bit_width=8, block_axis="flat_groups", block_size=65536)
    quant = time.perf_counter() - t0
    print(f"  stored low model:            {rq.wall_seconds:.3f}s")
    print(f"  load high + quantize online: {rh.wall_seconds + quant:.3f}s "
          f"({rh.wall_seconds:.3f}s load + {quant:.3f}s quantize)")
    print(f"  -> {(rh.wall_seconds + quant) / rq.wall_seconds:.2f}x faster from the archive")
