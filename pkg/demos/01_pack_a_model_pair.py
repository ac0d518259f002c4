"""Pack a BF16 + INT8 model pair and get both precisions back bit-exactly.

Storing a quantized model next to its full-precision original normally
costs 24 bits per weight (16 + 8).  Here we store the INT8 weights once and
only the *conditional* information the BF16 weights add on top of them.

Run:  python demos/01_pack_a_model_pair.py
CLI:  qstore quantize --synthetic 512x1024x4 --out-high high/ --out-low low/ \
          --out-spec spec.json
      qstore pack --high high/ --low low/ --spec spec.json --out archive/
      qstore inspect --archive archive/
"""

import tempfile
from pathlib import Path

from qstore import (
    ModelTensors,
    load_model,
    quantize_rtn,
    size_report,
    synthetic_model,
    write_archive,
)

# A stand-in for a real checkpoint: four 512x1024 BF16 tensors.
high = synthetic_model(512, 1024, tensors=4, kind="gaussian", seed=42)
print(f"high-precision model: {len(high)} tensors, {high.total_bytes:,} bytes")

# Quantize each tensor with the reference round-to-nearest absmax quantizer.
# Any block quantizer works as long as it can describe itself as a QuantSpec
# (block geometry + scales + clamp range).
lows, specs = [], {}
for t in high:
    pair = quantize_rtn(t, bit_width=8, block_axis="flat_groups", block_size=65536)
    lows.append(pair.low)
    specs[t.name] = pair.spec
low = ModelTensors(lows)
print(f"quantized model:      {len(low)} tensors, {low.total_bytes:,} bytes")

with tempfile.TemporaryDirectory() as d:
    arch = Path(d) / "archive"
    # Levels are ordered lowest precision first; the top level carries no
    # spec because nothing is derived from it.
    write_archive([(low, specs), (high, None)], arch)

    report = size_report(arch)
    print()
    print(report.to_text())
    print()
    print(f"separate storage would cost {report.uncompressed_bits_per_weight:.0f} "
          f"bits/weight; the archive stores {report.bits_per_weight:.2f}")

    # Either precision loads directly.  The low model never touches the
    # conditional file; the high model is reconstructed losslessly from the
    # low weights plus the conditional stream.
    assert load_model(arch, "int8") == low
    assert load_model(arch, "bf16") == high
    print("both levels reconstructed bit-exactly")
