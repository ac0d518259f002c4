"""Store three precisions of one model as a chain: INT4 -> INT8 -> FP16.

Deployments often keep 4-bit weights for edge inference, 8-bit for servers,
and 16-bit for fine-tuning.  A chain stores the INT4 model as the base, the
INT8 model as a conditional on INT4, and the FP16 model as a conditional on
INT8 - each level adds only the information the one below lacks.

Run:  python demos/03_precision_chain.py
"""

import tempfile
from pathlib import Path

from qstore import DType, ModelTensors, load_model, quantize_rtn, size_report, synthetic_model, write_archive

# Clipped weights are typical of trained checkpoints and give the quantizer
# saturated blocks that share scales.
high = synthetic_model(1024, 1024, tensors=2, kind="clipped_gaussian", seed=7, dtype=DType.FP16)

l8, s8, l4, s4 = [], {}, [], {}
for t in high:
    p8 = quantize_rtn(t, bit_width=8, block_axis="flat_groups", block_size=512)
    p4 = quantize_rtn(t, bit_width=4, block_axis="flat_groups", block_size=512)
    l8.append(p8.low)
    s8[t.name] = p8.spec
    l4.append(p4.low)
    s4[t.name] = p4.spec

levels = [
    (ModelTensors(l4), s4),   # base: INT4 weights + their scales
    (ModelTensors(l8), s8),   # INT8 given INT4
    (high, None),             # FP16 given INT8
]

with tempfile.TemporaryDirectory() as d:
    arch = Path(d) / "chain"
    manifest = write_archive(levels, arch)
    print("files:", ", ".join(sorted(p.name for p in arch.iterdir())))
    print("chain:", " -> ".join(lv.name for lv in manifest.levels))
    print()
    report = size_report(arch)
    print(report.to_text())
    print()
    for (model, _), name in zip(levels, ("int4", "int8", "fp16")):
        assert load_model(arch, name) == model
        print(f"level {name:5s} reconstructed bit-exactly")
    print()
    print(f"three precisions at {report.bits_per_weight:.1f} bits/weight instead of "
          f"{report.uncompressed_bits_per_weight:.0f}")
