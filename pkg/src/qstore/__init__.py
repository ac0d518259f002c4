"""qstore: joint lossless storage for model weight pairs and chains.

Stores the quantized low-precision weights plus only the conditional
information needed to rebuild the high-precision weights bit-exactly, so a
model pair (or a longer precision chain) costs far less than the sum of its
parts while either precision loads directly.
"""

__version__ = "0.1.0"

from .errors import CorruptionError, FormatError, GeometryError, QStoreError
from .tensors import (
    DType,
    ModelTensors,
    Tensor,
    load_tensor_bundle,
    pack_int4,
    store_tensor_bundle,
    unpack_int4,
)
from .quantize import (
    QuantSpec,
    QuantizedPair,
    dequantize,
    load_spec_sidecar,
    quantize_rtn,
    save_spec_sidecar,
)
from .entropy import (
    ChunkMode,
    DEFAULT_CHUNK_SIZE,
    EncodedChunk,
    HuffmanTable,
    byte_entropy,
    decode_chunk,
    encode_chunk,
    symbol_entropy,
    weighted_group_entropy,
)
from .lowstream import LowStream, decode_low, encode_low
from .conditional import (
    ConditionalStream,
    Group,
    GroupingPlan,
    build_grouping,
    encode_conditional,
    reconstruct_high,
    serialization_order,
)
from .archive import ArchiveManifest, load_model, read_manifest, write_archive
from .pipeline import (
    PipelineConfig,
    PipelineReport,
    SaveReport,
    ThrottledReader,
    pipelined_load,
    pipelined_save,
    throttled_reader,
    timed_bundle_load,
)
from .metrics import GroupingEntropyReport, SizeReport, grouping_entropy_report, size_report
from .synthetic import synthetic_model, synthetic_tensor

__all__ = [
    "__version__",
    # errors
    "QStoreError",
    "FormatError",
    "GeometryError",
    "CorruptionError",
    # tensors
    "DType",
    "Tensor",
    "ModelTensors",
    "load_tensor_bundle",
    "store_tensor_bundle",
    "pack_int4",
    "unpack_int4",
    # quantizer
    "QuantSpec",
    "QuantizedPair",
    "quantize_rtn",
    "dequantize",
    "save_spec_sidecar",
    "load_spec_sidecar",
    # entropy codec
    "ChunkMode",
    "EncodedChunk",
    "HuffmanTable",
    "DEFAULT_CHUNK_SIZE",
    "encode_chunk",
    "decode_chunk",
    "byte_entropy",
    "symbol_entropy",
    "weighted_group_entropy",
    # streams
    "LowStream",
    "encode_low",
    "decode_low",
    "ConditionalStream",
    "Group",
    "GroupingPlan",
    "build_grouping",
    "encode_conditional",
    "reconstruct_high",
    "serialization_order",
    # archive
    "ArchiveManifest",
    "write_archive",
    "read_manifest",
    "load_model",
    # pipeline
    "PipelineConfig",
    "PipelineReport",
    "SaveReport",
    "pipelined_load",
    "pipelined_save",
    "throttled_reader",
    "ThrottledReader",
    "timed_bundle_load",
    # metrics
    "SizeReport",
    "GroupingEntropyReport",
    "size_report",
    "grouping_entropy_report",
    # synthetic data
    "synthetic_model",
    "synthetic_tensor",
]
