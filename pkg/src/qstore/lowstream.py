"""Chunked entropy coding of a whole tensor's bytes.

The quantized low-precision weights are split in scan order into sequential
fixed-size chunks and each chunk is entropy-coded independently, so chunks
can be (de)coded in parallel and any chunk is decodable from its header and
payload alone.  The quantization spec travels with the stream: the low model
is unusable without its scales, and the conditional decoder needs them to
rebuild the grouping.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .entropy import DEFAULT_CHUNK_SIZE, EncodedChunk, decode_chunk_into, encode_chunk
from .errors import CorruptionError, GeometryError
from .quantize import QuantSpec
from .tensors import DType, Tensor

__all__ = ["LowStream", "encode_low", "encode_raw_stream", "decode_low"]


@dataclass(frozen=True)
class LowStream:
    tensor_name: str
    dtype: DType
    shape: tuple[int, ...]
    chunk_size: int
    chunks: tuple[EncodedChunk, ...]
    spec: QuantSpec | None

    @property
    def raw_bytes(self) -> int:
        return sum(c.raw_size for c in self.chunks)

    @property
    def stored_payload_bytes(self) -> int:
        return sum(c.comp_size for c in self.chunks)


def _chunk_tensor(t: Tensor, chunk_size: int, threads: int) -> tuple[EncodedChunk, ...]:
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    raw = t.as_uint8()
    views = [raw[o : o + chunk_size] for o in range(0, raw.size, chunk_size)]
    # pool spin-up costs more than it saves below a handful of chunks
    if threads > 1 and len(views) >= 8:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return tuple(pool.map(encode_chunk, views))
    return tuple(encode_chunk(v) for v in views)


def encode_low(
    low: Tensor,
    spec: QuantSpec,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    threads: int = 1,
) -> LowStream:
    """Encode quantized weights; all chunks except possibly the last are full."""
    if low.dtype not in (DType.INT8, DType.INT4_PACKED):
        raise GeometryError(f"low stream expects integer weights, got {low.dtype.value}")
    spec.validate_geometry(low.shape)
    if spec.low_dtype() is not low.dtype:
        raise GeometryError(
            f"{spec.bit_width}-bit spec does not match tensor dtype {low.dtype.value}"
        )
    chunks = _chunk_tensor(low, chunk_size, threads)
    return LowStream(low.name, low.dtype, low.shape, chunk_size, chunks, spec)


def encode_raw_stream(t: Tensor, chunk_size: int = DEFAULT_CHUNK_SIZE, threads: int = 1) -> LowStream:
    """Chunk-code any tensor without quantization metadata (float bases,
    passthrough entries)."""
    return LowStream(t.name, t.dtype, t.shape, chunk_size, _chunk_tensor(t, chunk_size, threads), None)


def decode_low(stream: LowStream, threads: int = 1) -> tuple[Tensor, QuantSpec | None]:
    """Bit-exact reconstruction of the tensor and its spec."""
    expect = stream.dtype.byte_length(int(np.prod(stream.shape, dtype=np.int64)))
    total = stream.raw_bytes
    if total != expect:
        raise CorruptionError(
            f"chunk raw sizes sum to {total}, expected {expect} for shape {stream.shape}"
        )
    out = np.empty(total, np.uint8)
    offsets = []
    off = 0
    for c in stream.chunks:
        offsets.append(off)
        off += c.raw_size
    if threads > 1 and len(stream.chunks) >= 8:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda co: decode_chunk_into(co[0], out, co[1]), zip(stream.chunks, offsets)))
    else:
        for c, o in zip(stream.chunks, offsets):
            decode_chunk_into(c, out, o)
    tensor = Tensor(stream.tensor_name, stream.dtype, stream.shape, out.tobytes())
    return tensor, stream.spec
