"""Chunk-oriented entropy codec and entropy measurement.

The codec is a length-limited canonical Huffman coder over bytes with two
fallbacks chosen per chunk:

* RLE when the chunk contains exactly one distinct byte value;
* RAW whenever the coded form (128-byte length table + bitstream) would not
  be strictly smaller than the input.

Codes are limited to 12 bits via package-merge, assigned canonically with
ties broken by ascending symbol value, and packed LSB-first with the final
partial byte zero-padded.  Equal histograms therefore always produce
bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _kernels
from .errors import CorruptionError, FormatError

__all__ = [
    "ChunkMode",
    "EncodedChunk",
    "HuffmanTable",
    "DEFAULT_CHUNK_SIZE",
    "MAX_CODE_LENGTH",
    "encode_chunk",
    "decode_chunk",
    "chunk_to_bytes",
    "chunk_wire_size",
    "read_chunk",
    "byte_entropy",
    "symbol_entropy",
    "weighted_group_entropy",
]

DEFAULT_CHUNK_SIZE = 64 * 1024
MAX_CODE_LENGTH = 12
TABLE_BYTES = 128  # 256 four-bit code lengths
CHUNK_HEADER_BYTES = 9  # mode u8 + raw_size u32 + comp_size u32

# Below this many bytes the coded form (table alone is 128 B) can never beat
# RAW, so chunk encoding degenerates to an RLE-or-RAW choice.
MIN_HUFFMAN_VIABLE = TABLE_BYTES + 1


class ChunkMode(IntEnum):
    RAW = 0
    HUFFMAN = 1
    RLE = 2


@dataclass(frozen=True)
class EncodedChunk:
    mode: ChunkMode
    raw_size: int
    comp_size: int
    payload: bytes

    def __post_init__(self):
        if self.comp_size != len(self.payload):
            raise FormatError("comp_size does not match payload length")


@dataclass(frozen=True)
class HuffmanTable:
    """Canonical code lengths for the 256 byte symbols (0 = absent)."""

    code_lengths: np.ndarray

    @classmethod
    def from_histogram(cls, hist: np.ndarray, max_len: int = MAX_CODE_LENGTH) -> "HuffmanTable":
        return cls(_code_lengths(np.asarray(hist, dtype=np.int64), max_len))

    @property
    def kraft_sum(self) -> int:
        """Sum of 2^(12-l) over present symbols; 4096 for a complete code."""
        l = self.code_lengths
        return int((1 << (MAX_CODE_LENGTH - l[l > 0].astype(np.int64))).sum())

    def to_nibbles(self) -> bytes:
        l = self.code_lengths.astype(np.uint8)
        return (l[0::2] | (l[1::2] << 4)).tobytes()

    @classmethod
    def from_nibbles(cls, blob: bytes) -> "HuffmanTable":
        if len(blob) != TABLE_BYTES:
            raise FormatError(f"code-length table must be {TABLE_BYTES} bytes")
        pairs = np.frombuffer(blob, dtype=np.uint8)
        lengths = np.empty(256, np.uint8)
        lengths[0::2] = pairs & 0x0F
        lengths[1::2] = pairs >> 4
        return cls(lengths)


def _as_u8(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if data.dtype != np.uint8:
            raise TypeError("expected uint8 array")
        return np.ascontiguousarray(data)
    return np.frombuffer(data, dtype=np.uint8)


def _code_lengths(hist: np.ndarray, max_len: int) -> np.ndarray:
    """Optimal code lengths, limited to max_len bits. Needs >= 2 symbols."""
    syms = np.flatnonzero(hist)
    freqs = hist[syms]
    order = np.argsort(freqs, kind="stable")  # ties stay in symbol order
    depths = _kernels.huffman_depths(freqs[order].astype(np.int64))
    lengths = np.zeros(256, np.uint8)
    lengths[syms[order]] = depths
    if depths.max() > max_len:
        lengths = _package_merge(syms, freqs, max_len)
    return lengths


def _package_merge(syms: np.ndarray, freqs: np.ndarray, max_len: int) -> np.ndarray:
    if (1 << max_len) < syms.size:
        raise ValueError(f"cannot fit {syms.size} symbols in {max_len}-bit codes")
    leaves = sorted((int(f), (int(s),)) for s, f in zip(syms, freqs))
    level = list(leaves)
    for _ in range(max_len - 1):
        packages = [
            (level[i][0] + level[i + 1][0], level[i][1] + level[i + 1][1])
            for i in range(0, len(level) - 1, 2)
        ]
        level = sorted(leaves + packages)
    lengths = np.zeros(256, np.uint8)
    for _, members in level[: 2 * (syms.size - 1)]:
        for s in members:
            lengths[s] += 1
    return lengths


def encode_chunk(data, max_len: int = MAX_CODE_LENGTH) -> EncodedChunk:
    """Encode one chunk, choosing RLE / HUFFMAN / RAW per the rules above."""
    arr = _as_u8(data)
    n = arr.size
    if n == 0:
        raise ValueError("cannot encode an empty chunk")
    if n > 0xFFFFFFFF:
        raise ValueError("chunk exceeds the u32 size field")
    hist = np.bincount(arr, minlength=256).astype(np.int64)
    present = int((hist > 0).sum())
    if present == 1:
        return EncodedChunk(ChunkMode.RLE, n, 1, arr[:1].tobytes())
    if n >= MIN_HUFFMAN_VIABLE:
        lengths = _code_lengths(hist, max_len)
        nbits = int((hist * lengths.astype(np.int64)).sum())
        total = TABLE_BYTES + (nbits + 7) // 8
        if total < n:
            patterns, _, _ = _kernels.canonical_tables(lengths)
            out = np.empty((nbits + 7) // 8, np.uint8)
            written = _kernels.pack_bits(arr, patterns, lengths, out)
            assert written == out.size
            table = HuffmanTable(lengths).to_nibbles()
            return EncodedChunk(ChunkMode.HUFFMAN, n, total, table + out.tobytes())
    return EncodedChunk(ChunkMode.RAW, n, n, arr.tobytes())


def decode_chunk(chunk: EncodedChunk) -> bytes:
    """Exact inverse of :func:`encode_chunk` for well-formed chunks."""
    out = np.empty(chunk.raw_size, np.uint8)
    decode_chunk_into(chunk, out, 0)
    return out.tobytes()


def decode_chunk_into(chunk: EncodedChunk, out: np.ndarray, out_off: int) -> None:
    mode, raw, payload = chunk.mode, chunk.raw_size, chunk.payload
    if mode == ChunkMode.RAW:
        if chunk.comp_size != raw:
            raise CorruptionError("RAW chunk size mismatch")
        out[out_off : out_off + raw] = np.frombuffer(payload, np.uint8)
    elif mode == ChunkMode.RLE:
        if chunk.comp_size != 1:
            raise CorruptionError("RLE chunk must have a 1-byte payload")
        out[out_off : out_off + raw] = payload[0]
    elif mode == ChunkMode.HUFFMAN:
        if len(payload) < TABLE_BYTES + 1:
            raise CorruptionError("truncated HUFFMAN payload")
        table = HuffmanTable.from_nibbles(payload[:TABLE_BYTES])
        if table.code_lengths.max() > MAX_CODE_LENGTH:
            raise FormatError("code length exceeds the 12-bit limit")
        if int((table.code_lengths > 0).sum()) < 2:
            raise FormatError("HUFFMAN table with fewer than 2 symbols")
        if table.kraft_sum != (1 << MAX_CODE_LENGTH):
            raise FormatError("Kraft-invalid code-length table")
        _, sym_tab, len_tab = _kernels.canonical_tables(table.code_lengths)
        status = _kernels.unpack_codes(
            np.frombuffer(payload, np.uint8, offset=TABLE_BYTES), raw, sym_tab, len_tab, out, out_off
        )
        if status == _kernels.TRUNCATED:
            raise CorruptionError("bitstream overrun: payload too short for raw_size")
        if status == _kernels.NONZERO_PADDING:
            raise CorruptionError("nonzero padding bits after final symbol")
        if status == _kernels.TRAILING_BYTES:
            raise CorruptionError("unconsumed bytes after final symbol")
    else:
        raise FormatError(f"unknown chunk mode {mode}")


# -- chunk wire form ----------------------------------------------------------


def chunk_to_bytes(chunk: EncodedChunk) -> bytes:
    head = bytes([int(chunk.mode)])
    head += int(chunk.raw_size).to_bytes(4, "little")
    head += int(chunk.comp_size).to_bytes(4, "little")
    return head + chunk.payload


def chunk_wire_size(chunk: EncodedChunk) -> int:
    return CHUNK_HEADER_BYTES + chunk.comp_size


def read_chunk(buf, offset: int) -> tuple[EncodedChunk, int]:
    if offset + CHUNK_HEADER_BYTES > len(buf):
        raise CorruptionError("truncated chunk header")
    mode = buf[offset]
    raw = int.from_bytes(buf[offset + 1 : offset + 5], "little")
    comp = int.from_bytes(buf[offset + 5 : offset + 9], "little")
    offset += CHUNK_HEADER_BYTES
    if offset + comp > len(buf):
        raise CorruptionError("truncated chunk payload")
    if mode > 2:
        raise FormatError(f"unknown chunk mode {mode}")
    chunk = EncodedChunk(ChunkMode(mode), raw, comp, bytes(buf[offset : offset + comp]))
    return chunk, offset + comp


# -- entropy measures ---------------------------------------------------------


def byte_entropy(data) -> float:
    """Shannon entropy of the byte histogram, in bits per byte."""
    arr = _as_u8(data)
    if arr.size == 0:
        raise ValueError("entropy of empty input is undefined")
    counts = np.bincount(arr, minlength=256)
    return _entropy_from_counts(counts[counts > 0], arr.size)


def symbol_entropy(symbols: np.ndarray) -> float:
    """Shannon entropy over arbitrary integer symbols (e.g. 16-bit weights)."""
    arr = np.asarray(symbols).ravel()
    if arr.size == 0:
        raise ValueError("entropy of empty input is undefined")
    _, counts = np.unique(arr, return_counts=True)
    return _entropy_from_counts(counts, arr.size)


def _entropy_from_counts(counts: np.ndarray, total: int) -> float:
    p = counts / total
    return float(-(p * np.log2(p)).sum())


def weighted_group_entropy(groups) -> float:
    """Length-weighted mean entropy over groups; empty groups carry no weight."""
    total = 0
    acc = 0.0
    for g in groups:
        size = g.size if isinstance(g, np.ndarray) else len(g)
        if size == 0:
            continue
        h = symbol_entropy(g) if isinstance(g, np.ndarray) else byte_entropy(g)
        acc += size * h
        total += size
    if total == 0:
        raise ValueError("all groups are empty")
    return acc / total
