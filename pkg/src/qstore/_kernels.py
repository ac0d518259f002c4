"""Compiled hot loops for entropy coding and subgroup stream I/O.

Everything here is deliberately branch-light and allocation-free so numba
can compile it once (disk-cached) and release the GIL.  Status codes instead
of exceptions keep the kernels nopython-clean; callers translate them.
"""

import numpy as np
from numba import njit

# status codes shared by the walking kernels
OK = 0
TRUNCATED = 1
BAD_RECORD = 2
NONZERO_PADDING = 3
TRAILING_BYTES = 4


@njit(cache=True, nogil=True)
def huffman_depths(freqs):
    """Depths of an optimal prefix tree for ascending-sorted frequencies.

    Two-queue construction; on weight ties a leaf is merged before an
    internal node, which fixes the tree (and output) deterministically.
    """
    n = freqs.size
    nnodes = 2 * n - 1
    weight = np.zeros(nnodes, np.int64)
    parent = np.full(nnodes, -1, np.int64)
    for i in range(n):
        weight[i] = freqs[i]
    li = 0
    ii = n
    for ni in range(n, nnodes):
        if li < n and (ii >= ni or weight[li] <= weight[ii]):
            a = li
            li += 1
        else:
            a = ii
            ii += 1
        if li < n and (ii >= ni or weight[li] <= weight[ii]):
            b = li
            li += 1
        else:
            b = ii
            ii += 1
        weight[ni] = weight[a] + weight[b]
        parent[a] = ni
        parent[b] = ni
    depth = np.zeros(nnodes, np.int64)
    for v in range(nnodes - 2, -1, -1):
        depth[v] = depth[parent[v]] + 1
    return depth[:n]


@njit(cache=True, nogil=True)
def canonical_tables(lengths):
    """Canonical code patterns plus a 12-bit decode table.

    ``patterns[s]`` holds symbol s's codeword with its first (most
    significant canonical) bit in bit 0, i.e. already in stream order for
    LSB-first packing.  The decode table is indexed by the next 12 stream
    bits.
    """
    patterns = np.zeros(256, np.uint64)
    sym_tab = np.zeros(4096, np.uint8)
    len_tab = np.zeros(4096, np.uint8)
    code = 0
    prev = 0
    started = False
    for l in range(1, 13):
        for s in range(256):
            if lengths[s] != l:
                continue
            if started:
                code = (code + 1) << (l - prev)
            started = True
            prev = l
            rev = 0
            c = code
            for _ in range(l):
                rev = (rev << 1) | (c & 1)
                c >>= 1
            patterns[s] = rev
            step = 1 << l
            for x in range(rev, 4096, step):
                sym_tab[x] = s
                len_tab[x] = l
    return patterns, sym_tab, len_tab


@njit(cache=True, nogil=True)
def pack_bits(data, patterns, lengths, out):
    """Append each symbol's pattern LSB-first; returns bytes written."""
    bitbuf = np.uint64(0)
    bitcnt = 0
    opos = 0
    for i in range(data.size):
        s = data[i]
        bitbuf |= patterns[s] << bitcnt
        bitcnt += lengths[s]
        while bitcnt >= 8:
            out[opos] = bitbuf & np.uint64(0xFF)
            opos += 1
            bitbuf >>= 8
            bitcnt -= 8
    if bitcnt > 0:
        out[opos] = bitbuf & np.uint64(0xFF)
        opos += 1
    return opos


@njit(cache=True, nogil=True)
def unpack_codes(payload, nsyms, sym_tab, len_tab, out, out_off):
    """Decode ``nsyms`` symbols into out[out_off:]; returns a status code.

    Fails if the bitstream runs dry, if trailing padding bits are nonzero,
    or if payload bytes remain unconsumed.
    """
    bitbuf = np.uint64(0)
    bitcnt = 0
    pos = 0
    npay = payload.size
    for i in range(nsyms):
        while bitcnt < 12 and pos < npay:
            bitbuf |= np.uint64(payload[pos]) << bitcnt
            pos += 1
            bitcnt += 8
        w = bitbuf & np.uint64(0xFFF)
        l = len_tab[w]
        if l == 0 or l > bitcnt:
            return TRUNCATED
        out[out_off + i] = sym_tab[w]
        bitbuf >>= l
        bitcnt -= l
    if bitbuf != np.uint64(0):
        return NONZERO_PADDING
    if pos != npay:
        return TRAILING_BYTES
    return OK


@njit(cache=True, nogil=True)
def fifo_positions(key, offsets):
    """Serialized slot for each scan position: subgroup base + FIFO rank.

    ``offsets`` is the exclusive cumulative sum of subgroup counts.
    Equivalent to a stable sort by key but linear time.
    """
    cursor = offsets.copy()
    out = np.empty(key.size, np.int64)
    for i in range(key.size):
        k = key[i]
        out[i] = cursor[k]
        cursor[k] += 1
    return out


# -- subgroup sections (conditional stream wire form) -------------------------
#
# Per subgroup: element_count u32, then for each byte plane a run of chunk
# records (mode u8, raw u32, comp u32, payload) whose raw sizes sum to the
# element count.  Subgroups run group-major in ascending quantized-value
# order; empty subgroups are just the zero count.


@njit(cache=True, nogil=True)
def scan_subgroups(buf, start, nsg, planes, counts_out):
    """Structure-validating walk. Returns (end, total, n_huff, comp_payload, status)."""
    off = start
    total = 0
    n_huff = 0
    comp_total = 0
    N = buf.size
    for k in range(nsg):
        if off + 4 > N:
            return off, total, n_huff, comp_total, TRUNCATED
        c = (
            np.int64(buf[off])
            | (np.int64(buf[off + 1]) << 8)
            | (np.int64(buf[off + 2]) << 16)
            | (np.int64(buf[off + 3]) << 24)
        )
        off += 4
        counts_out[k] = c
        total += c
        if c == 0:
            continue
        for _p in range(planes):
            got = 0
            while got < c:
                if off + 9 > N:
                    return off, total, n_huff, comp_total, TRUNCATED
                mode = buf[off]
                raw = (
                    np.int64(buf[off + 1])
                    | (np.int64(buf[off + 2]) << 8)
                    | (np.int64(buf[off + 3]) << 16)
                    | (np.int64(buf[off + 4]) << 24)
                )
                comp = (
                    np.int64(buf[off + 5])
                    | (np.int64(buf[off + 6]) << 8)
                    | (np.int64(buf[off + 7]) << 16)
                    | (np.int64(buf[off + 8]) << 24)
                )
                off += 9
                if mode > 2 or raw == 0:
                    return off, total, n_huff, comp_total, BAD_RECORD
                if mode == 0 and comp != raw:
                    return off, total, n_huff, comp_total, BAD_RECORD
                if mode == 2 and comp != 1:
                    return off, total, n_huff, comp_total, BAD_RECORD
                if off + comp > N:
                    return off, total, n_huff, comp_total, TRUNCATED
                if mode == 1:
                    n_huff += 1
                comp_total += comp
                off += comp
                got += raw
            if got != c:
                return off, total, n_huff, comp_total, BAD_RECORD
    return off, total, n_huff, comp_total, OK


@njit(cache=True, nogil=True)
def read_subgroups(buf, start, planes, counts, plane_out, huff_desc):
    """Fill plane byte arrays from a pre-scanned section.

    RAW/RLE chunks are materialized inline; HUFFMAN chunks are recorded in
    ``huff_desc`` rows (payload_off, comp, raw, plane, dest) for the caller.
    """
    off = start
    elem_off = 0
    hi = 0
    for k in range(counts.size):
        c = counts[k]
        off += 4
        if c == 0:
            continue
        for p in range(planes):
            got = 0
            while got < c:
                mode = buf[off]
                raw = (
                    np.int64(buf[off + 1])
                    | (np.int64(buf[off + 2]) << 8)
                    | (np.int64(buf[off + 3]) << 16)
                    | (np.int64(buf[off + 4]) << 24)
                )
                comp = (
                    np.int64(buf[off + 5])
                    | (np.int64(buf[off + 6]) << 8)
                    | (np.int64(buf[off + 7]) << 16)
                    | (np.int64(buf[off + 8]) << 24)
                )
                off += 9
                dest = elem_off + got
                if mode == 0:
                    plane_out[p, dest : dest + raw] = buf[off : off + raw]
                elif mode == 2:
                    v = buf[off]
                    for i in range(raw):
                        plane_out[p, dest + i] = v
                else:
                    huff_desc[hi, 0] = off
                    huff_desc[hi, 1] = comp
                    huff_desc[hi, 2] = raw
                    huff_desc[hi, 3] = p
                    huff_desc[hi, 4] = dest
                    hi += 1
                off += comp
                got += raw
        elem_off += c
    return off


@njit(cache=True, nogil=True)
def decode_subgroup_huffman(buf, desc, plane_out):
    """Decode every HUFFMAN subgroup chunk recorded by ``read_subgroups``.

    One kernel call per tensor record keeps the per-chunk cost at table
    build + bit walk; subgroup chunks are tiny and numerous.
    """
    lengths = np.empty(256, np.uint8)
    for r in range(desc.shape[0]):
        off = desc[r, 0]
        comp = desc[r, 1]
        raw = desc[r, 2]
        p = desc[r, 3]
        dest = desc[r, 4]
        if comp <= 128:
            return TRUNCATED
        kraft = 0
        nsyms = 0
        for j in range(128):
            b = buf[off + j]
            lengths[2 * j] = b & 0x0F
            lengths[2 * j + 1] = b >> 4
        for s in range(256):
            l = lengths[s]
            if l > 0:
                if l > 12:
                    return BAD_RECORD
                kraft += 1 << (12 - l)
                nsyms += 1
        if kraft != 4096 or nsyms < 2:
            return BAD_RECORD
        _patterns, sym_tab, len_tab = canonical_tables(lengths)
        status = unpack_codes(
            buf[off + 128 : off + comp], raw, sym_tab, len_tab, plane_out[p], dest
        )
        if status != OK:
            return status
    return OK


@njit(cache=True, nogil=True)
def write_subgroups(counts, planes_data, sg_off, big_off, big_len, big_blob, out):
    """Serialize subgroup records; returns bytes written.

    Subgroups with a pre-encoded segment in ``big_blob`` (big_len > 0) are
    copied verbatim; the rest are small enough that Huffman can never win,
    so the choice is RLE when the plane is constant, RAW otherwise.
    """
    op = 0
    planes = planes_data.shape[0]
    for k in range(counts.size):
        c = counts[k]
        out[op] = c & 0xFF
        out[op + 1] = (c >> 8) & 0xFF
        out[op + 2] = (c >> 16) & 0xFF
        out[op + 3] = (c >> 24) & 0xFF
        op += 4
        if c == 0:
            continue
        bl = big_len[k]
        if bl > 0:
            bo = big_off[k]
            out[op : op + bl] = big_blob[bo : bo + bl]
            op += bl
            continue
        s = sg_off[k]
        for p in range(planes):
            v0 = planes_data[p, s]
            constant = True
            for i in range(1, c):
                if planes_data[p, s + i] != v0:
                    constant = False
                    break
            if constant:
                out[op] = 2
                comp = 1
            else:
                out[op] = 0
                comp = c
            out[op + 1] = c & 0xFF
            out[op + 2] = (c >> 8) & 0xFF
            out[op + 3] = (c >> 16) & 0xFF
            out[op + 4] = (c >> 24) & 0xFF
            out[op + 5] = comp & 0xFF
            out[op + 6] = (comp >> 8) & 0xFF
            out[op + 7] = (comp >> 16) & 0xFF
            out[op + 8] = (comp >> 24) & 0xFF
            op += 9
            if constant:
                out[op] = v0
                op += 1
            else:
                out[op : op + c] = planes_data[p, s : s + c]
                op += c
    return op
