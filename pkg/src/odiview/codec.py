"""Baseline DCT block codec with a differentiable twin and a learnable rate proxy.

Byte streams are ordinary baseline JFIF files (8-bit, 4:4:4, default
quantisation tables scaled by the usual quality knob, per-image optimal
canonical Huffman tables carried in the header), so any stock image library
can decode what `encode` emits.  `decode` is a from-scratch reader for the
same subset; anything it cannot parse raises `MalformedStream`.

The differentiable path (`forward_blocks` / `reconstruct_blocks`) reproduces the
encoder's float math on autodiff tensors so gradients can flow through the
transform, the quantiser (straight-through, or frozen additive noise for
finite-difference checks) and back out of the decoder.  In eval mode its
integer coefficients match `encode` exactly; the byte encoder additionally
clamps AC terms to +/-1023 (the widest amplitude the entropy tables can carry),
which realistic content never reaches.

`RateModel` scores quantised coefficients with one discretised Laplace per
in-block frequency position (separate luma / shared chroma scales, DC measured
as block-to-block difference, a catch-all tail bucket beyond +/-1023) and is
the differentiable stand-in for the true entropy-coded length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    abs_,
    concat,
    exp,
    log,
    matmul,
    reshape,
    round_ste,
    slice_,
    sum_,
    transpose,
)
from .nn import ParamStore
from .resample import ErpImage


class MalformedStream(ValueError):
    """Byte stream is not a stream this codec can decode."""


class TargetUnreachable(RuntimeError):
    """No quality setting meets the requested rate within tolerance."""


# ---------------------------------------------------------------------------
# fixed tables (ITU-T T.81 Annex K defaults)

STD_LUMA_QUANT = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.int64).reshape(8, 8)

STD_CHROMA_QUANT = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
], dtype=np.int64).reshape(8, 8)

# raster index -> zigzag position
ZIGZAG_POS = np.array([
    0, 1, 5, 6, 14, 15, 27, 28,
    2, 4, 7, 13, 16, 26, 29, 42,
    3, 8, 12, 17, 25, 30, 41, 43,
    9, 11, 18, 24, 31, 40, 44, 53,
    10, 19, 23, 32, 39, 45, 52, 54,
    20, 22, 33, 38, 46, 51, 55, 60,
    21, 34, 37, 47, 50, 56, 59, 61,
    35, 36, 48, 49, 57, 58, 62, 63,
], dtype=np.int64)
# zigzag position -> raster index
ZIGZAG_ORDER = np.argsort(ZIGZAG_POS)

# amplitude clamp: widest (run,size) symbol baseline AC tables can carry is size 10
AC_AMP_MAX = 1023
DC_DIFF_MAX = 2047
# tail bucket boundary of the rate model, matching the encoder's AC clamp
RATE_TAIL = 1023


def _dct_matrix() -> np.ndarray:
    # orthonormal 8x8 type-II matrix: D[u, x] = c(u)/2 * cos((2x+1) u pi / 16)
    u = np.arange(8)[:, None]
    x = np.arange(8)[None, :]
    d = 0.5 * np.cos((2 * x + 1) * u * np.pi / 16)
    d[0] *= 1.0 / np.sqrt(2.0)
    return d


DCT_MATRIX = _dct_matrix()

# RGB <-> analog YCbCr (BT.601 full range); chroma rows are zero-centered
_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
])
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)


@dataclass(frozen=True)
class QuantTables:
    """8x8 integer divisor tables (raster order), values in [1, 255]."""

    luma: np.ndarray
    chroma: np.ndarray

    def __post_init__(self):
        for name in ("luma", "chroma"):
            t = np.asarray(getattr(self, name))
            if t.shape != (8, 8):
                raise ValueError(f"{name} table must be 8x8, got {t.shape}")
            if not np.issubdtype(t.dtype, np.integer):
                raise ValueError(f"{name} table must be integer-valued")
            if t.min() < 1 or t.max() > 255:
                raise ValueError(f"{name} table entries must lie in [1, 255]")
            object.__setattr__(self, name, t.astype(np.int64))


def tables_for_quality(quality: float) -> QuantTables:
    """Scale the default tables by the conventional quality knob.

    `quality` may be any real in (0, 100]; 50 reproduces the defaults exactly
    and 100 gives all-ones tables.
    """
    if not 0.0 < quality <= 100.0:
        raise ValueError(f"quality must lie in (0, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality

    def _scaled(base):
        t = np.floor((base * scale + 50.0) / 100.0).astype(np.int64)
        return np.clip(t, 1, 255)

    return QuantTables(luma=_scaled(STD_LUMA_QUANT), chroma=_scaled(STD_CHROMA_QUANT))


@dataclass(frozen=True)
class CoeffBlocks:
    """Quantised coefficients in zigzag order, one row per 8x8 block.

    Blocks are raster-ordered over the (possibly padded) block grid of
    `block_rows` x `block_cols`; `height`/`width` are the true image dims.
    DC entries hold the actual quantised DC values (differencing is an
    entropy-coding detail, applied only where streams/rates are computed).
    """

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray
    block_rows: int
    block_cols: int
    height: int
    width: int

    @property
    def n_blocks(self) -> int:
        return self.block_rows * self.block_cols


# ---------------------------------------------------------------------------
# differentiable forward/inverse transform


def _blockify(chan: Tensor, h: int, w: int) -> Tensor:
    # (h, w) -> (n_blocks, 64) raster-within-block
    br, bc = h // 8, w // 8
    t = reshape(chan, (br, 8, bc, 8))
    t = transpose(t, (0, 2, 1, 3))
    return reshape(t, (br * bc, 64))


def _unblockify(blocks: Tensor, h: int, w: int) -> Tensor:
    br, bc = h // 8, w // 8
    t = reshape(blocks, (br, bc, 8, 8))
    t = transpose(t, (0, 2, 1, 3))
    return reshape(t, (h, w))


def _dct_blocks(blocks64: Tensor) -> Tensor:
    # rows of D @ B @ D^T for each 8x8 block packed as a (n, 64) row
    n = blocks64.shape[0]
    dt = Tensor(DCT_MATRIX.T)
    t = matmul(reshape(blocks64, (n * 8, 8)), dt)          # B @ D^T
    t = transpose(reshape(t, (n, 8, 8)), (0, 2, 1))        # (B @ D^T)^T
    t = matmul(reshape(t, (n * 8, 8)), dt)                 # (B @ D^T)^T @ D^T = (D B D^T)^T
    t = transpose(reshape(t, (n, 8, 8)), (0, 2, 1))
    return reshape(t, (n, 64))


def _idct_blocks(blocks64: Tensor) -> Tensor:
    n = blocks64.shape[0]
    d = Tensor(DCT_MATRIX)
    t = matmul(reshape(blocks64, (n * 8, 8)), d)           # C @ D
    t = transpose(reshape(t, (n, 8, 8)), (0, 2, 1))
    t = matmul(reshape(t, (n * 8, 8)), d)                  # (C @ D)^T @ D = (D^T C D)^T
    t = transpose(reshape(t, (n, 8, 8)), (0, 2, 1))
    return reshape(t, (n, 64))


def _to_zigzag(blocks64: Tensor) -> Tensor:
    return slice_(blocks64, (slice(None), ZIGZAG_ORDER))


def _from_zigzag(vec: Tensor) -> Tensor:
    return slice_(vec, (slice(None), ZIGZAG_POS))


def _rgb_to_level_shifted_ycc(img: Tensor, h: int, w: int) -> Tensor:
    # (3, h, w) in [0,1] -> (3, h*w): luma shifted to [-128, 127], chroma centered
    flat = reshape(img * 255.0, (3, h * w))
    ycc = matmul(Tensor(_RGB_TO_YCC), flat)
    return ycc + np.array([[-128.0], [0.0], [0.0]])


def _snap_samples(ycc: Tensor) -> Tensor:
    # samples are 8-bit in the coded domain; forward snaps, gradient passes
    # straight through (adding the residual as a constant keeps the graph intact)
    snapped = np.clip(np.round(ycc.data), -128.0, 127.0)
    return ycc + (snapped - ycc.data)


def _ycc_to_rgb_unit(ycc: Tensor, h: int, w: int) -> Tensor:
    shift = _YCC_TO_RGB @ np.array([[128.0], [0.0], [0.0]])
    rgb = matmul(Tensor(_YCC_TO_RGB), ycc) + shift
    return reshape(rgb / 255.0, (3, h, w))


def quantize_ste(coeffs: Tensor, divisors: np.ndarray, mode: str = "eval",
                 noise: np.ndarray | None = None) -> Tensor:
    """Divide by per-position divisors and discretise.

    mode "eval"/"train": round half-to-even; "train" is identical in the
    forward pass and passes gradients straight through (that is what
    `round_ste` does in both modes — the names exist for call-site clarity).
    mode "noise": add the supplied frozen noise in [-0.5, 0.5) instead of
    rounding, keeping the map smooth for finite-difference checks.
    """
    scaled = coeffs / np.asarray(divisors, dtype=float)
    if mode in ("eval", "train"):
        return round_ste(scaled)
    if mode == "noise":
        if noise is None:
            raise ValueError("noise mode requires a frozen noise array")
        noise = np.asarray(noise, dtype=float)
        if noise.shape != scaled.shape:
            raise ValueError(f"noise shape {noise.shape} != coeff shape {scaled.shape}")
        if np.abs(noise).max() > 0.5:
            raise ValueError("noise must lie in [-0.5, 0.5]")
        return scaled + noise
    raise ValueError(f"unknown quantize mode {mode!r}")


def forward_blocks(img: Tensor, tables: QuantTables, mode: str = "eval",
                   noise: tuple | None = None) -> dict:
    """Color transform + blockwise DCT + quantisation on the graph.

    `img` is (3, h, w) with h, w multiples of 8.  Returns zigzag-ordered
    coefficient tensors {"y", "cb", "cr"}, each (n_blocks, 64).
    """
    _, h, w = img.shape
    if h % 8 or w % 8:
        raise ValueError(f"graph path needs multiple-of-8 dims, got {h}x{w}")
    ycc = _rgb_to_level_shifted_ycc(img, h, w)
    if mode != "noise":
        ycc = _snap_samples(ycc)  # noise mode keeps the whole path smooth
    out = {}
    for i, (name, div) in enumerate(
        (("y", tables.luma), ("cb", tables.chroma), ("cr", tables.chroma))
    ):
        chan = reshape(slice_(ycc, (slice(i, i + 1), slice(None))), (h, w))
        vec = _to_zigzag(_dct_blocks(_blockify(chan, h, w)))
        nz = None if noise is None else noise[i]
        out[name] = quantize_ste(vec, div.reshape(-1)[ZIGZAG_ORDER], mode, nz)
    return out


def reconstruct_blocks(coeffs: dict, tables: QuantTables, h: int, w: int) -> Tensor:
    """Differentiable inverse of `forward_blocks`; output is NOT clipped."""
    chans = []
    for name, div in (("y", tables.luma), ("cb", tables.chroma), ("cr", tables.chroma)):
        deq = coeffs[name] * div.reshape(-1)[ZIGZAG_ORDER].astype(float)
        chan = _unblockify(_idct_blocks(_from_zigzag(deq)), h, w)
        chans.append(reshape(chan, (1, h * w)))
    return _ycc_to_rgb_unit(concat(chans, axis=0), h, w)


# ---------------------------------------------------------------------------
# entropy coding


def _bit_size(v: int) -> int:
    return int(v).bit_length() if v >= 0 else int(-v).bit_length()


def _block_symbols(vec, prev_dc, dc_kind, ac_kind, kinds, syms, amps, alens):
    """Append one block's entropy events as (table kind, symbol, extra-bit
    value, extra-bit count) columns; returns the DC predictor for the next
    block."""
    diff = int(vec[0]) - prev_dc
    diff = max(-DC_DIFF_MAX, min(DC_DIFF_MAX, diff))
    cat = _bit_size(diff)
    kinds.append(dc_kind)
    syms.append(cat)
    amps.append(diff if diff > 0 else diff + (1 << cat) - 1)
    alens.append(cat)
    run = 0
    for k in range(1, 64):
        v = int(vec[k])
        if v == 0:
            run += 1
            continue
        while run > 15:
            kinds.append(ac_kind)
            syms.append(0xF0)
            amps.append(0)
            alens.append(0)
            run -= 16
        size = _bit_size(v)
        kinds.append(ac_kind)
        syms.append((run << 4) | size)
        amps.append(v if v > 0 else v + (1 << size) - 1)
        alens.append(size)
        run = 0
    if run:
        kinds.append(ac_kind)
        syms.append(0x00)
        amps.append(0)
        alens.append(0)
    return prev_dc + diff  # what the decoder's predictor will hold


def _gen_optimal_table(freq256: np.ndarray):
    """Optimal length-limited canonical code for the observed symbol counts:
    the classic two-least-frequent merge with a reserved extra symbol (so no
    real symbol gets the all-ones code), then depth-limiting to 16 bits.
    Returns (#codes of length 1..16, symbols ordered by code length)."""
    freq = [int(f) for f in freq256] + [1]
    codesize = [0] * 257
    others = [-1] * 257
    while True:
        c1, v = -1, None
        for i in range(257):
            if freq[i] > 0 and (v is None or freq[i] <= v):
                v, c1 = freq[i], i
        c2, v = -1, None
        for i in range(257):
            if i != c1 and freq[i] > 0 and (v is None or freq[i] <= v):
                v, c2 = freq[i], i
        if c2 < 0:
            break
        freq[c1] += freq[c2]
        freq[c2] = 0
        codesize[c1] += 1
        while others[c1] >= 0:
            c1 = others[c1]
            codesize[c1] += 1
        others[c1] = c2
        codesize[c2] += 1
        while others[c2] >= 0:
            c2 = others[c2]
            codesize[c2] += 1
    counts = [0] * 64
    for cs in codesize:
        if cs:
            counts[cs] += 1
    # fold depths beyond 16 back into the tree (pairwise promotion)
    for i in range(63, 16, -1):
        while counts[i] > 0:
            j = i - 2
            while counts[j] == 0:
                j -= 1
            counts[i] -= 2
            counts[i - 1] += 1
            counts[j + 1] += 2
            counts[j] -= 1
    i = 16
    while counts[i] == 0:
        i -= 1
    counts[i] -= 1  # drop the reserved symbol from the longest class
    order = sorted((cs, s) for s, cs in enumerate(codesize[:256]) if cs)
    return tuple(counts[1:17]), tuple(s for _, s in order)


def _huff_encode_luts(bits, vals):
    """Canonical code assignment -> (code, length) lookup arrays over symbols."""
    code_arr = np.zeros(256, dtype=np.uint32)
    len_arr = np.zeros(256, dtype=np.int64)
    code = 0
    k = 0
    for ln in range(1, 17):
        for _ in range(bits[ln - 1]):
            code_arr[vals[k]] = code
            len_arr[vals[k]] = ln
            code += 1
            k += 1
        code <<= 1
    return code_arr, len_arr


def _pack_bits(vals, lens) -> bytes:
    if len(vals) == 0:
        return b""
    vals = np.asarray(vals, dtype=np.uint32)
    lens = np.asarray(lens, dtype=np.int64)
    total = int(lens.sum())
    off = np.concatenate(([0], np.cumsum(lens)[:-1]))
    nbits = (total + 7) // 8 * 8
    bits = np.ones(nbits, dtype=np.uint8)  # pad final byte with 1s
    for i in range(int(lens.max())):
        m = lens > i
        bits[off[m] + i] = (vals[m] >> (lens[m] - 1 - i)).astype(np.uint8) & 1
    data = np.packbits(bits)
    # byte stuffing: 0xFF -> 0xFF 0x00
    ff = np.nonzero(data == 0xFF)[0]
    if len(ff):
        data = np.insert(data, ff + 1, 0)
    return data.tobytes()


def _segment(marker: int, payload: bytes) -> bytes:
    return struct.pack(">HH", marker, len(payload) + 2) + payload


def _image_to_coeffs(img: ErpImage, tables: QuantTables) -> CoeffBlocks:
    px = np.clip(img.pixels, 0.0, 1.0)
    _, h, w = px.shape
    hp = (h + 7) // 8 * 8
    wp = (w + 7) // 8 * 8
    if hp != h or wp != w:
        px = np.pad(px, ((0, 0), (0, hp - h), (0, wp - w)), mode="edge")
    out = forward_blocks(Tensor(px), tables, mode="eval")
    y = out["y"].data.astype(np.int64)
    cb = out["cb"].data.astype(np.int64)
    cr = out["cr"].data.astype(np.int64)
    for arr in (y, cb, cr):
        np.clip(arr[:, 1:], -AC_AMP_MAX, AC_AMP_MAX, out=arr[:, 1:])
    return CoeffBlocks(y=y, cb=cb, cr=cr, block_rows=hp // 8, block_cols=wp // 8,
                       height=h, width=w)


def encode(img: ErpImage, tables: QuantTables) -> tuple[CoeffBlocks, bytes]:
    """Quantise `img` and serialise to a self-contained baseline byte stream.

    Entropy tables are fitted to the image (two-phase: collect the run-length
    symbol stream, build optimal canonical codes, then pack) and carried in
    the stream header, so the coded size tracks the symbol statistics rather
    than a fixed default code.
    """
    blocks = _image_to_coeffs(img, tables)

    kinds: list[int] = []
    syms: list[int] = []
    amps: list[int] = []
    alens: list[int] = []
    prev = [0, 0, 0]
    comps = ((blocks.y, 0, 1), (blocks.cb, 2, 3), (blocks.cr, 2, 3))
    for b in range(blocks.n_blocks):
        for ci, (coef, dk, ak) in enumerate(comps):
            prev[ci] = _block_symbols(coef[b], prev[ci], dk, ak,
                                      kinds, syms, amps, alens)
    kinds_a = np.asarray(kinds, dtype=np.int64)
    syms_a = np.asarray(syms, dtype=np.int64)

    huff = [_gen_optimal_table(np.bincount(syms_a[kinds_a == kind], minlength=256))
            for kind in range(4)]
    code_lut = np.zeros((4, 256), dtype=np.uint32)
    len_lut = np.zeros((4, 256), dtype=np.int64)
    for kind, (bits, hv) in enumerate(huff):
        code_lut[kind], len_lut[kind] = _huff_encode_luts(bits, hv)

    n = len(kinds_a)
    vals = np.empty(2 * n, dtype=np.uint32)
    lens = np.empty(2 * n, dtype=np.int64)
    vals[0::2] = code_lut[kinds_a, syms_a]
    lens[0::2] = len_lut[kinds_a, syms_a]
    vals[1::2] = np.asarray(amps, dtype=np.uint32)
    lens[1::2] = np.asarray(alens, dtype=np.int64)
    keep = lens > 0
    entropy = _pack_bits(vals[keep], lens[keep])

    parts = [struct.pack(">H", 0xFFD8)]
    parts.append(_segment(0xFFE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00"))
    for tq, table in ((0, tables.luma), (1, tables.chroma)):
        zz = table.reshape(-1)[ZIGZAG_ORDER].astype(np.uint8).tobytes()
        parts.append(_segment(0xFFDB, bytes([tq]) + zz))
    sof = struct.pack(">BHHB", 8, blocks.height, blocks.width, 3)
    sof += bytes([1, 0x11, 0]) + bytes([2, 0x11, 1]) + bytes([3, 0x11, 1])
    parts.append(_segment(0xFFC0, sof))
    dht = b""
    for tc_th, (bits, hv) in zip((0x00, 0x10, 0x01, 0x11), huff):
        dht += bytes([tc_th]) + bytes(bits) + bytes(hv)
    parts.append(_segment(0xFFC4, dht))
    sos = bytes([3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0])
    parts.append(_segment(0xFFDA, sos))
    parts.append(entropy)
    parts.append(struct.pack(">H", 0xFFD9))
    return blocks, b"".join(parts)


# --- decoding ---------------------------------------------------------------


def _huff_decode_table(bits, vals):
    # per-length (mincode, maxcode, index of first value) lookup
    mincode = [0] * 17
    maxcode = [-1] * 17
    valptr = [0] * 17
    code = 0
    k = 0
    for ln in range(1, 17):
        n = bits[ln - 1]
        if n:
            valptr[ln] = k
            mincode[ln] = code
            code += n
            maxcode[ln] = code - 1
            k += n
        code <<= 1
    return mincode, maxcode, valptr, list(vals)


class _BitReader:
    def __init__(self, bits: np.ndarray):
        self.bits = bits
        self.pos = 0

    def take(self, n: int) -> int:
        if self.pos + n > len(self.bits):
            raise MalformedStream("truncated entropy-coded data")
        v = 0
        for _ in range(n):
            v = (v << 1) | int(self.bits[self.pos])
            self.pos += 1
        return v

    def huff(self, table) -> int:
        mincode, maxcode, valptr, vals = table
        code = self.take(1)
        ln = 1
        while code > maxcode[ln] or maxcode[ln] < 0:
            ln += 1
            if ln > 16:
                raise MalformedStream("invalid entropy code")
            code = (code << 1) | self.take(1)
        return vals[valptr[ln] + code - mincode[ln]]

    def receive_extend(self, size: int) -> int:
        if size == 0:
            return 0
        v = self.take(size)
        if v < (1 << (size - 1)):
            v -= (1 << size) - 1
        return v


def _read_u16(buf, pos):
    if pos + 2 > len(buf):
        raise MalformedStream("unexpected end of stream")
    return struct.unpack_from(">H", buf, pos)[0], pos + 2


def decode(stream: bytes) -> ErpImage:
    """Decode a byte stream produced by `encode` (baseline, 4:4:4, 8-bit)."""
    if len(stream) < 4 or stream[:2] != b"\xff\xd8":
        raise MalformedStream("missing start-of-image marker")
    pos = 2
    qtables: dict[int, np.ndarray] = {}
    htables: dict[int, tuple] = {}
    frame = None
    scan = None
    while True:
        marker, pos = _read_u16(stream, pos)
        if marker == 0xFFD9:
            raise MalformedStream("end of image before scan data")
        if not 0xFFC0 <= marker <= 0xFFFE:
            raise MalformedStream(f"bad marker 0x{marker:04x}")
        ln, pos = _read_u16(stream, pos)
        if ln < 2 or pos + ln - 2 > len(stream):
            raise MalformedStream("segment overruns stream")
        payload = stream[pos:pos + ln - 2]
        pos += ln - 2
        if marker == 0xFFDB:
            q = 0
            while q < len(payload):
                pq, tq = payload[q] >> 4, payload[q] & 15
                if pq != 0:
                    raise MalformedStream("only 8-bit quant tables supported")
                if q + 65 > len(payload):
                    raise MalformedStream("short quant table")
                zz = np.frombuffer(payload[q + 1:q + 65], dtype=np.uint8)
                qtables[tq] = zz[ZIGZAG_POS].astype(np.int64).reshape(8, 8)
                q += 65
        elif marker == 0xFFC4:
            q = 0
            while q < len(payload):
                if q + 17 > len(payload):
                    raise MalformedStream("short huffman table")
                tc_th = payload[q]
                bits = list(payload[q + 1:q + 17])
                n = sum(bits)
                if q + 17 + n > len(payload):
                    raise MalformedStream("short huffman table")
                vals = list(payload[q + 17:q + 17 + n])
                htables[tc_th] = _huff_decode_table(bits, vals)
                q += 17 + n
        elif marker == 0xFFC0:
            if len(payload) < 6:
                raise MalformedStream("short frame header")
            prec, h, w, nc = struct.unpack_from(">BHHB", payload, 0)
            if prec != 8 or nc != 3:
                raise MalformedStream("only 8-bit three-component frames supported")
            comps = []
            for c in range(nc):
                cid, samp, tq = payload[6 + 3 * c:9 + 3 * c]
                if samp != 0x11:
                    raise MalformedStream("only 4:4:4 sampling supported")
                comps.append((cid, tq))
            frame = (h, w, comps)
        elif marker in (0xFFC1, 0xFFC2, 0xFFC3, 0xFFC5, 0xFFC6, 0xFFC7,
                        0xFFC9, 0xFFCA, 0xFFCB, 0xFFCD, 0xFFCE, 0xFFCF):
            raise MalformedStream("only baseline sequential frames supported")
        elif marker == 0xFFDD:
            if struct.unpack(">H", payload[:2])[0] != 0:
                raise MalformedStream("restart intervals unsupported")
        elif marker == 0xFFDA:
            if frame is None:
                raise MalformedStream("scan before frame header")
            ns = payload[0]
            if ns != 3:
                raise MalformedStream("expected a three-component scan")
            scan = [(payload[1 + 2 * c], payload[2 + 2 * c]) for c in range(ns)]
            break
        # APPn / COM: skip

    # pull entropy bytes up to EOI, undoing 0xFF00 stuffing
    data = bytearray()
    while pos < len(stream):
        byte = stream[pos]
        if byte == 0xFF:
            if pos + 1 >= len(stream):
                raise MalformedStream("dangling 0xFF at end of stream")
            nxt = stream[pos + 1]
            if nxt == 0x00:
                data.append(0xFF)
                pos += 2
                continue
            if nxt == 0xD9:
                break
            raise MalformedStream(f"unexpected marker 0xff{nxt:02x} in scan")
        data.append(byte)
        pos += 1
    else:
        raise MalformedStream("missing end-of-image marker")

    h, w, comps = frame
    comp_by_id = dict(comps)
    reader = _BitReader(np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8)))
    br, bc = (h + 7) // 8, (w + 7) // 8
    nb = br * bc
    planes = []
    tables = []
    for cid, td_ta in scan:
        if cid not in comp_by_id:
            raise MalformedStream(f"scan references unknown component {cid}")
        td, ta = td_ta >> 4, td_ta & 15
        try:
            dc_t = htables[0x00 | td]
            ac_t = htables[0x10 | ta]
            qt = qtables[comp_by_id[cid]]
        except KeyError as e:
            raise MalformedStream("scan references a missing table") from e
        planes.append(np.zeros((nb, 64), dtype=np.int64))
        tables.append((dc_t, ac_t, qt))
    prev = [0] * len(scan)
    for b in range(nb):
        for ci, (dc_t, ac_t, _) in enumerate(tables):
            vec = planes[ci][b]
            diff = reader.receive_extend(reader.huff(dc_t))
            prev[ci] += diff
            vec[0] = prev[ci]
            k = 1
            while k < 64:
                rs = reader.huff(ac_t)
                r, s = rs >> 4, rs & 15
                if s == 0:
                    if r == 15:
                        k += 16
                        continue
                    break
                k += r
                if k > 63:
                    raise MalformedStream("coefficient run past block end")
                vec[k] = reader.receive_extend(s)
                k += 1

    chans = []
    for ci in range(3):
        qt = tables[ci][2].reshape(-1)[ZIGZAG_ORDER].astype(float)
        deq = planes[ci] * qt
        raster = deq[:, ZIGZAG_POS].reshape(nb, 8, 8)
        spatial = np.einsum("ui,nuv,vj->nij", DCT_MATRIX, raster, DCT_MATRIX)
        full = spatial.reshape(br, bc, 8, 8).transpose(0, 2, 1, 3).reshape(br * 8, bc * 8)
        chans.append(full[:h, :w])
    ycc = np.stack(chans).reshape(3, h * w)
    rgb = _YCC_TO_RGB @ (ycc + np.array([[128.0], [0.0], [0.0]]))
    pixels = np.clip(rgb / 255.0, 0.0, 1.0).reshape(3, h, w)
    return ErpImage(pixels=pixels)


# ---------------------------------------------------------------------------
# rate model


def _dc_to_diff(coeffs: Tensor) -> Tensor:
    """Replace the DC column with its block-to-block difference (first block
    keeps its raw value, i.e. a zero predictor)."""
    n = coeffs.shape[0]
    dc = slice_(coeffs, (slice(None), slice(0, 1)))
    ac = slice_(coeffs, (slice(None), slice(1, None)))
    prev = concat([Tensor(np.zeros((1, 1))), slice_(dc, (slice(0, n - 1), slice(None)))], axis=0)
    return concat([dc - prev, ac], axis=1)


class RateModel:
    """Differentiable coded-size proxy for quantised coefficient blocks.

    One discretised-Laplace scale per zigzag position; luma and chroma have
    separate scale vectors and both chroma channels share one.  Position 0
    is scored on the block-to-block DC difference.  `fit` sets the scales to
    their maximum-likelihood values for a sample of blocks; the scales are
    ordinary parameters, so they can also be trained by gradient.
    """

    def __init__(self, store: ParamStore | None = None, prefix: str = "rate",
                 init_scale: float = 2.0):
        fill = float(np.log(init_scale))
        if store is None:
            self.log_scale_luma = Tensor(np.full(64, fill))
            self.log_scale_chroma = Tensor(np.full(64, fill))
        else:
            self.log_scale_luma = store.param(f"{prefix}.log_scale_luma", (64,), 0.0, fill=fill)
            self.log_scale_chroma = store.param(f"{prefix}.log_scale_chroma", (64,), 0.0, fill=fill)

    # -- differentiable scoring ------------------------------------------

    def _bits_for(self, coeffs: Tensor, log_b: Tensor) -> Tensor:
        c = _dc_to_diff(coeffs)
        absc = abs_(c)
        zero_mask = (np.abs(c.data) < 0.5).astype(float)
        tail_mask = (np.abs(c.data) > RATE_TAIL - 0.5).astype(float)
        mid_mask = (1.0 - zero_mask) * (1.0 - tail_mask)

        inv_b = exp(-log_b)            # 1 / b, shape (64,), broadcasts over rows
        half = inv_b * 0.5
        em = exp(-half)                # exp(-1/(2b))
        # log p(0) = log(1 - exp(-1/(2b)))
        lp_zero = log(1.0 - em + 1e-300)
        # log p(k>=1) = -k/b + log sinh(1/(2b)); log sinh(h) = h + log(1-e^{-2h}) - log 2
        lsinh = half + log(1.0 - exp(-2.0 * half) + 1e-300) - np.log(2.0)
        lp_mid = -(absc * inv_b) + lsinh
        # tail bucket: total mass beyond +-(RATE_TAIL - 0.5)
        lp_tail = -((RATE_TAIL - 0.5) * inv_b) - np.log(2.0)

        logp = lp_mid * mid_mask + lp_zero * zero_mask + lp_tail * tail_mask
        return sum_(logp) * (-1.0 / np.log(2.0))

    def estimate_rate(self, y: Tensor, cb: Tensor, cr: Tensor) -> Tensor:
        """Modelled stream size in bits for one image's coefficient tensors."""
        return (self._bits_for(y, self.log_scale_luma)
                + self._bits_for(cb, self.log_scale_chroma)
                + self._bits_for(cr, self.log_scale_chroma))

    def estimate_bpp(self, coeffs: dict, hr_height: int, hr_width: int) -> Tensor:
        return self.estimate_rate(coeffs["y"], coeffs["cb"], coeffs["cr"]) \
            * (1.0 / (hr_height * hr_width))

    # -- maximum-likelihood fitting ---------------------------------------

    @staticmethod
    def _mle_log_scales(samples: np.ndarray) -> np.ndarray:
        """Per-column ML log-scales for an (n, 64) integer sample."""
        k = np.minimum(np.abs(samples), RATE_TAIL).astype(float)
        n0 = (k < 0.5).sum(axis=0).astype(float)
        tail = (k > RATE_TAIL - 0.5)
        n_tail = tail.sum(axis=0).astype(float)
        mid = (~tail) & (k >= 0.5)
        n_mid = mid.sum(axis=0).astype(float)
        sum_mid = np.where(mid, k, 0.0).sum(axis=0)

        def nll(logb):
            b = np.exp(logb)
            half = 0.5 / b
            # clip keeps log() finite when half underflows the exp
            lp0 = np.log(np.clip(1.0 - np.exp(-half), 1e-300, None))
            lsinh = half + np.log(np.clip(1.0 - np.exp(-2.0 * half), 1e-300, None)) - np.log(2.0)
            lpt = -(RATE_TAIL - 0.5) / b - np.log(2.0)
            return -(n0 * lp0 + n_mid * lsinh - sum_mid / b + n_tail * lpt)

        lo = np.full(64, -8.0)
        hi = np.full(64, 12.0)
        for _ in range(80):
            m1 = lo + (hi - lo) / 3
            m2 = hi - (hi - lo) / 3
            take_hi = nll(m1) < nll(m2)
            hi = np.where(take_hi, m2, hi)
            lo = np.where(take_hi, lo, m1)
        return (lo + hi) / 2

    def fit(self, blocks: CoeffBlocks | list[CoeffBlocks]) -> None:
        """Set the scales to their ML values on the given coefficient blocks."""
        items = blocks if isinstance(blocks, list) else [blocks]

        def dpcm(arr):
            out = arr.copy()
            out[1:, 0] = arr[1:, 0] - arr[:-1, 0]
            return out

        luma = np.concatenate([dpcm(b.y) for b in items], axis=0)
        chroma = np.concatenate([dpcm(b.cb) for b in items]
                                + [dpcm(b.cr) for b in items], axis=0)
        self.log_scale_luma.data[...] = self._mle_log_scales(luma)
        self.log_scale_chroma.data[...] = self._mle_log_scales(chroma)


# ---------------------------------------------------------------------------
# rate targeting


def stream_bpp(stream: bytes, hr_height: int, hr_width: int) -> float:
    """Bits per pixel of a byte stream, measured against the full-resolution
    pixel budget it stands in for."""
    return 8.0 * len(stream) / (hr_height * hr_width)


def fit_quant_tables(img: ErpImage, target_bpp: float, hr_height: int, hr_width: int,
                     tol: float = 0.05, max_iter: int = 32,
                     q_min: float = 0.5, q_max: float = 100.0):
    """Bisect the quality knob until the real coded size hits `target_bpp`
    within relative `tol`.  Returns (tables, quality, achieved_bpp, stream).
    """
    if target_bpp <= 0:
        raise ValueError("target_bpp must be positive")

    def rate(q):
        tables = tables_for_quality(q)
        _, stream = encode(img, tables)
        return tables, stream, stream_bpp(stream, hr_height, hr_width)

    t_lo, s_lo, r_lo = rate(q_min)
    if abs(r_lo - target_bpp) <= tol * target_bpp:
        return t_lo, q_min, r_lo, s_lo
    if r_lo > target_bpp:
        raise TargetUnreachable(
            f"target {target_bpp:.4f} bpp below minimum-quality rate {r_lo:.4f}")
    t_hi, s_hi, r_hi = rate(q_max)
    if abs(r_hi - target_bpp) <= tol * target_bpp:
        return t_hi, q_max, r_hi, s_hi
    if r_hi < target_bpp:
        raise TargetUnreachable(
            f"target {target_bpp:.4f} bpp above maximum-quality rate {r_hi:.4f}")

    lo, hi = q_min, q_max
    best = (abs(r_lo - target_bpp), t_lo, q_min, r_lo, s_lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        t_m, s_m, r_m = rate(mid)
        err = abs(r_m - target_bpp)
        if err < best[0]:
            best = (err, t_m, mid, r_m, s_m)
        if err <= tol * target_bpp:
            return t_m, mid, r_m, s_m
        if r_m < target_bpp:
            lo = mid
        else:
            hi = mid
    err, t_b, q_b, r_b, s_b = best
    if err <= tol * target_bpp:
        return t_b, q_b, r_b, s_b
    raise TargetUnreachable(
        f"closest achievable rate {r_b:.4f} bpp misses target {target_bpp:.4f} "
        f"by more than {100 * tol:.0f}%")
