"""Lossless differential Huffman coding of 8x8 depth tiles.

Within each tile the samples are visited in raster order; the first is stored
as a raw 16-bit value and every later one as the difference to its
predecessor. A difference ``r`` is sent as its magnitude category
``k = bit_length(|r|)`` followed by ``k`` extra bits. Categories are Huffman
coded with one of four tables, picked by the category of the previous
difference in the same tile.

Stream layout::

    u8      version << 4 | predictor id
    varint  tile count
    bits    4 table descriptors, then the tiles (MSB first, zero padded)
    u32     CRC-32 of all preceding bytes
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from ..errors import DecodeError, ValidationError
from .huffman import MAX_CODE_LEN, BitReader, Table, pack_bits

VERSION = 1
PREDICTOR_RASTER = 0
N_CATEGORIES = 17     # |r| <= 65535 needs at most 16 extra bits
N_CONTEXTS = 4
TILE = 8


def context_of(category):
    """Context table index for the category of the previous difference."""
    c = np.asarray(category)
    return np.where(c == 0, 0, np.where(c <= 2, 1, np.where(c <= 5, 2, 3)))


_CTX = [int(x) for x in context_of(np.arange(N_CATEGORIES))]


def _varint(n):
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(data, pos):
    n = shift = 0
    while True:
        if pos >= len(data):
            raise DecodeError("stream truncated inside tile count", pos)
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7
        if shift > 35:
            raise DecodeError("tile count varint too long", pos)


def categories(r):
    """bit_length(|r|) elementwise."""
    return np.frexp(np.abs(np.asarray(r, dtype=np.float64)))[1].astype(np.int64)


def as_tiles(tiles) -> np.ndarray:
    t = np.asarray(tiles)
    if t.ndim == 2 and t.shape == (TILE, TILE):
        t = t[None]
    if t.ndim != 3 or t.shape[1:] != (TILE, TILE):
        raise ValidationError(f"depth tiles must be (n, 8, 8), got {t.shape}")
    if np.issubdtype(t.dtype, np.integer) and (t.min(initial=0) < 0 or t.max(initial=0) > 65535):
        raise ValidationError("depth samples must fit in 16 bits")
    return t.astype(np.uint16, copy=False)


def encode_depth(tiles) -> bytes:
    """Compress a non-empty stack of 8x8 uint16 tiles."""
    t = as_tiles(tiles)
    n = len(t)
    if n == 0:
        raise ValidationError("no tiles to encode")
    x = t.reshape(n, TILE * TILE).astype(np.int64)
    r = np.diff(x, axis=1)                               # (n, 63)
    cat = categories(r)
    ctx = np.zeros_like(cat)
    ctx[:, 1:] = context_of(cat[:, :-1])
    tables = []
    for c in range(N_CONTEXTS):
        freqs = np.bincount(cat[ctx == c], minlength=N_CATEGORIES)
        tables.append(Table.from_freqs(freqs))
    codes = np.stack([tb.codes for tb in tables])
    lens = np.stack([tb.lengths for tb in tables])
    extra = np.where(r >= 0, r, r + (1 << cat) - 1)

    vals = np.empty((n, 1 + 2 * r.shape[1]), dtype=np.int64)
    nbits = np.empty_like(vals)
    vals[:, 0], nbits[:, 0] = x[:, 0], 16
    vals[:, 1::2], nbits[:, 1::2] = codes[ctx, cat], lens[ctx, cat]
    vals[:, 2::2], nbits[:, 2::2] = extra, cat

    head_v, head_l = [], []
    for tb in tables:
        v, l = tb.descriptor()
        head_v += v
        head_l += l
    body, _ = pack_bits(np.concatenate([head_v, vals.ravel()]),
                        np.concatenate([head_l, nbits.ravel()]))
    out = bytes([(VERSION << 4) | PREDICTOR_RASTER]) + _varint(n) + body
    return out + struct.pack("<I", zlib.crc32(out))


def decode_depth(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_depth`; returns ``(n, 8, 8)`` uint16.

    Any inconsistency raises :class:`DecodeError` carrying the byte offset;
    nothing is returned for a damaged stream.
    """
    data = bytes(data)
    if len(data) < 6:
        raise DecodeError("stream shorter than header and checksum", len(data))
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise DecodeError("checksum mismatch", len(data) - 4)
    head = data[0]
    if head >> 4 != VERSION:
        raise DecodeError(f"unsupported depth stream version {head >> 4}", 0)
    if head & 0xF != PREDICTOR_RASTER:
        raise DecodeError(f"unknown predictor id {head & 0xF}", 0)
    n, pos = _read_varint(data, 1)
    body = data[pos:-4]
    if n == 0 or n * 16 > len(body) * 8:
        raise DecodeError(f"tile count {n} inconsistent with stream length", 1)
    rd = BitReader(body, base=pos)
    tables = [Table.read_descriptor(rd, N_CATEGORIES) for _ in range(N_CONTEXTS)]
    luts = [tb.lut() for tb in tables]
    singles = [tb.single for tb in tables]
    empty = [not tb.symbols for tb in tables]

    # one tile can overrun the end by at most 64 * 31 bits before the check
    win, p, limit = rd._win + [0] * 256, rd.pos, rd.nbits
    mask64 = 0xFFFFFFFFFFFFFFFF
    shift = 64 - MAX_CODE_LEN
    out = [0] * (n * TILE * TILE)
    o = 0
    for _ in range(n):
        x = ((win[p >> 3] << (p & 7)) & mask64) >> 48
        p += 16
        out[o] = x
        o += 1
        c = 0
        for _ in range(TILE * TILE - 1):
            if empty[c]:
                raise DecodeError("difference coded with an empty table", pos + p // 8)
            if singles[c] is not None:
                k = singles[c]
            else:
                w = ((win[p >> 3] << (p & 7)) & mask64) >> shift
                k = luts[c][0][w]
                if k < 0:
                    raise DecodeError("invalid Huffman code", pos + p // 8)
                p += luts[c][1][w]
            if k:
                e = ((win[p >> 3] << (p & 7)) & mask64) >> (64 - k)
                p += k
                x += e if e >> (k - 1) else e - (1 << k) + 1
                if not 0 <= x <= 65535:
                    raise DecodeError("decoded depth out of 16-bit range", pos + p // 8)
            out[o] = x
            o += 1
            c = _CTX[k]
        if p > limit:
            raise DecodeError("stream truncated", pos + limit // 8)
    if limit - p >= 8:
        raise DecodeError("trailing bytes after the last tile", pos + p // 8)
    rd.pos = p
    if p < limit and rd.read(limit - p) != 0:
        raise DecodeError("non-zero padding bits", pos + p // 8)
    return np.array(out, dtype=np.uint16).reshape(n, TILE, TILE)


def image_tiles(Z) -> np.ndarray:
    """All 8x8 tiles of a depth image in row-major block order."""
    Z = np.asarray(Z)
    H, W = Z.shape
    if H % TILE or W % TILE:
        Z = np.pad(Z, ((0, -H % TILE), (0, -W % TILE)), mode="edge")
    gh, gw = Z.shape[0] // TILE, Z.shape[1] // TILE
    return Z.reshape(gh, TILE, gw, TILE).swapaxes(1, 2).reshape(-1, TILE, TILE)


def tiles_to_image(tiles, height, width) -> np.ndarray:
    gh, gw = -(-height // TILE), -(-width // TILE)
    t = np.asarray(tiles).reshape(gh, gw, TILE, TILE).swapaxes(1, 2)
    return t.reshape(gh * TILE, gw * TILE)[:height, :width]
