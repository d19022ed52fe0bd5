"""Progressive wavelet colour coding.

Pipeline: reversible colour transform, integer 5/3 wavelet, deadzone
quantisation, then bit-plane coding from the most significant plane down.
Every plane is one zlib-compressed chunk, so a stream cut at a chunk boundary
still decodes, at lower fidelity. Quality 100 is lossless.

Stream layout (little-endian)::

    u8   version
    u8   quality (0..100)
    u8   wavelet levels
    u8   number of bit planes
    u16  width, u16 height     (before padding to a multiple of 8)
    per plane, most significant first:
        u32 chunk length, chunk bytes (zlib)

A plane chunk holds, packed MSB first: one significance bit for every
coefficient not yet significant, one sign bit per newly significant
coefficient, then one refinement bit per previously significant
coefficient. Coefficients are ordered channel by channel, bands coarse to
fine, each band row-major.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from ..errors import DecodeError, ValidationError
from .wavelet import band_gains, forward_2d, inverse_2d, max_levels

VERSION = 1
HEAD = struct.Struct("<BBBBHH")
TILE = 8


def rct_forward(rgb):
    r, g, b = (rgb[..., k].astype(np.int64) for k in range(3))
    y = (r + 2 * g + b) >> 2
    return np.stack([y, b - g, r - g])


def rct_inverse(ycc):
    y, cb, cr = ycc
    g = y - ((cb + cr) >> 2)
    return np.stack([cr + g, g, cb + g], axis=-1)


def quant_step(quality) -> float:
    """Base quantiser step: 1 at quality 100, doubling every 10 points below."""
    if not 0 <= quality <= 100:
        raise ValidationError("quality must be in 0..100")
    return float(2.0 ** ((100 - quality) / 10.0))


def band_steps(height, width, levels, quality):
    """Per-band steps, scaled so every band adds similar image-domain error.

    Steps below 1.5 snap to 1 (lossless band); LL is always lossless.
    """
    base = quant_step(quality)
    steps = [base / np.sqrt(g) for g in band_gains(height, width, levels)]
    steps[0] = 1.0
    return [1.0 if s < 1.5 else float(s) for s in steps]


def _flatten(bands):
    parts = [bands[0]] + [b for trip in bands[1:] for b in trip]
    return parts


def _shapes(height, width, levels):
    """Band shapes in coefficient order, from a dry-run decomposition."""
    return [p.shape for p in _flatten(forward_2d(np.zeros((height, width), dtype=np.int64), levels))]


def _pad(img):
    H, W = img.shape[:2]
    return np.pad(img, ((0, -H % TILE), (0, -W % TILE), (0, 0)), mode="edge")


def encode_color(img, quality=100) -> bytes:
    """Encode an (H, W, 3) uint8 image; sizes not divisible by 8 are padded."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"colour image must be HxWx3, got {img.shape}")
    H, W = img.shape[:2]
    if H == 0 or W == 0 or H > 65535 or W > 65535:
        raise ValidationError(f"unsupported image size {W}x{H}")
    padded = _pad(img.astype(np.uint8))
    Hp, Wp = padded.shape[:2]
    levels = max_levels(Hp, Wp)
    steps = band_steps(Hp, Wp, levels, quality)
    qs = []
    for ch in rct_forward(padded):
        for band, step in zip(_flatten(forward_2d(ch, levels)), steps):
            c = band.ravel()
            if step == 1.0:
                qs.append(c)
            else:
                qs.append(np.sign(c) * np.floor(np.abs(c) / step).astype(np.int64))
    q = np.concatenate(qs)
    mag = np.abs(q)
    neg = q < 0
    nplanes = int(mag.max()).bit_length() if len(mag) else 0
    out = [HEAD.pack(VERSION, int(quality), levels, nplanes, W, H)]
    significant = np.zeros(len(q), dtype=bool)
    for p in range(nplanes - 1, -1, -1):
        bit = ((mag >> p) & 1).astype(bool)
        fresh = ~significant
        new = fresh & bit
        sig_bits = bit[fresh]
        sign_bits = neg[new]
        ref_bits = bit[significant]
        chunk = np.packbits(np.concatenate([sig_bits, sign_bits, ref_bits]).astype(np.uint8)).tobytes()
        z = zlib.compress(chunk, 9)
        out.append(struct.pack("<I", len(z)) + z)
        significant |= new
    return b"".join(out)


def parse_header(data):
    if len(data) < HEAD.size:
        raise DecodeError("colour stream shorter than its header", len(data))
    version, quality, levels, nplanes, W, H = HEAD.unpack_from(data)
    if version != VERSION:
        raise DecodeError(f"unsupported colour stream version {version}", 0)
    if quality > 100 or W == 0 or H == 0 or nplanes > 40:
        raise DecodeError("malformed colour stream header", 0)
    Hp, Wp = H + (-H % TILE), W + (-W % TILE)
    if levels != max_levels(Hp, Wp):
        raise DecodeError(f"wavelet depth {levels} does not match a {W}x{H} image", 2)
    return quality, levels, nplanes, W, H


def chunk_boundaries(data) -> list:
    """Byte offsets at which the stream may be cut (end of header, end of each plane)."""
    data = bytes(data)
    pos = HEAD.size
    cuts = [pos]
    while pos + 4 <= len(data):
        n = struct.unpack_from("<I", data, pos)[0]
        if pos + 4 + n > len(data):
            break
        pos += 4 + n
        cuts.append(pos)
    return cuts


def decode_color(data, max_bytes=None) -> np.ndarray:
    """Decode a colour stream, or the part of it within ``max_bytes``.

    Only whole plane chunks are used; coefficients whose low planes are
    missing are reconstructed at the middle of their uncertainty interval.
    """
    data = bytes(data)
    if not data:
        raise DecodeError("empty colour stream", 0)
    if max_bytes is not None:
        data = data[:max_bytes]
    quality, levels, nplanes, W, H = parse_header(data)
    Hp, Wp = H + (-H % TILE), W + (-W % TILE)
    shapes = _shapes(Hp, Wp, levels)
    sizes = [int(np.prod(s)) for s in shapes]
    total = 3 * sum(sizes)
    mag = np.zeros(total, dtype=np.int64)
    neg = np.zeros(total, dtype=bool)
    significant = np.zeros(total, dtype=bool)
    pos = HEAD.size
    done = 0
    for p in range(nplanes - 1, -1, -1):
        if pos + 4 > len(data):
            break
        n = struct.unpack_from("<I", data, pos)[0]
        if pos + 4 + n > len(data):
            if max_bytes is None:
                raise DecodeError("colour stream truncated inside a plane", pos)
            break
        try:
            bits = np.unpackbits(np.frombuffer(zlib.decompress(data[pos + 4:pos + 4 + n]), dtype=np.uint8))
        except zlib.error as exc:
            raise DecodeError(f"corrupt plane chunk: {exc}", pos) from None
        fresh = np.flatnonzero(~significant)
        old = np.flatnonzero(significant)
        if len(bits) < len(fresh):
            raise DecodeError("plane chunk too short", pos)
        sig = bits[:len(fresh)].astype(bool)
        nnew = int(sig.sum())
        used = len(fresh) + nnew + len(old)
        if len(bits) < used:
            raise DecodeError("plane chunk too short", pos)
        if len(bits) - used >= 8 or np.any(bits[used:]):
            raise DecodeError("unexpected data after plane bits", pos)
        sgn = np.zeros(len(fresh), dtype=bool)
        sgn[sig] = bits[len(fresh):len(fresh) + nnew].astype(bool)
        ref = bits[len(fresh) + nnew:used].astype(bool)
        newly = fresh[sig]
        mag[newly] |= 1 << p
        neg[newly] = sgn[sig]
        mag[old[ref]] |= 1 << p
        significant[newly] = True
        pos += 4 + n
        done += 1
    if nplanes and done == 0:
        raise DecodeError("colour stream has no complete plane", pos)
    if max_bytes is None and pos != len(data):
        raise DecodeError("trailing bytes after the last plane", pos)
    # a magnitude known down to plane ``missing`` lies in [m, m + w)
    w = 1 << (nplanes - done)
    steps = band_steps(Hp, Wp, levels, quality)
    channels = []
    off = 0
    for _ in range(3):
        parts = []
        for shape, size, step in zip(shapes, sizes, steps):
            m = mag[off:off + size].astype(float)
            if step == 1.0:
                v = np.where(m > 0, m + (w - 1) / 2.0, 0.0)
            else:
                v = np.where(m > 0, (m + w / 2.0) * step, 0.0)
            v = np.floor(v + 0.5).astype(np.int64)
            parts.append(np.where(neg[off:off + size], -v, v).reshape(shape))
            off += size
        bands = [parts[0]] + [tuple(parts[1 + 3 * k:4 + 3 * k]) for k in range(levels)]
        channels.append(inverse_2d(bands))
    rgb = rct_inverse(np.stack(channels))
    return np.clip(rgb, 0, 255).astype(np.uint8)[:H, :W]


# -- tile mosaics ------------------------------------------------------------------

def tiles_to_mosaic(tiles, cols) -> np.ndarray:
    """Lay (n, 8, 8, 3) tiles out row-major, ``cols`` per row; the empty part
    of a short last row repeats its final pixel column."""
    t = np.asarray(tiles)
    n = len(t)
    if n == 0:
        raise ValidationError("no tiles")
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    img = np.zeros((rows * TILE, cols * TILE, 3), dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        img[r * TILE:(r + 1) * TILE, c * TILE:(c + 1) * TILE] = t[k]
    last = n - (rows - 1) * cols
    if last < cols:
        y0 = (rows - 1) * TILE
        edge = img[y0:, last * TILE - 1:last * TILE]
        img[y0:, last * TILE:] = edge
    return img


def mosaic_to_tiles(img, n, cols) -> np.ndarray:
    cols = max(1, min(cols, n))
    out = np.empty((n, TILE, TILE, 3), dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        out[k] = img[r * TILE:(r + 1) * TILE, c * TILE:(c + 1) * TILE]
    return out


def encode_color_tiles(tiles, cols, quality=100) -> bytes:
    return encode_color(tiles_to_mosaic(tiles, cols), quality)


def decode_color_tiles(data, n, cols, max_bytes=None) -> np.ndarray:
    img = decode_color(data, max_bytes)
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    if img.shape[:2] != (rows * TILE, cols * TILE):
        raise DecodeError(f"mosaic {img.shape[1]}x{img.shape[0]} does not hold {n} tiles", 0)
    return mosaic_to_tiles(img, n, cols)
