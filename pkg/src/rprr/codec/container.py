"""Payload container: one self-describing binary blob per transmitted frame.

Layout (little-endian)::

    4s    magic b"RPRR"
    u8    version
    u8    flags                  (reserved, 0)
    u16   grid_w, u16 grid_h     block grid
    8s    intrinsics digest
    12 f8 M_ab: rotation row-major, then translation
    u32   bitmap length, u32 depth length, u32 colour length
    ...   bitmap, depth stream, colour stream
    u32   CRC-32 of everything before it

Depth tiles and colour tiles are in the bitmap's row-major block order. The
colour tiles are coded as one mosaic, ``grid_w`` tiles per row, so a full
block set codes exactly the original image.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import ContainerError, DecodeError
from ..geometry import RigidTransform
from ..redundancy import BlockSet
from .color import decode_color_tiles, encode_color_tiles
from .depth import decode_depth, encode_depth

MAGIC = b"RPRR"
VERSION = 1
HEAD = struct.Struct("<4sBBHH8s12d3I")
HEADER_SIZE = HEAD.size  # 126
TRAILER_SIZE = 4
NO_DIGEST = b"\0" * 8


@dataclass
class ContainerParts:
    transform: RigidTransform
    blocks: BlockSet
    depth_bits: bytes
    color_bits: bytes
    digest: bytes = NO_DIGEST

    def __eq__(self, other):
        if not isinstance(other, ContainerParts):
            return NotImplemented
        return (self.transform == other.transform and self.blocks == other.blocks
                and self.depth_bits == other.depth_bits and self.color_bits == other.color_bits
                and self.digest == other.digest)


def container_size(blocks: BlockSet, depth_len, color_len) -> int:
    return HEADER_SIZE + blocks.nbytes + depth_len + color_len + TRAILER_SIZE


def pack_container(M_ab: RigidTransform, blocks: BlockSet, depth_bits: bytes, color_bits: bytes,
                   digest: bytes = NO_DIGEST) -> bytes:
    if len(digest) != 8:
        raise ContainerError("digest must be 8 bytes", "header")
    if (len(blocks) == 0) != (len(depth_bits) == 0) or (len(blocks) == 0) != (len(color_bits) == 0):
        raise ContainerError("streams must be empty exactly when the block set is", "header")
    bitmap = blocks.to_bytes()
    head = HEAD.pack(MAGIC, VERSION, 0, blocks.grid_w, blocks.grid_h, bytes(digest),
                     *M_ab.to_array(), len(bitmap), len(depth_bits), len(color_bits))
    body = head + bitmap + bytes(depth_bits) + bytes(color_bits)
    return body + struct.pack("<I", zlib.crc32(body))


def unpack_container(data) -> ContainerParts:
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise ContainerError(f"container of {len(data)} bytes is shorter than its header", "header")
    magic, version, flags, gw, gh, digest, *rest = HEAD.unpack_from(data)
    m, (nbm, nd, nc) = rest[:12], rest[12:]
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}", "header")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}", "header")
    if flags != 0:
        raise ContainerError(f"unknown flags {flags:#x}", "header")
    if gw == 0 or gh == 0 or nbm != -(-(gw * gh) // 8):
        raise ContainerError(f"bitmap length {nbm} does not fit a {gw}x{gh} grid", "header")
    pos = HEADER_SIZE
    for name, n in (("bitmap", nbm), ("depth", nd), ("color", nc), ("checksum", TRAILER_SIZE)):
        if pos + n > len(data):
            raise ContainerError(f"truncated: need {n} bytes at offset {pos}, have {len(data) - pos}", name)
        pos += n
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes", "checksum")
    if zlib.crc32(data[:-4]) != struct.unpack_from("<I", data, len(data) - 4)[0]:
        raise ContainerError("checksum mismatch", "checksum")
    try:
        blocks = BlockSet.from_bytes(data[HEADER_SIZE:HEADER_SIZE + nbm], gw, gh)
    except ValueError as exc:
        raise ContainerError(str(exc), "bitmap") from None
    if (len(blocks) == 0) != (nd == 0) or (len(blocks) == 0) != (nc == 0):
        raise ContainerError("section lengths disagree with the block count", "header")
    try:
        M = RigidTransform.from_array(np.array(m))
    except ValueError as exc:
        raise ContainerError(f"invalid transform: {exc}", "header") from None
    d0 = HEADER_SIZE + nbm
    return ContainerParts(M, blocks, data[d0:d0 + nd], data[d0 + nd:d0 + nd + nc], digest)


# -- whole payloads -----------------------------------------------------------------

def encode_payload(M_ab, blocks: BlockSet, depth_tiles, color_tiles, quality,
                   digest: bytes = NO_DIGEST) -> bytes:
    """Code the member tiles of ``blocks`` and pack them with the pose."""
    if len(depth_tiles) != len(blocks) or len(color_tiles) != len(blocks):
        raise ContainerError("tile count does not match the block set", "header")
    if len(blocks) == 0:
        return pack_container(M_ab, blocks, b"", b"", digest)
    depth_bits = encode_depth(depth_tiles)
    color_bits = encode_color_tiles(color_tiles, blocks.grid_w, quality)
    return pack_container(M_ab, blocks, depth_bits, color_bits, digest)


def decode_payload(data, max_color_bytes=None):
    """Returns ``(parts, depth_tiles, color_tiles)``.

    Stream damage inside a section surfaces as :class:`ContainerError` naming it.
    """
    parts = unpack_container(data)
    n = len(parts.blocks)
    if n == 0:
        return parts, np.zeros((0, 8, 8), np.uint16), np.zeros((0, 8, 8, 3), np.uint8)
    try:
        depth = decode_depth(parts.depth_bits)
    except DecodeError as exc:
        raise ContainerError(str(exc), "depth") from None
    if len(depth) != n:
        raise ContainerError(f"{len(depth)} depth tiles for {n} blocks", "depth")
    try:
        color = decode_color_tiles(parts.color_bits, n, parts.blocks.grid_w, max_color_bytes)
    except DecodeError as exc:
        raise ContainerError(str(exc), "color") from None
    return parts, depth, color
