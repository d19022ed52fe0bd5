"""Forward warping, redundancy block sets and decoder-side stitching.

Sensor a forward-warps its frame into b's viewpoint; 8x8 blocks of b's image
that receive no warped pixel form the prediction set. Sensor b warps its own
depth back towards a; blocks holding pixels that leave a's frame form the
validation set. Only blocks in the union travel to the station, which pastes
them over its own warp of a's frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import MalformedPayloadError, ValidationError
from .geometry import Intrinsics, RigidTransform, as_color, as_depth, warp_pixels

BLOCK = 8


def grid_shape(height, width):
    """(grid_h, grid_w) of the 8x8 block grid covering an image."""
    return -(-height // BLOCK), -(-width // BLOCK)


class BlockCoord(NamedTuple):
    bx: int
    by: int


class BlockSet:
    """Membership bitmap over the block grid."""

    def __init__(self, grid_w, grid_h, mask=None):
        if grid_w <= 0 or grid_h <= 0:
            raise ValidationError("block grid must be non-empty")
        self.grid_w, self.grid_h = int(grid_w), int(grid_h)
        if mask is None:
            mask = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.grid_h, self.grid_w):
            raise ValidationError(f"bitmap shape {mask.shape} != grid {(self.grid_h, self.grid_w)}")
        self.mask = mask.copy()

    @classmethod
    def for_image(cls, height, width, mask=None):
        gh, gw = grid_shape(height, width)
        return cls(gw, gh, mask)

    @classmethod
    def from_coords(cls, grid_w, grid_h, coords):
        s = cls(grid_w, grid_h)
        for bx, by in coords:
            if not (0 <= bx < grid_w and 0 <= by < grid_h):
                raise ValidationError(f"block ({bx}, {by}) outside {grid_w}x{grid_h} grid")
            s.mask[by, bx] = True
        return s

    @classmethod
    def full(cls, grid_w, grid_h):
        return cls(grid_w, grid_h, np.ones((grid_h, grid_w), dtype=bool))

    def coords(self) -> list:
        """Member blocks in row-major order."""
        by, bx = np.nonzero(self.mask)
        return [BlockCoord(int(x), int(y)) for x, y in zip(bx, by)]

    def __iter__(self):
        return iter(self.coords())

    def __len__(self):
        return int(self.mask.sum())

    def __contains__(self, c):
        bx, by = c
        return 0 <= bx < self.grid_w and 0 <= by < self.grid_h and bool(self.mask[by, bx])

    def _check(self, other):
        if (self.grid_w, self.grid_h) != (other.grid_w, other.grid_h):
            raise ValidationError("block sets over different grids")

    def __or__(self, other):
        self._check(other)
        return BlockSet(self.grid_w, self.grid_h, self.mask | other.mask)

    def __and__(self, other):
        self._check(other)
        return BlockSet(self.grid_w, self.grid_h, self.mask & other.mask)

    def __sub__(self, other):
        self._check(other)
        return BlockSet(self.grid_w, self.grid_h, self.mask & ~other.mask)

    def __eq__(self, other):
        if not isinstance(other, BlockSet):
            return NotImplemented
        return (self.grid_w, self.grid_h) == (other.grid_w, other.grid_h) and \
            np.array_equal(self.mask, other.mask)

    def __repr__(self):
        return f"BlockSet({len(self)}/{self.mask.size} blocks)"

    @property
    def nbytes(self):
        return -(-self.mask.size // 8)

    def to_bytes(self) -> bytes:
        """Row-major bitmap, least significant bit first."""
        return np.packbits(self.mask.ravel(), bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data, grid_w, grid_h):
        n = grid_w * grid_h
        if len(data) != -(-n // 8):
            raise ValidationError(f"bitmap of {len(data)} bytes does not fit a {grid_w}x{grid_h} grid")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
        if np.any(bits[n:]):
            raise ValidationError("padding bits set in block bitmap")
        return cls(grid_w, grid_h, bits[:n].reshape(grid_h, grid_w).astype(bool))

    def pixel_mask(self, height, width) -> np.ndarray:
        """Boolean image marking the pixels of member blocks."""
        big = np.repeat(np.repeat(self.mask, BLOCK, axis=0), BLOCK, axis=1)
        return big[:height, :width]


@dataclass
class WarpResult:
    depth: np.ndarray       # uint16, 0 where nothing landed
    color: np.ndarray       # uint8 (H, W, 3)
    hit_count: np.ndarray   # int, source pixels landing on each destination pixel
    dropped: int = 0        # warps that left the frame or the depth range


def _depth_units(zm, K: Intrinsics):
    return np.floor(zm / K.to_meters + 0.5)


def warp_image(Z_src, C_src, M: RigidTransform, K: Intrinsics) -> WarpResult:
    """Forward-warp a registered depth/colour frame through ``M``.

    Destinations are the nearest pixel to each sub-pixel projection. When
    several source pixels land on one destination the smallest destination
    depth wins (ties go to the earlier source pixel in row-major order) and
    its colour travels with it.
    """
    Z_src = as_depth(Z_src, K)
    C_src = as_color(C_src, K)
    H, W = K.shape
    jj, ii = np.nonzero(Z_src)
    depth = np.zeros((H, W), dtype=np.uint16)
    color = np.zeros((H, W, 3), dtype=np.uint8)
    if len(ii) == 0:
        return WarpResult(depth, color, np.zeros((H, W), dtype=np.int64), 0)
    pi, pj, zm, ok = warp_pixels(M, ii, jj, Z_src[jj, ii], K)
    with np.errstate(invalid="ignore"):
        ci = np.floor(pi + 0.5)
        cj = np.floor(pj + 0.5)
        zq = _depth_units(zm, K)
        ok &= (ci >= 0) & (ci < W) & (cj >= 0) & (cj < H) & (zq >= 1) & (zq <= 65535)
    dest = (cj[ok] * W + ci[ok]).astype(np.int64)
    zsel, src = zm[ok], np.flatnonzero(ok)
    hits = np.bincount(dest, minlength=H * W).reshape(H, W)
    # sort by destination, then depth, then source order; keep each group's head
    order = np.lexsort((src, zsel, dest))
    dest_sorted = dest[order]
    head = np.ones(len(order), dtype=bool)
    head[1:] = dest_sorted[1:] != dest_sorted[:-1]
    win = order[head]
    d = dest[win]
    depth.ravel()[d] = zq[ok][win].astype(np.uint16)
    color.reshape(-1, 3)[d] = C_src[jj[src[win]], ii[src[win]]]
    return WarpResult(depth, color, hits, int(len(ii) - ok.sum()))


def prediction_set(W: WarpResult, empty_threshold=0) -> BlockSet:
    """Blocks that received at most ``empty_threshold`` warped pixels."""
    H, Wd = W.hit_count.shape
    gh, gw = grid_shape(H, Wd)
    padded = np.zeros((gh * BLOCK, gw * BLOCK), dtype=np.int64)
    padded[:H, :Wd] = W.hit_count
    per_block = padded.reshape(gh, BLOCK, gw, BLOCK).sum(axis=(1, 3))
    return BlockSet(gw, gh, per_block <= empty_threshold)


def validation_set(Z_b, M_inv: RigidTransform, K: Intrinsics, Z_a=None,
                   occlusion_check=False, occlusion_tol_mm=30.0) -> BlockSet:
    """Blocks of ``Z_b`` holding pixels that warp outside a's frame.

    With ``occlusion_check`` (needs ``Z_a``) a pixel is also flagged when a's
    depth at its landing spot is missing or nearer than the warped depth by
    more than ``occlusion_tol_mm``, i.e. a cannot see that surface.
    """
    Z_b = as_depth(Z_b, K)
    H, W = K.shape
    flagged = np.zeros((H, W), dtype=bool)
    jj, ii = np.nonzero(Z_b)
    if len(ii):
        pi, pj, zm, ok = warp_pixels(M_inv, ii, jj, Z_b[jj, ii], K)
        with np.errstate(invalid="ignore"):
            ci = np.floor(pi + 0.5)
            cj = np.floor(pj + 0.5)
            inside = ok & (ci >= 0) & (ci < W) & (cj >= 0) & (cj < H)
        out = ~inside
        if occlusion_check:
            if Z_a is None:
                raise ValidationError("occlusion check needs Z_a")
            Z_a = as_depth(Z_a, K)
            ci = np.where(inside, ci, 0).astype(np.int64)
            cj = np.where(inside, cj, 0).astype(np.int64)
            za = Z_a[cj, ci].astype(float) * K.depth_scale
            zb = zm * 1000.0
            hidden = inside & ((za == 0) | (za < zb - occlusion_tol_mm))
            out |= hidden
        flagged[jj[out], ii[out]] = True
    gh, gw = grid_shape(H, W)
    padded = np.zeros((gh * BLOCK, gw * BLOCK), dtype=bool)
    padded[:H, :W] = flagged
    return BlockSet(gw, gh, padded.reshape(gh, BLOCK, gw, BLOCK).any(axis=(1, 3)))


@dataclass
class Block:
    coord: BlockCoord
    depth: np.ndarray   # (8, 8) uint16
    color: np.ndarray   # (8, 8, 3) uint8


def _tile(img, bx, by):
    """8x8 tile at a block, edge-replicated where it hangs off the image."""
    H, W = img.shape[:2]
    rows = np.minimum(np.arange(by * BLOCK, by * BLOCK + BLOCK), H - 1)
    cols = np.minimum(np.arange(bx * BLOCK, bx * BLOCK + BLOCK), W - 1)
    return img[np.ix_(rows, cols)].copy()


def payload_blocks(Z_b, C_b, B: BlockSet) -> list:
    """Tiles of every member block, row-major order."""
    H, W = Z_b.shape
    if (B.grid_h, B.grid_w) != grid_shape(H, W):
        raise ValidationError("block set grid does not match the image")
    return [Block(c, _tile(Z_b, *c), _tile(C_b, *c)) for c in B.coords()]


def paste_blocks(Z, C, payload):
    """Overwrite ``Z``/``C`` in place with payload tiles."""
    H, W = Z.shape
    gh, gw = grid_shape(H, W)
    seen = set()
    for blk in payload:
        bx, by = blk.coord
        if not (0 <= bx < gw and 0 <= by < gh):
            raise MalformedPayloadError(f"block ({bx}, {by}) outside the {gw}x{gh} grid")
        if (bx, by) in seen:
            raise MalformedPayloadError(f"duplicate block ({bx}, {by}) in payload")
        seen.add((bx, by))
        y0, x0 = by * BLOCK, bx * BLOCK
        h, w = min(BLOCK, H - y0), min(BLOCK, W - x0)
        Z[y0:y0 + h, x0:x0 + w] = blk.depth[:h, :w]
        C[y0:y0 + h, x0:x0 + w] = blk.color[:h, :w]


def stitch_reconstruct(Z_a, C_a, M_ab: RigidTransform, K: Intrinsics, payload):
    """Station-side reconstruction of b's frame before post-processing.

    Returns ``(Z_hat, C_hat)``: a's frame warped into b's view with the
    transmitted blocks pasted on top.
    """
    W = warp_image(Z_a, C_a, M_ab, K)
    Z, C = W.depth, W.color
    paste_blocks(Z, C, payload)
    return Z, C


def payload_mask(payload, shape) -> np.ndarray:
    H, W = shape
    gh, gw = grid_shape(H, W)
    return BlockSet.from_coords(gw, gh, [b.coord for b in payload]).pixel_mask(H, W)
