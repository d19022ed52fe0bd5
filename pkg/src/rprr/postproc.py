"""Decoder-side clean-up of a forward-warped prediction.

Two artifacts are left by nearest-pixel forward warping:

* cracks: destination pixels no source pixel landed on, where a surface was
  stretched by the motion. Filled with an adaptive median of nearby depths.
* ghosts: background samples that slipped through a crack in a foreground
  surface. A pixel lying behind most of its 3x3 neighbours is replaced.

Filled or corrected pixels take their colour from the source frame by
warping them back into it. Each filter judges every pixel against its own
unfiltered input, so the result does not depend on scan order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .geometry import Intrinsics, RigidTransform, as_color, as_depth, warp_pixels
from .redundancy import BLOCK, WarpResult, grid_shape


@dataclass(frozen=True)
class FilterConfig:
    crack_window: int = 3
    crack_max_window: int = 7
    crack_min_valid: int = 3        # neighbours required before the window stops growing
    ghost_window: int = 3
    ghost_range_delta: float = 100.0  # mm
    ghost_majority: float = 0.5       # strictly more than this fraction must disagree
    ghost_behind_only: bool = True    # only neighbours nearer than the centre count as disagreeing
    bilinear: bool = True             # False: nearest-pixel colour fetch

    def __post_init__(self):
        for w in (self.crack_window, self.crack_max_window, self.ghost_window):
            if w < 3 or w % 2 == 0:
                raise ValidationError("filter windows must be odd and >= 3")
        if self.crack_max_window < self.crack_window:
            raise ValidationError("crack_max_window must be >= crack_window")
        if self.ghost_range_delta <= 0:
            raise ValidationError("ghost_range_delta must be positive")
        if not 0 <= self.ghost_majority < 1:
            raise ValidationError("ghost_majority must be in [0, 1)")
        if self.crack_min_valid < 1:
            raise ValidationError("crack_min_valid must be >= 1")


@dataclass
class FilterStats:
    filled: int = 0
    unfilled: int = 0
    ghosts: int = 0


def _neighbourhood(Z, jj, ii, window, include_centre=False):
    """Depths (float, NaN where invalid or off-image) of the window around
    each listed pixel; shape (n, window**2 [- 1])."""
    r = window // 2
    dj, di = np.mgrid[-r:r + 1, -r:r + 1]
    dj, di = dj.ravel(), di.ravel()
    if not include_centre:
        keep = (dj != 0) | (di != 0)
        dj, di = dj[keep], di[keep]
    H, W = Z.shape
    nj = jj[:, None] + dj[None, :]
    ni = ii[:, None] + di[None, :]
    inside = (nj >= 0) & (nj < H) & (ni >= 0) & (ni < W)
    vals = Z[np.clip(nj, 0, H - 1), np.clip(ni, 0, W - 1)].astype(float)
    return np.where(inside & (vals > 0), vals, np.nan)


def _round_depth(x):
    return np.clip(np.floor(x + 0.5), 1, 65535).astype(np.uint16)


def sample_color(C, pi, pj, bilinear=True) -> np.ndarray:
    """Colour of ``C`` at sub-pixel positions, clamped to the image border."""
    H, W = C.shape[:2]
    pi = np.clip(pi, 0, W - 1)
    pj = np.clip(pj, 0, H - 1)
    if not bilinear:
        return C[np.floor(pj + 0.5).astype(int), np.floor(pi + 0.5).astype(int)]
    i0 = np.minimum(np.floor(pi).astype(int), W - 2) if W > 1 else np.zeros(len(pi), int)
    j0 = np.minimum(np.floor(pj).astype(int), H - 2) if H > 1 else np.zeros(len(pj), int)
    fi = (pi - i0)[:, None] if W > 1 else np.zeros((len(pi), 1))
    fj = (pj - j0)[:, None] if H > 1 else np.zeros((len(pj), 1))
    i1 = np.minimum(i0 + 1, W - 1)
    j1 = np.minimum(j0 + 1, H - 1)
    c = ((1 - fi) * (1 - fj) * C[j0, i0] + fi * (1 - fj) * C[j0, i1]
         + (1 - fi) * fj * C[j1, i0] + fi * fj * C[j1, i1])
    return np.clip(np.floor(c + 0.5), 0, 255).astype(np.uint8)


def backward_color(ii, jj, z, C_src, M: RigidTransform, K: Intrinsics, bilinear=True):
    """Colour for destination pixels with raw depth ``z``, fetched by warping
    them back into the source view through ``M^-1``."""
    if len(ii) == 0:
        return np.zeros((0, 3), dtype=np.uint8)
    pi, pj, _, ok = warp_pixels(M.inverse(), ii, jj, z, K)
    pi = np.where(ok, pi, ii)
    pj = np.where(ok, pj, jj)
    return sample_color(C_src, pi, pj, bilinear)


def _copy(W: WarpResult) -> WarpResult:
    return replace(W, depth=W.depth.copy(), color=W.color.copy(), hit_count=W.hit_count.copy())


def _block_hits(hit_count):
    """Per-pixel flag: the pixel's 8x8 block received at least one warped sample."""
    H, W = hit_count.shape
    gh, gw = grid_shape(H, W)
    padded = np.zeros((gh * BLOCK, gw * BLOCK), dtype=np.int64)
    padded[:H, :W] = hit_count
    per_block = padded.reshape(gh, BLOCK, gw, BLOCK).sum(axis=(1, 3)) > 0
    return np.repeat(np.repeat(per_block, BLOCK, axis=0), BLOCK, axis=1)[:H, :W]


def _median_pass(Z, jj, ii, cfg: FilterConfig):
    """One adaptive-median sweep over the listed invalid pixels; NaN where
    even the largest window holds no valid neighbour."""
    value = np.full(len(ii), np.nan)
    todo = np.ones(len(ii), dtype=bool)
    for w in range(cfg.crack_window, cfg.crack_max_window + 1, 2):
        sel = np.flatnonzero(todo)
        if len(sel) == 0:
            break
        nb = _neighbourhood(Z, jj[sel], ii[sel], w)
        count = np.sum(~np.isnan(nb), axis=1)
        need = 1 if w == cfg.crack_max_window else cfg.crack_min_valid
        done = count >= need
        if done.any():
            value[sel[done]] = np.nanmedian(nb[done], axis=1)
            todo[sel[done]] = False
    return value


def fill_cracks(W: WarpResult, Z_src, C_src, M: RigidTransform, K: Intrinsics,
                cfg: FilterConfig = FilterConfig(), exclude=None, stats: FilterStats | None = None):
    """Fill invalid pixels with an adaptive median of their valid neighbours.

    Candidates are invalid pixels outside ``exclude`` (the transmitted
    blocks) whose 8x8 block received warped samples; blocks that received
    none are the prediction set's business, not the filter's. For each
    candidate the window grows from ``crack_window`` in steps of 2 until it
    holds ``crack_min_valid`` valid neighbours; at ``crack_max_window`` one is
    enough. Sweeps repeat, each reading the previous sweep's output, until no
    candidate changes, so a second application finds nothing left to do.
    Candidates that can never be reached are counted in ``stats.unfilled``.
    ``Z_src`` is accepted for interface symmetry; colour comes from ``C_src``.
    """
    Z = as_depth(W.depth, K).copy()
    C_src = as_color(C_src, K)
    out = _copy(W)
    cand = (Z == 0) & _block_hits(np.asarray(W.hit_count))
    if exclude is not None:
        cand &= ~np.asarray(exclude, dtype=bool)
    jj, ii = np.nonzero(cand)
    filled = np.zeros(len(ii), dtype=bool)
    while True:
        open_ = np.flatnonzero(~filled)
        if len(open_) == 0:
            break
        value = _median_pass(Z, jj[open_], ii[open_], cfg)
        got = ~np.isnan(value)
        if not got.any():
            break
        idx = open_[got]
        Z[jj[idx], ii[idx]] = _round_depth(value[got])
        filled[idx] = True
    zf = Z[jj[filled], ii[filled]]
    out.depth[jj[filled], ii[filled]] = zf
    out.color[jj[filled], ii[filled]] = backward_color(ii[filled], jj[filled], zf, C_src, M, K,
                                                       cfg.bilinear)
    if stats is not None:
        stats.filled += int(filled.sum())
        stats.unfilled += int((~filled).sum())
    return out


def ghost_mask(Z, cfg: FilterConfig = FilterConfig(), exclude=None):
    """Pixels judged to be ghosts and the depth each should take.

    By default a neighbour disagrees only when it is nearer than the centre
    by more than ``ghost_range_delta``: ghosts are background seen through a
    foreground surface. Counting both signs also flags every pixel of a
    surface whose depth changes by more than the delta per pixel, and those
    flip on every pass. The majority is taken over the whole window.
    """
    Z = np.asarray(Z)
    cand = Z > 0
    if exclude is not None:
        cand &= ~np.asarray(exclude, dtype=bool)
    jj, ii = np.nonzero(cand)
    nb = _neighbourhood(Z, jj, ii, cfg.ghost_window)
    valid = ~np.isnan(nb)
    diff = Z[jj, ii].astype(float)[:, None] - nb
    if not cfg.ghost_behind_only:
        diff = np.abs(diff)
    with np.errstate(invalid="ignore"):
        far = valid & (diff > cfg.ghost_range_delta)
    # invalid neighbours count as agreeing: a pixel beside a crack is not
    # outvoted by the few valid pixels left around it
    ghost = far.sum(axis=1) > cfg.ghost_majority * nb.shape[1]
    # the replacement comes from the neighbours that disagree with the centre
    vals = np.where(far[ghost], nb[ghost], np.nan)
    new = _round_depth(np.nanmedian(vals, axis=1)) if ghost.any() else np.zeros(0, np.uint16)
    return jj[ghost], ii[ghost], new


def remove_ghosts(W: WarpResult, Z_src, C_src, M: RigidTransform, K: Intrinsics,
                  cfg: FilterConfig = FilterConfig(), exclude=None, stats: FilterStats | None = None):
    """Replace pixels where more than ``ghost_majority`` of the valid 3x3
    neighbours lie over ``ghost_range_delta`` mm in front of them."""
    Z = as_depth(W.depth, K)
    C_src = as_color(C_src, K)
    out = _copy(W)
    jj, ii, new = ghost_mask(Z, cfg, exclude)
    out.depth[jj, ii] = new
    out.color[jj, ii] = backward_color(ii, jj, new, C_src, M, K, cfg.bilinear)
    if stats is not None:
        stats.ghosts += len(ii)
    return out


def postprocess(W: WarpResult, Z_src, C_src, M: RigidTransform, K: Intrinsics,
                cfg: FilterConfig = FilterConfig(), exclude=None, max_rounds=8):
    """Ghost removal followed by crack filling, repeated until a round
    changes nothing (at most ``max_rounds``); returns ``(result, stats)``.

    Filling a crack next to an edge can leave a new ghost, so one round is
    not always a fixed point. Ghost replacement only ever moves depths
    nearer, which bounds the number of rounds in practice.
    """
    stats = FilterStats()
    out = W
    for _ in range(max_rounds):
        before = stats.filled + stats.ghosts
        stats.unfilled = 0  # only the last round's leftovers are reported
        out = remove_ghosts(out, Z_src, C_src, M, K, cfg, exclude, stats)
        out = fill_cracks(out, Z_src, C_src, M, K, cfg, exclude, stats)
        if stats.filled + stats.ghosts == before:
            break
    return out, stats
