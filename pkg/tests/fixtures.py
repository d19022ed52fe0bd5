"""Synthetic fixtures shared by the post-processing and acceptance tests."""

import numpy as np

from rprr.geometry import Intrinsics, RigidTransform, warp_pixels
from rprr.redundancy import WarpResult, warp_image
from rprr.scenes import Plane, SyntheticSceneSpec, gen_synthetic_scene, pose_from


def crack_fixture(K=None):
    """A textured plane at 1 m seen by b after a 2 deg yaw, forward-warped
    from a. Returns ``(pair, warp, footprint)``; the footprint holds b's
    pixels whose surface point lies inside a's view."""
    K = K or Intrinsics.default(160, 120)
    spec = SyntheticSceneSpec([Plane((0, 0, 1.0), (0, 0, -1), (128, 128, 128))],
                              RigidTransform.identity(), pose_from((0, 2, 0)), K, name="crack")
    pair = gen_synthetic_scene(spec, 0)
    M = pair.ground_truth
    W = warp_image(pair.Z_a, pair.C_a, M, K)
    jj, ii = np.nonzero(pair.Z_b)
    pi, pj, _, ok = warp_pixels(M.inverse(), ii, jj, pair.Z_b[jj, ii], K)
    inside = ok & (pi >= -0.5) & (pi < K.width - 0.5) & (pj >= -0.5) & (pj < K.height - 0.5)
    footprint = np.zeros(K.shape, bool)
    footprint[jj[inside], ii[inside]] = True
    return pair, W, footprint


def ghost_fixture(n_ghosts=60, seed=0, fg=800, bg=2000):
    """Foreground (``fg`` mm) and background (``bg`` mm) split by a vertical
    and a 45 degree edge, with ``n_ghosts`` isolated background samples
    injected into the foreground.

    Returns ``(warp, clean_depth, colour, ghosts, edge)`` where ``ghosts``
    and ``edge`` are boolean masks: injected pixels and clean pixels that
    touch the other surface.
    """
    H, W = 120, 160
    jj, ii = np.indices((H, W))
    is_fg = (ii < 70) | (ii + jj < 100)
    Z = np.where(is_fg, fg, bg).astype(np.uint16)
    C = np.zeros((H, W, 3), np.uint8)
    C[is_fg] = (200, 60, 60)
    C[~is_fg] = (40, 90, 200)
    # clean edge pixels: some 8-neighbour lies on the other surface
    pad = np.pad(is_fg, 1, mode="edge")
    other = np.zeros_like(is_fg)
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            other |= pad[1 + dj:1 + dj + H, 1 + di:1 + di + W] != is_fg
    edge = other.copy()
    # ghosts: interior foreground pixels, 3 px from edges and each other
    rng = np.random.default_rng(seed)
    far = np.zeros_like(is_fg)
    far[3:-3, 3:-3] = True
    for dj in range(-3, 4):
        for di in range(-3, 4):
            far &= np.roll(np.roll(is_fg, dj, 0), di, 1)
    ghosts = np.zeros_like(is_fg)
    cand = list(zip(*np.nonzero(far)))
    for k in rng.permutation(len(cand)):
        j, i = cand[k]
        if ghosts[max(j - 3, 0):j + 4, max(i - 3, 0):i + 4].any():
            continue
        ghosts[j, i] = True
        if ghosts.sum() == n_ghosts:
            break
    Zg = Z.copy()
    Zg[ghosts] = bg
    Cg = C.copy()
    Cg[ghosts] = (40, 90, 200)
    warp = WarpResult(Zg, Cg, (Zg > 0).astype(np.int64))
    return warp, Z, C, ghosts, edge
