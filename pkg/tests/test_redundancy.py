import numpy as np
import pytest

from oracles import empty_blocks_oracle, leaving_blocks_oracle, warp_oracle
from rprr.errors import MalformedPayloadError, ValidationError
from rprr.geometry import Intrinsics, RigidTransform, se3_exp
from rprr.redundancy import (Block, BlockCoord, BlockSet, grid_shape, paste_blocks,
                             payload_blocks, prediction_set, stitch_reconstruct, validation_set,
                             warp_image)
from rprr.scenes import Cylinder, gen_synthetic_scene, occlusion_scene, relative_case, render


@pytest.fixture(scope="module")
def frame64():
    K = Intrinsics.default(64, 64)
    return gen_synthetic_scene(relative_case(4, 1, 0, (0.05, 0, 0.02), K), 0)


# -- block sets ---------------------------------------------------------------------------

def test_vga_grid_and_bitmap_size():
    B = BlockSet.for_image(480, 640)
    assert (B.grid_w, B.grid_h) == (80, 60) and B.nbytes == 600
    assert grid_shape(121, 161) == (16, 21)


def test_blockset_algebra_and_bytes(rng):
    a = BlockSet(13, 7, rng.random((7, 13)) < 0.3)
    b = BlockSet(13, 7, rng.random((7, 13)) < 0.3)
    assert len(a | b) == np.sum(a.mask | b.mask)
    assert len(a & b) == np.sum(a.mask & b.mask)
    assert (a - b) == BlockSet(13, 7, a.mask & ~b.mask)
    assert BlockSet.from_bytes(a.to_bytes(), 13, 7) == a
    assert BlockCoord(0, 0) in BlockSet.full(13, 7)
    with pytest.raises(ValidationError):
        BlockSet.from_bytes(b"\xff" * a.nbytes, 13, 7)   # padding bits set


# -- warping ---------------------------------------------------------------------------------

def test_identity_warp_reproduces_source(frame64):
    K = frame64.intrinsics
    W = warp_image(frame64.Z_a, frame64.C_a, RigidTransform.identity(), K)
    valid = frame64.Z_a > 0
    assert np.array_equal(W.depth, frame64.Z_a)
    assert np.array_equal(W.color[valid], frame64.C_a[valid])
    assert np.array_equal(W.hit_count, valid.astype(int))


def test_nearest_depth_wins_a_collision():
    K = Intrinsics.default(16, 16)
    Z = np.zeros((16, 16), np.uint16)
    C = np.zeros((16, 16, 3), np.uint8)
    # both pixels lie on the ray through pixel (8, 8) of the destination after a sideways shift
    Z[8, 8], C[8, 8] = 800, (255, 0, 0)
    Z[8, 9], C[8, 9] = 1200, (0, 255, 0)
    # choose tx so that the far pixel lands where the near one does
    # i' = i + fx * tx / z: 8 + fx tx / 0.8 = 9 + fx tx / 1.2
    tx = 1 / (K.fx * (1 / 0.8 - 1 / 1.2))
    W = warp_image(Z, C, se3_exp([tx, 0, 0, 0, 0, 0]), K)
    hit = np.argwhere(W.hit_count == 2)
    assert len(hit) == 1
    j, i = hit[0]
    assert W.depth[j, i] == 800 and tuple(W.color[j, i]) == (255, 0, 0)


def test_warp_matches_oracle(frame64):
    K = frame64.intrinsics
    M = frame64.ground_truth
    W = warp_image(frame64.Z_a, frame64.C_a, M, K)
    d, c, h = warp_oracle(frame64.Z_a, frame64.C_a, M, K)
    assert np.array_equal(W.depth, d)
    assert np.array_equal(W.color, c)
    assert np.array_equal(W.hit_count, h)
    assert np.array_equal(W.hit_count == 0, W.depth == 0)


def test_prediction_set_identity_is_empty(frame64):
    K = frame64.intrinsics
    W = warp_image(frame64.Z_a, frame64.C_a, RigidTransform.identity(), K)
    assert len(prediction_set(W)) == 0


def test_prediction_set_for_sideways_translation():
    # plane at 1 m, camera b moved right: a's content slides left, right edge strip empty
    K = Intrinsics.default(64, 64)
    Z = np.full((64, 64), 1000, np.uint16)
    C = np.full((64, 64, 3), 100, np.uint8)
    tx = 20 / K.fx            # 20 px at 1 m
    W = warp_image(Z, C, se3_exp([-tx, 0, 0, 0, 0, 0]), K)
    B = prediction_set(W)
    expect = empty_blocks_oracle(W.hit_count)
    assert np.array_equal(B.mask, expect)
    # strip is columns 44..63: only block columns fully inside it (6, 7) are empty
    assert np.array_equal(np.flatnonzero(B.mask.any(axis=0)), [6, 7])
    assert B.mask[:, 6:].all()


def test_prediction_set_disjoint_is_everything():
    K = Intrinsics.default(640, 480)
    Z = np.full((480, 640), 1000, np.uint16)
    C = np.zeros((480, 640, 3), np.uint8)
    W = warp_image(Z, C, se3_exp([0, 0, 0, 0, np.pi, 0]), K)
    assert len(prediction_set(W)) == 4800


def test_empty_threshold_counts_hits(frame64):
    K = frame64.intrinsics
    W = warp_image(frame64.Z_a, frame64.C_a, frame64.ground_truth, K)
    per_block = np.add.reduceat(np.add.reduceat(W.hit_count, np.arange(0, 64, 8), 0),
                                np.arange(0, 64, 8), 1)
    for t in (0, 3, 20):
        assert np.array_equal(prediction_set(W, t).mask, per_block <= t)


def test_validation_set_identity_is_empty(frame64):
    assert len(validation_set(frame64.Z_b, RigidTransform.identity(), frame64.intrinsics)) == 0


def test_validation_set_matches_oracle(frame64):
    K = frame64.intrinsics
    M_inv = frame64.ground_truth.inverse()
    assert np.array_equal(validation_set(frame64.Z_b, M_inv, K).mask,
                          leaving_blocks_oracle(frame64.Z_b, M_inv, K))


def test_left_edge_pixel_under_leftward_translation():
    # b sits left of a; a left-edge pixel of b lies left of a's view
    K = Intrinsics.default(64, 64)
    Z_b = np.zeros((64, 64), np.uint16)
    Z_b[30, 0] = 1000
    M_ab = se3_exp([0.05, 0, 0, 0, 0, 0])   # x_b = x_a + 0.05: b is 5 cm to the left of a
    # hand computation: x_b = (0 - 32)/52.5 * 1 = -0.6095 m, x_a = x_b - 0.05 = -0.6595,
    # i_a = -0.6595 * 52.5 + 32 = -2.6 -> outside
    B = validation_set(Z_b, M_ab.inverse(), K)
    assert B.coords() == [BlockCoord(0, 3)]


def test_validation_set_covers_foreground_cylinder():
    spec = occlusion_scene()
    pair = gen_synthetic_scene(spec, 0)
    K = pair.intrinsics
    B = validation_set(pair.Z_b, pair.ground_truth.inverse(), K)
    # analytic footprint: render the cylinder alone from b's pose
    cyl = [p for p in spec.primitives if isinstance(p, Cylinder)]
    t, _ = render(cyl, spec.pose_b, K)
    alone = np.where(np.isfinite(t), t, 0)
    # cylinder pixels that are in front of everything else in b's view
    visible = (alone > 0) & (np.abs(alone * 1000 - pair.Z_b) <= 1)
    assert visible.sum() > 100
    jj, ii = np.nonzero(visible)
    member = B.mask[jj // 8, ii // 8]
    assert member.all()


# -- payload and stitching ------------------------------------------------------------------

def test_payload_blocks(frame64):
    Z, C = frame64.Z_b, frame64.C_b
    assert payload_blocks(Z, C, BlockSet.for_image(64, 64)) == []
    one = payload_blocks(Z, C, BlockSet.from_coords(8, 8, [(0, 0)]))
    assert len(one) == 1 and one[0].depth.shape == (8, 8) and one[0].color.size == 192
    assert np.array_equal(one[0].depth, Z[:8, :8]) and np.array_equal(one[0].color, C[:8, :8])


def test_payload_order_is_row_major(rng, frame64):
    mask = rng.random((8, 8)) < 0.4
    out = payload_blocks(frame64.Z_b, frame64.C_b, BlockSet(8, 8, mask))
    keys = [(b.coord.by, b.coord.bx) for b in out]
    assert len(out) == mask.sum() and keys == sorted(keys) and len(set(keys)) == len(keys)


def test_edge_blocks_are_clipped_on_paste():
    K = Intrinsics.default(20, 12)
    Z = np.arange(240, dtype=np.uint16).reshape(12, 20) + 1
    C = np.zeros((12, 20, 3), np.uint8)
    blocks = payload_blocks(Z, C, BlockSet.full(3, 2))
    Z2, C2 = np.zeros_like(Z), np.zeros_like(C)
    paste_blocks(Z2, C2, blocks)
    assert np.array_equal(Z2, Z)


def test_full_payload_stitch_is_exact(frame64):
    K = frame64.intrinsics
    pl = payload_blocks(frame64.Z_b, frame64.C_b, BlockSet.full(8, 8))
    Z, C = stitch_reconstruct(frame64.Z_a, frame64.C_a, frame64.ground_truth, K, pl)
    assert np.array_equal(Z, frame64.Z_b) and np.array_equal(C, frame64.C_b)


def test_empty_payload_identity_stitch(frame64):
    K = frame64.intrinsics
    Z, C = stitch_reconstruct(frame64.Z_a, frame64.C_a, RigidTransform.identity(), K, [])
    assert np.array_equal(Z, frame64.Z_a)


def test_stitch_layers_prediction_and_payload(frame64):
    K, M = frame64.intrinsics, frame64.ground_truth
    U = prediction_set(warp_image(frame64.Z_a, frame64.C_a, M, K)) | validation_set(frame64.Z_b, M.inverse(), K)
    pl = payload_blocks(frame64.Z_b, frame64.C_b, U)
    Z, C = stitch_reconstruct(frame64.Z_a, frame64.C_a, M, K, pl)
    inside = U.pixel_mask(64, 64)
    W = warp_image(frame64.Z_a, frame64.C_a, M, K)
    assert np.array_equal(Z[inside], frame64.Z_b[inside])
    assert np.array_equal(Z[~inside], W.depth[~inside])
    # idempotent
    Z2, C2 = stitch_reconstruct(frame64.Z_a, frame64.C_a, M, K, pl)
    assert np.array_equal(Z, Z2) and np.array_equal(C, C2)


def test_duplicate_block_is_malformed(frame64):
    pl = payload_blocks(frame64.Z_b, frame64.C_b, BlockSet.from_coords(8, 8, [(1, 1)]))
    with pytest.raises(MalformedPayloadError):
        paste_blocks(frame64.Z_b.copy(), frame64.C_b.copy(), pl + pl)
    bad = [Block(BlockCoord(9, 0), pl[0].depth, pl[0].color)]
    with pytest.raises(MalformedPayloadError):
        paste_blocks(frame64.Z_b.copy(), frame64.C_b.copy(), bad)


def test_block_level_coverage(frame64):
    """Blocks no a-pixel reaches, and pixels leaving a's frame, are always sent."""
    K, M = frame64.intrinsics, frame64.ground_truth
    _, _, hits = warp_oracle(frame64.Z_a, frame64.C_a, M, K)
    U = prediction_set(warp_image(frame64.Z_a, frame64.C_a, M, K)) | validation_set(frame64.Z_b, M.inverse(), K)
    must = empty_blocks_oracle(hits) | leaving_blocks_oracle(frame64.Z_b, M.inverse(), K)
    assert np.all(U.mask[must])
