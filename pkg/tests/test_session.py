import numpy as np
import pytest

from rprr.codec import decode_payload
from rprr.errors import ProtocolError, ValidationError
from rprr.geometry import Intrinsics
from rprr.metrics import psnr
from rprr.protocol import InProcessLink, MessageType, SocketLink
from rprr.session import (ICP_TAGS, SessionConfig, TransmissionRecord, encode_pair,
                          reconstruct, run_independent, run_sequence, run_session)


def frames(p):
    return (p.Z_a, p.C_a), (p.Z_b, p.C_b)


def recording(base):
    """A Link class remembering every instance, so a test can read the
    wire logs of the links a session opened internally."""
    made = []

    class Rec(base):
        def __init__(self, names=("a", "b")):
            super().__init__(names)
            made.append(self)
    return Rec, made


@pytest.fixture(scope="module")
def sessions(small_pair):
    out = {}
    for name in ("inprocess", "socket"):
        out[name] = run_session(name, *frames(small_pair), small_pair.intrinsics)
    return out


def test_transports_agree_bit_for_bit(sessions):
    (Z1, C1, M1, r1), (Z2, C2, M2, r2) = sessions["inprocess"], sessions["socket"]
    assert np.array_equal(Z1, Z2) and np.array_equal(C1, C2)
    assert np.array_equal(M1.to_array(), M2.to_array())
    assert r1.counts() == r2.counts()
    assert r1.transport == "inprocess" and r2.transport == "socket"


def test_session_recovers_pose_and_frame(sessions, small_pair):
    Z, C, M, rec = sessions["inprocess"]
    assert rec.converged and not rec.fallback
    E = small_pair.ground_truth.inverse() @ M
    assert np.degrees(E.angle()) < 0.5
    assert np.abs(M.translation - small_pair.ground_truth.translation).max() < 0.01
    assert psnr(small_pair.C_b, C) > 25
    assert 0 < rec.payload_blocks < Z.size // 64


@pytest.mark.parametrize("base", [InProcessLink, SocketLink])
def test_record_equals_wire_bytes(small_pair, base):
    cls, made = recording(base)
    _, _, _, rec = run_session(cls, *frames(small_pair), small_pair.intrinsics)
    assert len(made) == 3
    assert rec.total == sum(link.log.total() for link in made)
    ab = made[0].log
    assert rec.block_coords == ab.total(tag=MessageType.BLOCKSET)
    assert rec.icp_messages == sum(ab.total(tag=t) for t in ICP_TAGS)
    assert rec.container_a + rec.container_b == made[1].log.total() + made[2].log.total()
    # every SAMPLES frame carries 500 fixed-size records
    assert set(ab.sizes(tag=MessageType.SAMPLES)) == {1516}


def test_independent_baseline(small_pair):
    cls, made = recording(InProcessLink)
    Z, C, rec = run_independent(*frames(small_pair), small_pair.intrinsics, 50, cls,
                                return_frames=True)
    assert rec.icp_messages == 0 and rec.block_coords == 0
    assert rec.total == rec.container_a + rec.container_b == sum(l.log.total() for l in made)
    assert np.array_equal(Z, small_pair.Z_b)          # depth is lossless
    assert rec.t_p == 0.0


def test_fallback_sends_whole_frame(small_pair):
    p = small_pair
    Z_a, Z_b = p.Z_a.copy(), p.Z_b.copy()
    Z_a[:, 70:] = 0
    Z_b[:, :90] = 0
    cls, made = recording(InProcessLink)
    Z, C, M, rec = run_session(cls, (Z_a, p.C_a), (Z_b, p.C_b), p.intrinsics)
    assert rec.fallback and not rec.converged
    assert np.array_equal(Z, Z_b)
    assert np.array_equal(M.to_array(), np.r_[np.eye(3).ravel(), 0, 0, 0])
    blockset = [m for m in made[0].log.entries if m[1] == MessageType.BLOCKSET]
    assert len(blockset) == 1
    assert rec.payload_blocks == Z.size // 64


def test_encode_pair_matches_session(sessions, small_pair):
    Z_s, C_s, M, rec = sessions["inprocess"]
    data_a, data_b = encode_pair(*frames(small_pair), small_pair.intrinsics, M)
    assert len(data_a) == rec.container_a - 16 and len(data_b) == rec.container_b - 16
    Z, C, M2, stats = reconstruct(data_a, data_b, small_pair.intrinsics)
    assert np.array_equal(Z, Z_s) and np.array_equal(C, C_s)
    assert stats == rec.filter_stats


def test_encode_pair_without_pose_is_full(small_pair):
    K = small_pair.intrinsics
    data_a, data_b = encode_pair(*frames(small_pair), K, None)
    parts = decode_payload(data_b)[0]
    assert len(parts.blocks) == parts.blocks.mask.size
    Z, _, _, _ = reconstruct(data_a, data_b, K)
    assert np.array_equal(Z, small_pair.Z_b)


def test_reconstruct_rejects_partial_reference(small_pair, sessions):
    K = small_pair.intrinsics
    _, _, M, _ = sessions["inprocess"]
    _, data_b = encode_pair(*frames(small_pair), K, M)
    with pytest.raises(ProtocolError, match="whole frame"):
        reconstruct(data_b, data_b, K)


def test_reconstruct_rejects_other_intrinsics(small_pair):
    K = small_pair.intrinsics
    data_a, data_b = encode_pair(*frames(small_pair), K, None)
    other = Intrinsics(K.fx + 1, K.fy, K.ic, K.jc, K.width, K.height, K.depth_scale)
    with pytest.raises(ProtocolError, match="digest"):
        reconstruct(data_a, data_b, other)


def test_postprocess_switch(small_pair):
    cfg = SessionConfig(postprocess=False)
    Z, C, M, rec = run_session("inprocess", *frames(small_pair), small_pair.intrinsics, cfg)
    assert rec.filter_stats.filled == 0 and (Z == 0).any()


def test_alternating_reference(small_pair):
    pairs = [frames(small_pair)] * 2
    out = list(run_sequence("inprocess", pairs, small_pair.intrinsics, alternate=True))
    assert [r.reference for *_, r in out] == ["a", "b"]
    # the second session reconstructs a's view from b
    assert psnr(small_pair.C_a, out[1][1]) > 25


def test_config_and_input_validation(small_pair):
    with pytest.raises(ValidationError):
        SessionConfig(quality=101)
    with pytest.raises(ValidationError):
        TransmissionRecord("carrier")
    with pytest.raises(ValidationError):
        run_session("inprocess", (small_pair.Z_a,), frames(small_pair)[1], small_pair.intrinsics)
    with pytest.raises(ValidationError):
        run_independent(*frames(small_pair), small_pair.intrinsics, quality=-1)
