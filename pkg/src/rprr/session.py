"""Two-sensor sessions over metered links, and the independent baseline.

A session has three links: a<->b for the pose exchange and block set, and
one link from each sensor to the station. Each sensor runs on its own thread
and the station on the caller's; they share nothing but the links. Every byte
in a :class:`TransmissionRecord` is read back from the links' wire logs.

Flow for the rprr scheme:

1. a and b run the distributed ICP exchange on the a<->b link.
2. a warps its frame into b's view and sends the prediction set ``B_p`` to b
   as a BLOCKSET frame (the grid bitmap).
3. a sends its full frame to the station; b adds its validation set
   ``B_v`` and sends the blocks of ``B_p | B_v`` with ``M_ab``.
4. The station warps a's decoded frame, pastes b's blocks and post-processes.

If ICP fails or does not converge, a marks the BLOCKSET frame as a fallback
and b sends its full frame instead: bytes go up but nothing is lost.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .codec.container import decode_payload, encode_payload
from .codec.depth import image_tiles, tiles_to_image
from .errors import (DegenerateGeometryError, InsufficientDataError, ProtocolError,
                     SessionAbort, ValidationError)
from .geometry import Intrinsics, RigidTransform, as_color, as_depth
from .icp import IcpConfig, icp_run_distributed
from .postproc import FilterConfig, FilterStats, postprocess
from .protocol import MessageType, PeerThread, make_link
from .redundancy import (Block, BlockSet, paste_blocks, payload_blocks, prediction_set,
                         validation_set, warp_image)

log = logging.getLogger(__name__)

FLAG_FALLBACK = 0x1  # BLOCKSET: ICP failed, b sends its whole frame
ICP_TAGS = (MessageType.HELLO, MessageType.SAMPLES, MessageType.MATCHES,
            MessageType.POSE_UPDATE, MessageType.CONVERGED, MessageType.ABORT)


@dataclass(frozen=True)
class SessionConfig:
    quality: int = 50
    icp: IcpConfig = IcpConfig()
    filters: FilterConfig = FilterConfig()
    seed: int = 0
    postprocess: bool = True
    empty_threshold: int = 0         # B_p: blocks with at most this many hits
    timeout: float = 120.0

    def __post_init__(self):
        if not 0 <= self.quality <= 100:
            raise ValidationError("quality must be in 0..100")
        if self.empty_threshold < 0:
            raise ValidationError("empty_threshold must be >= 0")


@dataclass
class TransmissionRecord:
    scheme: str
    icp_messages: int = 0
    block_coords: int = 0
    container_a: int = 0
    container_b: int = 0
    depth_bytes: int = 0     # depth sections of both containers
    color_bytes: int = 0     # colour sections of both containers
    t_p: float = 0.0
    t_e: float = 0.0
    t_s: float = 0.0
    iterations: int = 0
    converged: bool = False
    fallback: bool = False
    payload_blocks: int = 0
    reference: str = "a"     # sensor that sent its complete frame
    transport: str = ""
    filter_stats: FilterStats = field(default_factory=FilterStats)

    def __post_init__(self):
        if self.scheme not in ("rprr", "independent"):
            raise ValidationError(f"unknown scheme {self.scheme!r}")

    @property
    def total(self) -> int:
        return self.icp_messages + self.block_coords + self.container_a + self.container_b

    def counts(self) -> dict:
        """Every field except the timings; equal across transports for equal inputs."""
        return {k: getattr(self, k) for k in (
            "scheme", "icp_messages", "block_coords", "container_a", "container_b",
            "depth_bytes", "color_bytes", "iterations", "converged", "fallback",
            "payload_blocks", "reference")}


class _Clock:
    """Accumulates processing / encoding / sending time for one role."""

    def __init__(self):
        self.t = {"p": 0.0, "e": 0.0, "s": 0.0}

    def run(self, kind, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.t[kind] += time.perf_counter() - t0


def _check_frames(frames, K, name):
    try:
        Z, C = frames
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a (depth, colour) pair") from None
    return as_depth(Z, K), as_color(C, K)


def _color_tiles(C):
    H, W = C.shape[:2]
    C = np.pad(C, ((0, -H % 8), (0, -W % 8), (0, 0)), mode="edge")
    gh, gw = C.shape[0] // 8, C.shape[1] // 8
    return C.reshape(gh, 8, gw, 8, 3).swapaxes(1, 2).reshape(-1, 8, 8, 3)


def _full_container(Z, C, K: Intrinsics, quality):
    gh, gw = _grid(K)
    return encode_payload(RigidTransform.identity(), BlockSet.full(gw, gh), image_tiles(Z),
                          _color_tiles(C), quality, K.digest())


def _grid(K: Intrinsics):
    return (-(-K.height // 8), -(-K.width // 8))


def _frame_from(parts, depth, color, K: Intrinsics):
    """Whole image from a full-grid payload."""
    H, W = K.shape
    Z = tiles_to_image(depth, H, W)
    ctiles = color.reshape(parts.blocks.grid_h, parts.blocks.grid_w, 8, 8, 3).swapaxes(1, 2)
    C = ctiles.reshape(parts.blocks.grid_h * 8, parts.blocks.grid_w * 8, 3)[:H, :W]
    return np.ascontiguousarray(Z), np.ascontiguousarray(C)


# -- the three parties ----------------------------------------------------------------

def _stack(blocks):
    if not blocks:
        return np.zeros((0, 8, 8), np.uint16), np.zeros((0, 8, 8, 3), np.uint8)
    return np.stack([b.depth for b in blocks]), np.stack([b.color for b in blocks])


def _closing(fn):
    """Run a role; on failure close its endpoints so peers stop waiting."""
    def run(ep_peer, ep_station, *args):
        try:
            return fn(ep_peer, ep_station, *args)
        except BaseException:
            ep_peer.close()
            ep_station.close()
            raise
    run.__name__ = fn.__name__
    return run


@_closing
def _role_a(ep_b, ep_s, Z_a, C_a, K, cfg: SessionConfig, clock: _Clock):
    res = None
    try:
        res = clock.run("p", icp_run_distributed, "a", ep_b, Z_a, K, cfg.icp, cfg.seed)
    except (InsufficientDataError, DegenerateGeometryError, SessionAbort) as exc:
        log.info("pose estimation failed, falling back: %s", exc)
    gh, gw = _grid(K)
    ok = res is not None and res.converged
    if ok:
        W = clock.run("p", warp_image, Z_a, C_a, res.transform, K)
        B_p = clock.run("p", prediction_set, W, cfg.empty_threshold)
    else:
        B_p = BlockSet.full(gw, gh)
    clock.run("s", ep_b.send, MessageType.BLOCKSET, B_p.to_bytes(), count=len(B_p),
              flags=0 if ok else FLAG_FALLBACK)
    data = clock.run("e", _full_container, Z_a, C_a, K, cfg.quality)
    clock.run("s", ep_s.send, MessageType.CONTAINER, data)
    return res


@_closing
def _role_b(ep_a, ep_s, Z_b, C_b, K, cfg: SessionConfig, clock: _Clock):
    res = None
    try:
        res = clock.run("p", icp_run_distributed, "b", ep_a, Z_b, K, cfg.icp, cfg.seed)
    except (InsufficientDataError, DegenerateGeometryError, SessionAbort) as exc:
        log.info("pose estimation failed on b: %s", exc)
    msg = ep_a.recv(MessageType.BLOCKSET)
    gh, gw = _grid(K)
    try:
        B_p = BlockSet.from_bytes(msg.body, gw, gh)
    except ValidationError as exc:
        raise ProtocolError(f"bad BLOCKSET body: {exc}") from None
    fallback = bool(msg.flags & FLAG_FALLBACK)
    if fallback or res is None:
        U, M = BlockSet.full(gw, gh), RigidTransform.identity()
    else:
        M = res.transform
        U = B_p | clock.run("p", validation_set, Z_b, M.inverse(), K)
    depth, color = _stack(clock.run("p", payload_blocks, Z_b, C_b, U))
    data = clock.run("e", encode_payload, M, U, depth, color, cfg.quality, K.digest())
    clock.run("s", ep_s.send, MessageType.CONTAINER, data)
    return res


@dataclass
class _StationOutput:
    Z: np.ndarray
    C: np.ndarray
    transform: RigidTransform
    blocks: BlockSet
    depth_bytes: int
    color_bytes: int
    stats: FilterStats


def _check_payload(parts, K: Intrinsics):
    if parts.digest != K.digest():
        raise ProtocolError("container intrinsics digest mismatch")
    if parts.blocks.mask.shape != _grid(K):
        raise ProtocolError("container block grid does not match the intrinsics")


def _receive_frame(ep, K: Intrinsics):
    parts, depth, color = decode_payload(ep.recv(MessageType.CONTAINER).body)
    _check_payload(parts, K)
    return parts, depth, color


def _assemble(a, b, K: Intrinsics, cfg: SessionConfig) -> _StationOutput:
    (pa, da, ca), (pb, db, cb) = a, b
    nbytes = (len(pa.depth_bits) + len(pb.depth_bits), len(pa.color_bits) + len(pb.color_bits))
    if len(pa.blocks) != pa.blocks.mask.size:
        raise ProtocolError("reference container must carry the whole frame")
    Z_a, C_a = _frame_from(pa, da, ca, K)
    stats = FilterStats()
    if len(pb.blocks) == pb.blocks.mask.size:
        Z, C = _frame_from(pb, db, cb, K)
        return _StationOutput(Z, C, pb.transform, pb.blocks, *nbytes, stats)
    M = pb.transform
    W = warp_image(Z_a, C_a, M, K)
    paste_blocks(W.depth, W.color,
                 [Block(c, d, col) for c, d, col in zip(pb.blocks.coords(), db, cb)])
    if cfg.postprocess:
        W, stats = postprocess(W, Z_a, C_a, M, K, cfg.filters, pb.blocks.pixel_mask(*K.shape))
    return _StationOutput(W.depth, W.color, M, pb.blocks, *nbytes, stats)


def _station(ep_a, ep_b, K: Intrinsics, cfg: SessionConfig) -> _StationOutput:
    return _assemble(_receive_frame(ep_a, K), _receive_frame(ep_b, K), K, cfg)


def encode_pair(frames_a, frames_b, K: Intrinsics, M_ab: RigidTransform | None,
                quality=50, empty_threshold=0):
    """Offline counterpart of one session's two containers.

    With a pose, b's container carries ``B_p | B_v`` as in a session; with
    ``M_ab=None`` it carries the whole frame. Returns ``(container_a, container_b)``.
    """
    Z_a, C_a = _check_frames(frames_a, K, "frames_a")
    Z_b, C_b = _check_frames(frames_b, K, "frames_b")
    data_a = _full_container(Z_a, C_a, K, quality)
    if M_ab is None:
        return data_a, _full_container(Z_b, C_b, K, quality)
    B_p = prediction_set(warp_image(Z_a, C_a, M_ab, K), empty_threshold)
    U = B_p | validation_set(Z_b, M_ab.inverse(), K)
    depth, color = _stack(payload_blocks(Z_b, C_b, U))
    return data_a, encode_payload(M_ab, U, depth, color, quality, K.digest())


def reconstruct(container_a, container_b, K: Intrinsics, config: SessionConfig = SessionConfig()):
    """Station-side decoding of two stored containers: the reference frame
    and b's payload. Returns ``(Z_hat_b, C_hat_b, M_ab, filter_stats)``."""
    a, b = decode_payload(container_a), decode_payload(container_b)
    _check_payload(a[0], K)
    _check_payload(b[0], K)
    out = _assemble(a, b, K, config)
    return out.Z, out.C, out.transform, out.stats


def _join_all(threads, timeout):
    results, errors = {}, []
    for name, t in threads.items():
        try:
            results[name] = t.join_result(timeout=timeout)
        except Exception as exc:
            errors.append(exc)
    return results, errors


def run_session(transport, frames_a, frames_b, K: Intrinsics, config: SessionConfig = SessionConfig()):
    """Full rprr session for one frame pair.

    ``transport`` is "inprocess", "socket" or a :class:`~rprr.protocol.Link`
    subclass. Returns ``(Z_hat_b, C_hat_b, M_ab, record)``; ``M_ab`` is the
    identity when the session fell back to independent transmission.
    """
    Z_a, C_a = _check_frames(frames_a, K, "frames_a")
    Z_b, C_b = _check_frames(frames_b, K, "frames_b")
    links = [make_link(transport, names) for names in (("a", "b"), ("a", "station"), ("b", "station"))]
    ab, as_, bs = links
    clocks = {"a": _Clock(), "b": _Clock()}
    threads = {"a": PeerThread(_role_a, ab.endpoint("a"), as_.endpoint("a"), Z_a, C_a, K, config, clocks["a"]),
               "b": PeerThread(_role_b, ab.endpoint("b"), bs.endpoint("b"), Z_b, C_b, K, config, clocks["b"])}
    try:
        for t in threads.values():
            t.start()
        try:
            out = _station(as_.endpoint("station"), bs.endpoint("station"), K, config)
        except Exception:
            for link in links:
                link.close()
            _join_all(threads, config.timeout)
            raise
        results, errors = _join_all(threads, config.timeout)
        if errors:
            raise errors[0]
    finally:
        for link in links:
            link.close()
    res_a = results["a"]
    rec = _record("rprr", ab, as_, bs, clocks, transport)
    rec.converged = bool(res_a is not None and res_a.converged)
    rec.fallback = not rec.converged
    rec.iterations = res_a.iterations if res_a is not None else 0
    rec.payload_blocks = len(out.blocks)
    rec.depth_bytes, rec.color_bytes = out.depth_bytes, out.color_bytes
    rec.filter_stats = out.stats
    return out.Z, out.C, out.transform, rec


def run_independent(frames_a, frames_b, K: Intrinsics, quality=50, transport="inprocess",
                    return_frames=False):
    """Baseline: both sensors send their whole frame to the station.

    Returns the record, or ``(Z_hat_b, C_hat_b, record)`` with ``return_frames``.
    """
    Z_a, C_a = _check_frames(frames_a, K, "frames_a")
    Z_b, C_b = _check_frames(frames_b, K, "frames_b")
    if not 0 <= quality <= 100:
        raise ValidationError("quality must be in 0..100")
    cfg = SessionConfig(quality=quality)
    as_, bs = make_link(transport, ("a", "station")), make_link(transport, ("b", "station"))
    clocks = {"a": _Clock(), "b": _Clock()}

    def send_full(ep, Z, C, clock):
        data = clock.run("e", _full_container, Z, C, K, quality)
        clock.run("s", ep.send, MessageType.CONTAINER, data)

    threads = {"a": PeerThread(send_full, as_.endpoint("a"), Z_a, C_a, clocks["a"]),
               "b": PeerThread(send_full, bs.endpoint("b"), Z_b, C_b, clocks["b"])}
    try:
        for t in threads.values():
            t.start()
        out = _station(as_.endpoint("station"), bs.endpoint("station"), K, cfg)
        _, errors = _join_all(threads, cfg.timeout)
        if errors:
            raise errors[0]
    finally:
        as_.close()
        bs.close()
    rec = _record("independent", None, as_, bs, clocks, transport)
    rec.depth_bytes, rec.color_bytes = out.depth_bytes, out.color_bytes
    rec.payload_blocks = len(out.blocks)
    return (out.Z, out.C, rec) if return_frames else rec


def run_sequence(transport, pairs, K: Intrinsics, config: SessionConfig = SessionConfig(),
                 alternate=False):
    """Sessions over a list of ``(frames_a, frames_b)``.

    With ``alternate`` the sensor sending its complete frame swaps every
    pair (a, b, a, ...), spreading the larger transmission over both
    sensors; the reconstructed view is then the other sensor's. Yields
    ``(Z_hat, C_hat, M, record)`` per pair, ``M`` mapping the reference
    sensor's frame into the reconstructed one.
    """
    for k, (fa, fb) in enumerate(pairs):
        swap = alternate and k % 2 == 1
        Z, C, M, rec = run_session(transport, fb if swap else fa, fa if swap else fb, K, config)
        rec.reference = "b" if swap else "a"
        yield Z, C, M, rec


def _record(scheme, ab, as_, bs, clocks, transport):
    rec = TransmissionRecord(scheme)
    if ab is not None:
        rec.icp_messages = sum(ab.log.total(tag=t) for t in ICP_TAGS)
        rec.block_coords = ab.log.total(tag=MessageType.BLOCKSET)
    rec.container_a = as_.log.total(tag=MessageType.CONTAINER)
    rec.container_b = bs.log.total(tag=MessageType.CONTAINER)
    rec.t_p = clocks["a"].t["p"] + clocks["b"].t["p"]
    rec.t_e = clocks["a"].t["e"] + clocks["b"].t["e"]
    rec.t_s = clocks["a"].t["s"] + clocks["b"].t["s"]
    rec.transport = transport if isinstance(transport, str) else getattr(transport, "kind", "")
    return rec


def wire_total(*links) -> int:
    return sum(link.log.total() for link in links)
