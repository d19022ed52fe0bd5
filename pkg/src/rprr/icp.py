"""Bidirectional point-to-plane ICP between two depth frames.

Sensor ``a`` estimates ``M_ab`` (a-frame -> b-frame). Each iteration pairs
a's samples with their nearest surface points in ``Z_b`` and b's samples with
their nearest surface points in ``Z_a``; both kinds of residual are measured in
b's frame against the surface normal on the b side, linearised in inverse-depth
coordinates and solved jointly as one weighted least-squares problem for a
left-multiplied update ``E = exp(b)``.

The two halves of the work are split into :class:`RoleA` and :class:`RoleB` so
that the same arithmetic runs in one process (:func:`icp_run_local`) or across
a metered link (:func:`icp_run_distributed`). Everything that crosses the
link is integer-quantised (``SAMPLE_DTYPE``, ``MATCH_DTYPE``, ``OWN_DTYPE``)
and both paths go through the quantisers, which keeps them bit-identical.

A match is sent as the tangent plane of the target surface, ``n . X = d``
with ``d < 0`` for a camera-facing normal: that is all the point-to-plane
residual and the occlusion weight need.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateGeometryError, InsufficientDataError, NoNormalError,
                     ProtocolError, ValidationError)
from .errors import SessionAbort
from .geometry import Intrinsics, RigidTransform, backproject, depth_to_points, project, se3_exp
from .protocol import MessageType, PeerThread, handshake, make_link

log = logging.getLogger(__name__)

SUBPIXEL = 8  # fixed-point fraction bits for projected sample coordinates
SAMPLE_DTYPE = np.dtype([("i", "<i2"), ("j", "<i2"), ("z", "<u2")])
# octahedral normal plus plane offset |d| in PLANE_UNIT metres; d = 0: no match
MATCH_DTYPE = np.dtype([("n0", "<i2"), ("n1", "<i2"), ("d", "<u2")])
# b's own samples: pixel, raw depth and octahedral normal; z = 0: unusable
OWN_DTYPE = np.dtype([("i", "<u2"), ("j", "<u2"), ("z", "<u2"), ("n0", "<i2"), ("n1", "<i2")])
NORMAL_SCALE = 32767
PLANE_UNIT = 0.25e-3
A_TO_B, B_TO_A = 0, 1


@dataclass(frozen=True)
class IcpConfig:
    n_samples: int = 250
    max_iterations: int = 50
    neighborhood: int = 7
    walk_steps: int = 64                    # 1 = single window, no walking
    translation_eps: float = 1e-3           # metres
    rotation_eps: float = np.radians(0.05)  # radians
    cost_rel_eps: float = 1e-6
    normal_window: int = 5
    min_mean_diff_mm: float = 1.0
    max_condition: float = 1e12

    def __post_init__(self):
        if self.n_samples < 6:
            raise ValidationError("n_samples must be >= 6")
        if self.walk_steps < 1:
            raise ValidationError("walk_steps must be >= 1")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.neighborhood % 2 == 0 or self.normal_window % 2 == 0:
            raise ValidationError("window sizes must be odd")


@dataclass(frozen=True)
class Samples:
    """Pixels drawn from one depth frame (raw depth units)."""

    i: np.ndarray
    j: np.ndarray
    z: np.ndarray

    def __len__(self):
        return len(self.z)

    def points(self, K: Intrinsics) -> np.ndarray:
        return backproject(self.i, self.j, self.z, K)


@dataclass
class Correspondences:
    """Matched point pairs expressed in b's frame (metres).

    ``source`` is the a-side point already moved by the current estimate,
    ``target`` the b-side point carrying the unit ``normal``.
    """

    source: np.ndarray
    target: np.ndarray
    normal: np.ndarray
    direction: np.ndarray

    def __len__(self):
        return len(self.direction)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("source", "target", "normal", "direction")))


@dataclass
class NormalSystem:
    K: np.ndarray       # (N, 6)
    W: np.ndarray       # (N,) diagonal weights
    y: np.ndarray       # (N,)
    residual: np.ndarray  # (N,) current signed residuals, y = -residual

    @property
    def cost(self) -> float:
        """Bidirectional point-to-plane cost, sum of (w * r)^2."""
        return float(np.sum((self.W * self.residual) ** 2))


# -- sampling, normals, matching ---------------------------------------------

def sample_points(Z: np.ndarray, n: int, seed) -> Samples:
    """Stratified uniform sample of ``n`` valid pixels.

    Valid pixels are split, in row-major order, into ``n`` equal strata and one
    pixel is drawn uniformly from each.
    """
    flat = np.flatnonzero(np.asarray(Z).ravel() > 0)
    if len(flat) < n:
        raise InsufficientDataError(f"{len(flat)} valid pixels, {n} samples requested")
    rng = np.random.default_rng(seed)
    edges = np.linspace(0, len(flat), n + 1)
    lo = np.ceil(edges[:-1]).astype(int)
    hi = np.maximum(np.ceil(edges[1:]).astype(int), lo + 1)
    pick = flat[lo + (rng.random(n) * (hi - lo)).astype(int)]
    j, i = np.divmod(pick, Z.shape[1])
    return Samples(i.astype(np.int64), j.astype(np.int64), Z.ravel()[pick].astype(np.int64))


def _window_offsets(size):
    h = size // 2
    dj, di = np.mgrid[-h:h + 1, -h:h + 1]
    return di.ravel(), dj.ravel()


def estimate_normals(Z, i, j, K: Intrinsics, window=5):
    """Vectorised :func:`estimate_normal`. Returns ``(normals, ok)``."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    H, W = Z.shape
    di, dj = _window_offsets(window)
    ni = i[:, None] + di
    nj = j[:, None] + dj
    inside = (ni >= 0) & (ni < W) & (nj >= 0) & (nj < H)
    z = np.where(inside, Z[np.clip(nj, 0, H - 1), np.clip(ni, 0, W - 1)], 0).astype(float)
    valid = z > 0
    P = backproject(ni, nj, z, K)
    cnt = valid.sum(axis=1)
    safe = np.maximum(cnt, 1)[:, None]
    mean = (P * valid[..., None]).sum(axis=1) / safe
    D = (P - mean[:, None, :]) * valid[..., None]
    C = np.einsum("nki,nkj->nij", D, D)
    evals, evecs = np.linalg.eigh(C)
    n = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    center_ok = (i >= 0) & (i < W) & (j >= 0) & (j < H)
    center_ok &= Z[np.clip(j, 0, H - 1), np.clip(i, 0, W - 1)] > 0
    ok = center_ok & (cnt >= 3) & (evals[:, 1] > 1e-8 * scale)
    center = backproject(i, j, Z[np.clip(j, 0, H - 1), np.clip(i, 0, W - 1)], K)
    flip = np.einsum("ni,ni->n", n, center) > 0
    n = np.where(flip[:, None], -n, n)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return n, ok


def estimate_normal(Z, i, j, K: Intrinsics, window=5) -> np.ndarray:
    """Camera-facing unit normal of the total-least-squares plane through the
    valid 3-D points of the ``window`` x ``window`` neighbourhood."""
    n, ok = estimate_normals(Z, [i], [j], K, window)
    if not ok[0]:
        raise NoNormalError(f"degenerate neighbourhood at ({i}, {j})")
    return n[0]


def match_projected(pi, pj, X, Z_target, P_target, window, walk_steps=1):
    """Project-and-walk search, vectorised.

    ``(pi, pj)`` are sub-pixel projections of the points ``X`` (metres, target
    frame). The ``window`` x ``window`` block around the rounded projection is
    searched for the valid pixel whose 3-D point is nearest to ``X``; with
    ``walk_steps > 1`` the search is repeated around each new best pixel until
    it stops improving. Returns flat indices into the target image, -1 where
    the projection is outside the frame or no valid pixel was found.
    """
    H, W = Z_target.shape
    ci = np.floor(np.asarray(pi, dtype=float) + 0.5)
    cj = np.floor(np.asarray(pj, dtype=float) + 0.5)
    inside = np.isfinite(ci) & np.isfinite(cj) & (ci >= 0) & (ci < W) & (cj >= 0) & (cj < H)
    ci = np.where(inside, ci, 0).astype(np.int64)
    cj = np.where(inside, cj, 0).astype(np.int64)
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    Pf = P_target.reshape(-1, 3)
    Zf = Z_target.ravel()
    di, dj = _window_offsets(window)
    best = np.full(len(ci), -1, dtype=np.int64)
    best_d2 = np.full(len(ci), np.inf)
    active = np.flatnonzero(inside)
    for _ in range(max(1, walk_steps)):
        if len(active) == 0:
            break
        ni = ci[active, None] + di
        nj = cj[active, None] + dj
        ok = (ni >= 0) & (ni < W) & (nj >= 0) & (nj < H)
        flat = np.clip(nj, 0, H - 1) * W + np.clip(ni, 0, W - 1)
        ok &= Zf[flat] > 0
        d2 = np.where(ok, np.sum((Pf[flat] - X[active, None, :]) ** 2, axis=2), np.inf)
        k = np.argmin(d2, axis=1)
        rows = np.arange(len(k))
        better = d2[rows, k] < best_d2[active]
        active, k, rows = active[better], k[better], rows[better]
        best[active] = flat[rows, k]
        best_d2[active] = d2[rows, k]
        cj[active], ci[active] = np.divmod(best[active], W)
    return best


def find_correspondence(p, Z_target, K: Intrinsics, window=7, walk_steps=1):
    """Nearest valid target pixel to the transformed point ``p``.

    ``p`` is ``(i, j, z)``: sub-pixel coordinates in the target image and raw
    depth. Returns ``(i, j, z)`` of the match or None.
    """
    i, j, z = p
    X = backproject(i, j, z, K)[None]
    idx = match_projected([i], [j], X, Z_target, depth_to_points(Z_target, K), window,
                          walk_steps)[0]
    if idx < 0:
        return None
    jj, ii = divmod(int(idx), Z_target.shape[1])
    return ii, jj, int(Z_target[jj, ii])


# -- weighting, linear system --------------------------------------------------

def compute_weight(z_a, z_b, c):
    """Asymmetric weight of a pair with depths ``z_a``, ``z_b`` (mm).

    ``c / (c + (z_a - z_b))`` when ``z_b <= z_a`` else ``c / (c + (z_a - z_b)^2)``.
    A non-positive denominator yields weight 0.
    """
    if np.any(np.asarray(c) <= 0):
        raise ValidationError("c must be positive")
    z_a = np.asarray(z_a, dtype=float)
    z_b = np.asarray(z_b, dtype=float)
    d = z_a - z_b
    den = np.where(z_b <= z_a, c + d, c + d * d)
    outlier = den <= 0
    if np.any(outlier):
        log.debug("%d correspondences clamped to zero weight", int(np.sum(outlier)))
    w = np.where(outlier, 0.0, c / np.where(outlier, 1.0, den))
    return float(w) if w.ndim == 0 else w


def jacobian(u, v, q) -> np.ndarray:
    """d(u, v, q)/d(alpha) at alpha = 0 for ``exp(sum alpha_j G_j)``; (..., 3, 6)."""
    u, v, q = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (u, v, q)))
    z, o = np.zeros_like(u), np.ones_like(u)
    J = np.stack([
        np.stack([q, z, -u * q, -u * v, o + u * u, -v], axis=-1),
        np.stack([z, q, -v * q, -o - v * v, u * v, u], axis=-1),
        np.stack([z, z, -q * q, -v * q, u * q, z], axis=-1),
    ], axis=-2)
    return J


def _uvq(X):
    q = 1.0 / X[:, 2]
    return X[:, 0] * q, X[:, 1] * q, q


def assemble_system(corr: Correspondences, min_mean_diff_mm=1.0) -> NormalSystem:
    """Stack both matching directions into ``K b = y`` with weights ``W``.

    Rows for a->b pairs come first, then b->a pairs. The Euclidean normal ``n``
    of the target plane ``n.X = d`` becomes ``(n_x, n_y, -d)`` in
    inverse-depth space, where the plane is again linear; each row is that
    normal times the Jacobian at the source point.
    """
    if len(corr) < 6:
        raise InsufficientDataError(f"{len(corr)} correspondences, need >= 6")
    order = np.argsort(corr.direction, kind="stable")
    S, T, N = corr.source[order], corr.target[order], corr.normal[order]
    if np.any(S[:, 2] <= 0) or np.any(T[:, 2] <= 0):
        raise InsufficientDataError("correspondence behind the camera")
    u, v, q = _uvq(S)
    ut, vt, qt = _uvq(T)
    d = np.einsum("ni,ni->n", N, T)
    nprime = np.stack([N[:, 0], N[:, 1], -d], axis=1)
    Kmat = np.einsum("ni,nij->nj", nprime, jacobian(u, v, q))
    diff = np.stack([u - ut, v - vt, q - qt], axis=1)
    residual = np.einsum("ni,ni->n", diff, nprime)
    # z_b is read on the target's tangent plane along the source's line of
    # sight, so the depth difference vanishes at alignment instead of
    # carrying the pixel discretisation of the matched target sample
    ns = np.einsum("ni,ni->n", N, S)
    graze = np.abs(ns) < 1e-9
    za = S[:, 2] * 1000.0
    zb = np.where(graze, T[:, 2], d / np.where(graze, 1.0, ns) * S[:, 2]) * 1000.0
    c = max(float(np.mean(np.abs(za - zb))), min_mean_diff_mm)
    W = compute_weight(za, zb, c)
    return NormalSystem(Kmat, np.atleast_1d(W), -residual, residual)


def solve_motion(S: NormalSystem, max_condition=1e12) -> np.ndarray:
    """Weighted least squares ``b = (K^T W K)^-1 K^T W y``."""
    if S.K.shape[0] < 6:
        raise DegenerateGeometryError("fewer than 6 rows")
    KtW = S.K.T * S.W
    A = KtW @ S.K
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > max_condition:
        raise DegenerateGeometryError(f"normal matrix ill-conditioned (cond={cond:.3g})")
    return np.linalg.solve(A, KtW @ S.y)


# -- wire quantisation ---------------------------------------------------------

def encode_projected(X: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Quantise points (metres, target frame) to SAMPLE_DTYPE records; records
    that cannot be represented get z = 0."""
    pi, pj, zm = project(X, K)
    out = np.zeros(len(X), dtype=SAMPLE_DTYPE)
    with np.errstate(invalid="ignore"):
        fi = np.floor(pi * SUBPIXEL + 0.5)
        fj = np.floor(pj * SUBPIXEL + 0.5)
        zr = np.floor(zm / K.to_meters + 0.5)
        ok = (np.isfinite(fi) & np.isfinite(fj) & (np.abs(fi) < 32768) & (np.abs(fj) < 32768)
              & (zr >= 1) & (zr <= 65535))
    out["i"][ok] = fi[ok]
    out["j"][ok] = fj[ok]
    out["z"][ok] = zr[ok]
    return out


def decode_projected(rec: np.ndarray):
    return rec["i"] / SUBPIXEL, rec["j"] / SUBPIXEL, rec["z"].astype(np.int64)


def quantize_normals(n: np.ndarray) -> np.ndarray:
    """Octahedral encoding of unit normals as (N, 2) int16."""
    n = np.asarray(n, dtype=float).reshape(-1, 3)
    p = n / np.maximum(np.abs(n).sum(axis=1, keepdims=True), 1e-300)
    sx = np.where(p[:, 0] >= 0, 1.0, -1.0)
    sy = np.where(p[:, 1] >= 0, 1.0, -1.0)
    lower = p[:, 2] < 0
    x = np.where(lower, (1 - np.abs(p[:, 1])) * sx, p[:, 0])
    y = np.where(lower, (1 - np.abs(p[:, 0])) * sy, p[:, 1])
    return np.floor(np.stack([x, y], axis=1) * NORMAL_SCALE + 0.5).astype(np.int16)


def dequantize_normals(rec: np.ndarray) -> np.ndarray:
    """Unit normals from records holding ``n0``/``n1`` octahedral fields."""
    x = rec["n0"] / NORMAL_SCALE
    y = rec["n1"] / NORMAL_SCALE
    z = 1.0 - np.abs(x) - np.abs(y)
    lower = z < 0
    sx = np.where(x >= 0, 1.0, -1.0)
    sy = np.where(y >= 0, 1.0, -1.0)
    x, y = np.where(lower, (1 - np.abs(y)) * sx, x), np.where(lower, (1 - np.abs(x)) * sy, y)
    n = np.stack([x, y, z], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _seeds(seed):
    ss = np.random.SeedSequence(seed)
    return ss.spawn(2)


# -- the two roles ---------------------------------------------------------------

class RoleB:
    """Holds ``Z_b``; answers match requests and supplies its own samples."""

    def __init__(self, Z_b, K: Intrinsics, config: IcpConfig = IcpConfig(), seed=0):
        self.Z = np.asarray(Z_b)
        self.K = K
        self.config = config
        self.P = depth_to_points(self.Z, K)
        self.samples = sample_points(self.Z, config.n_samples, _seeds(seed)[1])

    def own_samples(self) -> np.ndarray:
        s = self.samples
        n, ok = estimate_normals(self.Z, s.i, s.j, self.K, self.config.normal_window)
        rec = np.zeros(len(s), dtype=OWN_DTYPE)
        rec["i"], rec["j"] = s.i, s.j
        rec["z"] = np.where(ok, s.z, 0)
        qn = quantize_normals(n)
        rec["n0"] = np.where(ok, qn[:, 0], 0)
        rec["n1"] = np.where(ok, qn[:, 1], 0)
        return rec

    def reply(self, requests: np.ndarray) -> np.ndarray:
        """Tangent plane of the nearest ``Z_b`` surface point for each
        quantised a-sample; d = 0 marks "no match"."""
        pi, pj, z = decode_projected(requests)
        X = backproject(pi, pj, z, self.K)
        idx = match_projected(np.where(z > 0, pi, np.nan), pj, X, self.Z, self.P,
                              self.config.neighborhood, self.config.walk_steps)
        found = idx >= 0
        jj, ii = np.divmod(np.where(found, idx, 0), self.Z.shape[1])
        n, ok = estimate_normals(self.Z, ii, jj, self.K, self.config.normal_window)
        # the plane passes through the matched point with the normal as sent
        qn = quantize_normals(n)
        rec = np.zeros(len(requests), dtype=MATCH_DTYPE)
        rec["n0"], rec["n1"] = qn[:, 0], qn[:, 1]
        d = np.einsum("ni,ni->n", dequantize_normals(rec), self.P[jj, ii])
        du = np.floor(-d / PLANE_UNIT + 0.5)
        ok &= found & (du >= 1) & (du <= 65535)
        rec["d"] = np.where(ok, du, 0)
        rec["n0"] = np.where(ok, rec["n0"], 0)
        rec["n1"] = np.where(ok, rec["n1"], 0)
        return rec


@dataclass
class StepResult:
    transform: RigidTransform   # estimate to evaluate next
    cost: float                 # cost measured at the previous estimate
    converged: bool
    update: RigidTransform
    rows: int
    accepted: bool              # cost <= every earlier cost
    best: RigidTransform        # lowest-cost estimate evaluated so far


class RoleA:
    """Holds ``Z_a`` and the running estimate; assembles and solves.

    An evaluated estimate counts as accepted when its cost does not exceed
    the best cost seen so far; the best one is what a non-converged run
    returns.
    """

    def __init__(self, Z_a, K: Intrinsics, config: IcpConfig = IcpConfig(), seed=0,
                 initial: RigidTransform | None = None):
        self.Z = np.asarray(Z_a)
        self.K = K
        self.config = config
        self.P = depth_to_points(self.Z, K)
        self.samples = sample_points(self.Z, config.n_samples, _seeds(seed)[0])
        self.X = self.samples.points(K)
        self.M = initial if initial is not None else RigidTransform.identity()
        self.best = self.M
        self.best_cost = None
        self.prev_cost = None
        self.step = np.zeros(6)
        self.b_samples = None

    def requests(self) -> np.ndarray:
        return encode_projected(self.M.apply(self.X), self.K)

    def correspondences(self, matches: np.ndarray) -> Correspondences:
        K = self.K
        ok = matches["d"] > 0
        n = dequantize_normals(matches[ok])
        d = -(matches["d"][ok].astype(float) * PLANE_UNIT)
        S = self.M.apply(self.X[ok])
        # target: where the source's line of sight meets the tangent plane
        ns = np.einsum("ni,ni->n", n, S)
        meet = ns < -1e-9
        fwd = Correspondences(
            source=S[meet],
            target=S[meet] * (d[meet] / ns[meet])[:, None],
            normal=n[meet],
            direction=np.full(int(meet.sum()), A_TO_B))
        bs = self.b_samples
        ok = bs["z"] > 0
        Xb = backproject(bs["i"][ok], bs["j"][ok], bs["z"][ok], K)
        Xb_in_a = self.M.inverse().apply(Xb)
        pi, pj, _ = project(Xb_in_a, K)
        idx = match_projected(pi, pj, Xb_in_a, self.Z, self.P, self.config.neighborhood,
                              self.config.walk_steps)
        hit = idx >= 0
        bwd = Correspondences(
            source=self.M.apply(self.P.reshape(-1, 3)[idx[hit]]),
            target=Xb[hit],
            normal=dequantize_normals(bs[ok][hit]),
            direction=np.full(int(hit.sum()), B_TO_A))
        return Correspondences.concat([fwd, bwd])

    def absorb(self, matches: np.ndarray, b_samples: np.ndarray | None = None) -> StepResult:
        if b_samples is not None:
            self.b_samples = b_samples
        if self.b_samples is None:
            raise ProtocolError("b's own samples have not been received")
        cfg = self.config
        system = assemble_system(self.correspondences(matches), cfg.min_mean_diff_mm)
        cost = system.cost
        if self.best_cost is None:
            flat = cost == 0.0
        else:
            flat = abs(self.prev_cost - cost) <= cfg.cost_rel_eps * self.prev_cost
        accepted = self.best_cost is None or cost <= self.best_cost
        if accepted:
            self.best, self.best_cost = self.M, cost
        self.prev_cost = cost
        self.step = solve_motion(system, cfg.max_condition)
        E = se3_exp(self.step)
        self.M = E @ self.M
        small = (np.linalg.norm(E.translation) < cfg.translation_eps
                 and E.angle() < cfg.rotation_eps)
        return StepResult(self.M, cost, bool(small or flat), E, len(system.y), accepted, self.best)


@dataclass
class IcpState:
    a: RoleA
    b: RoleB
    iteration: int = 0


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    costs: list = field(default_factory=list)
    converged: bool = False
    trace: list = field(default_factory=list)  # estimate after each iteration
    accepted: list = field(default_factory=list)


def icp_step(state: IcpState) -> StepResult:
    """One exchange: a's requests, b's matches, a's solve and update."""
    requests = state.a.requests()
    matches = state.b.reply(requests)
    own = state.b.own_samples() if state.iteration == 0 else None
    state.iteration += 1
    return state.a.absorb(matches, own)


class _Tracker:
    """Collects the per-iteration trace and picks the returned estimate."""

    def __init__(self, initial):
        self.result = IcpResult(initial, 0)
        self._best = initial

    def add(self, step: StepResult):
        r = self.result
        r.iterations += 1
        r.costs.append(step.cost)
        r.accepted.append(step.accepted)
        r.trace.append(step.transform)
        r.transform = step.transform
        r.converged = step.converged
        self._best = step.best

    def finish(self):
        r = self.result
        if not r.converged:
            r.transform = self._best
        return r


def icp_run_local(Z_a, Z_b, K: Intrinsics, config: IcpConfig = IcpConfig(), seed=0,
                  initial: RigidTransform | None = None) -> IcpResult:
    """Estimate ``M_ab`` with both frames in one process.

    Stops on convergence or after ``config.max_iterations``; a run that does
    not converge returns the lowest-cost estimate with ``converged=False``.
    """
    state = IcpState(RoleA(Z_a, K, config, seed, initial), RoleB(Z_b, K, config, seed))
    track = _Tracker(state.a.M)
    for _ in range(config.max_iterations):
        step = icp_step(state)
        track.add(step)
        if step.converged:
            break
    return track.finish()


# -- distributed run --------------------------------------------------------------

FLAG_OWN_SAMPLES = 0x1  # MATCHES body also carries b's own samples


def _pose_body(M: RigidTransform) -> bytes:
    return M.to_array().astype("<f8").tobytes()


def _pose_from_body(body: bytes) -> RigidTransform:
    if len(body) != 96:
        raise ProtocolError(f"pose body must be 96 bytes, got {len(body)}")
    return RigidTransform.from_array(np.frombuffer(body, dtype="<f8"))


def _records(body: bytes, dtype, count=None) -> np.ndarray:
    if len(body) % dtype.itemsize:
        raise ProtocolError(f"body of {len(body)} bytes is not a whole number of records")
    rec = np.frombuffer(body, dtype=dtype).copy()
    if count is not None and len(rec) != count:
        raise ProtocolError(f"expected {count} records, got {len(rec)}")
    return rec


def _run_role_a(ep, Z_a, K, config, seed, initial):
    role = RoleA(Z_a, K, config, seed, initial)
    track = _Tracker(role.M)
    for k in range(1, config.max_iterations + 1):
        req = role.requests()
        ep.send(MessageType.SAMPLES, req.tobytes(), iteration=k, count=len(req))
        msg = ep.recv(MessageType.MATCHES)
        if msg.iteration != k:
            raise ProtocolError(f"MATCHES for iteration {msg.iteration}, expected {k}")
        split = msg.count * MATCH_DTYPE.itemsize
        matches = _records(msg.body[:split], MATCH_DTYPE, msg.count)
        own = None
        if msg.flags & FLAG_OWN_SAMPLES:
            own = _records(msg.body[split:], OWN_DTYPE)
        elif len(msg.body) != split:
            raise ProtocolError("unexpected trailing bytes in MATCHES")
        step = role.absorb(matches, own)
        track.add(step)
        if step.converged:
            break
    result = track.finish()
    tag = MessageType.CONVERGED if result.converged else MessageType.POSE_UPDATE
    ep.send(tag, _pose_body(result.transform), iteration=result.iterations)
    return result


def _run_role_b(ep, Z_b, K, config, seed):
    role = RoleB(Z_b, K, config, seed)
    first = True
    while True:
        msg = ep.recv((MessageType.SAMPLES, MessageType.CONVERGED, MessageType.POSE_UPDATE))
        if msg.tag != MessageType.SAMPLES:
            return IcpResult(_pose_from_body(msg.body), msg.iteration, [],
                             msg.tag == MessageType.CONVERGED)
        reply = role.reply(_records(msg.body, SAMPLE_DTYPE, msg.count))
        body, flags = reply.tobytes(), 0
        if first:
            body += role.own_samples().tobytes()
            flags = FLAG_OWN_SAMPLES
            first = False
        ep.send(MessageType.MATCHES, body, iteration=msg.iteration, count=len(reply), flags=flags)


def icp_run_distributed(role, endpoint, frame, K: Intrinsics, config: IcpConfig = IcpConfig(),
                        seed=0, initial: RigidTransform | None = None) -> IcpResult:
    """Run one side of the ICP exchange over ``endpoint``.

    ``role`` is "a" (holds ``Z_a``, solves) or "b" (holds ``Z_b``, matches).
    Both sides return an :class:`IcpResult`; b's carries the final estimate
    and iteration count but no cost trace. Any local failure is reported to
    the peer with an ABORT frame before being re-raised.
    """
    if role not in ("a", "b"):
        raise ProtocolError(f"unknown role {role!r}")
    handshake(endpoint, role, K.digest(), initiator=(role == "a"))
    try:
        if role == "a":
            return _run_role_a(endpoint, frame, K, config, seed, initial)
        return _run_role_b(endpoint, frame, K, config, seed)
    except SessionAbort:
        raise
    except Exception as exc:
        try:
            endpoint.send(MessageType.ABORT, f"{type(exc).__name__}: {exc}".encode())
        except Exception:
            pass
        raise


def icp_run_pair(Z_a, Z_b, K: Intrinsics, config: IcpConfig = IcpConfig(), seed=0,
                 transport="inprocess", link=None):
    """Both roles of :func:`icp_run_distributed` on a fresh link.

    Returns ``(result_a, result_b, wire_log)``. Role b runs on a thread.
    """
    own_link = link is None
    link = link if link is not None else make_link(transport, ("a", "b"))
    try:
        peer = PeerThread(icp_run_distributed, "b", link.endpoint("b"), Z_b, K, config, seed)
        peer.start()
        try:
            res_a = icp_run_distributed("a", link.endpoint("a"), Z_a, K, config, seed)
        finally:
            res_b_error = None
            try:
                res_b = peer.join_result(timeout=60)
            except Exception as exc:
                res_b_error = exc
        if res_b_error is not None:
            raise res_b_error
        return res_a, res_b, link.log
    finally:
        if own_link:
            link.close()
