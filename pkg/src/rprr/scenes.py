"""Analytic ray-cast scenes with exact ground-truth relative pose.

World axes follow the camera convention (x right, y down, z forward), so the
floor is at positive y. Camera poses are camera-to-world transforms and the
ground truth is ``M_ab = T_wb^-1 T_wa``. Surface colour is a smooth procedural
texture of world position, identical from every viewpoint (uniform lighting).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GenerationError, ValidationError
from .geometry import Intrinsics, RigidTransform, se3_exp


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    color: tuple = (160, 150, 140)
    # optional finite extent: (axis_u, half_u, axis_v, half_v)
    extent: tuple | None = None


@dataclass(frozen=True)
class Box:
    center: tuple
    half_size: tuple
    yaw: float = 0.0
    color: tuple = (190, 120, 90)


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder (axis along world y) spanning ``y_min..y_max``."""

    center_xz: tuple
    radius: float
    y_min: float
    y_max: float
    color: tuple = (90, 140, 180)


@dataclass
class ScenePair:
    Z_a: np.ndarray
    C_a: np.ndarray
    Z_b: np.ndarray
    C_b: np.ndarray
    intrinsics: Intrinsics
    ground_truth: RigidTransform | None = None
    provenance: str = "synthetic"
    name: str = ""

    def __post_init__(self):
        shape = self.intrinsics.shape
        for label, img in (("Z_a", self.Z_a), ("Z_b", self.Z_b)):
            if img.shape != shape:
                raise ValidationError(f"{label} shape {img.shape} != intrinsics {shape}")
        for label, img in (("C_a", self.C_a), ("C_b", self.C_b)):
            if img.shape != shape + (3,):
                raise ValidationError(f"{label} shape {img.shape} != intrinsics {shape}")


@dataclass
class SyntheticSceneSpec:
    primitives: list
    pose_a: RigidTransform
    pose_b: RigidTransform
    intrinsics: Intrinsics
    noise_mm: float = 0.0
    texture_scale: float = 1.0
    name: str = "synthetic"

    def __post_init__(self):
        if not self.primitives:
            raise ValidationError("scene needs at least one primitive")
        if self.noise_mm < 0:
            raise ValidationError("noise level must be non-negative")
        for p in self.primitives:
            sizes = ()
            if isinstance(p, Box):
                sizes = p.half_size
            elif isinstance(p, Cylinder):
                sizes = (p.radius, p.y_max - p.y_min)
            if any(s <= 0 for s in sizes):
                raise ValidationError(f"non-positive size in {p}")

    @property
    def ground_truth(self) -> RigidTransform:
        return self.pose_b.inverse() @ self.pose_a


# -- ray casting -------------------------------------------------------------

def _rays(K: Intrinsics, pose: RigidTransform):
    jj, ii = np.indices(K.shape, dtype=float)
    d_cam = np.stack([(ii - K.ic) / K.fx, (jj - K.jc) / K.fy, np.ones_like(ii)], axis=-1)
    d = d_cam.reshape(-1, 3) @ pose.rotation.T
    o = np.broadcast_to(pose.translation, d.shape)
    return o, d


def _hit_plane(p: Plane, o, d):
    n = np.asarray(p.normal, float)
    n = n / np.linalg.norm(n)
    p0 = np.asarray(p.point, float)
    den = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - o) @ n) / den
    t = np.where((np.abs(den) > 1e-12) & (t > 0), t, np.inf)
    if p.extent is not None:
        au, hu, av, hv = p.extent
        X = o + t[:, None] * d
        rel = X - p0
        inside = (np.abs(rel @ np.asarray(au, float)) <= hu) & (np.abs(rel @ np.asarray(av, float)) <= hv)
        t = np.where(inside, t, np.inf)
    return t


def _hit_box(b: Box, o, d):
    c, s = np.cos(b.yaw), np.sin(b.yaw)
    # world -> box frame is a rotation by -yaw about y
    Rt = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    ol = (o - np.asarray(b.center, float)) @ Rt.T
    dl = d @ Rt.T
    h = np.asarray(b.half_size, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - ol) / dl
        t2 = (h - ol) / dl
    lo = np.nanmax(np.minimum(t1, t2), axis=1)
    hi = np.nanmin(np.maximum(t1, t2), axis=1)
    return np.where((hi >= lo) & (lo > 0), lo, np.inf)


def _hit_cylinder(cy: Cylinder, o, d):
    cx, cz = cy.center_xz
    ox, oz = o[:, 0] - cx, o[:, 2] - cz
    a = d[:, 0] ** 2 + d[:, 2] ** 2
    bq = 2 * (ox * d[:, 0] + oz * d[:, 2])
    cq = ox ** 2 + oz ** 2 - cy.radius ** 2
    disc = bq * bq - 4 * a * cq
    best = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        for t in ((-bq - sq) / (2 * a), (-bq + sq) / (2 * a)):
            y = o[:, 1] + t * d[:, 1]
            ok = (t > 0) & (y >= cy.y_min) & (y <= cy.y_max)
            best = np.where(ok & (t < best), t, best)
        for yc in (cy.y_min, cy.y_max):
            t = (yc - o[:, 1]) / d[:, 1]
            x = o[:, 0] + t * d[:, 0] - cx
            z = o[:, 2] + t * d[:, 2] - cz
            ok = (t > 0) & (x * x + z * z <= cy.radius ** 2)
            best = np.where(ok & (t < best), t, best)
    return best


_HITTERS = {Plane: _hit_plane, Box: _hit_box, Cylinder: _hit_cylinder}


def texture(X: np.ndarray, base, scale=1.0) -> np.ndarray:
    """Smooth view-independent colour pattern on world points (N, 3)."""
    x, y, z = X[:, 0] / scale, X[:, 1] / scale, X[:, 2] / scale
    s = (0.5 * np.sin(2 * np.pi * (x + 0.35 * y) / 0.55)
         + 0.3 * np.sin(2 * np.pi * (z - 0.6 * y) / 0.4)
         + 0.2 * np.cos(2 * np.pi * (x - z) / 0.9))
    base = np.asarray(base, float)
    tint = np.stack([np.sin(2 * np.pi * z / 1.3), np.cos(2 * np.pi * x / 1.1),
                     np.sin(2 * np.pi * (x + z) / 1.7)], axis=1)
    return base * (0.8 + 0.18 * s[:, None]) + 12.0 * tint


def render(primitives, pose: RigidTransform, K: Intrinsics, texture_scale=1.0):
    """Depth (float metres, inf = no hit) and colour (float) from one pose."""
    o, d = _rays(K, pose)
    t = np.full(len(d), np.inf)
    which = np.full(len(d), -1)
    for k, prim in enumerate(primitives):
        tk = _HITTERS[type(prim)](prim, o, d)
        closer = tk < t
        t = np.where(closer, tk, t)
        which = np.where(closer, k, which)
    X = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    color = np.zeros((len(d), 3))
    for k, prim in enumerate(primitives):
        sel = which == k
        if np.any(sel):
            color[sel] = texture(X[sel], prim.color, texture_scale)
    # rays have unit z in the camera frame, so t is the camera depth
    return t.reshape(K.shape), color.reshape(K.shape + (3,))


def _to_depth(t, K: Intrinsics, noise_mm, rng):
    mm = t * 1000.0
    if noise_mm > 0:
        mm = mm + rng.normal(0.0, noise_mm, size=mm.shape)
    raw = np.floor(mm / K.depth_scale + 0.5)
    ok = np.isfinite(raw) & (raw >= 1) & (raw <= 65535)
    return np.where(ok, raw, 0).astype(np.uint16)


def gen_synthetic_scene(spec: SyntheticSceneSpec, seed=0) -> ScenePair:
    """Ray-cast depth and colour for both cameras of ``spec``."""
    rng = np.random.default_rng(seed)
    K = spec.intrinsics
    out = []
    for pose in (spec.pose_a, spec.pose_b):
        t, color = render(spec.primitives, pose, K, spec.texture_scale)
        if not np.any(np.isfinite(t)):
            raise GenerationError(f"camera at {pose.translation.tolist()} sees no primitive")
        Z = _to_depth(t, K, spec.noise_mm, rng)
        C = np.clip(np.floor(color + 0.5), 0, 255).astype(np.uint8)
        C[Z == 0] = 0
        out += [Z, C]
    return ScenePair(out[0], out[1], out[2], out[3], K, spec.ground_truth, "synthetic", spec.name)


# -- preset scenes ----------------------------------------------------------------

def room(with_box=True, with_cylinder=True):
    """A closed room seen from near its middle, with optional occluders."""
    prims = [
        Plane((0, 1.2, 0), (0, -1, 0), (150, 140, 120)),    # floor
        Plane((0, -1.6, 0), (0, 1, 0), (200, 200, 190)),    # ceiling
        Plane((0, 0, 4.5), (0, 0, -1), (140, 160, 170)),    # back wall
        Plane((-2.6, 0, 0), (1, 0, 0), (170, 150, 130)),    # left wall
        Plane((2.6, 0, 0), (-1, 0, 0), (150, 170, 140)),    # right wall
        Plane((0, 0, -2.5), (0, 0, 1), (160, 160, 160)),    # wall behind
    ]
    if with_box:
        prims.append(Box((0.7, 0.85, 2.9), (0.4, 0.35, 0.3), yaw=0.4, color=(180, 130, 100)))
    if with_cylinder:
        prims.append(Cylinder((-0.8, 2.4), 0.28, -0.3, 1.2, (110, 140, 170)))
    return prims


def pose_from(rotation_deg=(0, 0, 0), translation=(0, 0, 0)) -> RigidTransform:
    """Camera-to-world pose from rotations about x, y, z (degrees, applied as a
    single rotation vector) and a translation in metres."""
    return se3_exp(np.r_[translation, np.radians(rotation_deg)])


def relative_case(yaw_deg=0.0, pitch_deg=0.0, roll_deg=0.0, translation=(0, 0, 0),
                  K: Intrinsics | None = None, primitives=None, noise_mm=0.0, name="case"):
    K = K or Intrinsics.default(160, 120)
    return SyntheticSceneSpec(primitives if primitives is not None else room(),
                              RigidTransform.identity(),
                              pose_from((pitch_deg, yaw_deg, roll_deg), translation),
                              K, noise_mm, name=name)


def occlusion_scene(K: Intrinsics | None = None) -> SyntheticSceneSpec:
    """A foreground cylinder visible to b but outside a's field of view,
    hiding part of a background wall that a does see."""
    K = K or Intrinsics.default(160, 120)
    prims = [Plane((0, 0, 4.0), (0, 0, -1), (140, 160, 170)),
             Plane((0, 1.2, 0), (0, -1, 0), (150, 140, 120)),
             Cylinder((1.55, 1.3), 0.22, -1.0, 1.2, (200, 90, 80))]
    return SyntheticSceneSpec(prims, RigidTransform.identity(),
                              pose_from((0, 12, 0), (0.9, 0, 0)), K, name="occlusion")


def standard_scenes(K: Intrinsics | None = None):
    """Six overlapping two-view scenes; motions stay inside the range ICP
    recovers from an identity start for every sampling seed tried."""
    K = K or Intrinsics.default(320, 240)
    specs = [
        relative_case(3, 0, 0, (0.05, 0.0, 0.02), K, name="scene1-small"),
        relative_case(-5, 1, 0, (-0.1, 0.02, 0.03), K, name="scene2-pan-left"),
        relative_case(6, -2, 1, (0.12, -0.03, -0.03), K, name="scene3-pan-right"),
        relative_case(4, 0, 0, (0.05, 0.0, 0.3), K, name="scene4-forward"),
        relative_case(-4, 4, -2, (0.0, 0.1, -0.25), K, name="scene5-backward"),
        relative_case(1.5, 0, 0, (0.03, 0.0, 0.0), K, name="scene6-near-identical"),
    ]
    return specs


def disjoint_scene(K: Intrinsics | None = None) -> SyntheticSceneSpec:
    K = K or Intrinsics.default(160, 120)
    return relative_case(180, 0, 0, (0, 0, 0), K, name="disjoint")


def icp_suite(n=20, seed=2024, K: Intrinsics | None = None):
    """Random relative poses with rotation <= 15 deg and translation <= 0.3 m,
    in rooms with a box and a cylinder occluder."""
    K = K or Intrinsics.default(160, 120)
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(15.0) * (k + 1) / n
        tdir = rng.normal(size=3)
        tdir /= np.linalg.norm(tdir)
        trans = 0.3 * rng.uniform(0.2, 1.0) * tdir
        pose = se3_exp(np.r_[trans, axis * angle])
        specs.append(SyntheticSceneSpec(room(), RigidTransform.identity(), pose, K,
                                        name=f"suite-{k:02d}"))
    return specs


def fov_overlap(pair: ScenePair, tol_mm=20.0) -> float:
    """Fraction of b's valid pixels whose surface point is also seen by a."""
    from .geometry import warp_pixels

    K, M = pair.intrinsics, pair.ground_truth.inverse()
    jj, ii = np.nonzero(pair.Z_b)
    if len(ii) == 0:
        return 0.0
    pi, pj, z, ok = warp_pixels(M, ii, jj, pair.Z_b[jj, ii], K)
    ci, cj = np.floor(pi + 0.5), np.floor(pj + 0.5)
    ok &= (ci >= 0) & (ci < K.width) & (cj >= 0) & (cj < K.height)
    ci = np.where(ok, ci, 0).astype(int)
    cj = np.where(ok, cj, 0).astype(int)
    za = pair.Z_a[cj, ci] * K.depth_scale
    ok &= (za > 0) & (np.abs(za - z * 1000.0) < tol_mm)
    return float(np.mean(ok))


def with_noise(spec: SyntheticSceneSpec, noise_mm) -> SyntheticSceneSpec:
    return replace(spec, noise_mm=noise_mm)
