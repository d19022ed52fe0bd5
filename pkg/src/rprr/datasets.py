"""Loading and saving two-view RGB-D frame pairs.

Two on-disk layouts are understood:

``raw``
    A directory holding ``a_depth.pgm``, ``a_color.ppm``, ``b_depth.pgm``,
    ``b_color.ppm`` (16-bit PGM depth, 8-bit PPM colour), an
    ``intrinsics.txt`` of ``key = value`` lines (fx, fy, ic, jc, width,
    height, depth_scale) and optionally ``pose.txt`` with the 12 numbers of
    ``M_ab`` (rotation row-major, then translation).

``tum``
    A TUM RGB-D sequence directory (``rgb.txt``, ``depth.txt``, optional
    ``groundtruth.txt``). Depth PNGs store 1/5000 m per unit. Colour and
    depth are associated by nearest timestamp; the ground-truth pose of
    each frame is interpolated from the trajectory.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial.transform import Rotation, Slerp

from .errors import IngestionError, ValidationError
from .geometry import Intrinsics, RigidTransform
from .scenes import ScenePair

TUM_DEPTH_SCALE = 0.2  # mm per unit (1/5000 m)
TUM_INTRINSICS = dict(fx=525.0, fy=525.0, ic=319.5, jc=239.5, width=640, height=480,
                      depth_scale=TUM_DEPTH_SCALE)
RAW_FILES = ("a_depth.pgm", "a_color.ppm", "b_depth.pgm", "b_color.ppm")


# -- images ---------------------------------------------------------------------------

def read_depth(path) -> np.ndarray:
    """16-bit single-channel image (PGM or PNG) as uint16."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("I;16", "I;16B", "I;16L", "I", "L"):
                raise IngestionError(f"{path}: depth image has mode {im.mode}, expected 16-bit grey")
            arr = np.array(im)
    except FileNotFoundError:
        raise IngestionError(f"{path}: file not found") from None
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot decode image ({exc})") from None
    if arr.ndim != 2 or arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise IngestionError(f"{path}: depth values do not fit 16 bits")
    return arr.astype(np.uint16)


def read_color(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.array(im.convert("RGB"))
    except FileNotFoundError:
        raise IngestionError(f"{path}: file not found") from None
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot decode image ({exc})") from None
    return arr.astype(np.uint8)


def write_depth(path, Z):
    Image.fromarray(np.asarray(Z, dtype=np.uint16)).save(path)


def write_color(path, C):
    Image.fromarray(np.asarray(C, dtype=np.uint8), mode="RGB").save(path)


# -- key = value files ----------------------------------------------------------------

def parse_key_values(text, source="<text>") -> dict:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestionError(f"{source}:{n}: expected key = value, got {line!r}")
        k, v = (x.strip() for x in line.split("=", 1))
        if not k:
            raise IngestionError(f"{source}:{n}: empty key")
        out[k] = v
    return out


def read_intrinsics(path) -> Intrinsics:
    path = Path(path)
    try:
        kv = parse_key_values(path.read_text(), str(path))
    except FileNotFoundError:
        raise IngestionError(f"{path}: file not found") from None
    aliases = {"cx": "ic", "cy": "jc"}
    kv = {aliases.get(k, k): v for k, v in kv.items()}
    missing = {"fx", "fy", "ic", "jc", "width", "height"} - kv.keys()
    if missing:
        raise IngestionError(f"{path}: missing {', '.join(sorted(missing))}")
    try:
        return Intrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["ic"]), float(kv["jc"]),
                          int(kv["width"]), int(kv["height"]), float(kv.get("depth_scale", 1.0)))
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from None


def write_intrinsics(path, K: Intrinsics):
    Path(path).write_text(
        f"fx = {K.fx!r}\nfy = {K.fy!r}\nic = {K.ic!r}\njc = {K.jc!r}\n"
        f"width = {K.width}\nheight = {K.height}\ndepth_scale = {K.depth_scale!r}\n")


# -- raw layout -----------------------------------------------------------------------

def save_scene_pair(pair: ScenePair, directory):
    """Write ``pair`` in the raw layout (pose.txt only with ground truth)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_depth(d / RAW_FILES[0], pair.Z_a)
    write_color(d / RAW_FILES[1], pair.C_a)
    write_depth(d / RAW_FILES[2], pair.Z_b)
    write_color(d / RAW_FILES[3], pair.C_b)
    write_intrinsics(d / "intrinsics.txt", pair.intrinsics)
    if pair.ground_truth is not None:
        np.savetxt(d / "pose.txt", pair.ground_truth.to_array()[None], fmt="%.17g")


def _load_raw(d: Path) -> ScenePair:
    K = read_intrinsics(d / "intrinsics.txt")
    Z_a, C_a = read_depth(d / RAW_FILES[0]), read_color(d / RAW_FILES[1])
    Z_b, C_b = read_depth(d / RAW_FILES[2]), read_color(d / RAW_FILES[3])
    for name, arr in zip(RAW_FILES, (Z_a, C_a, Z_b, C_b)):
        if arr.shape[:2] != K.shape:
            raise IngestionError(f"{d / name}: size {arr.shape[1]}x{arr.shape[0]} "
                                 f"does not match intrinsics {K.width}x{K.height}")
    gt = None
    if (d / "pose.txt").exists():
        try:
            gt = RigidTransform.from_array(np.loadtxt(d / "pose.txt").ravel())
        except (ValueError, ValidationError) as exc:
            raise IngestionError(f"{d / 'pose.txt'}: {exc}") from None
    return ScenePair(Z_a, C_a, Z_b, C_b, K, gt, provenance=f"raw:{d}", name=d.name)


# -- TUM layout -----------------------------------------------------------------------

def read_tum_list(path):
    """``timestamp value...`` lines of a TUM list file as (times, rows)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise IngestionError(f"{path}: file not found") from None
    times, rows = [], []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            times.append(float(parts[0]))
        except ValueError:
            raise IngestionError(f"{path}:{n}: bad timestamp {parts[0]!r}") from None
        rows.append(parts[1:])
    if not times:
        raise IngestionError(f"{path}: no entries")
    return np.array(times), rows


def associate(t_from, t_to, max_dt=0.02):
    """Index into ``t_to`` of the nearest timestamp for each of ``t_from``,
    -1 where the gap exceeds ``max_dt`` seconds."""
    t_to = np.asarray(t_to)
    order = np.argsort(t_to)
    s = t_to[order]
    k = np.clip(np.searchsorted(s, t_from), 1, len(s) - 1) if len(s) > 1 else np.zeros(len(t_from), int)
    left, right = s[np.maximum(k - 1, 0)], s[k]
    pick = np.where(np.abs(t_from - left) <= np.abs(right - t_from), np.maximum(k - 1, 0), k)
    idx = order[pick]
    return np.where(np.abs(t_to[idx] - t_from) <= max_dt, idx, -1)


class Trajectory:
    """Camera-to-world poses ``tx ty tz qx qy qz qw`` with interpolation:
    linear in translation, spherical-linear in rotation."""

    def __init__(self, times, poses):
        times = np.asarray(times, dtype=float)
        poses = np.asarray(poses, dtype=float)
        order = np.argsort(times)
        self.times, poses = times[order], poses[order]
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise IngestionError("trajectory needs >= 2 strictly increasing timestamps")
        self.translations = poses[:, :3]
        self._slerp = Slerp(self.times, Rotation.from_quat(poses[:, 3:7]))

    @classmethod
    def load(cls, path):
        t, rows = read_tum_list(path)
        try:
            poses = np.array([[float(x) for x in r[:7]] for r in rows])
        except ValueError as exc:
            raise IngestionError(f"{path}: {exc}") from None
        if poses.shape[1:] != (7,):
            raise IngestionError(f"{path}: expected 7 pose values per line")
        return cls(t, poses)

    def pose(self, t) -> RigidTransform:
        if not self.times[0] <= t <= self.times[-1]:
            raise IngestionError(f"timestamp {t} outside the trajectory")
        R = self._slerp([t]).as_matrix()[0]
        tr = np.array([np.interp(t, self.times, self.translations[:, k]) for k in range(3)])
        return RigidTransform.from_matrix(np.r_[np.c_[R, tr], [[0, 0, 0, 1]]], orthonormalize=True)


def _load_tum(d: Path, index, gap, intrinsics, max_dt) -> ScenePair:
    K = intrinsics or Intrinsics(**TUM_INTRINSICS)
    t_rgb, rgb = read_tum_list(d / "rgb.txt")
    t_dep, dep = read_tum_list(d / "depth.txt")
    match = associate(t_rgb, t_dep, max_dt)
    frames = [(t_rgb[k], rgb[k][0], dep[m][0]) for k, m in enumerate(match) if m >= 0]
    if index < 0 or gap < 1 or index + gap >= len(frames):
        raise IngestionError(f"{d}: frames {index} and {index + gap} not available "
                             f"({len(frames)} associated pairs)")
    fa, fb = frames[index], frames[index + gap]
    Z_a, C_a = read_depth(d / fa[2]), read_color(d / fa[1])
    Z_b, C_b = read_depth(d / fb[2]), read_color(d / fb[1])
    for name, arr in ((fa[2], Z_a), (fa[1], C_a), (fb[2], Z_b), (fb[1], C_b)):
        if arr.shape[:2] != K.shape:
            raise IngestionError(f"{d / name}: size does not match intrinsics")
    gt = None
    if (d / "groundtruth.txt").exists():
        traj = Trajectory.load(d / "groundtruth.txt")
        gt = traj.pose(fb[0]).inverse() @ traj.pose(fa[0])
    return ScenePair(Z_a, C_a, Z_b, C_b, K, gt, provenance=f"tum:{d}#{index}+{gap}",
                     name=f"{d.name}-{index}")


def load_scene_pair(path, format="raw", index=0, gap=10, intrinsics: Intrinsics | None = None,
                    max_dt=0.02) -> ScenePair:
    """Load a frame pair from disk (see module docstring for layouts).

    ``index``/``gap`` pick frames ``index`` and ``index + gap`` of a TUM
    sequence; ``intrinsics`` overrides the TUM defaults.
    """
    d = Path(os.fspath(path))
    if not d.is_dir():
        raise IngestionError(f"{d}: not a directory")
    if format == "raw":
        return _load_raw(d)
    if format == "tum":
        return _load_tum(d, index, gap, intrinsics, max_dt)
    raise IngestionError(f"unknown dataset format {format!r}")
