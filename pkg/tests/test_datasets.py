import math

import numpy as np
import pytest
from PIL import Image

from rprr.datasets import (Trajectory, associate, load_scene_pair, parse_key_values, read_depth,
                           read_intrinsics, save_scene_pair)
from rprr.errors import IngestionError


def quat_matrix(qx, qy, qz, qw):
    """Rotation matrix of a unit quaternion, written out by hand."""
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)]])


def pose4(row):
    T = np.eye(4)
    T[:3, :3] = quat_matrix(*row[3:])
    T[:3, 3] = row[:3]
    return T


def test_raw_round_trip(tmp_path, small_pair):
    save_scene_pair(small_pair, tmp_path)
    q = load_scene_pair(tmp_path)
    for f in ("Z_a", "C_a", "Z_b", "C_b"):
        assert np.array_equal(getattr(q, f), getattr(small_pair, f))
    assert q.intrinsics == small_pair.intrinsics
    assert np.array_equal(q.ground_truth.to_array(), small_pair.ground_truth.to_array())


def test_raw_size_mismatch_names_the_file(tmp_path, small_pair):
    save_scene_pair(small_pair, tmp_path)
    Image.fromarray(np.zeros((10, 10), np.uint16)).save(tmp_path / "b_depth.pgm")
    with pytest.raises(IngestionError, match="b_depth.pgm"):
        load_scene_pair(tmp_path)


def test_corrupt_image(tmp_path):
    (tmp_path / "d.png").write_bytes(b"\x89PNG\r\n\x1a\n" + b"garbage" * 10)
    with pytest.raises(IngestionError, match="d.png"):
        read_depth(tmp_path / "d.png")
    with pytest.raises(IngestionError, match="not found"):
        read_depth(tmp_path / "missing.png")


def test_key_values_and_intrinsics(tmp_path):
    assert parse_key_values("a = 1  # note\n\nb=x") == {"a": "1", "b": "x"}
    with pytest.raises(IngestionError, match=":2"):
        parse_key_values("a = 1\nnonsense")
    p = tmp_path / "k.txt"
    p.write_text("fx=500\nfy=500\ncx=320\ncy=240\nwidth=640\nheight=480\n")
    K = read_intrinsics(p)
    assert (K.ic, K.jc, K.depth_scale) == (320.0, 240.0, 1.0)
    p.write_text("fx=500\n")
    with pytest.raises(IngestionError, match="missing"):
        read_intrinsics(p)


def test_associate():
    idx = associate(np.array([1.0, 2.0, 3.0]), np.array([2.005, 0.99, 9.0]), max_dt=0.02)
    assert idx.tolist() == [1, 0, -1]


def test_trajectory_interpolation():
    half = math.sin(math.radians(30)), math.cos(math.radians(30))   # 60 deg about z
    traj = Trajectory([0.0, 1.0], [[0, 0, 0, 0, 0, 0, 1], [2, 0, 0, 0, 0, half[0], half[1]]])
    T = traj.pose(0.5)
    assert np.allclose(T.translation, [1, 0, 0])
    assert math.degrees(T.angle()) == pytest.approx(30.0)
    with pytest.raises(IngestionError):
        traj.pose(1.5)


def write_tum(d, n=12, poses=None):
    """A tiny TUM-layout sequence: constant depth, one colour per frame."""
    (d / "rgb").mkdir()
    (d / "depth").mkdir()
    rgb, dep, gt = ["# rgb"], ["# depth"], ["# groundtruth"]
    for k in range(n):
        t = 100.0 + 0.1 * k
        Image.fromarray(np.full((480, 640, 3), k, np.uint8)).save(d / f"rgb/{k}.png")
        Image.fromarray(np.full((480, 640), 5000 + k, np.uint16)).save(d / f"depth/{k}.png")
        rgb.append(f"{t:.6f} rgb/{k}.png")
        dep.append(f"{t + 0.004:.6f} depth/{k}.png")
        row = poses[k] if poses is not None else [0, 0, 0, 0, 0, 0, 1]
        gt.append(f"{t:.6f} " + " ".join(str(v) for v in row))
    for name, lines in (("rgb.txt", rgb), ("depth.txt", dep), ("groundtruth.txt", gt)):
        (d / name).write_text("\n".join(lines) + "\n")


def test_tum_identity_gap(tmp_path):
    write_tum(tmp_path)
    p = load_scene_pair(tmp_path, "tum", index=1, gap=10)
    assert p.Z_a[0, 0] == 5001 and p.Z_b[0, 0] == 5011
    assert p.C_b[0, 0, 0] == 11
    assert p.intrinsics.depth_scale == 0.2          # 5000 units -> 1000 mm
    assert np.allclose(p.ground_truth.matrix, np.eye(4))


def test_tum_ground_truth_matches_hand_computation(tmp_path):
    rng = np.random.default_rng(3)
    poses = []
    for k in range(12):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        poses.append(list(rng.uniform(-1, 1, 3)) + list(q))
    write_tum(tmp_path, poses=poses)
    p = load_scene_pair(tmp_path, "tum", index=0, gap=10)
    expect = np.linalg.inv(pose4(poses[10])) @ pose4(poses[0])
    assert np.allclose(p.ground_truth.matrix, expect, atol=1e-9)


def test_tum_errors(tmp_path):
    write_tum(tmp_path, n=5)
    with pytest.raises(IngestionError, match="not available"):
        load_scene_pair(tmp_path, "tum", gap=10)
    with pytest.raises(IngestionError, match="not a directory"):
        load_scene_pair(tmp_path / "nope")
    with pytest.raises(IngestionError, match="format"):
        load_scene_pair(tmp_path, "zip")
