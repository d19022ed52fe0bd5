import numpy as np
import pytest
from scipy.linalg import expm

from rprr.errors import (DegenerateGeometryError, InsufficientDataError, NoNormalError,
                         ProtocolError, SessionAbort, ValidationError)
from rprr.geometry import GENERATORS, Intrinsics, RigidTransform, backproject, se3_exp
from rprr.icp import (MATCH_DTYPE, SAMPLE_DTYPE, Correspondences, IcpConfig, NormalSystem,
                      assemble_system, compute_weight, dequantize_normals, estimate_normal,
                      find_correspondence, icp_run_distributed, icp_run_local, icp_run_pair,
                      jacobian, quantize_normals, sample_points, solve_motion)
from rprr.protocol import MessageType, PeerThread, make_link
from rprr.scenes import gen_synthetic_scene, relative_case


def rot_err_deg(M, gt):
    return np.degrees((gt.inverse() @ M).angle())


def trans_err_mm(M, gt):
    return 1000 * np.linalg.norm(M.translation - gt.translation)


# -- sampling -------------------------------------------------------------------

def test_sample_points_full_vga_frame():
    Z = np.full((480, 640), 1500, np.uint16)
    s = sample_points(Z, 250, seed=3)
    assert len(s) == 250 and np.all(s.z > 0)
    assert len(set(zip(s.i.tolist(), s.j.tolist()))) == 250


def test_sample_points_is_deterministic_and_stratified():
    Z = np.zeros((60, 80), np.uint16)
    Z[10:50, 5:75] = 1000
    a, b = sample_points(Z, 40, 7), sample_points(Z, 40, 7)
    assert np.array_equal(a.i, b.i) and np.array_equal(a.j, b.j)
    # one sample per stratum of the row-major valid-pixel list
    flat = np.flatnonzero(Z.ravel())
    rank = np.searchsorted(flat, a.j * 80 + a.i)
    assert np.array_equal(rank // (len(flat) // 40), np.arange(40))


def test_sample_points_all_invalid():
    with pytest.raises(InsufficientDataError):
        sample_points(np.zeros((10, 10), np.uint16), 5, 0)


# -- normals ----------------------------------------------------------------------

def test_normal_of_fronto_parallel_plane():
    K = Intrinsics.default(64, 48)
    Z = np.full((48, 64), 1000, np.uint16)
    assert np.allclose(estimate_normal(Z, 30, 20, K), [0, 0, -1], atol=1e-6)


def test_normal_of_45_degree_ramp():
    # plane z = z0 + x: (1, 0, -1).X = -z0, normal (1, 0, -1)/sqrt2 faces the camera
    K = Intrinsics(48.0, 48.0, 32.0, 24.0, 64, 48, depth_scale=0.05)
    jj, ii = np.indices(K.shape)
    u = (ii - K.ic) / K.fx
    z0 = 1.5
    zm = z0 / (1 - u)          # solves z = z0 + x with x = u z
    Z = np.floor(zm / K.to_meters + 0.5).astype(np.uint16)
    n = estimate_normal(Z, 32, 24, K)
    expect = np.array([1.0, 0.0, -1.0]) / np.sqrt(2)
    assert np.allclose(n, expect, atol=1e-3)
    # camera-facing: n . p < 0
    assert n @ backproject(32, 24, Z[24, 32], K) < 0


def test_isolated_pixel_has_no_normal():
    K = Intrinsics.default(64, 48)
    Z = np.zeros((48, 64), np.uint16)
    Z[20, 20] = 1000
    with pytest.raises(NoNormalError):
        estimate_normal(Z, 20, 20, K)


def test_octahedral_normals_round_trip(rng):
    n = rng.normal(size=(500, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    q = quantize_normals(n)
    rec = np.zeros(len(n), MATCH_DTYPE)
    rec["n0"], rec["n1"] = q[:, 0], q[:, 1]
    assert np.max(np.abs(dequantize_normals(rec) - n)) < 1e-4


# -- correspondences ----------------------------------------------------------------

def test_correspondence_of_own_pixel(small_pair):
    Z, K = small_pair.Z_a, small_pair.intrinsics
    assert find_correspondence((40, 30, int(Z[30, 40])), Z, K) == (40, 30, int(Z[30, 40]))


def test_correspondence_outside_frame(small_pair):
    Z, K = small_pair.Z_a, small_pair.intrinsics
    assert find_correspondence((-5.0, 30.0, 1000), Z, K) is None
    assert find_correspondence((40.0, 500.0, 1000), Z, K) is None


def test_correspondence_matches_brute_force_nearest_neighbour():
    K = Intrinsics.default(64, 64)
    spec = relative_case(0, 0, 0, (0, 0, 0), K)
    Z = gen_synthetic_scene(spec, 0).Z_a
    jj, ii = np.nonzero(Z)
    P = backproject(ii, jj, Z[jj, ii], K)
    M = se3_exp([0.003 * 3 * 2.5, 0, 0, 0, 0, 0])  # roughly a 3 px shift at the back wall
    rng = np.random.default_rng(5)
    checked = 0
    for k in rng.choice(len(ii), 60, replace=False):
        X = M.apply(P[k])
        pi = X[0] / X[2] * K.fx + K.ic
        pj = X[1] / X[2] * K.fy + K.jc
        m = find_correspondence((pi, pj, X[2] * 1000), Z, K, window=7, walk_steps=64)
        d2 = np.sum((P - X) ** 2, axis=1)
        if m is None:
            continue
        best = np.argmin(d2)
        assert np.isclose(np.sum((backproject(*m, K) - X) ** 2), d2[best], atol=1e-12)
        checked += 1
    assert checked >= 50


# -- weights ------------------------------------------------------------------------

def test_weight_examples():
    assert compute_weight(1000, 1000, 7.0) == 1.0
    assert compute_weight(1000, 900, 50) == pytest.approx(1 / 3)
    assert compute_weight(900, 1000, 50) == pytest.approx(50 / 10050)


def test_weight_clamps_and_bounds(rng):
    za, zb = rng.uniform(500, 3000, 200), rng.uniform(500, 3000, 200)
    w = compute_weight(za, zb, 20.0)
    assert np.all(w >= 0)
    near = zb <= za
    assert np.all(w[near] <= 1)
    with pytest.raises(ValidationError):
        compute_weight(1, 1, 0)


# -- linear system ------------------------------------------------------------------

def test_jacobian_matches_finite_differences(rng):
    for _ in range(5):
        X = rng.uniform([-1, -1, 1], [1, 1, 4])
        u, v, q = X[0] / X[2], X[1] / X[2], 1 / X[2]
        J = jacobian(u, v, q)
        h = 1e-7
        for k in range(6):
            Y = (expm(h * GENERATORS[k]) @ np.r_[X, 1])[:3]
            fd = (np.array([Y[0] / Y[2], Y[1] / Y[2], 1 / Y[2]]) - [u, v, q]) / h
            assert np.allclose(J[:, k], fd, atol=1e-5)


def test_jacobian_row_at_optical_axis():
    # hand expansion at u = v = 0, q = 1
    J = jacobian(0.0, 0.0, 1.0)
    assert np.array_equal(J, [[1, 0, 0, 0, 1, 0], [0, 1, 0, -1, 0, 0], [0, 0, -1, 0, 0, 0]])
    corr = Correspondences(np.array([[0, 0, 1.0]] * 6), np.array([[0, 0, 1.0]] * 6),
                           np.array([[0, 0, -1.0]] * 6), np.zeros(6, int))
    S = assemble_system(corr)
    # normal (0,0,-1) through z = 1: n' = (n_x, n_y, -d) = (0, 0, 1)
    assert np.array_equal(S.K[0], [0, 0, -1, 0, 0, 0])
    assert np.all(S.y == 0)


def three_planes(n_per=40, seed=0):
    """Points on three non-parallel planes with their normals."""
    rng = np.random.default_rng(seed)
    normals = np.array([[0, 0, -1.0], [0.6, 0, -0.8], [0, -0.6, -0.8]])
    pts, ns = [], []
    for n in normals:
        d = -2.0
        P = rng.uniform([-0.8, -0.6, 0], [0.8, 0.6, 0], (n_per, 3))
        P[:, 2] = (d - n[0] * P[:, 0] - n[1] * P[:, 1]) / n[2]
        pts.append(P)
        ns.append(np.tile(n, (n_per, 1)))
    return np.vstack(pts), np.vstack(ns)


def exact_system(b_true, seed=0):
    S_pts, N = three_planes(seed=seed)
    E = se3_exp(b_true)
    T = E.apply(S_pts)
    Nt = N @ E.rotation.T
    corr = Correspondences(S_pts, T, Nt, np.zeros(len(T), int))
    return assemble_system(corr)


def test_one_step_exactness():
    b_true = np.array([2e-5, -1e-5, 3e-5, 1e-5, -2e-5, 1.5e-5])
    S = exact_system(b_true)
    unit = NormalSystem(S.K, np.ones_like(S.W), S.y, S.residual)
    assert np.max(np.abs(solve_motion(unit) - b_true)) < 1e-6


def test_zero_residual_solves_to_zero():
    S = exact_system(np.zeros(6))
    assert np.allclose(S.y, 0, atol=1e-15)
    assert np.allclose(solve_motion(S), 0, atol=1e-12)


def test_weighted_solution_is_least_squares_minimum(rng):
    S = exact_system(np.array([1e-3, 0, 2e-3, 1e-3, 3e-3, 0]))
    y = S.y + rng.normal(0, 1e-4, len(S.y))
    Sn = NormalSystem(S.K, S.W, y, -y)
    b = solve_motion(Sn)
    sw = np.sqrt(S.W)
    best = np.linalg.norm(sw * (S.K @ b - y))
    for _ in range(20):
        other = b + rng.normal(0, 1e-4, 6)
        assert best <= np.linalg.norm(sw * (S.K @ other - y)) + 1e-15


def test_single_plane_is_degenerate():
    S_pts, N = three_planes()
    keep = slice(0, 40)
    corr = Correspondences(S_pts[keep], S_pts[keep], N[keep], np.zeros(40, int))
    with pytest.raises(DegenerateGeometryError):
        solve_motion(assemble_system(corr))


def test_too_few_correspondences():
    corr = Correspondences(np.ones((5, 3)), np.ones((5, 3)), np.ones((5, 3)), np.zeros(5, int))
    with pytest.raises(InsufficientDataError):
        assemble_system(corr)


# -- full runs ----------------------------------------------------------------------

def test_identical_frames_converge_in_one_iteration(small_pair):
    K = small_pair.intrinsics
    res = icp_run_local(small_pair.Z_a, small_pair.Z_a, K)
    assert res.converged and res.iterations == 1
    assert np.linalg.norm(res.transform.translation) < 1e-4
    assert np.degrees(res.transform.angle()) < 0.01
    # matches travel as quantised planes, so "zero" is the quantisation floor
    assert res.costs[0] < 1e-6


def test_recovers_yaw_and_lateral_motion():
    pair = gen_synthetic_scene(relative_case(5, 0, 0, (0.1, 0, 0)), 0)
    res = icp_run_local(pair.Z_a, pair.Z_b, pair.intrinsics)
    assert res.converged
    assert rot_err_deg(res.transform, pair.ground_truth) <= 0.5
    assert trans_err_mm(res.transform, pair.ground_truth) <= 10


def test_cost_decreases_over_first_iterations():
    pair = gen_synthetic_scene(relative_case(5, 0, 0, (0, 0, 0)), 0)
    res = icp_run_local(pair.Z_a, pair.Z_b, pair.intrinsics)
    assert res.iterations >= 3
    c = res.costs
    assert c[0] > c[1] > c[2]


def test_accepted_costs_never_increase(small_pair):
    res = icp_run_local(small_pair.Z_a, small_pair.Z_b, small_pair.intrinsics)
    acc = [c for c, a in zip(res.costs, res.accepted) if a]
    assert all(x >= y for x, y in zip(acc, acc[1:]))


def test_swapped_roles_give_the_inverse(small_pair):
    K = small_pair.intrinsics
    ab = icp_run_local(small_pair.Z_a, small_pair.Z_b, K)
    ba = icp_run_local(small_pair.Z_b, small_pair.Z_a, K)
    assert ab.converged and ba.converged
    assert rot_err_deg(ba.transform, ab.transform.inverse()) <= 0.1
    assert trans_err_mm(ba.transform, ab.transform.inverse()) <= 2


def test_zero_overlap_raises(small_pair):
    # a sees only the left part of the image, b only the right part
    Z_a, Z_b = small_pair.Z_a.copy(), small_pair.Z_b.copy()
    Z_a[:, 70:] = 0
    Z_b[:, :90] = 0
    with pytest.raises(InsufficientDataError):
        icp_run_local(Z_a, Z_b, small_pair.intrinsics)


def test_non_convergence_returns_best_estimate():
    pair = gen_synthetic_scene(relative_case(10, 0, 0, (0.1, 0, 0.1)), 0)
    res = icp_run_local(pair.Z_a, pair.Z_b, pair.intrinsics, IcpConfig(max_iterations=2))
    assert not res.converged and res.iterations == 2
    best = int(np.argmin(res.costs))
    expect = RigidTransform.identity() if best == 0 else res.trace[best - 1]
    assert res.transform == expect


def test_local_run_is_deterministic(small_pair):
    K = small_pair.intrinsics
    a = icp_run_local(small_pair.Z_a, small_pair.Z_b, K, seed=11)
    b = icp_run_local(small_pair.Z_a, small_pair.Z_b, K, seed=11)
    assert a.transform == b.transform and a.costs == b.costs


def test_config_validation():
    with pytest.raises(ValidationError):
        IcpConfig(n_samples=5)
    with pytest.raises(ValidationError):
        IcpConfig(neighborhood=6)
    with pytest.raises(ValidationError):
        IcpConfig(max_iterations=0)


# -- distributed --------------------------------------------------------------------

@pytest.mark.parametrize("transport", ["inprocess", "socket"])
def test_distributed_equals_local(small_pair, transport):
    K = small_pair.intrinsics
    local = icp_run_local(small_pair.Z_a, small_pair.Z_b, K, seed=4)
    ra, rb, log = icp_run_pair(small_pair.Z_a, small_pair.Z_b, K, seed=4, transport=transport)
    assert ra.transform == local.transform
    assert ra.costs == local.costs and ra.iterations == local.iterations
    assert rb.transform == local.transform and rb.converged == local.converged


def test_wire_sizes_per_iteration(small_pair):
    K = small_pair.intrinsics
    ra, _, log = icp_run_pair(small_pair.Z_a, small_pair.Z_b, K)
    samples = log.sizes("a", MessageType.SAMPLES)
    assert samples == [16 + 250 * SAMPLE_DTYPE.itemsize] * ra.iterations == [1516] * ra.iterations
    assert log.total("a", MessageType.SAMPLES) == ra.iterations * 1516
    matches = log.sizes("b", MessageType.MATCHES)
    # the first reply also carries b's 250 own samples (10 bytes each)
    assert matches[0] == 16 + 250 * 6 + 250 * 10
    assert matches[1:] == [16 + 250 * 6] * (ra.iterations - 1)
    assert log.sizes("a", MessageType.HELLO) == [16 + 9]
    final = log.sizes("a", MessageType.CONVERGED) + log.sizes("a", MessageType.POSE_UPDATE)
    assert final == [16 + 96]


def test_role_mismatch_is_a_protocol_error(small_pair):
    K = small_pair.intrinsics
    link = make_link("inprocess")
    peer = PeerThread(icp_run_distributed, "a", link.endpoint("b"), small_pair.Z_b, K)
    peer.start()
    with pytest.raises(ProtocolError):
        icp_run_distributed("a", link.endpoint("a"), small_pair.Z_a, K)
    link.close()
    with pytest.raises((ProtocolError, SessionAbort)):
        peer.join_result(5)
    with pytest.raises(ProtocolError):
        icp_run_distributed("c", link.endpoint("a"), small_pair.Z_a, K)


def test_transport_failure_aborts(small_pair):
    K = small_pair.intrinsics
    link = make_link("socket")
    link.endpoint("b").close()
    with pytest.raises((SessionAbort, ProtocolError)):
        icp_run_distributed("a", link.endpoint("a"), small_pair.Z_a, K)
    link.close()
