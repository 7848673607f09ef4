import numpy as np
import pytest

from tbsim.geometry import (
    Obb, Pose2, extend_constant_velocity, nearest_polyline, obb_overlap,
    obb_separation, rotation_matrix, wrap_angle,
)


def test_wrap_angle_boundaries():
    assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(0.1) == pytest.approx(0.1)


def test_wrap_angle_random_congruence():
    rng = np.random.default_rng(0)
    theta = rng.uniform(-50, 50, size=1000)
    w = wrap_angle(theta)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    residue = np.mod(w - theta + np.pi, 2 * np.pi) - np.pi
    np.testing.assert_allclose(residue, 0.0, atol=1e-9)


def test_wrap_angle_rejects_nan():
    with pytest.raises(ValueError):
        wrap_angle(np.nan)


def test_extend_constant_velocity():
    p = extend_constant_velocity(Pose2(0, 0, 0), 2.0, 5.0)
    assert (p.x, p.y, p.theta) == pytest.approx((10.0, 0.0, 0.0))
    q = extend_constant_velocity(Pose2(1, 2, 0.3), 0.0, 5.0)
    assert (q.x, q.y) == pytest.approx((1.0, 2.0))
    r = extend_constant_velocity(Pose2(0, 0, np.pi / 2), 1.0, 5.0)
    assert (r.x, r.y) == pytest.approx((0.0, 5.0), abs=1e-12)


# ---------------------------------------------------------------------------
# OBB overlap
# ---------------------------------------------------------------------------


def test_obb_disjoint_and_identical():
    a = Obb([0, 0], 0.0, [0.5, 0.5])
    b = Obb([2, 0], 0.0, [0.5, 0.5])
    assert not obb_overlap(a, b)
    assert obb_overlap(a, Obb([0, 0], 0.0, [0.5, 0.5]))


def test_obb_touching_counts_as_overlap():
    a = Obb([0, 0], 0.0, [0.5, 0.5])
    b = Obb([1.0, 0], 0.0, [0.5, 0.5])
    assert obb_overlap(a, b)


def _random_obb(rng):
    return Obb(rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi),
               rng.uniform(0.3, 3.0, 2))


def _overlap_oracle(a: Obb, b: Obb) -> bool:
    """Independent exact test: corner containment or edge crossing."""
    ca, cb = a.corners(), b.corners()
    if np.any(b.contains(ca)) or np.any(a.contains(cb)):
        return True
    # segment intersection between every edge pair
    def cross2(u, v):
        return u[0] * v[1] - u[1] * v[0]

    for i in range(4):
        p1, p2 = ca[i], ca[(i + 1) % 4]
        for j in range(4):
            q1, q2 = cb[j], cb[(j + 1) % 4]
            d1 = cross2(p2 - p1, q1 - p1)
            d2 = cross2(p2 - p1, q2 - p1)
            d3 = cross2(q2 - q1, p1 - q1)
            d4 = cross2(q2 - q1, p2 - q1)
            if d1 * d2 < 0 and d3 * d4 < 0:
                return True
    return False


def _sampled_containment(a: Obb, b: Obb, n: int = 40) -> bool:
    """Dense point-sampling oracle: any grid point of one box inside the other."""
    u = np.linspace(-1, 1, n)
    gx, gy = np.meshgrid(u, u)
    for src, dst in ((a, b), (b, a)):
        local = np.stack([gx * src.half_extent[0], gy * src.half_extent[1]], axis=-1)
        pts = src.center + local.reshape(-1, 2) @ src.axes()
        if np.any(dst.contains(pts)):
            return True
    return False


def test_obb_overlap_against_oracles_1000_pairs():
    rng = np.random.default_rng(42)
    marginal = 0
    for _ in range(1000):
        a, b = _random_obb(rng), _random_obb(rng)
        sep = obb_separation(a, b)
        if abs(sep) <= 1e-3:
            marginal += 1
            continue
        got = obb_overlap(a, b)
        assert got == _overlap_oracle(a, b)
        if got:
            # overlapping non-marginal pairs must also be caught by sampling
            assert _sampled_containment(a, b)
        else:
            assert not _sampled_containment(a, b)
    assert marginal < 20


def test_obb_overlap_against_shapely():
    shapely = pytest.importorskip("shapely")
    from shapely.geometry import Polygon

    rng = np.random.default_rng(7)
    for _ in range(500):
        a, b = _random_obb(rng), _random_obb(rng)
        if abs(obb_separation(a, b)) <= 1e-6:
            continue
        pa, pb = Polygon(a.corners()), Polygon(b.corners())
        assert obb_overlap(a, b) == pa.intersects(pb)


def test_obb_overlap_symmetry_and_rigid_invariance():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a, b = _random_obb(rng), _random_obb(rng)
        assert obb_overlap(a, b) == obb_overlap(b, a)
        if abs(obb_separation(a, b)) <= 1e-9:
            continue
        phi = rng.uniform(-np.pi, np.pi)
        shift = rng.uniform(-10, 10, 2)
        rot = rotation_matrix(phi)
        a2 = Obb(rot @ a.center + shift, a.yaw + phi, a.half_extent)
        b2 = Obb(rot @ b.center + shift, b.yaw + phi, b.half_extent)
        assert obb_overlap(a, b) == obb_overlap(a2, b2)


def test_obb_rejects_bad_extent():
    with pytest.raises(ValueError):
        Obb([0, 0], 0.0, [0.0, 1.0])


# ---------------------------------------------------------------------------
# nearest polyline
# ---------------------------------------------------------------------------


def _map_fixture():
    # 10 straight polylines along x at y = index, 5 nodes each, heading +x
    n_m, n_node = 10, 5
    pos = np.zeros((n_m, n_node, 2))
    for i in range(n_m):
        pos[i, :, 0] = np.arange(n_node)
        pos[i, :, 1] = float(i)
    direc = np.zeros_like(pos)
    direc[..., 0] = 1.0
    valid = np.ones((n_m, n_node), dtype=bool)
    return pos, direc, valid


def test_nearest_polyline_zero_distance():
    pos, direc, valid = _map_fixture()
    assert nearest_polyline(Pose2(1.0, 7.0, 0.0), pos, direc, valid) == 7


def test_nearest_polyline_tie_breaks_low_index():
    pos, direc, valid = _map_fixture()
    # midway between polylines 3 and 4, but restrict candidates to {3, 9}
    got = nearest_polyline(Pose2(0.0, 6.0, 0.0), pos, direc, valid,
                           candidates=np.array([9, 3]))
    assert got == 3


def test_nearest_polyline_direction_mode_prefers_aligned():
    # a perpendicular "road edge" closer than an aligned lane
    pos = np.zeros((2, 3, 2))
    direc = np.zeros((2, 3, 2))
    valid = np.ones((2, 3), dtype=bool)
    # polyline 0: lane along +x at y=2
    pos[0, :, 0] = [0, 1, 2]
    pos[0, :, 1] = 2.0
    direc[0, :, 0] = 1.0
    # polyline 1: edge along +y at y in [0..2], x=0.5 (closer to the pose)
    pos[1, :, 0] = 0.5
    pos[1, :, 1] = [0, 1, 2]
    direc[1, :, 1] = 1.0
    pose = Pose2(0.0, 0.0, 0.0)
    assert nearest_polyline(pose, pos, direc, valid) == 1
    got = nearest_polyline(pose, pos, direc, valid, direction_tolerance=np.radians(30))
    assert got == 0


def test_nearest_polyline_max_distance_none_result():
    pos, direc, valid = _map_fixture()
    assert nearest_polyline(Pose2(0, 500.0, 0), pos, direc, valid, max_distance=3.0) is None


def test_nearest_polyline_exhaustive_scan_property():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n_m, n_node = 8, 6
        pos = rng.uniform(-20, 20, (n_m, n_node, 2))
        direc = rng.standard_normal((n_m, n_node, 2))
        direc /= np.linalg.norm(direc, axis=-1, keepdims=True)
        valid = rng.random((n_m, n_node)) > 0.2
        valid[:, 0] = True
        pose = Pose2(*rng.uniform(-20, 20, 2), rng.uniform(-np.pi, np.pi))
        got = nearest_polyline(pose, pos, direc, valid)
        d = np.where(valid, np.linalg.norm(pos - pose.xy, axis=-1), np.inf).min(axis=-1)
        assert got == int(np.argmin(d))
        assert d[got] <= d.min() + 1e-12
