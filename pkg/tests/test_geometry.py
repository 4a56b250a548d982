import numpy as np
import pytest

from posegen.geometry import (
    PointCloud,
    Quaternion,
    RigidTransform,
    compose,
    inverse,
    max_pairwise_distance,
    quat_multiply,
    quat_to_rotmat,
    random_pose,
    random_unit_quaternion,
    rotation_angle,
    rotation_error,
    rotmat_to_quat,
    sample_points,
    transform_points,
)


def _random_transform(rng):
    return RigidTransform(random_unit_quaternion(rng), rng.normal(size=3))


def _cloud(rng, n=50):
    return PointCloud(rng.normal(size=(n, 3)), {"colors": rng.integers(0, 256, (n, 3))})


def test_identity_quaternion_gives_identity_matrix():
    np.testing.assert_array_equal(quat_to_rotmat(Quaternion(1, 0, 0, 0)), np.eye(3))


def test_half_turn_about_x():
    np.testing.assert_allclose(quat_to_rotmat(Quaternion(0, 1, 0, 0)), np.diag([1.0, -1, -1]),
                               atol=1e-15)


def test_q_and_minus_q_same_rotation():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        q = random_unit_quaternion(rng)
        np.testing.assert_allclose(quat_to_rotmat(q), quat_to_rotmat(-q), atol=1e-15)


def test_rotation_matrices_orthonormal():
    rng = np.random.default_rng(1)
    for _ in range(500):
        R = quat_to_rotmat(random_unit_quaternion(rng))
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1) < 1e-9


def test_non_unit_quaternion_error_names_norm():
    with pytest.raises(ValueError, match="norm 2"):
        quat_to_rotmat(Quaternion(2, 0, 0, 0))
    with pytest.raises(ValueError):
        RigidTransform(Quaternion(1, 1e-4, 0, 0))


def test_normalize():
    q = Quaternion(1, 2, 3, 4).normalize()
    assert q.norm() == pytest.approx(1.0, abs=1e-15)


def test_quaternion_product_matches_matrix_product():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = random_unit_quaternion(rng), random_unit_quaternion(rng)
        np.testing.assert_allclose(quat_to_rotmat(a * b), quat_to_rotmat(a) @ quat_to_rotmat(b),
                                   atol=1e-12)
    np.testing.assert_array_equal(quat_multiply([1, 0, 0, 0], [0, 1, 0, 0]), [0, 1, 0, 0])


def test_rotmat_to_quat_round_trip_including_half_turns():
    rng = np.random.default_rng(3)
    qs = [random_unit_quaternion(rng) for _ in range(500)]
    # near-180 degree rotations exercise the non-trace branches
    qs += [Quaternion.from_axis_angle(rng.normal(size=3), np.pi - 10.0 ** -k) for k in range(1, 12)]
    qs += [Quaternion(0, 1, 0, 0), Quaternion(0, 0, 1, 0), Quaternion(0, 0, 0, 1)]
    for q in qs:
        back = rotmat_to_quat(quat_to_rotmat(q))
        assert back.w >= 0
        np.testing.assert_allclose(quat_to_rotmat(back), quat_to_rotmat(q), atol=1e-12)


def test_transform_identity_and_translation():
    rng = np.random.default_rng(4)
    pc = _cloud(rng)
    out = transform_points(RigidTransform.identity(), pc)
    np.testing.assert_array_equal(out.points, pc.points)
    np.testing.assert_array_equal(out.attributes["colors"], pc.attributes["colors"])
    moved = transform_points(RigidTransform(Quaternion.identity(), [1, 0, 0]),
                             PointCloud([[0.0, 0, 0]]))
    np.testing.assert_array_equal(moved.points, [[1.0, 0, 0]])


def test_transform_round_trip_and_rigidity():
    rng = np.random.default_rng(5)
    for _ in range(100):
        T, pc = _random_transform(rng), _cloud(rng, 20)
        out = transform_points(T, pc)
        np.testing.assert_allclose(transform_points(inverse(T), out).points, pc.points, atol=1e-9)
        d_in = np.linalg.norm(pc.points[:, None] - pc.points[None], axis=-1)
        d_out = np.linalg.norm(out.points[:, None] - out.points[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)


def test_transform_rejects_empty():
    with pytest.raises(ValueError):
        transform_points(RigidTransform.identity(), PointCloud(np.zeros((0, 3))))


def test_compose_semantics():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a, b, c = (_random_transform(rng) for _ in range(3))
        pc = _cloud(rng, 10)
        np.testing.assert_allclose(transform_points(compose(a, b), pc).points,
                                   transform_points(a, transform_points(b, pc)).points, atol=1e-9)
        np.testing.assert_allclose(compose(compose(a, b), c).matrix(),
                                   compose(a, compose(b, c)).matrix(), atol=1e-9)
        ident = compose(a, inverse(a))
        np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-9)
        assert rotation_angle(ident) < 1e-9
        np.testing.assert_allclose(compose(RigidTransform.identity(), a).matrix(), a.matrix(),
                                   atol=1e-15)


def test_rotation_error_recovers_angle():
    q = Quaternion.from_axis_angle([0, 0, 1], 0.3)
    assert rotation_error(RigidTransform.identity(), RigidTransform(q)) == pytest.approx(0.3)
    tiny = Quaternion.from_axis_angle([1, 0, 0], 1e-10)
    assert rotation_angle(tiny) == pytest.approx(1e-10, rel=1e-6)


def test_point_cloud_validation():
    with pytest.raises(ValueError, match="finite"):
        PointCloud([[0.0, np.nan, 0.0]])
    with pytest.raises(ValueError, match="rows"):
        PointCloud(np.zeros((3, 3)), {"normals": np.zeros((2, 3))})
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)))


def test_sample_points_contract():
    rng = np.random.default_rng(7)
    pc = PointCloud(rng.normal(size=(2000, 3)))
    s = sample_points(pc, 512, seed=1)
    assert len(s) == 512
    assert len(np.unique(s.points, axis=0)) == 512
    perm = sample_points(pc, 2000, seed=2)
    np.testing.assert_array_equal(np.sort(perm.points, axis=0), np.sort(pc.points, axis=0))
    np.testing.assert_array_equal(sample_points(pc, 100, seed=3).points,
                                  sample_points(pc, 100, seed=3).points)
    assert len(sample_points(PointCloud(pc.points[:5]), 12, seed=0)) == 12
    with pytest.raises(ValueError):
        sample_points(PointCloud(np.zeros((0, 3))), 3)
    with pytest.raises(ValueError):
        sample_points(pc, 0)


def test_random_pose_bounds_and_determinism():
    T = random_pose(0.0, 0.0, seed=0)
    np.testing.assert_array_equal(T.matrix(), np.eye(4))
    rng = np.random.default_rng(8)
    poses = [random_pose(np.pi, 1.0, rng) for _ in range(10000)]
    assert max(rotation_angle(p) for p in poses) <= np.pi + 1e-12
    assert max(np.linalg.norm(p.t) for p in poses) <= 1.0
    a, b = random_pose(1.0, 0.5, seed=42), random_pose(1.0, 0.5, seed=42)
    np.testing.assert_array_equal(a.matrix(), b.matrix())
    with pytest.raises(ValueError):
        random_pose(-0.1, 1.0)


def test_random_pose_angle_is_uniform():
    rng = np.random.default_rng(9)
    angles = np.array([rotation_angle(random_pose(1.0, 0.0, rng)) for _ in range(20000)])
    hist, _ = np.histogram(angles, bins=10, range=(0, 1))
    assert hist.min() > 0.9 * 2000 and hist.max() < 1.1 * 2000


def test_max_pairwise_distance_matches_brute_force():
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(300, 3))
    brute = np.max(np.linalg.norm(pts[:, None] - pts[None], axis=-1))
    assert max_pairwise_distance(pts) == pytest.approx(brute, abs=1e-12)
    flat = np.c_[rng.normal(size=(100, 2)), np.zeros(100)]
    brute = np.max(np.linalg.norm(flat[:, None] - flat[None], axis=-1))
    assert max_pairwise_distance(flat) == pytest.approx(brute, abs=1e-12)
