import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objrecon.geometry import (
    CameraIntrinsics,
    EstimationError,
    NeighborIndex,
    ObjectCloud,
    Pose,
    depth_to_cloud,
    estimate_normals,
    rigid_from_correspondences,
    rotation_about_axis,
    transform_cloud,
)


class FakeFrame:
    def __init__(self, depth, color=None):
        self.depth = depth
        self.color = color


def random_pose(rng) -> Pose:
    w = rng.normal(size=3)
    return Pose.from_rotvec(w / max(np.linalg.norm(w), 1e-9) * rng.uniform(0, np.pi),
                            rng.normal(scale=0.5, size=3))


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

def test_pose_identity_roundtrip():
    p = Pose.from_rotvec([0.1, -0.2, 0.3], [1, 2, 3])
    back = p.compose(p.inverse())
    assert np.abs(back.matrix() - np.eye(4)).max() < 1e-9


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.001, np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_quaternion_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = random_pose(rng)
        q = p.quaternion()
        back = Pose.from_quaternion(q, p.translation)
        assert np.abs(back.rotation - p.rotation).max() < 1e-12


# ---------------------------------------------------------------------------
# CameraIntrinsics / depth_to_cloud
# ---------------------------------------------------------------------------

def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1, fy=1, cx=0, cy=0, width=10, height=10, depth_scale=0)


def test_depth_to_cloud_principal_ray():
    intr = CameraIntrinsics(fx=100.0, fy=100.0, cx=4.0, cy=3.0, width=9, height=7,
                            depth_scale=0.001)
    depth = np.zeros((7, 9), dtype=np.uint16)
    depth[3, 4] = 1000  # z = 1.0 m at the principal point
    cloud = depth_to_cloud(FakeFrame(depth), intr)
    p = cloud.points[3 * 9 + 4]
    assert np.allclose(p, [0.0, 0.0, 1.0])
    # all other slots invalid but present
    assert len(cloud) == 63
    assert cloud.valid_mask.sum() == 1


def test_depth_to_cloud_unit_tangent_ray():
    intr = CameraIntrinsics(fx=5.0, fy=5.0, cx=2.0, cy=2.0, width=10, height=5,
                            depth_scale=0.001)
    depth = np.zeros((5, 10), dtype=np.uint16)
    depth[2, 7] = 2000  # pixel (cx+fx, cy), z = 2 m
    cloud = depth_to_cloud(FakeFrame(depth), intr)
    assert np.allclose(cloud.points[2 * 10 + 7], [2.0, 0.0, 2.0])


def test_depth_to_cloud_dimension_mismatch():
    intr = CameraIntrinsics(fx=5.0, fy=5.0, cx=2.0, cy=2.0, width=10, height=5)
    with pytest.raises(ValueError):
        depth_to_cloud(FakeFrame(np.zeros((4, 10), dtype=np.uint16)), intr)


# ---------------------------------------------------------------------------
# ObjectCloud
# ---------------------------------------------------------------------------

def test_cloud_validation():
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError):
        ObjectCloud.from_points(pts, weights=[0.5, 0.5, 0.5, 1.5])
    with pytest.raises(ValueError):
        ObjectCloud(pts, None, np.zeros((3, 3), np.uint8), np.zeros(4, bool),
                    np.ones(4))
    with pytest.raises(ValueError):
        ObjectCloud.from_points(pts, normals=np.full((4, 3), 0.5))


def test_cloud_select_keeps_attributes():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(10, 3))
    cloud = ObjectCloud.from_points(
        pts,
        colors=rng.integers(0, 255, size=(10, 3)).astype(np.uint8),
        weights=rng.uniform(size=10),
    )
    sub = cloud.select([2, 5, 7])
    assert np.array_equal(sub.points, pts[[2, 5, 7]])
    assert np.array_equal(sub.weights, cloud.weights[[2, 5, 7]])


# ---------------------------------------------------------------------------
# estimate_normals
# ---------------------------------------------------------------------------

def make_plane_cloud(n_side=20, z=1.0, spacing=0.01):
    xs = np.arange(n_side) * spacing
    ys = np.arange(n_side) * spacing
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(n_side * n_side, z)], axis=1)
    return ObjectCloud.from_points(pts)


def test_normals_on_plane_face_the_sensor():
    cloud = estimate_normals(make_plane_cloud(), k=9)
    n = cloud.normals
    assert np.isfinite(n).all()
    # plane z=1 viewed from the origin: normals point back at the sensor
    angles = np.degrees(np.arccos(np.clip(-n[:, 2], -1, 1)))
    assert angles.max() < 1e-3


def test_normals_on_sphere_match_analytic():
    rng = np.random.default_rng(3)
    dirs = rng.normal(size=(4000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    center = np.array([0.0, 0.0, 2.0])
    pts = center + 0.5 * dirs
    cloud = estimate_normals(ObjectCloud.from_points(pts), k=15)
    n = cloud.normals
    expected = dirs.copy()
    flip = np.einsum("ij,ij->i", expected, pts) > 0
    expected[flip] = -expected[flip]
    dots = np.clip(np.abs(np.einsum("ij,ij->i", n, dirs)), -1, 1)
    assert np.degrees(np.arccos(dots)).mean() < 3.0
    # orientation: toward sensor at origin
    assert (np.einsum("ij,ij->i", n, pts) <= 1e-9).all()


def test_normals_degenerate_collinear():
    pts = np.stack([np.linspace(0, 1, 30), np.zeros(30), np.ones(30)], axis=1)
    cloud = estimate_normals(ObjectCloud.from_points(pts), k=5)
    assert np.isnan(cloud.normals).all()


def test_normals_planar_accuracy_half_degree():
    # spec property: planar patches within 0.5 degrees for fine spacing
    cloud = estimate_normals(make_plane_cloud(n_side=30, spacing=0.002), k=15)
    ang = np.degrees(np.arccos(np.clip(-cloud.normals[:, 2], -1, 1)))
    assert ang.max() < 0.5


# ---------------------------------------------------------------------------
# rigid_from_correspondences
# ---------------------------------------------------------------------------

def test_rigid_identity():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(20, 3))
    pose = rigid_from_correspondences(pts, pts)
    assert np.abs(pose.matrix() - np.eye(4)).max() < 1e-12


def test_rigid_constructed_rotation():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(30, 3))
    R = rotation_about_axis([0, 0, 1], np.deg2rad(30))
    t = np.array([0.1, 0.0, 0.0])
    dst = src @ R.T + t
    pose = rigid_from_correspondences(src, dst)
    assert np.abs(pose.rotation - R).max() < 1e-9
    assert np.abs(pose.translation - t).max() < 1e-9


def test_rigid_errors():
    with pytest.raises(EstimationError):
        rigid_from_correspondences(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5)], axis=1)
    with pytest.raises(EstimationError):
        rigid_from_correspondences(line, line + 1.0)


def test_rigid_weighted_downweights_outlier():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(40, 3))
    pose_true = random_pose(rng)
    dst = pose_true.apply(src)
    dst[0] += 5.0  # gross outlier
    w = np.ones(40)
    w[0] = 0.0
    pose = rigid_from_correspondences(src, dst, weights=w)
    assert np.abs(pose.matrix() - pose_true.matrix()).max() < 1e-9


@settings(max_examples=1000, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_rigid_exact_on_noise_free_fuzz(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(10, 3))
    pose_true = random_pose(rng)
    pose = rigid_from_correspondences(src, pose_true.apply(src))
    assert np.abs(pose.matrix() - pose_true.matrix()).max() < 1e-9


def brute_force_pose_search(src, dst, w=None):
    """Independent oracle: coarse rotation grid + Powell refinement."""
    from scipy.optimize import minimize

    if w is None:
        w = np.ones(len(src))
    w = w / w.sum()

    def rodrigues(v):
        theta = np.linalg.norm(v)
        if theta < 1e-12:
            return np.eye(3)
        k = v / theta
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)

    def cost_rot(v):
        R = rodrigues(np.asarray(v))
        # translation optimal in closed form for a fixed rotation
        t = w @ dst - R @ (w @ src)
        r = src @ R.T + t - dst
        return float(np.sum(w * np.sum(r * r, axis=1)))

    best = None
    grid = np.linspace(-np.pi, np.pi, 7)
    for ax in grid:
        for ay in grid:
            for az in np.linspace(-np.pi, np.pi, 7):
                v = np.array([ax, ay, az])
                c = cost_rot(v)
                if best is None or c < best[0]:
                    best = (c, v)
    res = minimize(cost_rot, best[1], method="Powell",
                   options={"xtol": 1e-12, "ftol": 1e-14, "maxiter": 20000})
    return float(np.sqrt(res.fun))


def test_rigid_matches_brute_force_on_noisy_data():
    rng = np.random.default_rng(11)
    src = rng.normal(scale=0.2, size=(100, 3))
    pose_true = random_pose(rng)
    dst = pose_true.apply(src) + rng.normal(scale=0.001, size=(100, 3))
    pose = rigid_from_correspondences(src, dst)
    res = pose.apply(src) - dst
    rms = float(np.sqrt(np.mean(np.sum(res ** 2, axis=1))))
    rms_bf = brute_force_pose_search(src, dst)
    assert abs(rms - rms_bf) / rms_bf < 0.05


# ---------------------------------------------------------------------------
# transform_cloud
# ---------------------------------------------------------------------------

def test_transform_identity_and_translation():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(15, 3))
    nrm = rng.normal(size=(15, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cloud = ObjectCloud.from_points(pts, normals=nrm)
    same = transform_cloud(cloud, Pose.identity())
    assert np.array_equal(same.points, pts)
    shifted = transform_cloud(cloud, Pose(np.eye(3), [1, 2, 3]))
    assert np.allclose(shifted.points, pts + [1, 2, 3])
    assert np.array_equal(shifted.normals, nrm)


def test_transform_composition_matches():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(25, 3))
    cloud = ObjectCloud.from_points(pts)
    t1 = random_pose(rng)
    t2 = random_pose(rng)
    a = transform_cloud(transform_cloud(cloud, t2), t1)
    b = transform_cloud(cloud, t1.compose(t2))
    assert np.abs(a.points - b.points).max() < 1e-12


def test_transform_inverse_roundtrip():
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(25, 3))
    cloud = ObjectCloud.from_points(pts)
    pose = random_pose(rng)
    back = transform_cloud(transform_cloud(cloud, pose), pose.inverse())
    assert np.abs(back.points - pts).max() < 1e-12


# ---------------------------------------------------------------------------
# NeighborIndex
# ---------------------------------------------------------------------------

def test_neighbor_index_matches_linear_scan():
    rng = np.random.default_rng(9)
    pts = rng.uniform(size=(500, 3))
    index = NeighborIndex(pts)
    queries = rng.uniform(size=(1000, 3))
    for q in queries:
        d, i = index.nearest(q)
        dists = np.linalg.norm(pts - q, axis=1)
        j = int(np.argmin(dists))
        assert d == dists[j]
        assert np.isclose(dists[i], dists[j])


def test_neighbor_index_skips_invalid_slots():
    pts = np.array([[0, 0, 0], [np.nan] * 3, [1, 1, 1]])
    index = NeighborIndex(pts)
    d, i = index.nearest([0.9, 0.9, 0.9])
    assert i == 2


def test_neighbor_index_radius_query():
    pts = np.array([[0, 0, 0], [0.5, 0, 0], [2, 0, 0]])
    index = NeighborIndex(pts)
    hits = index.query_radius([[0.1, 0, 0]], radius=1.0)[0]
    assert sorted(hits.tolist()) == [0, 1]
