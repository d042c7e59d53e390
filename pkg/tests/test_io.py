import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objrecon import io as oio
from objrecon.geometry import CameraIntrinsics, ObjectCloud, Pose
from objrecon.io import LoadError, RgbdFrame


INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=15.5, cy=11.5, width=32, height=24)


def make_frames(n, rng):
    frames = []
    for k in range(n):
        color = rng.integers(0, 256, size=(24, 32, 3)).astype(np.uint8)
        depth = rng.integers(0, 4000, size=(24, 32)).astype(np.uint16)
        frames.append(RgbdFrame(color, depth, frame_id=k, timestamp=0.1 * k))
    return frames


def random_cloud(rng, n=100, organized=False):
    pts = rng.normal(size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return ObjectCloud.from_points(
        pts, normals=nrm,
        colors=rng.integers(0, 256, size=(n, 3)).astype(np.uint8),
        edge_flags=rng.random(n) < 0.3,
        weights=rng.uniform(size=n),
    )


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

def test_sequence_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    frames = make_frames(3, rng)
    manifest = oio.write_sequence(tmp_path, INTR, frames)
    intr, stream = oio.load_sequence(manifest)
    assert intr == INTR
    loaded = list(stream)
    assert [f.frame_id for f in loaded] == [0, 1, 2]
    for a, b in zip(frames, loaded):
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)


def test_sequence_missing_depth_file_named(tmp_path):
    rng = np.random.default_rng(1)
    manifest = oio.write_sequence(tmp_path, INTR, make_frames(2, rng))
    (tmp_path / "depth_0001.png").unlink()
    with pytest.raises(LoadError, match="depth_0001.png"):
        oio.load_sequence(manifest)


def test_sequence_frames_delivered_in_frame_id_order(tmp_path):
    rng = np.random.default_rng(2)
    frames = make_frames(3, rng)
    manifest = oio.write_sequence(tmp_path, INTR, frames)
    # scramble record order in the manifest body
    lines = manifest.read_text().splitlines()
    manifest.write_text("\n".join([lines[0]] + lines[1:][::-1]) + "\n")
    _, stream = oio.load_sequence(manifest)
    assert [f.frame_id for f in stream] == [0, 1, 2]


def test_rgbd_frame_validation():
    with pytest.raises(ValueError):
        RgbdFrame(np.zeros((5, 5, 3), np.uint8), np.zeros((4, 5), np.uint16), 0)


# ---------------------------------------------------------------------------
# clouds
# ---------------------------------------------------------------------------

def test_cloud_roundtrip_empty(tmp_path):
    cloud = ObjectCloud.from_points(np.zeros((0, 3)))
    path = tmp_path / "empty.cloud"
    oio.write_cloud(cloud, path)
    back = oio.read_cloud(path)
    assert len(back) == 0


def test_cloud_roundtrip_10k_points_float32(tmp_path):
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, n=10000)
    path = tmp_path / "c.cloud"
    oio.write_cloud(cloud, path)
    back = oio.read_cloud(path)
    assert np.array_equal(back.points, cloud.points.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.colors, cloud.colors)
    assert np.array_equal(back.edge_flags, cloud.edge_flags)
    assert np.abs(back.weights - cloud.weights).max() < 1e-6
    # normals renormalized after float32 rounding
    assert np.abs(np.einsum("ij,ij->i", back.normals, cloud.normals) - 1).max() < 1e-6


def test_cloud_truncated_payload_rejected(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "c.cloud"
    oio.write_cloud(random_cloud(rng, n=50), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(LoadError, match="truncated"):
        oio.read_cloud(path)


def test_cloud_organized_comment_roundtrip(tmp_path):
    pts = np.full((12, 3), np.nan)
    pts[5] = [0.1, 0.2, 0.5]
    cloud = ObjectCloud.from_points(pts, width=4, height=3)
    path = tmp_path / "org.cloud"
    oio.write_cloud(cloud, path)
    back = oio.read_cloud(path)
    assert back.width == 4 and back.height == 3
    assert back.valid_mask.sum() == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_cloud_roundtrip_property(seed):
    import tempfile, os
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n=int(rng.integers(1, 64)))
    fd, path = tempfile.mkstemp(suffix=".cloud")
    os.close(fd)
    try:
        oio.write_cloud(cloud, path)
        back = oio.read_cloud(path)
        assert np.abs(back.points - cloud.points).max() < 1e-6
        assert np.array_equal(back.edge_flags, cloud.edge_flags)
    finally:
        os.unlink(path)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def test_trajectory_identity_line(tmp_path):
    path = tmp_path / "traj.txt"
    oio.write_trajectory([(0, Pose.identity())], path)
    body = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    assert body == ["0 0 0 0 0 0 0 1"]


def test_trajectory_roundtrip_precision(tmp_path):
    rng = np.random.default_rng(5)
    poses = []
    for k in range(20):
        w = rng.normal(size=3)
        poses.append((k, Pose.from_rotvec(w, rng.normal(size=3))))
    path = tmp_path / "traj.txt"
    oio.write_trajectory(poses, path)
    back = oio.read_trajectory(path)
    for (fa, pa), (fb, pb) in zip(poses, back):
        assert fa == fb
        assert np.abs(pa.matrix() - pb.matrix()).max() < 1e-6


def test_trajectory_rejects_non_unit_quaternion(tmp_path):
    path = tmp_path / "traj.txt"
    path.write_text("0 0 0 0 0 0 0 0.5\n")
    with pytest.raises(LoadError, match="quaternion"):
        oio.read_trajectory(path)


def test_trajectory_allows_comments(tmp_path):
    path = tmp_path / "traj.txt"
    path.write_text("# header\n0 1 2 3 0 0 0 1  # inline\n")
    back = oio.read_trajectory(path)
    assert len(back) == 1
    assert np.allclose(back[0][1].translation, [1, 2, 3])


# ---------------------------------------------------------------------------
# model bundles (exercised fully in pipeline tests; core contract here)
# ---------------------------------------------------------------------------

class _StubSession:
    def __init__(self, keyframes, fused, intr, views):
        self.keyframes = keyframes
        self.fused_cloud = fused
        self.intrinsics = intr
        self._views = views

    def view_cloud(self, k):
        return self._views[k]


class _StubKeyframe:
    def __init__(self, frame, pose, indices):
        self.frame = frame
        self.pose = pose
        self.object_indices = indices


def _stub_session(rng, n_views=2):
    frames = make_frames(n_views, rng)
    views = [random_cloud(rng, n=40) for _ in range(n_views)]
    kfs = [_StubKeyframe(frames[k], Pose.from_rotvec([0, 0, 0.1 * k], [0.01 * k, 0, 0]),
                         np.arange(40)) for k in range(n_views)]
    fused = random_cloud(rng, n=80)
    return _StubSession(kfs, fused, INTR, views)


def test_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    session = _stub_session(rng)
    out = oio.export_model_bundle(session, tmp_path / "bundle")
    fused, intr, views = oio.read_model_bundle(out)
    assert intr == INTR
    assert len(views) == 2
    assert len(fused) == 80
    fid, pose, cloud = views[1]
    assert fid == 1
    assert np.abs(pose.translation - [0.01, 0, 0]).max() < 1e-6


def test_bundle_refuses_missing_indices(tmp_path):
    rng = np.random.default_rng(7)
    session = _stub_session(rng)
    session.keyframes[0].object_indices = np.array([], dtype=int)
    with pytest.raises(oio.ExportError, match="segmentation"):
        oio.export_model_bundle(session, tmp_path / "bundle")


def test_bundle_refuses_empty_fused(tmp_path):
    rng = np.random.default_rng(8)
    session = _stub_session(rng)
    session.fused_cloud = ObjectCloud.from_points(np.zeros((0, 3)))
    with pytest.raises(oio.ExportError, match="fused"):
        oio.export_model_bundle(session, tmp_path / "bundle")
