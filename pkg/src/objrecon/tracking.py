"""Camera-pose tracking: sparse frame-to-frame patch tracking, keyframe
management, and keyframe-to-frame projective patch refinement.

The tracker seeds corner features at keyframes, follows them with a
pyramidal translation-only patch aligner, and estimates each frame's pose
from 3D-3D correspondences against the keyframe inside a robust resampling
loop. Between keyframes, drift in the tracked positions is removed by
re-warping each keyframe patch with the homography induced by its local
tangent plane and the current pose hypothesis, then re-aligning.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geometry import (
    CameraIntrinsics,
    EstimationError,
    Pose,
    depth_to_cloud,
    estimate_normals,
    rigid_from_correspondences,
)

__all__ = [
    "TrackerConfig",
    "TrackedFeature",
    "Keyframe",
    "TrackingResult",
    "TrackingFailure",
    "detect_features",
    "track_frame",
    "refine_against_keyframe",
    "track_sequence",
]


class TrackingFailure(Exception):
    """The whole sequence could not be tracked (no startable frame)."""


@dataclass(frozen=True)
class TrackerConfig:
    max_features: int = 300
    patch: int = 11
    pyramid_levels: int = 3
    max_iterations: int = 30
    convergence_px: float = 0.01
    min_spacing_px: float = 9.0
    corner_quality: float = 0.01
    residual_threshold: float = 20.0      # mean abs intensity error, 0..255
    keyframe_translation_m: float = 0.05
    keyframe_rotation_deg: float = 10.0
    ransac_rounds: int = 100
    inlier_threshold_m: float = 0.01
    min_inliers: int = 6
    grazing_angle_deg: float = 85.0
    normal_k: int = 15
    refine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.patch % 2 == 0 or self.patch < 5:
            raise ValueError("patch must be odd and >= 5")
        if self.keyframe_translation_m <= 0 or self.keyframe_rotation_deg <= 0:
            raise ValueError("keyframe thresholds must be positive")
        if self.pyramid_levels < 1 or self.max_features < 1:
            raise ValueError("invalid tracker configuration")
        if self.inlier_threshold_m <= 0:
            raise ValueError("inlier threshold must be positive")


@dataclass
class TrackedFeature:
    feature_id: int
    pixel: np.ndarray                 # (2,) sub-pixel (u, v)
    point3d: np.ndarray | None        # (3,) meters in its frame, None w/o depth
    status: str = "alive"             # alive | lost | refined

    @property
    def active(self) -> bool:
        return self.status in ("alive", "refined")


@dataclass
class Keyframe:
    frame: object                     # RgbdFrame
    pose: Pose                        # camera-to-model
    features: list                    # reference TrackedFeatures at creation
    object_indices: np.ndarray | None = None
    # internals for refinement / pose anchoring
    feature_normals: dict = field(default_factory=dict, repr=False)
    model_points: dict = field(default_factory=dict, repr=False)
    pyramid: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class TrajectoryEntry:
    frame_id: int
    pose: Pose | None
    status: str                       # ok | failed
    keyframe_index: int
    rel_to_keyframe: Pose | None      # pose == keyframe.pose o rel (bookkeeping)


@dataclass
class TrackingResult:
    keyframes: list
    trajectory: list
    failed_frames: list


# ---------------------------------------------------------------------------
# image helpers
# ---------------------------------------------------------------------------

def to_grayscale(color: np.ndarray) -> np.ndarray:
    c = np.asarray(color, dtype=np.float64)
    return 0.299 * c[..., 0] + 0.587 * c[..., 1] + 0.114 * c[..., 2]


def build_pyramid(gray: np.ndarray, levels: int) -> list:
    pyr = [np.ascontiguousarray(gray, dtype=np.float64)]
    for _ in range(1, levels):
        prev = pyr[-1]
        h, w = prev.shape
        h2, w2 = h // 2, w // 2
        pyr.append(prev[:h2 * 2, :w2 * 2].reshape(h2, 2, w2, 2).mean(axis=(1, 3)))
    return pyr


def _sample(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear sample at (u, v) positions, shape-preserving."""
    coords = np.stack([uv[..., 1].ravel(), uv[..., 0].ravel()])
    out = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return out.reshape(uv.shape[:-1])


def _patch_grid(patch: int) -> np.ndarray:
    half = patch // 2
    r = np.arange(-half, half + 1, dtype=np.float64)
    gu, gv = np.meshgrid(r, r, indexing="xy")
    return np.stack([gu, gv], axis=-1).reshape(-1, 2)   # (patch*patch, 2)


def _in_bounds(pos: np.ndarray, half: float, shape) -> np.ndarray:
    h, w = shape
    return ((pos[:, 0] >= half) & (pos[:, 0] <= w - 1 - half)
            & (pos[:, 1] >= half) & (pos[:, 1] <= h - 1 - half))


def _align_translation(target: np.ndarray, templates: np.ndarray,
                       tgx: np.ndarray, tgy: np.ndarray, pos0: np.ndarray,
                       patch: int, max_iter: int, tol: float):
    """Inverse-compositional translation alignment of many patches at once.

    templates/tgx/tgy: (N, patch*patch) template intensities and gradients.
    Returns (positions (N,2), ok (N,), residual (N,)); ok is False where the
    patch left the image.
    """
    n = len(pos0)
    grid = _patch_grid(patch)
    half = patch // 2 + 1
    pos = pos0.astype(np.float64).copy()
    active = _in_bounds(pos, half, target.shape)
    ok = active.copy()

    # 2x2 inverse Hessians per feature (Gauss-Newton normal matrix)
    hxx = np.einsum("np,np->n", tgx, tgx)
    hxy = np.einsum("np,np->n", tgx, tgy)
    hyy = np.einsum("np,np->n", tgy, tgy)
    det = hxx * hyy - hxy * hxy
    solvable = det > 1e-9
    ok &= solvable
    active &= solvable
    inv = np.zeros((n, 2, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv[:, 0, 0] = hyy / det
        inv[:, 0, 1] = -hxy / det
        inv[:, 1, 0] = -hxy / det
        inv[:, 1, 1] = hxx / det

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        uv = pos[idx, None, :] + grid[None, :, :]
        cur = _sample(target, uv)
        e = cur - templates[idx]
        bx = np.einsum("np,np->n", tgx[idx], e)
        by = np.einsum("np,np->n", tgy[idx], e)
        du = inv[idx, 0, 0] * bx + inv[idx, 0, 1] * by
        dv = inv[idx, 1, 0] * bx + inv[idx, 1, 1] * by
        pos[idx, 0] -= du
        pos[idx, 1] -= dv
        conv = np.hypot(du, dv) < tol
        inb = _in_bounds(pos[idx], half, target.shape)
        ok[idx[~inb]] = False
        active[idx] = ~conv & inb

    residual = np.full(n, np.inf)
    idx = np.flatnonzero(ok)
    if len(idx):
        uv = pos[idx, None, :] + grid[None, :, :]
        e = _sample(target, uv) - templates[idx]
        residual[idx] = np.abs(e).mean(axis=1)
    return pos, ok, residual


def _patch_templates(img: np.ndarray, pos: np.ndarray, patch: int):
    """Sample patches and their gradients at the given positions."""
    grid = _patch_grid(patch)
    uv = pos[:, None, :] + grid[None, :, :]
    tpl = _sample(img, uv)
    gy_img, gx_img = np.gradient(img)
    tgx = _sample(gx_img, uv)
    tgy = _sample(gy_img, uv)
    return tpl, tgx, tgy


# ---------------------------------------------------------------------------
# feature detection
# ---------------------------------------------------------------------------

def _point3d_at(depth: np.ndarray, pixel, intrinsics: CameraIntrinsics):
    u = int(round(float(pixel[0])))
    v = int(round(float(pixel[1])))
    if not (0 <= u < depth.shape[1] and 0 <= v < depth.shape[0]):
        return None
    z = float(depth[v, u]) * intrinsics.depth_scale
    if z <= 0:
        return None
    return intrinsics.backproject(np.array([u, v], dtype=np.float64), z)


def detect_features(frame, intrinsics: CameraIntrinsics, max_count: int,
                    config: TrackerConfig | None = None,
                    start_id: int = 0) -> list:
    """Corner features ranked by minimum-eigenvalue score with enforced
    spacing. Features over valid depth carry a 3D point."""
    cfg = config or TrackerConfig()
    gray = to_grayscale(frame.color)
    gy, gx = np.gradient(gray)
    w = 5
    ixx = ndimage.uniform_filter(gx * gx, size=w)
    iyy = ndimage.uniform_filter(gy * gy, size=w)
    ixy = ndimage.uniform_filter(gx * gy, size=w)
    tr = ixx + iyy
    disc = np.sqrt(np.maximum((ixx - iyy) ** 2 + 4 * ixy * ixy, 0.0))
    response = (tr - disc) / 2.0

    margin = cfg.patch // 2 + 2
    response[:margin, :] = 0
    response[-margin:, :] = 0
    response[:, :margin] = 0
    response[:, -margin:] = 0

    peak = float(response.max())
    if peak <= 1e-12:
        return []
    vs, us = np.nonzero(response > cfg.corner_quality * peak)
    scores = response[vs, us]
    order = np.lexsort((us, vs, -scores))

    spacing = cfg.min_spacing_px
    cell = max(spacing, 1.0)
    occupied = {}
    out = []
    for k in order:
        u, v = float(us[k]), float(vs[k])
        ci, cj = int(u / cell), int(v / cell)
        clash = False
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for (pu, pv) in occupied.get((ci + di, cj + dj), ()):
                    if (pu - u) ** 2 + (pv - v) ** 2 < spacing ** 2:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if clash:
            continue
        occupied.setdefault((ci, cj), []).append((u, v))
        pixel = np.array([u, v])
        out.append(TrackedFeature(
            feature_id=start_id + len(out),
            pixel=pixel,
            point3d=_point3d_at(frame.depth, pixel, intrinsics)))
        if len(out) >= max_count:
            break
    return out


# ---------------------------------------------------------------------------
# frame-to-frame tracking
# ---------------------------------------------------------------------------

def _track_pyramidal(prev_pyr: list, next_pyr: list, positions: np.ndarray,
                     cfg: TrackerConfig):
    """Track positions from prev to next. Returns (pos, ok, residual)."""
    n = len(positions)
    disp = np.zeros((n, 2))
    ok = np.ones(n, dtype=bool)
    residual = np.full(n, np.inf)
    for level in range(len(prev_pyr) - 1, -1, -1):
        s = 2.0 ** level
        tpl_pos = positions / s
        half = cfg.patch // 2 + 1
        usable = ok & _in_bounds(tpl_pos, half, prev_pyr[level].shape)
        idx = np.flatnonzero(usable)
        if len(idx) == 0:
            continue
        tpl, tgx, tgy = _patch_templates(prev_pyr[level], tpl_pos[idx], cfg.patch)
        start = (positions[idx] + disp[idx]) / s
        pos, good, res = _align_translation(
            next_pyr[level], tpl, tgx, tgy, start, cfg.patch,
            cfg.max_iterations, cfg.convergence_px)
        if level == 0:
            ok[idx] &= good
            residual[idx] = res
            disp[idx[good]] = pos[good] * s - positions[idx[good]]
        else:
            # carry displacement down; failures at coarse levels just keep
            # the previous guess rather than killing the feature
            disp[idx[good]] = pos[good] * s - positions[idx[good]]
    ok &= residual <= cfg.residual_threshold
    return positions + disp, ok, residual


def track_frame(prev, next_frame, features: list,
                config: TrackerConfig | None = None,
                intrinsics: CameraIntrinsics | None = None,
                prev_pyramid: list | None = None,
                next_pyramid: list | None = None) -> list:
    """Track features from `prev` into `next_frame` (in place).

    Features whose residual exceeds the threshold or whose patch leaves the
    image are marked lost. With intrinsics given, 3D points are refreshed
    from the new frame's depth.
    """
    cfg = config or TrackerConfig()
    if prev.width != next_frame.width or prev.height != next_frame.height:
        raise ValueError("consecutive frames must share dimensions")
    live = [f for f in features if f.active]
    if not live:
        return features
    prev_pyr = prev_pyramid or build_pyramid(to_grayscale(prev.color), cfg.pyramid_levels)
    next_pyr = next_pyramid or build_pyramid(to_grayscale(next_frame.color), cfg.pyramid_levels)
    positions = np.array([f.pixel for f in live])
    pos, ok, _ = _track_pyramidal(prev_pyr, next_pyr, positions, cfg)
    for k, f in enumerate(live):
        if ok[k]:
            f.pixel = pos[k]
            f.status = "alive"
            if intrinsics is not None:
                f.point3d = _point3d_at(next_frame.depth, pos[k], intrinsics)
        else:
            f.status = "lost"
    return features


# ---------------------------------------------------------------------------
# keyframe patch refinement
# ---------------------------------------------------------------------------

def _intrinsic_matrix(intr: CameraIntrinsics) -> np.ndarray:
    return np.array([[intr.fx, 0.0, intr.cx],
                     [0.0, intr.fy, intr.cy],
                     [0.0, 0.0, 1.0]])


def refine_against_keyframe(keyframe: Keyframe, frame, pose_hypothesis: Pose,
                            features: list, config: TrackerConfig | None = None,
                            intrinsics: CameraIntrinsics | None = None,
                            frame_pyramid: list | None = None) -> list:
    """Replace drift-accumulated feature positions by homography-warped
    keyframe patches re-aligned in the current frame.

    Each keyframe feature's local tangent plane (from its normal and depth)
    and the pose hypothesis induce a homography; the keyframe patch is warped
    into the current frame at the predicted position and refined by the same
    translation alignment used for tracking. Features viewed at more than
    the grazing angle are skipped.
    """
    cfg = config or TrackerConfig()
    if intrinsics is None:
        raise ValueError("refinement needs camera intrinsics")
    if not np.isfinite(pose_hypothesis.matrix()).all():
        raise ValueError("pose hypothesis must be finite")
    by_id = {f.feature_id: f for f in features if f.active}
    t_rel = pose_hypothesis.inverse().compose(keyframe.pose)   # cam_kf -> cam_cur
    K = _intrinsic_matrix(intrinsics)
    Kinv = np.linalg.inv(K)
    kf_gray = keyframe.pyramid[0] if keyframe.pyramid else to_grayscale(keyframe.frame.color)
    cur_pyr = frame_pyramid or build_pyramid(to_grayscale(frame.color), cfg.pyramid_levels)
    cur_gray = cur_pyr[0]
    grid = _patch_grid(cfg.patch)
    cos_graze = np.cos(np.radians(cfg.grazing_angle_deg))

    cand = []
    templates = []
    tgxs = []
    tgys = []
    starts = []
    for kf_feat in keyframe.features:
        f = by_id.get(kf_feat.feature_id)
        if f is None or kf_feat.point3d is None:
            continue
        n = keyframe.feature_normals.get(kf_feat.feature_id)
        if n is None or not np.isfinite(n).all():
            continue
        p = kf_feat.point3d
        ray = p / np.linalg.norm(p)
        if float(n @ -ray) < cos_graze:      # plane near-parallel to view ray
            continue
        d = float(n @ p)
        if abs(d) < 1e-6:
            continue
        p_cur = t_rel.apply(p)
        if p_cur[2] <= 0:
            continue
        u_pred = intrinsics.project(p_cur)
        half = cfg.patch // 2 + 1
        if not _in_bounds(u_pred[None, :], half, cur_gray.shape)[0]:
            continue
        h_cam = t_rel.rotation + np.outer(t_rel.translation, n) / d
        h_px = K @ h_cam @ Kinv
        h_inv = np.linalg.inv(h_px)
        uv1 = np.concatenate([u_pred[None, :] + grid,
                              np.ones((len(grid), 1))], axis=1)
        back = uv1 @ h_inv.T
        back = back[:, :2] / back[:, 2:3]
        if (back[:, 0].min() < 1 or back[:, 1].min() < 1
                or back[:, 0].max() > kf_gray.shape[1] - 2
                or back[:, 1].max() > kf_gray.shape[0] - 2):
            continue
        tpl = _sample(kf_gray, back.reshape(-1, 1, 2))[:, 0]
        side = cfg.patch
        tg = np.gradient(tpl.reshape(side, side))
        cand.append(f)
        templates.append(tpl)
        tgys.append(tg[0].reshape(-1))
        tgxs.append(tg[1].reshape(-1))
        starts.append(u_pred)

    if not cand:
        return features
    pos, ok, residual = _align_translation(
        cur_gray, np.array(templates), np.array(tgxs), np.array(tgys),
        np.array(starts), cfg.patch, cfg.max_iterations, cfg.convergence_px)
    ok &= residual <= cfg.residual_threshold
    for k, f in enumerate(cand):
        if ok[k]:
            f.pixel = pos[k]
            f.status = "refined"
            f.point3d = _point3d_at(frame.depth, pos[k], intrinsics)
        # refinement failure leaves the tracked position untouched
    return features


# ---------------------------------------------------------------------------
# robust pose and sequence tracking
# ---------------------------------------------------------------------------

def _robust_rigid(src: np.ndarray, dst: np.ndarray, cfg: TrackerConfig,
                  rng) -> tuple[Pose, np.ndarray] | None:
    """RANSAC 3D-3D pose: src (camera) onto dst (model)."""
    n = len(src)
    if n < 4:
        return None
    best_count = 0
    best_mask = None
    for _ in range(cfg.ransac_rounds):
        pick = rng.choice(n, size=4, replace=False)
        try:
            pose = rigid_from_correspondences(src[pick], dst[pick])
        except EstimationError:
            continue
        err = np.linalg.norm(pose.apply(src) - dst, axis=1)
        mask = err < cfg.inlier_threshold_m
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < cfg.min_inliers:
        return None
    for _ in range(2):
        try:
            pose = rigid_from_correspondences(src[best_mask], dst[best_mask])
        except EstimationError:
            return None
        err = np.linalg.norm(pose.apply(src) - dst, axis=1)
        new_mask = err < cfg.inlier_threshold_m
        if int(new_mask.sum()) < cfg.min_inliers:
            break
        best_mask = new_mask
    return pose, best_mask


def _make_keyframe(frame, pose: Pose, intrinsics: CameraIntrinsics,
                   cfg: TrackerConfig, start_id: int) -> tuple[Keyframe, list]:
    feats = detect_features(frame, intrinsics, cfg.max_features, cfg,
                            start_id=start_id)
    cloud = depth_to_cloud(frame, intrinsics)
    slots = []
    with_depth = []
    for f in feats:
        if f.point3d is None:
            continue
        u = int(round(f.pixel[0]))
        v = int(round(f.pixel[1]))
        slots.append(v * frame.width + u)
        with_depth.append(f)
    normals = {}
    if slots and cloud.valid_mask.sum() >= cfg.normal_k:
        cloud = estimate_normals(cloud, k=cfg.normal_k, indices=np.array(slots))
        for f, s in zip(with_depth, slots):
            n = cloud.normals[s]
            if np.isfinite(n).all():
                normals[f.feature_id] = n
    model_points = {f.feature_id: pose.apply(f.point3d)
                    for f in feats if f.point3d is not None}
    kf = Keyframe(frame=frame, pose=pose,
                  features=[replace_feature(f) for f in feats],
                  feature_normals=normals, model_points=model_points,
                  pyramid=build_pyramid(to_grayscale(frame.color),
                                        cfg.pyramid_levels))
    live = [replace_feature(f) for f in feats]
    return kf, live


def replace_feature(f: TrackedFeature) -> TrackedFeature:
    return TrackedFeature(f.feature_id, f.pixel.copy(),
                          None if f.point3d is None else f.point3d.copy(),
                          f.status)


def track_sequence(frames, intrinsics: CameraIntrinsics,
                   config: TrackerConfig | None = None) -> TrackingResult:
    """Track a whole sequence. The first frame defines the world origin.

    A new keyframe is created when the camera moved more than the translation
    or rotation threshold relative to the last keyframe. Frames where robust
    pose estimation finds fewer than `min_inliers` agreeing correspondences
    are reported failed; tracking then resumes from the last keyframe.
    """
    cfg = config or TrackerConfig()
    keyframes: list[Keyframe] = []
    trajectory: list[TrajectoryEntry] = []
    failed: list[int] = []
    features: list[TrackedFeature] = []
    prev_frame = None
    prev_pyr = None
    next_feature_id = 0

    for frame in frames:
        if not keyframes:
            kf, features = _make_keyframe(frame, Pose.identity(), intrinsics,
                                          cfg, next_feature_id)
            next_feature_id += len(kf.features)
            n_anchored = sum(1 for f in features if f.point3d is not None)
            if n_anchored < cfg.min_inliers:
                raise TrackingFailure(
                    f"first frame has only {n_anchored} depth-valid features")
            keyframes.append(kf)
            trajectory.append(TrajectoryEntry(frame.frame_id, kf.pose, "ok",
                                              0, Pose.identity()))
            prev_frame = frame
            prev_pyr = kf.pyramid
            continue

        kf = keyframes[-1]
        cur_pyr = build_pyramid(to_grayscale(frame.color), cfg.pyramid_levels)
        track_frame(prev_frame, frame, features, cfg, intrinsics,
                    prev_pyramid=prev_pyr, next_pyramid=cur_pyr)

        def pose_from_features() -> tuple[Pose, int] | None:
            src, dst = [], []
            for f in features:
                if f.active and f.point3d is not None:
                    mp = kf.model_points.get(f.feature_id)
                    if mp is not None:
                        src.append(f.point3d)
                        dst.append(mp)
            if len(src) < cfg.min_inliers:
                return None
            rng = np.random.default_rng([cfg.seed, 1, frame.frame_id])
            got = _robust_rigid(np.array(src), np.array(dst), cfg, rng)
            if got is None:
                return None
            return got[0], int(got[1].sum())

        est = pose_from_features()
        if est is not None and cfg.refine:
            refine_against_keyframe(kf, frame, est[0], features, cfg,
                                    intrinsics, frame_pyramid=cur_pyr)
            refined = pose_from_features()
            if refined is not None:
                est = refined

        if est is None:
            failed.append(frame.frame_id)
            trajectory.append(TrajectoryEntry(frame.frame_id, None, "failed",
                                              len(keyframes) - 1, None))
            # resume from the last keyframe
            features = [replace_feature(f) for f in kf.features]
            prev_frame = kf.frame
            prev_pyr = kf.pyramid
            continue

        rel = kf.pose.inverse().compose(est[0])
        pose = kf.pose.compose(rel)
        trajectory.append(TrajectoryEntry(frame.frame_id, pose, "ok",
                                          len(keyframes) - 1, rel))

        moved = (np.linalg.norm(rel.translation) > cfg.keyframe_translation_m
                 or np.degrees(rel.rotation_angle_to(Pose.identity()))
                 > cfg.keyframe_rotation_deg)
        if moved:
            kf, features = _make_keyframe(frame, pose, intrinsics, cfg,
                                          next_feature_id)
            next_feature_id += len(kf.features)
            keyframes.append(kf)
            prev_pyr = kf.pyramid
        else:
            prev_pyr = cur_pyr
        prev_frame = frame

    if not trajectory:
        raise TrackingFailure("empty sequence")
    return TrackingResult(keyframes, trajectory, failed)
