"""Synthetic RGB-D sequences from ground-truth meshes, plus the
surface-distance evaluation used to grade reconstructions.

The renderer casts exact rays against the object mesh over an analytic
textured support plane, then corrupts depth with an axial noise term that
grows quadratically with distance and a lateral jitter term concentrated at
depth discontinuities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import meshes
from .geometry import CameraIntrinsics, NeighborIndex, ObjectCloud, Pose
from .io import RgbdFrame, write_sequence, write_trajectory
from .meshes import TriangleMesh


__all__ = [
    "NoiseParams",
    "SyntheticScene",
    "AccuracyReport",
    "AlignmentError",
    "orbit_trajectory",
    "render_frame",
    "render_sequence",
    "evaluate_against_mesh",
    "align_for_evaluation",
    "load_scene",
    "save_scene",
    "make_object_mesh",
]


class AlignmentError(Exception):
    """Automatic evaluation registration failed its quality floor."""


@dataclass(frozen=True)
class NoiseParams:
    axial_sigma_base: float = 0.0015   # meters at 1 m, grows with (z/1m)^2
    lateral_sigma: float = 0.002       # meters, applied near depth edges
    seed: int = 0


DEFAULT_INTRINSICS = CameraIntrinsics(fx=320.0, fy=320.0, cx=159.5, cy=119.5,
                                      width=320, height=240, depth_scale=0.001)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """Object mesh resting on the z=0 plane, viewed from an orbit."""

    object_mesh: TriangleMesh
    trajectory: tuple            # of Pose (camera-to-world)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    noise: NoiseParams = field(default_factory=NoiseParams)
    background_pattern: int = 0
    plane_normal: tuple = (0.0, 0.0, 1.0)
    plane_offset: float = 0.0

    def __post_init__(self):
        center, _ = self.object_mesh.bounding_sphere()
        for k, pose in enumerate(self.trajectory):
            cam = pose.inverse().apply(center)
            if cam[2] <= 0:
                raise ValueError(f"trajectory pose {k} does not view the object")
            u, v = self.intrinsics.project(cam)
            if not (0 <= u < self.intrinsics.width and 0 <= v < self.intrinsics.height):
                raise ValueError(f"trajectory pose {k}: object centroid off-image")


def orbit_trajectory(center, radius: float, elevation_deg: float, count: int,
                     span_deg: float = 360.0, start_deg: float = 0.0) -> list[Pose]:
    """Camera poses orbiting `center`, looking at it, world up = +z."""
    center = np.asarray(center, dtype=np.float64)
    el = math.radians(elevation_deg)
    poses = []
    for k in range(count):
        az = math.radians(start_deg + span_deg * k / max(count, 1))
        eye = center + radius * np.array([
            math.cos(el) * math.cos(az),
            math.cos(el) * math.sin(az),
            math.sin(el)])
        z_cam = center - eye
        z_cam = z_cam / np.linalg.norm(z_cam)
        x_cam = np.cross([0.0, 0.0, -1.0], z_cam)
        nx = np.linalg.norm(x_cam)
        if nx < 1e-9:
            raise ValueError("degenerate look-at (camera directly above object)")
        x_cam /= nx
        y_cam = np.cross(z_cam, x_cam)
        poses.append(Pose(np.column_stack([x_cam, y_cam, z_cam]), eye))
    return poses


# ---------------------------------------------------------------------------
# procedural texture
# ---------------------------------------------------------------------------

def _lattice_hash(ix: np.ndarray, iy: np.ndarray, pattern: int) -> np.ndarray:
    """Deterministic pseudo-random value in [0,1) per integer lattice point."""
    h = (ix.astype(np.int64) * 374761393 + iy.astype(np.int64) * 668265263
         + np.int64(pattern) * 2147483647)
    h = (h ^ (h >> 13)) * 1274126177
    h = h ^ (h >> 16)
    return (h & 0xFFFFFF).astype(np.float64) / float(0x1000000)


def _value_noise(x: np.ndarray, y: np.ndarray, scale: float, pattern: int) -> np.ndarray:
    """Bilinear value noise over a lattice of spacing `scale` (meters)."""
    gx = x / scale
    gy = y / scale
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    # smoothstep keeps gradients continuous so trackers see usable texture
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    v00 = _lattice_hash(ix, iy, pattern)
    v10 = _lattice_hash(ix + 1, iy, pattern)
    v01 = _lattice_hash(ix, iy + 1, pattern)
    v11 = _lattice_hash(ix + 1, iy + 1, pattern)
    return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy + v11 * fx * fy)


def plane_texture(x: np.ndarray, y: np.ndarray, pattern: int) -> np.ndarray:
    """High-contrast multi-scale pattern in [0,1], a stand-in for a printed
    textured sheet on the support surface."""
    v = (0.55 * _value_noise(x, y, 0.035, pattern)
         + 0.30 * _value_noise(x, y, 0.012, pattern + 7)
         + 0.15 * _value_noise(x, y, 0.005, pattern + 19))
    return np.clip(0.5 + 1.9 * (v - 0.5), 0.02, 0.98)


def _object_shade(points: np.ndarray, normals: np.ndarray, pattern: int) -> np.ndarray:
    light = np.array([0.4, 0.25, 0.88])
    light = light / np.linalg.norm(light)
    lambert = 0.35 + 0.65 * np.clip(normals @ light, 0.0, 1.0)
    mottle = _value_noise(points[:, 0] + 3.1 * points[:, 2],
                          points[:, 1] - 2.3 * points[:, 2], 0.008, pattern + 41)
    base = np.array([0.80, 0.55, 0.25])
    rgb = base[None, :] * lambert[:, None] * (0.75 + 0.5 * mottle[:, None])
    return np.clip(rgb, 0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _clean_render(scene: SyntheticScene, pose: Pose):
    """Noise-free z-depth (meters, 0 = no return) and color for one pose."""
    intr = scene.intrinsics
    w, h = intr.width, intr.height
    u = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    v = np.arange(h, dtype=np.float64)[:, None].repeat(w, axis=1)
    # camera-frame ray with unit z so the ray parameter equals z-depth
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                      np.ones_like(u)], axis=-1).reshape(-1, 3)
    d_world = pose.rotate(d_cam)
    origin = pose.translation

    depth = np.full(w * h, np.inf)
    color = np.zeros((w * h, 3))

    # analytic support plane
    pn = np.asarray(scene.plane_normal, dtype=np.float64)
    denom = d_world @ pn
    t_plane = np.where(np.abs(denom) > 1e-12,
                       (scene.plane_offset - origin @ pn) / denom, np.inf)
    hit_plane = t_plane > 1e-6
    depth = np.where(hit_plane, t_plane, depth)
    hits = origin + d_world * t_plane[:, None]
    tex = plane_texture(hits[:, 0], hits[:, 1], scene.background_pattern)
    color[hit_plane] = tex[hit_plane, None].repeat(3, axis=1)

    # object mesh, restricted to rays that can reach its bounding sphere
    center, radius = scene.object_mesh.bounding_sphere()
    oc = center - origin
    d_norm = np.linalg.norm(d_world, axis=1)
    proj = (d_world @ oc) / d_norm
    perp2 = (oc @ oc) - proj ** 2
    cand = np.flatnonzero((proj > 0) & (perp2 <= (radius * 1.05 + 0.01) ** 2))
    if len(cand):
        t_obj, f_obj = meshes.ray_cast(scene.object_mesh, origin[None].repeat(len(cand), 0),
                                       d_world[cand])
        closer = t_obj < depth[cand]
        sel = cand[closer]
        depth[sel] = t_obj[closer]
        pts = origin + d_world[sel] * depth[sel, None]
        nrm = scene.object_mesh.face_normals[f_obj[closer]]
        color[sel] = _object_shade(pts, nrm, scene.background_pattern)

    depth = np.where(np.isfinite(depth), depth, 0.0).reshape(h, w)
    color = (color.reshape(h, w, 3) * 255.0).round().astype(np.uint8)
    return depth, color


def _inject_noise(depth: np.ndarray, intr: CameraIntrinsics,
                  noise: NoiseParams, rng) -> np.ndarray:
    """Axial + lateral sensor noise on a clean z-depth image (meters)."""
    out = depth.copy()
    valid = depth > 0
    if noise.lateral_sigma > 0:
        # lateral jitter: near discontinuities the measured ray samples a
        # laterally displaced surface point, making edge pixels flip between
        # foreground and background
        h, w = depth.shape
        dz = np.zeros_like(depth)
        dz[:, :-1] = np.abs(np.diff(depth, axis=1))
        dz2 = np.zeros_like(depth)
        dz2[:-1, :] = np.abs(np.diff(depth, axis=0))
        edge = (np.maximum(dz, dz2) > 0.02) | ~valid
        near = edge.copy()
        near[1:, :] |= edge[:-1, :]
        near[:-1, :] |= edge[1:, :]
        near[:, 1:] |= edge[:, :-1]
        near[:, :-1] |= edge[:, 1:]
        near &= valid
        idx = np.flatnonzero(near)
        if len(idx):
            z = depth.reshape(-1)[idx]
            sig_px = noise.lateral_sigma * intr.fx / z
            du = np.rint(rng.normal(0.0, sig_px)).astype(np.intp)
            dv = np.rint(rng.normal(0.0, sig_px)).astype(np.intp)
            vv, uu = np.unravel_index(idx, depth.shape)
            uu = np.clip(uu + du, 0, w - 1)
            vv = np.clip(vv + dv, 0, h - 1)
            out.reshape(-1)[idx] = depth[vv, uu]
    if noise.axial_sigma_base > 0:
        z = out[out > 0]
        sigma = noise.axial_sigma_base * z ** 2
        out[out > 0] = z + rng.normal(0.0, 1.0, size=len(z)) * sigma
    return np.clip(out, 0.0, None)


def render_frame(scene: SyntheticScene, frame_id: int) -> RgbdFrame:
    pose = scene.trajectory[frame_id]
    depth_m, color = _clean_render(scene, pose)
    rng = np.random.default_rng([scene.noise.seed, frame_id])
    depth_m = _inject_noise(depth_m, scene.intrinsics, scene.noise, rng)
    q = np.rint(depth_m / scene.intrinsics.depth_scale)
    depth = np.clip(q, 0, 65535).astype(np.uint16)
    return RgbdFrame(color, depth, frame_id=frame_id)


def render_sequence(scene: SyntheticScene, out_dir) -> Path:
    """Render the whole trajectory to disk. Returns the manifest path.

    Also writes gt_poses.txt (ground-truth camera-to-world trajectory) and
    gt_mesh.obj so reconstructions can be graded without re-creating the
    scene.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = (render_frame(scene, k) for k in range(len(scene.trajectory)))
    manifest = write_sequence(out, scene.intrinsics, frames)
    write_trajectory(list(enumerate(scene.trajectory)), out / "gt_poses.txt")
    meshes.write_obj(scene.object_mesh, out / "gt_mesh.obj")
    return manifest


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AccuracyReport:
    """Closest-distance statistics of a reconstruction against a mesh."""

    mean_mm: float
    sigma_mm: float
    max_mm: float
    histogram_edges_mm: np.ndarray
    histogram_counts: np.ndarray

    def __post_init__(self):
        if self.mean_mm < 0 or self.sigma_mm < 0:
            raise ValueError("statistics must be nonnegative")

    @property
    def point_count(self) -> int:
        return int(np.sum(self.histogram_counts))

    def to_text(self) -> str:
        lines = ["%.6g %.6g %.6g" % (self.mean_mm, self.sigma_mm, self.max_mm)]
        for k, c in enumerate(self.histogram_counts):
            lines.append("bin %.6g %.6g %d" % (self.histogram_edges_mm[k],
                                               self.histogram_edges_mm[k + 1],
                                               int(c)))
        return "\n".join(lines) + "\n"


def evaluate_against_mesh(cloud: ObjectCloud, mesh: TriangleMesh,
                          registration: Pose | None = None,
                          bins: int = 20) -> AccuracyReport:
    """Statistics of the exact closest distance from cloud points to the mesh."""
    pts = cloud.points[cloud.valid_mask]
    if len(pts) == 0:
        raise ValueError("cannot evaluate an empty cloud")
    if registration is not None:
        pts = registration.apply(pts)
    d_mm = meshes.point_to_mesh_distance(pts, mesh) * 1000.0
    top = max(float(d_mm.max()), 1e-9)
    counts, edges = np.histogram(d_mm, bins=bins, range=(0.0, top))
    return AccuracyReport(float(d_mm.mean()), float(d_mm.std()), float(d_mm.max()),
                          edges, counts)


def align_for_evaluation(cloud: ObjectCloud, mesh: TriangleMesh,
                         quality_floor: float = 0.5, seed: int = 0) -> Pose:
    """Automatic registration of a reconstruction onto its reference mesh.

    Coarse candidates (features + stable planes) against a sampled mesh
    cloud, ICP-refined and FSV/overlap scored; fails rather than returning a
    low-confidence registration.
    """
    from . import multisession  # local import: multisession builds on this module's peers
    from .geometry import estimate_normals

    rng = np.random.default_rng([seed, 9119])
    n = max(4000, 2 * len(cloud))
    pts, nrm = meshes.sample_surface(mesh, n, rng)
    ref = ObjectCloud.from_points(pts, normals=nrm / np.linalg.norm(nrm, axis=1, keepdims=True))
    src = cloud
    if not src.has_normals() or not np.isfinite(src.normals).all(axis=1).any():
        src = estimate_normals(src, k=15)
    best = multisession.best_alignment(src, ref, seed=seed)
    if best is None or best.quality < quality_floor:
        q = 0.0 if best is None else best.quality
        raise AlignmentError(f"evaluation alignment quality {q:.3f} "
                             f"below floor {quality_floor:.3f}")
    return best.transform


# ---------------------------------------------------------------------------
# scene description files
# ---------------------------------------------------------------------------

def make_object_mesh(kind: str, *params: float) -> TriangleMesh:
    if kind == "sphere":
        return meshes.make_sphere(params[0])
    if kind == "box":
        return meshes.make_box(params[0], params[1], params[2])
    if kind == "chamfered_box":
        return meshes.make_chamfered_box(params[0], params[1], params[2], params[3])
    if kind == "pumpkin":
        return meshes.make_pumpkin(params[0], params[1])
    raise ValueError(f"unknown object kind {kind!r}")


def _rest_on_plane(mesh: TriangleMesh) -> TriangleMesh:
    return mesh.translated([0.0, 0.0, -mesh.vertices[:, 2].min()])


def load_scene(path) -> SyntheticScene:
    """Parse a key=value scene description.

    Keys: object (kind + params), orbit (radius elev_deg count [span_deg]),
    image (width height fx fy), noise (sigma_base sigma_lateral), seed,
    pattern. Unknown keys are rejected.
    """
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"scene line is not key = value: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val.split()
    return scene_from_values(values)


def scene_from_values(values: dict) -> SyntheticScene:
    known = {"object", "orbit", "image", "noise", "seed", "pattern"}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    if "object" not in values or "orbit" not in values:
        raise ValueError("scene needs 'object' and 'orbit'")
    obj = values["object"]
    mesh = _rest_on_plane(make_object_mesh(obj[0], *map(float, obj[1:])))
    orbit = [float(x) for x in values["orbit"]]
    if len(orbit) == 3:
        orbit.append(360.0)
    intr = DEFAULT_INTRINSICS
    if "image" in values:
        w, h = int(values["image"][0]), int(values["image"][1])
        fx, fy = float(values["image"][2]), float(values["image"][3])
        intr = CameraIntrinsics(fx=fx, fy=fy, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                                width=w, height=h)
    seed = int(values.get("seed", ["0"])[0])
    noise = NoiseParams(seed=seed)
    if "noise" in values:
        noise = NoiseParams(axial_sigma_base=float(values["noise"][0]),
                            lateral_sigma=float(values["noise"][1]), seed=seed)
    center, _ = mesh.bounding_sphere()
    traj = orbit_trajectory(center, orbit[0], orbit[1], int(orbit[2]), orbit[3])
    return SyntheticScene(mesh, tuple(traj), intrinsics=intr, noise=noise,
                          background_pattern=int(values.get("pattern", ["0"])[0]))


def save_scene(values: dict, path) -> None:
    lines = [f"{k} = {' '.join(str(x) for x in v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")
