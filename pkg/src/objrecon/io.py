"""Readers and writers for sequences, clouds, trajectories and model bundles.

File formats
------------
sequence manifest : first line ``intrinsics fx fy cx cy width height depth_scale``,
                    then ``frame_id color_path depth_path [timestamp]`` per line.
cloud (.cloud)    : binary little-endian PLY, vertex properties
                    x y z nx ny nz (float32), red green blue (uchar),
                    weight (float32), edge_flag (uchar).
trajectory        : ``frame_id tx ty tz qx qy qz qw`` per line, '#' comments.
model bundle      : directory with manifest.txt, fused.cloud,
                    views/view_%04d.cloud, views/poses.txt, intrinsics.txt.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, ObjectCloud, Pose

__all__ = [
    "LoadError",
    "ExportError",
    "RgbdFrame",
    "SequenceManifest",
    "load_sequence",
    "write_sequence",
    "write_cloud",
    "read_cloud",
    "write_trajectory",
    "read_trajectory",
    "export_model_bundle",
    "read_model_bundle",
]


class LoadError(Exception):
    """A file could not be read or failed validation."""


class ExportError(Exception):
    """A model bundle could not be exported."""


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    """Organized color+depth frame. Depth is 16-bit in depth_scale units."""

    color: np.ndarray
    depth: np.ndarray
    frame_id: int
    timestamp: float | None = None

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.uint8)
        depth = np.asarray(self.depth, dtype=np.uint16)
        if color.shape[:2] != depth.shape:
            raise ValueError("color and depth dimensions differ")
        if color.ndim != 3 or color.shape[2] != 3:
            raise ValueError("color must be HxWx3")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "depth", depth)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class SequenceManifest:
    """Parsed sequence manifest; paths are resolved against its directory."""

    intrinsics: CameraIntrinsics
    records: tuple  # of (frame_id, color_path, depth_path, timestamp|None)
    base_dir: Path


def _manifest_lines(path: Path):
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield ln, line


def parse_manifest(path) -> SequenceManifest:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    lines = list(_manifest_lines(path))
    if not lines:
        raise LoadError(f"empty manifest: {path}")
    ln, header = lines[0]
    parts = header.split()
    if parts[0] != "intrinsics" or len(parts) != 8:
        raise LoadError(f"{path}:{ln}: expected 'intrinsics fx fy cx cy width height depth_scale'")
    try:
        intr = CameraIntrinsics(
            fx=float(parts[1]), fy=float(parts[2]),
            cx=float(parts[3]), cy=float(parts[4]),
            width=int(parts[5]), height=int(parts[6]),
            depth_scale=float(parts[7]))
    except ValueError as e:
        raise LoadError(f"{path}:{ln}: invalid intrinsics: {e}") from e
    records = []
    seen = set()
    for ln, line in lines[1:]:
        parts = line.split()
        if len(parts) not in (3, 4):
            raise LoadError(f"{path}:{ln}: expected 'frame_id color depth [timestamp]'")
        fid = int(parts[0])
        if fid in seen:
            raise LoadError(f"{path}:{ln}: duplicate frame_id {fid}")
        seen.add(fid)
        ts = float(parts[3]) if len(parts) == 4 else None
        color_path = path.parent / parts[1]
        depth_path = path.parent / parts[2]
        for p in (color_path, depth_path):
            if not p.is_file():
                raise LoadError(f"{path}:{ln}: missing file {p}")
        records.append((fid, color_path, depth_path, ts))
    records.sort(key=lambda r: r[0])
    return SequenceManifest(intr, tuple(records), path.parent)


def _read_image(path: Path, kind: str) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(path))
    except Exception as e:
        raise LoadError(f"malformed image {path}: {e}") from e
    if kind == "color":
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        if arr.ndim != 3 or arr.shape[2] < 3:
            raise LoadError(f"malformed color image {path}")
        return arr[:, :, :3].astype(np.uint8)
    if arr.ndim != 2:
        raise LoadError(f"malformed depth image {path}")
    return arr.astype(np.uint16)


def load_sequence(path):
    """Open a sequence manifest. Returns (intrinsics, frame iterator).

    Frames are loaded lazily in frame_id order; a broken record raises
    LoadError naming the offending file.
    """
    manifest = parse_manifest(path)

    def frames() -> Iterator[RgbdFrame]:
        for fid, color_path, depth_path, ts in manifest.records:
            color = _read_image(color_path, "color")
            depth = _read_image(depth_path, "depth")
            if color.shape[:2] != depth.shape:
                raise LoadError(f"frame {fid}: color/depth size mismatch "
                                f"({color_path}, {depth_path})")
            if depth.shape != (manifest.intrinsics.height, manifest.intrinsics.width):
                raise LoadError(f"frame {fid}: image size does not match intrinsics")
            yield RgbdFrame(color, depth, frame_id=fid, timestamp=ts)

    return manifest.intrinsics, frames()


def write_sequence(out_dir, intrinsics: CameraIntrinsics, frames) -> Path:
    """Write frames as PNG pairs plus a manifest. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["intrinsics %.9g %.9g %.9g %.9g %d %d %.9g" % (
        intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
        intrinsics.width, intrinsics.height, intrinsics.depth_scale)]
    for frame in frames:
        cname = f"color_{frame.frame_id:04d}.png"
        dname = f"depth_{frame.frame_id:04d}.png"
        Image.fromarray(frame.color).save(out / cname)
        Image.fromarray(frame.depth).save(out / dname)
        if frame.timestamp is None:
            lines.append(f"{frame.frame_id} {cname} {dname}")
        else:
            lines.append("%d %s %s %.9g" % (frame.frame_id, cname, dname, frame.timestamp))
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# cloud files (binary little-endian PLY)
# ---------------------------------------------------------------------------

_PLY_PROPS = [
    ("float", "x"), ("float", "y"), ("float", "z"),
    ("float", "nx"), ("float", "ny"), ("float", "nz"),
    ("uchar", "red"), ("uchar", "green"), ("uchar", "blue"),
    ("float", "weight"), ("uchar", "edge_flag"),
]
_RECORD = struct.Struct("<6f3Bf B")


def write_cloud(cloud: ObjectCloud, path) -> None:
    path = Path(path)
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0"]
    if cloud.is_organized:
        header.append(f"comment organized {cloud.width} {cloud.height}")
    header.append(f"element vertex {n}")
    header += [f"property {t} {name}" for t, name in _PLY_PROPS]
    header.append("end_header")
    normals = cloud.normals
    if normals is None:
        normals = np.full((n, 3), np.nan)
    rec = np.empty(n, dtype=np.dtype([
        ("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3),
        ("w", "<f4"), ("e", "u1")]))
    rec["xyz"] = cloud.points.astype(np.float32)
    rec["n"] = normals.astype(np.float32)
    rec["rgb"] = cloud.colors
    rec["w"] = cloud.weights.astype(np.float32)
    rec["e"] = cloud.edge_flags.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_cloud(path) -> ObjectCloud:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise LoadError(f"cannot read cloud file {path}: {e}") from e
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise LoadError(f"not a cloud (PLY) file: {path}")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    n = None
    width = height = None
    props = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
        elif parts[:2] == ["comment", "organized"]:
            width, height = int(parts[2]), int(parts[3])
    if n is None or props != _PLY_PROPS:
        raise LoadError(f"unsupported cloud layout in {path}")
    payload = blob[end + len(b"end_header\n"):]
    expected = n * _RECORD.size
    if len(payload) < expected:
        raise LoadError(f"truncated cloud file {path}: "
                        f"{len(payload)} of {expected} payload bytes")
    rec = np.frombuffer(payload[:expected], dtype=np.dtype([
        ("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3),
        ("w", "<f4"), ("e", "u1")]))
    normals = rec["n"].astype(np.float64)
    finite = np.isfinite(normals).all(axis=1)
    if finite.any():
        # renormalize against float32 rounding so cloud invariants hold
        norms = np.linalg.norm(normals[finite], axis=1)
        bad = np.abs(norms - 1.0) > 1e-3
        if bad.any():
            raise LoadError(f"non-unit normals in {path}")
        normals[finite] /= norms[:, None]
    weights = np.clip(rec["w"].astype(np.float64), 0.0, 1.0)
    return ObjectCloud(rec["xyz"].astype(np.float64), normals,
                       rec["rgb"], rec["e"].astype(bool), weights,
                       width=width, height=height)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def write_trajectory(poses, path) -> None:
    """Write (frame_id, Pose) pairs, one line per pose."""
    lines = ["# frame_id tx ty tz qx qy qz qw"]
    for fid, pose in poses:
        t = pose.translation
        q = pose.quaternion()
        lines.append("%d %.9g %.9g %.9g %.9g %.9g %.9g %.9g"
                     % (fid, t[0], t[1], t[2], q[0], q[1], q[2], q[3]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"trajectory not found: {path}")
    out = []
    for ln, line in _manifest_lines(path):
        parts = line.split()
        if len(parts) != 8:
            raise LoadError(f"{path}:{ln}: expected 8 fields")
        fid = int(parts[0])
        vals = [float(v) for v in parts[1:]]
        q = np.array(vals[3:])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise LoadError(f"{path}:{ln}: quaternion norm {norm:.4f} is not unit")
        out.append((fid, Pose.from_quaternion(q / norm, vals[:3])))
    return out


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

def _write_intrinsics(intr: CameraIntrinsics, path: Path) -> None:
    path.write_text("intrinsics %.9g %.9g %.9g %.9g %d %d %.9g\n" % (
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height,
        intr.depth_scale))


def _read_intrinsics(path: Path) -> CameraIntrinsics:
    for _, line in _manifest_lines(path):
        parts = line.split()
        if parts[0] != "intrinsics" or len(parts) != 8:
            raise LoadError(f"bad intrinsics line in {path}")
        return CameraIntrinsics(float(parts[1]), float(parts[2]),
                                float(parts[3]), float(parts[4]),
                                int(parts[5]), int(parts[6]), float(parts[7]))
    raise LoadError(f"no intrinsics in {path}")


def export_model_bundle(session, path) -> Path:
    """Export a session as a self-contained directory for downstream use.

    `session` needs `keyframes` (each with frame, pose, object_indices),
    `fused_cloud`, `intrinsics`, and a `view_cloud(k)` method returning the
    keyframe's object points in sensor coordinates.
    """
    keyframes = list(session.keyframes)
    if not keyframes:
        raise ExportError("session has no keyframes")
    fused = session.fused_cloud
    if fused is None or len(fused) == 0:
        raise ExportError("session has no fused cloud")
    if any(kf.object_indices is None or len(kf.object_indices) == 0
           for kf in keyframes):
        raise ExportError("session has keyframes without segmentation indices")
    out = Path(path)
    (out / "views").mkdir(parents=True, exist_ok=True)
    write_cloud(fused, out / "fused.cloud")
    _write_intrinsics(session.intrinsics, out / "intrinsics.txt")
    manifest = ["fused fused.cloud", "intrinsics intrinsics.txt",
                "poses views/poses.txt"]
    poses = []
    for k, kf in enumerate(keyframes):
        name = f"views/view_{k:04d}.cloud"
        write_cloud(session.view_cloud(k), out / name)
        manifest.append(f"view {kf.frame.frame_id} {name}")
        poses.append((kf.frame.frame_id, kf.pose))
    write_trajectory(poses, out / "views" / "poses.txt")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return out


def read_model_bundle(path):
    """Load a bundle back as (fused, intrinsics, [(frame_id, pose, cloud)])."""
    out = Path(path)
    manifest = out / "manifest.txt"
    if not manifest.is_file():
        raise LoadError(f"bundle manifest not found: {manifest}")
    fused = None
    intr = None
    views = []
    poses = {}
    for _, line in _manifest_lines(manifest):
        parts = line.split()
        if parts[0] == "fused":
            fused = read_cloud(out / parts[1])
        elif parts[0] == "intrinsics":
            intr = _read_intrinsics(out / parts[1])
        elif parts[0] == "poses":
            poses = dict(read_trajectory(out / parts[1]))
        elif parts[0] == "view":
            views.append((int(parts[1]), out / parts[2]))
    if fused is None or intr is None:
        raise LoadError(f"incomplete bundle manifest: {manifest}")
    loaded = []
    for fid, cloud_path in views:
        if fid not in poses:
            raise LoadError(f"bundle view {fid} has no pose")
        loaded.append((fid, poses[fid], read_cloud(cloud_path)))
    return fused, intr, loaded
