"""Triangle meshes for synthetic ground truth: constructors, surface
sampling, exact point-to-mesh distance and ray casting."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

__all__ = [
    "TriangleMesh",
    "make_box",
    "make_chamfered_box",
    "make_sphere",
    "make_revolution",
    "make_pumpkin",
    "sample_surface",
    "closest_point_on_triangles",
    "point_to_mesh_distance",
    "ray_cast",
    "write_obj",
    "read_obj",
]


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.intp).reshape(-1, 3)
        if f.min(initial=0) < 0 or (len(f) and f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]  # (F, 3, 3)

    @property
    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    @property
    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    @property
    def surface_area(self) -> float:
        return float(self.face_areas.sum())

    def transformed(self, pose) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.faces)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64),
                            self.faces)

    def bounding_sphere(self):
        """(center, radius) of a simple vertex-centroid bounding sphere."""
        c = self.vertices.mean(axis=0)
        r = float(np.linalg.norm(self.vertices - c, axis=1).max())
        return c, r


# ---------------------------------------------------------------------------
# constructors; all are centered at the origin with +z up
# ---------------------------------------------------------------------------

def _hull_mesh(points: np.ndarray) -> TriangleMesh:
    """Convex hull as a mesh with outward-oriented faces."""
    hull = ConvexHull(points)
    verts = points[hull.vertices]
    remap = {v: i for i, v in enumerate(hull.vertices)}
    faces = np.array([[remap[i] for i in simplex] for simplex in hull.simplices])
    mesh = TriangleMesh(verts, faces)
    centroid = verts.mean(axis=0)
    tri = mesh.triangles
    n = mesh.face_normals
    flip = np.einsum("fi,fi->f", n, tri.mean(axis=1) - centroid) < 0
    faces[flip] = faces[flip][:, ::-1]
    return TriangleMesh(verts, faces)


def make_box(sx: float, sy: float, sz: float) -> TriangleMesh:
    """Axis-aligned box of the given side lengths."""
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    corners = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy)
                        for z in (-hz, hz)])
    return _hull_mesh(corners)


def make_chamfered_box(sx: float, sy: float, sz: float,
                       chamfer: float) -> TriangleMesh:
    """Box with one long edge (x+, z+) cut off, breaking its symmetries."""
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    c = chamfer
    pts = [[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)
           if not (x > 0 and z > 0)]
    for y in (-hy, hy):
        pts.append([hx - c, y, hz])
        pts.append([hx, y, hz - c])
    return _hull_mesh(np.asarray(pts, dtype=np.float64))


def make_sphere(radius: float, rings: int = 24, segments: int = 32) -> TriangleMesh:
    """UV sphere centered at the origin."""
    verts = [np.array([0.0, 0.0, radius])]
    for i in range(1, rings):
        phi = np.pi * i / rings
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append(radius * np.array(
                [np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)]))
    verts.append(np.array([0.0, 0.0, -radius]))
    faces = []
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * segments + (j % segments)

    for j in range(segments):
        faces.append([0, ring(1, j), ring(1, j + 1)])
        faces.append([south, ring(rings - 1, j + 1), ring(rings - 1, j)])
    for i in range(1, rings - 1):
        for j in range(segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    return TriangleMesh(np.array(verts), np.array(faces))


def make_revolution(profile_r, profile_z, segments: int = 32) -> TriangleMesh:
    """Surface of revolution about z from a polyline profile.

    End rows with r > 0 are closed by flat caps, so the solid is watertight
    and gains planar resting faces.
    """
    profile_r = np.asarray(profile_r, dtype=np.float64)
    profile_z = np.asarray(profile_z, dtype=np.float64)
    if len(profile_r) != len(profile_z) or len(profile_r) < 2:
        raise ValueError("profile needs matching r/z arrays of length >= 2")
    verts = []
    rows = []
    for r, z in zip(profile_r, profile_z):
        row = []
        for j in range(segments):
            th = 2 * np.pi * j / segments
            row.append(len(verts))
            verts.append([r * np.cos(th), r * np.sin(th), z])
        rows.append(row)
    faces = []
    for i in range(len(rows) - 1):
        for j in range(segments):
            a, b = rows[i][j], rows[i][(j + 1) % segments]
            c, d = rows[i + 1][j], rows[i + 1][(j + 1) % segments]
            # wind so outward normals point away from the axis
            faces.append([a, b, d])
            faces.append([a, d, c])
    # close profile ends of nonzero radius with flat caps (winding fixed below)
    for row, z, r in ((rows[0], profile_z[0], profile_r[0]),
                      (rows[-1], profile_z[-1], profile_r[-1])):
        if r <= 1e-12:
            continue
        center = len(verts)
        verts.append([0.0, 0.0, z])
        for j in range(segments):
            faces.append([center, row[j], row[(j + 1) % segments]])
    mesh = TriangleMesh(np.array(verts), np.array(faces))
    # orient every face outward from the centroid (robust to cap winding)
    centroid = mesh.vertices.mean(axis=0)
    fn = mesh.face_normals
    mid = mesh.triangles.mean(axis=1)
    flipmask = np.einsum("fi,fi->f", fn, mid - centroid) < 0
    faces = np.array(faces)
    faces[flipmask] = faces[flipmask][:, ::-1]
    return TriangleMesh(np.array(verts), faces)


def make_pumpkin(radius: float = 0.07, height: float = 0.09,
                 segments: int = 32, rows: int = 14) -> TriangleMesh:
    """Rotationally symmetric squashed spheroid with flat top/bottom caps."""
    zs = np.linspace(0.8, -0.8, rows)  # truncated so the caps are real faces
    r = radius * np.sqrt(1.0 - zs ** 2)
    z = height / 2.0 * zs
    return make_revolution(r, z, segments=segments)


# ---------------------------------------------------------------------------
# sampling and distance
# ---------------------------------------------------------------------------

def sample_surface(mesh: TriangleMesh, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples. Returns (points (n,3), face normals (n,3))."""
    areas = mesh.face_areas
    probs = areas / areas.sum()
    idx = rng.choice(len(probs), size=n, p=probs)
    tri = mesh.triangles[idx]
    u = rng.random(n)
    v = rng.random(n)
    swap = u + v > 1.0
    u[swap] = 1.0 - u[swap]
    v[swap] = 1.0 - v[swap]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) \
        + v[:, None] * (tri[:, 2] - tri[:, 0])
    return pts, mesh.face_normals[idx]


def closest_point_on_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point to `p` on each triangle. p: (..., 3), tri: (..., 3, 3).

    Region-based algorithm (Ericson, Real-Time Collision Detection 5.1.5),
    vectorized over leading dimensions.
    """
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.clip(d1 / (d1 - d3), 0.0, 1.0)
        w_ac = np.clip(d2 / (d2 - d6), 0.0, 1.0)
        w_bc = np.clip((d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0, 1.0)
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    out = a + v_in[..., None] * ab + w_in[..., None] * ac  # interior default
    pt_bc = b + w_bc[..., None] * (c - b)
    pt_ac = a + w_ac[..., None] * ac
    pt_ab = a + v_ab[..., None] * ab

    region_a = (d1 <= 0) & (d2 <= 0)
    region_b = (d3 >= 0) & (d4 <= d3)
    region_c = (d6 >= 0) & (d5 <= d6)
    region_ab = (~region_a) & (~region_b) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    region_ac = (~region_a) & (~region_c) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    region_bc = (~region_b) & (~region_c) & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    out = np.where(region_bc[..., None], pt_bc, out)
    out = np.where(region_ac[..., None], pt_ac, out)
    out = np.where(region_ab[..., None], pt_ab, out)
    out = np.where(region_c[..., None], c, out)
    out = np.where(region_b[..., None], b, out)
    out = np.where(region_a[..., None], a, out)
    return out


def point_to_mesh_distance(points, mesh: TriangleMesh,
                           chunk: int = 128) -> np.ndarray:
    """Exact unsigned distance from each point to the nearest triangle."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles
    if len(tri) == 0:
        raise ValueError("mesh has no faces")
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        block = pts[s:s + chunk]                       # (m, 3)
        closest = closest_point_on_triangles(
            block[:, None, :], tri[None, :, :, :])     # (m, F, 3)
        d2 = ((block[:, None, :] - closest) ** 2).sum(axis=2)
        out[s:s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def ray_cast(mesh: TriangleMesh, origins, directions, t_max: float = np.inf):
    """Batch ray casting (Moller-Trumbore).

    Returns (t, face_index); t is inf and face_index -1 where the ray misses.
    Directions need not be unit; t is in units of the direction length.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    n_rays = len(o)
    best_t = np.full(n_rays, np.inf)
    best_f = np.full(n_rays, -1, dtype=np.intp)
    # chunk rays so the (rays x faces) temporaries stay small
    chunk = max(1, int(4e6 / max(len(tri), 1)))
    for s in range(0, n_rays, chunk):
        oc = o[s:s + chunk][:, None, :]
        dc = d[s:s + chunk][:, None, :]
        pvec = np.cross(dc, e2[None])
        det = np.einsum("rfi,fi->rf", pvec, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tvec = oc - v0[None]
            u = np.einsum("rfi,rfi->rf", tvec, pvec) * inv
            qvec = np.cross(tvec, e1[None])
            v = np.einsum("rfi,rfi->rf", qvec, dc) * inv
            t = np.einsum("rfi,fi->rf", qvec, e2) * inv
            hit = (np.abs(det) > 1e-12) & (u >= -1e-12) & (v >= -1e-12) \
                & (u + v <= 1 + 1e-12) & (t > 1e-9) & (t <= t_max)
        t = np.where(hit, t, np.inf)
        f = t.argmin(axis=1)
        tm = t[np.arange(len(t)), f]
        sel = np.isfinite(tm)
        best_t[s:s + chunk][sel] = tm[sel]
        best_f[s:s + chunk][sel] = f[sel]
    return best_t, best_f


# ---------------------------------------------------------------------------
# OBJ io (v/f subset)
# ---------------------------------------------------------------------------

def write_obj(mesh: TriangleMesh, path) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append("v %.9g %.9g %.9g" % (v[0], v[1], v[2]))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts = []
    faces = []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            faces.append(idx)
    if not verts or not faces:
        raise ValueError(f"no mesh data in {path}")
    return TriangleMesh(np.array(verts), np.array(faces))
