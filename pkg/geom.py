"""
Geometry module for Silhouette Lab.
Meshes, pinhole cameras, rigid transforms, icosphere construction, surface
sampling and the normalized-cube-to-frustum homography.

Conventions used everywhere:
  - view space: +X right, +Y down, +Z forward (in front of the camera)
  - pixels: (0, 0) is the top-left corner of the image, pixel (row i, col j)
    covers [j, j+1) x [i, i+1), so its centre is at (j + 0.5, i + 0.5)
  - cameras are world-to-view: X_view = R @ X_world + t

Every function that transforms points accepts plain arrays or tape variables
(see diff.py), so the same code produces ground truth and gradients.
"""

import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

import diff
from errors import BehindCameraError, DegenerateMeshError, InvalidArgumentError

logger = logging.getLogger(__name__)

SPACE_TAGS = ("normalized", "view", "world")
MAX_ICO_LEVEL = 5


# ────────────── TYPES ──────────────

@dataclass(frozen=True)
class Box2D:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InvalidArgumentError(f"invalid box {self.as_tuple()}: need x0 < x1 and y0 < y1")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def union(self, other):
        return Box2D(min(self.x0, other.x0), min(self.y0, other.y0),
                     max(self.x1, other.x1), max(self.y1, other.y1))

    def expand(self, margin):
        return Box2D(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)

    def clamp(self, width, height):
        """Intersect with the frame; None when nothing is left."""
        x0, y0 = max(self.x0, 0.0), max(self.y0, 0.0)
        x1, y1 = min(self.x1, float(width)), min(self.y1, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return Box2D(x0, y0, x1, y1)

    @classmethod
    def from_mask(cls, mask):
        """Tight box around the foreground pixels (pixel edges), None if empty."""
        rows = np.flatnonzero(np.any(mask, axis=1))
        cols = np.flatnonzero(np.any(mask, axis=0))
        if rows.size == 0:
            return None
        return cls(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


@dataclass(frozen=True)
class LayoutBounds:
    rho0: float
    rho1: float
    z0: float
    z1: float

    def __post_init__(self):
        if not (0 < self.rho0 < self.rho1):
            raise InvalidArgumentError(f"layout bounds need 0 < rho0 < rho1, got {self.rho0}, {self.rho1}")
        if not (0 < self.z0 < self.z1):
            raise InvalidArgumentError(f"layout bounds need 0 < z0 < z1, got {self.z0}, {self.z1}")

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["rho0"]), float(data["rho1"]), float(data["z0"]), float(data["z1"]))


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9, rtol=0.0):
            raise InvalidArgumentError("camera rotation is not orthonormal")

    @property
    def diagonal(self):
        """Image diagonal in pixels; the unit of normalized image coordinates."""
        return float(np.hypot(self.width, self.height))

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
            rotation=np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(data["translation"], dtype=np.float64),
        )

    def with_resolution(self, width, height):
        """Same pose and field of view at another image size."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      int(width), int(height), self.rotation, self.translation)


@dataclass
class Mesh:
    """Triangle mesh. vertices may be a plain (V, 3) array or a tape variable."""
    vertices: object
    faces: np.ndarray
    space_tag: str = "view"

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.space_tag not in SPACE_TAGS:
            raise InvalidArgumentError(f"unknown space tag {self.space_tag!r}")

    @property
    def vertex_values(self):
        return diff.value(self.vertices)

    @property
    def num_vertices(self):
        return self.vertex_values.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    def validate(self):
        verts = self.vertex_values
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise DegenerateMeshError(f"vertices must be (V, 3), got {verts.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= verts.shape[0]):
            raise DegenerateMeshError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise DegenerateMeshError("face with repeated vertex index")
        if self.space_tag == "normalized" and np.any(np.abs(verts) > 1.0 + 1e-12):
            raise DegenerateMeshError("normalized mesh has coordinates outside [-1, 1]")
        return self

    def face_areas(self):
        v = self.vertex_values
        tri = v[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def detached(self):
        return Mesh(self.vertex_values.copy(), self.faces.copy(), self.space_tag)


@dataclass(frozen=True)
class Frustum:
    """Object frustum: a 2D box swept between depths z - rho/2 and z + rho/2.

    z and rho may be tape variables.
    """
    box: Box2D
    z: object
    rho: object

    def validate(self, camera=None):
        z, rho = float(diff.value(self.z)), float(diff.value(self.rho))
        if rho <= 0:
            raise InvalidArgumentError(f"frustum depth extent must be positive, got {rho}")
        if z - rho / 2.0 <= 0:
            raise InvalidArgumentError(f"frustum near plane {z - rho / 2.0:.4f} is not in front of the camera")
        if camera is not None:
            b = self.box
            if b.x0 < 0 or b.y0 < 0 or b.x1 > camera.width or b.y1 > camera.height:
                raise InvalidArgumentError(f"frustum box {b.as_tuple()} outside the {camera.width}x{camera.height} image")
        return self


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        """Transform (N, 3) points; tape variables stay differentiable."""
        return diff.add(diff.matmul(points, self.rotation.T), self.translation)

    def compose(self, first):
        """self ∘ first: apply `first`, then self."""
        return RigidTransform(self.rotation @ first.rotation,
                              self.rotation @ first.translation + self.translation)

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


# ────────────── ICOSPHERE & EDGES ──────────────

_ICOSAHEDRON_FACES = np.array([
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
], dtype=np.int64)


@lru_cache(maxsize=None)
def _icosphere_arrays(level):
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = _ICOSAHEDRON_FACES.copy()

    for _ in range(level):
        # one new vertex per unique edge, at the normalised midpoint
        edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
        unique, inverse = np.unique(edges, axis=0, return_inverse=True)
        mids = verts[unique[:, 0]] + verts[unique[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        mid_index = inverse.reshape(3, -1).T + len(verts)
        ab, bc, ca = mid_index[:, 0], mid_index[:, 1], mid_index[:, 2]
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate([
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ])
        verts = np.concatenate([verts, mids])

    verts.setflags(write=False)
    faces.setflags(write=False)
    return verts, faces


def icosphere(level):
    """Unit icosphere: the icosahedron subdivided `level` times."""
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_ICO_LEVEL:
        raise InvalidArgumentError(f"icosphere level must be an integer in [0, {MAX_ICO_LEVEL}], got {level!r}")
    verts, faces = _icosphere_arrays(int(level))
    return Mesh(verts.copy(), faces.copy(), "normalized")


def mesh_edges(mesh):
    """Unique undirected edges as an (E, 2) array, sorted lexicographically."""
    f = mesh.faces
    if f.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    return np.unique(edges, axis=0)


# ────────────── LAYOUT & FRUSTUM ──────────────

def layout_decode(rho_t, z_t, bounds):
    """Map layout scalars in (0, 1) to metric depth extent and centre depth."""
    for name, x in (("rho_t", rho_t), ("z_t", z_t)):
        xv = diff.value(x)
        if np.any(xv <= 0.0) or np.any(xv >= 1.0):
            raise InvalidArgumentError(f"{name} must lie strictly in (0, 1), got {xv}")
    rho = diff.add(bounds.rho0, diff.mul(rho_t, bounds.rho1 - bounds.rho0))
    z = diff.add(bounds.z0, diff.mul(z_t, bounds.z1 - bounds.z0))
    return rho, z


def frustum_homography(frustum, camera):
    """
    Map taking normalized points (u, v, w) in [-1, 1]^3 to view space.

        d  = z + w * rho / 2
        px = box centre x + u * box half width   (same for py with v)
        X  = (px - cx) * d / fx,  Y = (py - cy) * d / fy,  Z = d
    """
    frustum.validate(camera)
    box = frustum.box
    bcx, bcy = box.center
    hw, hh = 0.5 * box.width, 0.5 * box.height
    half_rho = diff.mul(frustum.rho, 0.5)

    def to_view(points):
        u, v, w = points[:, 0], points[:, 1], points[:, 2]
        d = diff.add(frustum.z, diff.mul(w, half_rho))
        px = diff.add(bcx, diff.mul(u, hw))
        py = diff.add(bcy, diff.mul(v, hh))
        x = diff.mul(diff.sub(px, camera.cx), diff.div(d, camera.fx))
        y = diff.mul(diff.sub(py, camera.cy), diff.div(d, camera.fy))
        return diff.stack([x, y, d], axis=1)

    return to_view


def inverse_frustum_homography(frustum, camera):
    """View space back to the normalized cube (values only)."""
    frustum.validate(camera)
    box = frustum.box
    bcx, bcy = box.center
    hw, hh = 0.5 * box.width, 0.5 * box.height
    z, rho = float(diff.value(frustum.z)), float(diff.value(frustum.rho))

    def to_normalized(points):
        points = np.asarray(points, dtype=np.float64)
        pixels, depth = project(camera, points)
        u = (pixels[:, 0] - bcx) / hw
        v = (pixels[:, 1] - bcy) / hh
        w = (depth - z) / (0.5 * rho)
        return np.stack([u, v, w], axis=1)

    return to_normalized


# ────────────── PROJECTION & POSES ──────────────

def project(camera, points):
    """Pinhole projection of (N, 3) view-space points -> (pixels (N, 2), depths (N,))."""
    depth = points[:, 2]
    if np.any(diff.value(depth) <= 0.0):
        raise BehindCameraError("cannot project points with non-positive depth")
    px = diff.add(diff.mul(camera.fx, diff.div(points[:, 0], depth)), camera.cx)
    py = diff.add(diff.mul(camera.fy, diff.div(points[:, 1], depth)), camera.cy)
    return diff.stack([px, py], axis=1), depth


def backproject(camera, pixels, depths):
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    x = (pixels[:, 0] - camera.cx) * depths / camera.fx
    y = (pixels[:, 1] - camera.cy) * depths / camera.fy
    return np.stack([x, y, depths], axis=1)


def world_to_view(camera, points):
    return RigidTransform(camera.rotation, camera.translation).apply(points)


def view_to_world(camera, points):
    return RigidTransform(camera.rotation, camera.translation).inverse().apply(points)


def relative_transform(pose_i, pose_j):
    """Rigid transform taking view-i coordinates to view-j coordinates."""
    r = pose_j.rotation @ pose_i.rotation.T
    return RigidTransform(r, pose_j.translation - r @ pose_i.translation)


def mesh_box(mesh, camera):
    """Tight box of the projected vertices (values only)."""
    pixels, _ = project(camera, mesh.vertex_values)
    lo, hi = pixels.min(axis=0), pixels.max(axis=0)
    if not (lo[0] < hi[0] and lo[1] < hi[1]):
        return None
    return Box2D(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


# ────────────── SURFACE SAMPLING ──────────────

@dataclass
class SurfaceSamples:
    points: object
    face_ids: np.ndarray
    barycentric: np.ndarray


def surface_points(vertices, faces, face_ids, barycentric):
    """Points as fixed barycentric combinations of (possibly taped) vertices."""
    tri = diff.getitem(vertices, faces[face_ids])          # (n, 3, 3)
    return diff.sum(diff.mul(tri, barycentric[:, :, None]), axis=1)


def sample_surface(mesh, n, rng):
    """
    Area-weighted uniform samples on the mesh surface.

    Face choice and barycentric weights are drawn from the values and then held
    fixed, so the points are differentiable in the vertices. Zero-area faces
    stay in the mesh but are never sampled.
    """
    if n < 1:
        raise InvalidArgumentError(f"sample count must be at least 1, got {n}")
    areas = mesh.face_areas()
    total = float(areas.sum())
    if not total > 0.0:
        raise DegenerateMeshError("mesh has zero total surface area")
    face_ids = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    points = surface_points(mesh.vertices, mesh.faces, face_ids, bary)
    return SurfaceSamples(points, face_ids, bary)


# ────────────── PRIMITIVES ──────────────

PRIMITIVE_KINDS = ("icosphere", "cuboid", "cylinder", "superellipsoid")


def _radial(kind, directions, half, exponent):
    """Distance from the centre to the surface along each unit direction."""
    d = np.abs(directions) / half
    if kind == "icosphere":
        return 1.0 / np.sqrt(np.sum(d * d, axis=1))
    if kind == "cuboid":
        return 1.0 / np.max(d, axis=1)
    if kind == "cylinder":
        # axis along Y
        return 1.0 / np.maximum(np.hypot(d[:, 0], d[:, 2]), d[:, 1])
    if kind == "superellipsoid":
        e = exponent
        f = (d[:, 0] ** (2.0 / e) + d[:, 2] ** (2.0 / e)) + d[:, 1] ** (2.0 / e)
        return f ** (-e / 2.0)
    raise InvalidArgumentError(f"unknown primitive kind {kind!r}")


def primitive_mesh(kind, scale, level=3, exponent=1.0):
    """
    Star-shaped primitive with icosphere topology in its local frame.

    scale is the full extent along X, Y, Z in metres; vertex i lies on the
    primitive surface along icosphere direction i.
    """
    half = 0.5 * np.asarray(scale, dtype=np.float64)
    if np.any(half <= 0):
        raise InvalidArgumentError(f"primitive scale must be positive, got {scale}")
    base = icosphere(level)
    dirs = base.vertex_values
    r = _radial(kind, dirs, half, float(exponent))
    return Mesh(dirs * r[:, None], base.faces, "world")


def yaw_rotation(theta_deg):
    """Rotation about +Y (down axis) by theta degrees."""
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# ────────────── OBJ I/O ──────────────

def save_obj(mesh, path):
    verts = mesh.vertex_values
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {len(verts)} vertices, {mesh.num_faces} faces\n")
        for v in verts:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")


def load_obj(path, space_tag="world"):
    if not os.path.isfile(path):
        raise InvalidArgumentError(f"mesh file not found: {path}")
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    # keep the vertex index of "i", "i/t" and "i//n" forms
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
            except (ValueError, IndexError) as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: malformed OBJ line {line.strip()!r}") from exc
    if not verts:
        raise InvalidArgumentError(f"{path}: no vertices")
    return Mesh(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64), space_tag).validate()
