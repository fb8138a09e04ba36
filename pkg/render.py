"""
Rendering module for Silhouette Lab.

Soft silhouettes: every sample point collects the faces whose projected
triangle lies within the blur radius (faces that contain the point always
qualify), keeps the faces_per_pixel closest in signed screen distance
(depth breaks ties), and aggregates
    D_f = sigmoid(±d² / blend_sigma),   A = 1 − ∏_f (1 − D_f)
with d the screen distance from the point to the triangle boundary and the
sign positive inside. Screen distances are measured in normalized image
coordinates (pixel coordinates divided by the image diagonal), so blur radius
and blend sigma keep their meaning at any resolution or region size.

Hard renders are a plain z-buffer with pixel-centre coverage, used for ground
truth masks, depth maps and evaluation.
"""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

import diff
from errors import InvalidArgumentError
from geom import Box2D, project

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-4
DEPTH_MAGIC = b"DPTH"


# ────────────── TYPES ──────────────

@dataclass(frozen=True)
class RenderConfig:
    resolution: tuple = (128, 128)
    faces_per_pixel: int = 10
    blur_radius: float = 1e-3
    blend_sigma: float = 1e-3

    def __post_init__(self):
        h, w = (int(r) for r in self.resolution)
        object.__setattr__(self, "resolution", (h, w))
        if h < 1 or w < 1:
            raise InvalidArgumentError(f"render resolution must be positive, got {self.resolution}")
        if self.faces_per_pixel < 1:
            raise InvalidArgumentError("faces_per_pixel must be at least 1")
        if not (self.blur_radius > 0 and self.blend_sigma > 0):
            raise InvalidArgumentError("blur_radius and blend_sigma must be positive")

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["resolution"]), int(data["faces_per_pixel"]),
                   float(data["blur_radius"]), float(data["blend_sigma"]))


@dataclass
class SoftSilhouette:
    """Soft occupancy over `region`; values is an (H, W) array or tape variable."""
    region: Box2D
    values: object

    @property
    def array(self):
        return diff.value(self.values)

    def binarized(self, threshold=0.5):
        return self.array > threshold


@dataclass
class HardRender:
    instance_map: np.ndarray
    depth_map: np.ndarray

    def mask(self, object_id):
        return self.instance_map == object_id


# ────────────── SAMPLE GRIDS ──────────────

def full_frame(camera):
    return Box2D(0.0, 0.0, float(camera.width), float(camera.height))


def sample_grid(region, resolution):
    """Full-frame pixel coordinates of the sample centres of an (H, W) grid over region."""
    h, w = resolution
    xs = region.x0 + (np.arange(w) + 0.5) * (region.width / w)
    ys = region.y0 + (np.arange(h) + 0.5) * (region.height / h)
    return np.meshgrid(xs, ys)


def resample_mask(mask, region, resolution):
    """Nearest-pixel lookup of a full-frame mask on the render grid of region."""
    xs, ys = sample_grid(region, resolution)
    cols = np.clip(np.floor(xs).astype(np.int64), 0, mask.shape[1] - 1)
    rows = np.clip(np.floor(ys).astype(np.int64), 0, mask.shape[0] - 1)
    return mask[rows, cols]


# ────────────── CLIPPING ──────────────

def _lerp_to_near(behind, front):
    s = diff.div(diff.sub(NEAR_PLANE, behind[:, 2:3]), diff.sub(front[:, 2:3], behind[:, 2:3]))
    return diff.add(behind, diff.mul(s, diff.sub(front, behind)))


def clip_near(tri):
    """
    Clip (T, 3, 3) view-space triangles against Z = NEAR_PLANE.

    Returns the clipped triangles and, for each, the index of the source face.
    Works on plain arrays and on tape variables.
    """
    z = diff.value(tri)[:, :, 2]
    behind = z < NEAR_PLANE
    nb = behind.sum(axis=1)
    keep = np.flatnonzero(nb == 0)
    pieces, sources = [], []
    if keep.size:
        pieces.append(diff.getitem(tri, keep))
        sources.append(keep)

    one = np.flatnonzero(nb == 1)
    if one.size:
        first = np.argmax(behind[one], axis=1)
        order = (first[:, None] + np.arange(3)) % 3
        t = diff.getitem(tri, (one[:, None], order))
        a, b, c = t[:, 0], t[:, 1], t[:, 2]
        ab, ac = _lerp_to_near(a, b), _lerp_to_near(a, c)
        pieces += [diff.stack([ab, b, c], axis=1), diff.stack([ab, c, ac], axis=1)]
        sources += [one, one]

    two = np.flatnonzero(nb == 2)
    if two.size:
        front = np.argmin(behind[two], axis=1)
        order = (front[:, None] + np.arange(3)) % 3
        t = diff.getitem(tri, (two[:, None], order))
        c, a, b = t[:, 0], t[:, 1], t[:, 2]
        pieces.append(diff.stack([c, _lerp_to_near(a, c), _lerp_to_near(b, c)], axis=1))
        sources.append(two)

    if not pieces:
        return None, np.zeros(0, dtype=np.int64)
    return diff.concat(pieces, axis=0), np.concatenate(sources)


# ────────────── PAIR ENUMERATION ──────────────

def _face_sample_pairs(xy, grid, pad):
    """
    (face, sample) pairs whose sample lies in the face's padded bounding box.

    xy: (T, 3, 2) values; grid: (x0, y0, step_x, step_y, W, H) sample lattice in
    the same units. Returns face indices and flat sample indices.
    """
    gx0, gy0, sx, sy, w, h = grid
    lo = xy.min(axis=1) - pad
    hi = xy.max(axis=1) + pad
    j0 = np.clip(np.ceil((lo[:, 0] - gx0) / sx), 0, w).astype(np.int64)
    j1 = np.clip(np.floor((hi[:, 0] - gx0) / sx), -1, w - 1).astype(np.int64)
    i0 = np.clip(np.ceil((lo[:, 1] - gy0) / sy), 0, h).astype(np.int64)
    i1 = np.clip(np.floor((hi[:, 1] - gy0) / sy), -1, h - 1).astype(np.int64)
    nj = np.maximum(j1 - j0 + 1, 0)
    ni = np.maximum(i1 - i0 + 1, 0)
    counts = nj * ni
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    faces = np.repeat(np.arange(len(xy)), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - offsets
    cols = j0[faces] + local % nj[faces]
    rows = i0[faces] + local // nj[faces]
    return faces, rows * w + cols


def _edge_geometry(p, tri):
    """
    Per pair: squared distance to the nearest edge segment, which edge, the
    clamped segment parameter and the closest point; plus the three
    edge-function values used for the inside test.
    """
    d2 = np.empty((3, len(p)))
    ts = np.empty((3, len(p)))
    cross = np.empty((3, len(p)))
    for k in range(3):
        a, b = tri[:, k], tri[:, (k + 1) % 3]
        ab = b - a
        ap = p - a
        denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
        t = np.clip(np.sum(ap * ab, axis=1) / denom, 0.0, 1.0)
        q = a + t[:, None] * ab
        diffv = p - q
        d2[k] = np.sum(diffv * diffv, axis=1)
        ts[k] = t
        cross[k] = ab[:, 0] * ap[:, 1] - ab[:, 1] * ap[:, 0]
    edge = np.argmin(d2, axis=0)
    pick = np.arange(len(p))
    return d2[edge, pick], edge, ts[edge, pick], cross


def _inside(cross, tri):
    area2 = ((tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
             - (tri[:, 1, 1] - tri[:, 0, 1]) * (tri[:, 2, 0] - tri[:, 0, 0]))
    pos = np.all(cross >= 0.0, axis=0)
    neg = np.all(cross <= 0.0, axis=0)
    return (pos | neg) & (np.abs(area2) > 1e-300)


def _pair_depth(cross, depth):
    """Perspective-correct depth at the sample, barycentrics clamped to the face."""
    # edge k's function weights the opposite vertex (k + 2) % 3
    bary = np.stack([cross[1], cross[2], cross[0]], axis=1)
    total = bary.sum(axis=1, keepdims=True)
    total = np.where(np.abs(total) < 1e-300, 1.0, total)
    bary = np.clip(bary / total, 0.0, 1.0)
    norm = bary.sum(axis=1, keepdims=True)
    # edge-on faces clamp every weight to zero: fall back to equal weights
    bary = np.where(norm > 1e-300, bary / np.where(norm > 1e-300, norm, 1.0), 1.0 / 3.0)
    return 1.0 / np.sum(bary / depth, axis=1)


# ────────────── SOFT COVERAGE ──────────────

@dataclass
class CoveragePairs:
    """Candidate (face, sample) pairs that survived the blur and faces-per-pixel cut."""
    faces: np.ndarray
    samples: np.ndarray
    d2: np.ndarray
    sign: np.ndarray
    edge: np.ndarray
    t: np.ndarray
    closest: np.ndarray
    points: np.ndarray
    cutoff_margin: float = np.inf
    rank_margin: float = np.inf

    @classmethod
    def empty(cls):
        ints, floats, points = np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 2))
        return cls(ints, ints, floats, floats, ints, floats, points, points)


def coverage_pairs(xy, depth, samples_xy, grid, config):
    """
    Candidate selection for the soft rasterizer (values only).

    A face is a candidate for a sample when it contains it or lies within the
    blur radius. Each sample keeps its faces_per_pixel candidates with the
    largest signed distance term (inside and closest first), ties broken by
    interpolated depth and then face index.
    """
    pad = float(np.sqrt(config.blur_radius))
    faces, samples = _face_sample_pairs(xy, grid, pad)
    if faces.size == 0:
        return CoveragePairs.empty()

    p = samples_xy[samples]
    tri = xy[faces]
    d2, edge, t, cross = _edge_geometry(p, tri)
    inside = _inside(cross, tri)
    candidate = inside | (d2 <= config.blur_radius)
    outside_d2 = d2[~inside]
    cutoff_margin = float(np.min(np.abs(outside_d2 - config.blur_radius))) if outside_d2.size else np.inf

    faces, samples, d2, edge, t, inside, p = (
        a[candidate] for a in (faces, samples, d2, edge, t, inside, p))
    cross = cross[:, candidate]
    if faces.size == 0:
        return CoveragePairs.empty()

    signed = np.where(inside, d2, -d2)
    k = config.faces_per_pixel
    keep = np.ones(len(faces), dtype=bool)
    rank_margin = np.inf
    # only samples with more than k candidates need ranking
    crowded = np.flatnonzero(np.bincount(samples)[samples] > k)
    if crowded.size:
        pdepth = _pair_depth(cross[:, crowded], depth[faces[crowded]])
        order = crowded[np.lexsort((faces[crowded], pdepth, -signed[crowded], samples[crowded]))]
        grouped = samples[order]
        starts = np.flatnonzero(np.r_[True, grouped[1:] != grouped[:-1]])
        group_start = np.repeat(starts, np.diff(np.r_[starts, len(grouped)]))
        rank = np.arange(len(grouped)) - group_start
        keep[order[rank >= k]] = False
        # gap between the last kept and the first dropped candidate of truncated samples
        cut = np.flatnonzero(rank == k)
        rank_margin = float(np.min(signed[order[cut - 1]] - signed[order[cut]]))

    faces, samples, d2, edge, t, inside, p = (
        a[keep] for a in (faces, samples, d2, edge, t, inside, p))
    b_edge = (edge + 1) % 3
    tri = xy[faces]
    pick = np.arange(len(faces))
    closest = tri[pick, edge] + t[:, None] * (tri[pick, b_edge] - tri[pick, edge])
    sign = np.where(inside, 1.0, -1.0)
    return CoveragePairs(faces, samples, d2, sign, edge, t, closest, p, cutoff_margin, rank_margin)


def soft_coverage(xy, depth, samples_xy, grid, config):
    """
    Fused kernel: soft occupancy of every sample from projected triangles.

    xy is a (T, 3, 2) array or tape variable in normalized image coordinates;
    gradients flow to xy only (depth enters through the candidate ordering).
    """
    xy_val = diff.value(xy)
    n_samples = len(samples_xy)
    pairs = coverage_pairs(xy_val, depth, samples_xy, grid, config)
    if pairs.faces.size == 0:
        return diff.custom(np.zeros(n_samples), [xy], lambda g: (np.zeros_like(xy_val),), "soft_coverage") \
            if diff.is_var(xy) else np.zeros(n_samples)

    x = pairs.sign * pairs.d2 / config.blend_sigma
    d = 0.5 * (1.0 + np.tanh(0.5 * x))
    log_comp = -np.logaddexp(0.0, x)                  # log(1 - D), stable
    log_total = np.bincount(pairs.samples, weights=log_comp, minlength=n_samples)
    coverage = 1.0 - np.exp(log_total)
    if not diff.is_var(xy):
        return coverage

    def backward(g):
        # dA/dD_f = prod over the other faces of (1 - D)
        others = np.exp(log_total[pairs.samples] - log_comp)
        dx = g[pairs.samples] * others * d * (1.0 - d) * pairs.sign / config.blend_sigma
        # d(d²)/d(endpoint) at the closest point of the nearest edge
        r = pairs.points - pairs.closest
        ga = (-2.0 * dx * (1.0 - pairs.t))[:, None] * r
        gb = (-2.0 * dx * pairs.t)[:, None] * r
        rows = len(xy_val) * 3
        grad = (diff.accumulate_rows(pairs.faces * 3 + pairs.edge, ga, rows)
                + diff.accumulate_rows(pairs.faces * 3 + (pairs.edge + 1) % 3, gb, rows))
        return (grad.reshape(xy_val.shape),)

    return diff.custom(coverage, [xy], backward, "soft_coverage")


def _projected_faces(mesh, camera):
    """Clipped triangles projected to normalized image coordinates, plus vertex depths."""
    if mesh.num_faces == 0:
        return None, None
    tri = diff.getitem(mesh.vertices, mesh.faces)
    tri, _ = clip_near(tri)
    if tri is None:
        return None, None
    n = diff.value(tri).shape[0]
    pixels, depth = project(camera, diff.reshape(tri, (-1, 3)))
    xy = diff.reshape(diff.div(pixels, camera.diagonal), (n, 3, 2))
    return xy, diff.value(depth).reshape(n, 3)


def _grid_spec(region, resolution, scale):
    h, w = resolution
    sx, sy = region.width / w / scale, region.height / h / scale
    return (region.x0 / scale + 0.5 * sx, region.y0 / scale + 0.5 * sy, sx, sy, w, h)


def soft_rasterize(mesh, camera, config, region=None):
    """Differentiable soft silhouette of a view-space mesh over region (full frame by default)."""
    region = region or full_frame(camera)
    h, w = config.resolution
    xy, depth = _projected_faces(mesh, camera)
    if xy is None:
        return SoftSilhouette(region, np.zeros((h, w)))
    diag = camera.diagonal
    xs, ys = sample_grid(region, config.resolution)
    samples_xy = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1) / diag
    coverage = soft_coverage(xy, depth, samples_xy, _grid_spec(region, config.resolution, diag), config)
    return SoftSilhouette(region, diff.reshape(coverage, (h, w)))


def soft_margins(mesh, camera, config, region=None):
    """
    Distance of the current state from the non-smooth loci of soft_rasterize:
    the blur-radius cutoff (in d² units) and the faces_per_pixel depth cut.
    """
    region = region or full_frame(camera)
    xy, depth = _projected_faces(mesh.detached(), camera)
    if xy is None:
        return np.inf, np.inf
    diag = camera.diagonal
    xs, ys = sample_grid(region, config.resolution)
    samples_xy = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1) / diag
    pairs = coverage_pairs(xy, depth, samples_xy, _grid_spec(region, config.resolution, diag), config)
    return pairs.cutoff_margin, pairs.rank_margin


# ────────────── HARD RASTERIZATION ──────────────

def hard_rasterize(meshes, camera, resolution=None):
    """
    Z-buffered instance ids (1-based, 0 = background) and metric depth.

    Coverage is tested at pixel centres; depth is interpolated perspective
    correctly. Ties go to the lower object id, then the lower face index.
    """
    h, w = resolution or (camera.height, camera.width)
    instance = np.zeros(h * w, dtype=np.int32)
    depth_map = np.full(h * w, np.inf)
    region = full_frame(camera)
    grid = _grid_spec(region, (h, w), 1.0)
    xs, ys = sample_grid(region, (h, w))
    samples_xy = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)

    all_samples, all_depth, all_obj, all_face = [], [], [], []
    for obj_id, mesh in enumerate(meshes, start=1):
        if mesh is None or mesh.num_faces == 0:
            continue
        tri = mesh.vertex_values[mesh.faces]
        tri, source = clip_near(tri)
        if tri is None:
            continue
        pixels, z = project(camera, tri.reshape(-1, 3))
        xy = pixels.reshape(-1, 3, 2)
        z = z.reshape(-1, 3)
        faces, samples = _face_sample_pairs(xy, grid, 0.0)
        if faces.size == 0:
            continue
        p = samples_xy[samples]
        _, _, _, cross = _edge_geometry(p, xy[faces])
        inside = _inside(cross, xy[faces])
        faces, samples, cross = faces[inside], samples[inside], cross[:, inside]
        if faces.size == 0:
            continue
        all_samples.append(samples)
        all_depth.append(_pair_depth(cross, z[faces]))
        all_obj.append(np.full(len(faces), obj_id))
        all_face.append(source[faces])

    if all_samples:
        samples = np.concatenate(all_samples)
        depth = np.concatenate(all_depth)
        obj = np.concatenate(all_obj)
        face = np.concatenate(all_face)
        order = np.lexsort((face, obj, depth, samples))
        samples, depth, obj = samples[order], depth[order], obj[order]
        first = np.r_[True, samples[1:] != samples[:-1]]
        instance[samples[first]] = obj[first]
        depth_map[samples[first]] = depth[first]

    return HardRender(instance.reshape(h, w), depth_map.reshape(h, w))


# ────────────── DYNAMIC REGION ──────────────

def dynamic_region(gt_mask_box, mesh, camera, margin):
    """
    Union of the ground-truth box and the projected prediction, grown by
    margin and clamped to the frame. Falls back to the full frame when there
    is nothing to bound.
    """
    verts = mesh.vertex_values
    region = gt_mask_box
    front = verts[verts[:, 2] > NEAR_PLANE]
    if len(front):
        pixels, _ = project(camera, front)
        lo, hi = pixels.min(axis=0), pixels.max(axis=0)
        if lo[0] < hi[0] and lo[1] < hi[1]:
            pred_box = Box2D(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
            region = pred_box if region is None else region.union(pred_box)
    if region is None:
        return full_frame(camera)
    clamped = region.expand(margin).clamp(camera.width, camera.height)
    return clamped if clamped is not None else full_frame(camera)


# ────────────── IMAGE I/O ──────────────

def save_png(values, path):
    """8-bit grayscale PNG; floats in [0, 1] are quantized linearly, bools map to 0/255."""
    arr = np.asarray(values)
    if arr.dtype == bool:
        data = arr.astype(np.uint8) * 255
    elif np.issubdtype(arr.dtype, np.integer):
        data = np.clip(arr, 0, 255).astype(np.uint8)
    else:
        data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path):
    if not os.path.isfile(path):
        raise InvalidArgumentError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise InvalidArgumentError(f"{path}: unreadable PNG ({exc})") from exc


def save_depth(depth, path):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<HH", h, w))
        f.write(depth.tobytes(order="C"))


def load_depth(path):
    if not os.path.isfile(path):
        raise InvalidArgumentError(f"depth map not found: {path}")
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8 or header[:4] != DEPTH_MAGIC:
            raise InvalidArgumentError(f"{path}: not a DPTH depth map")
        h, w = struct.unpack("<HH", header[4:])
        data = f.read()
    if len(data) != 4 * h * w:
        raise InvalidArgumentError(f"{path}: expected {h}x{w} floats, got {len(data)} bytes")
    return np.frombuffer(data, dtype="<f4").reshape(h, w).astype(np.float64)
