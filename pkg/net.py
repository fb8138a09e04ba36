"""
Network Module for Silhouette Lab.
Per-vertex feature sampling (RoIMap, and RoIAlign followed by VertAlign),
graph convolution over mesh edges, bounded vertex refinement stages, the
layout head, two toy backbones and the USLW weight checkpoint format.

Feature cell (i, j) of a map with stride s covers image pixels centred on
((j + 0.5)·s, (i + 0.5)·s). All functions run on the tape when given tape
variables, so the same code serves fixed-function fitting and learning.
"""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

import diff
from errors import InvalidArgumentError
from geom import frustum_homography, layout_decode, mesh_edges, project

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"USLW"
CHECKPOINT_VERSION = 1
GRAPH_CONVS_PER_STAGE = 3
LAYOUT_HIDDEN_LAYERS = 4


# ────────────── TYPES ──────────────

@dataclass
class FeatureMap:
    """values: (C, H, W) array or tape variable; stride: image pixels per cell."""
    values: object
    stride: float

    def __post_init__(self):
        shape = diff.value(self.values).shape
        if len(shape) != 3 or min(shape) < 1:
            raise InvalidArgumentError(f"feature map must be (C, H, W) with C, H, W >= 1, got {shape}")
        if not self.stride > 0:
            raise InvalidArgumentError(f"feature stride must be positive, got {self.stride}")

    @property
    def channels(self):
        return diff.value(self.values).shape[0]

    @property
    def size(self):
        _, h, w = diff.value(self.values).shape
        return h, w


@dataclass
class RefinementState:
    """Normalized-space vertices, their last features, and the stage counter.

    offsets holds the raw (pre-tanh) output of the last stage.
    """
    vertices: object
    edges: np.ndarray
    features: object = None
    stage: int = 0
    offsets: object = None

    def __post_init__(self):
        verts = diff.value(self.vertices)
        if np.any(np.abs(verts) > 1.0 + 1e-12):
            raise InvalidArgumentError("refinement vertices must lie in [-1, 1]^3")

    @classmethod
    def from_mesh(cls, mesh):
        return cls(mesh.vertices, mesh_edges(mesh))


# ────────────── BILINEAR SAMPLING ──────────────

def bilinear_sample(values, coords):
    """
    Sample a (C, H, W) grid at (N, 2) fractional cell coordinates (x, y).

    Coordinates are clamped to the grid, so points outside read the border.
    Returns (N, C); differentiable in both values and coordinates.
    """
    _, h, w = diff.value(values).shape
    x = diff.clip(coords[:, 0], 0.0, w - 1.0)
    y = diff.clip(coords[:, 1], 0.0, h - 1.0)
    x0 = np.floor(diff.value(x)).astype(np.int64)
    y0 = np.floor(diff.value(y)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = diff.sub(x, x0.astype(np.float64))
    wy = diff.sub(y, y0.astype(np.float64))
    ux, uy = diff.sub(1.0, wx), diff.sub(1.0, wy)

    v00 = diff.getitem(values, (slice(None), y0, x0))
    v01 = diff.getitem(values, (slice(None), y0, x1))
    v10 = diff.getitem(values, (slice(None), y1, x0))
    v11 = diff.getitem(values, (slice(None), y1, x1))
    out = diff.add(
        diff.add(diff.mul(v00, diff.mul(ux, uy)), diff.mul(v01, diff.mul(wx, uy))),
        diff.add(diff.mul(v10, diff.mul(ux, wy)), diff.mul(v11, diff.mul(wx, wy))),
    )
    return diff.transpose(out)


def _image_points(camera, frustum, vertices):
    to_view = frustum_homography(frustum, camera)
    pixels, _ = project(camera, to_view(vertices))
    return pixels


def roimap_coordinates(camera, frustum, vertices, stride):
    """Feature-cell coordinates RoIMap samples at: image pixels / stride, shifted to cell centres."""
    pixels = _image_points(camera, frustum, vertices)
    return diff.sub(diff.div(pixels, float(stride)), 0.5)


def roialign_coordinates(camera, frustum, vertices, roi_size):
    """Coordinates in the roi_size × roi_size RoI grid; box-relative, so scaled per axis."""
    box = frustum.box
    pixels = _image_points(camera, frustum, vertices)
    scale = np.array([roi_size / box.width, roi_size / box.height])
    return diff.sub(diff.mul(diff.sub(pixels, np.array([box.x0, box.y0])), scale), 0.5)


def roimap(feature_map, camera, frustum, vertices):
    """Per-vertex features read straight from the feature map at each vertex's projection."""
    coords = roimap_coordinates(camera, frustum, vertices, feature_map.stride)
    return bilinear_sample(feature_map.values, coords)


def roi_grid(feature_map, box, roi_size):
    """RoIAlign: resample the box region to a (C, roi_size, roi_size) grid."""
    if roi_size < 1:
        raise InvalidArgumentError(f"roi_size must be positive, got {roi_size}")
    xs = box.x0 + (np.arange(roi_size) + 0.5) * (box.width / roi_size)
    ys = box.y0 + (np.arange(roi_size) + 0.5) * (box.height / roi_size)
    gx, gy = np.meshgrid(xs, ys)
    coords = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1) / feature_map.stride - 0.5
    sampled = bilinear_sample(feature_map.values, coords)          # (roi², C)
    channels = feature_map.channels
    return diff.reshape(diff.transpose(sampled), (channels, roi_size, roi_size))


def roialign_vertalign(feature_map, camera, frustum, vertices, roi_size=14):
    """Per-vertex features sampled from the RoIAlign grid of the frustum box."""
    grid = roi_grid(feature_map, frustum.box, roi_size)
    coords = roialign_coordinates(camera, frustum, vertices, roi_size)
    return bilinear_sample(grid, coords)


def roi_pool(feature_map, box, roi_size=14):
    """Average-pooled RoIAlign feature, (C,)."""
    grid = roi_grid(feature_map, box, roi_size)
    return diff.mean(diff.reshape(grid, (feature_map.channels, -1)), axis=1)


# ────────────── GRAPH CONVOLUTION ──────────────

def graph_conv(features, edges, w0, w1):
    """f'_i = relu(f_i W0 + Σ_{j ∈ N(i)} f_j W1) over undirected edges."""
    fv, w0v, w1v = diff.value(features), diff.value(w0), diff.value(w1)
    if fv.ndim != 2 or w0v.shape != w1v.shape or fv.shape[1] != w0v.shape[0]:
        raise InvalidArgumentError(
            f"graph_conv dimension mismatch: features {fv.shape}, W0 {w0v.shape}, W1 {w1v.shape}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = fv.shape[0]
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise InvalidArgumentError("graph_conv edge index out of range")
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    neighbours = diff.scatter_add(diff.getitem(features, src), dst, n)
    return diff.relu(diff.add(diff.matmul(features, w0), diff.matmul(neighbours, w1)))


# ────────────── REFINEMENT ──────────────

def sample_vertex_features(feature_map, camera, frustum, vertices, sampler="roimap", roi_size=14):
    if sampler == "roimap":
        return roimap(feature_map, camera, frustum, vertices)
    if sampler == "roialign":
        return roialign_vertalign(feature_map, camera, frustum, vertices, roi_size)
    raise InvalidArgumentError(f"unknown feature sampler {sampler!r}")


def refine_stage(state, feature_map, camera, frustum, weights, sampler="roimap", roi_size=14):
    """
    One refinement stage: sample vertex features, three graph convolutions
    (each fed the vertex coordinates as well), then a linear layer and tanh
    give offsets in (−1, 1); the moved vertices are clamped to [−1, 1].
    """
    vertices = state.vertices
    h = sample_vertex_features(feature_map, camera, frustum, vertices, sampler, roi_size)
    for k in range(GRAPH_CONVS_PER_STAGE):
        h = graph_conv(diff.concat([h, vertices], axis=1), state.edges,
                       weights[f"gconv{k}_w0"], weights[f"gconv{k}_w1"])
    raw = diff.add(diff.matmul(diff.concat([h, vertices], axis=1), weights["out_w"]), weights["out_b"])
    moved = diff.clip(diff.add(vertices, diff.tanh(raw)), -1.0, 1.0)
    return RefinementState(moved, state.edges, h, state.stage + 1, raw)


def layout_head_forward(pooled, weights, bounds):
    """
    Four hidden linear + ReLU layers, then per-category sigmoid heads for the
    layout scalars, decoded to metric (rho, z) arrays of length K.
    """
    h = pooled
    for k in range(LAYOUT_HIDDEN_LAYERS):
        w = weights[f"fc{k}_w"]
        if diff.value(h).shape[-1] != diff.value(w).shape[0]:
            raise InvalidArgumentError(
                f"layout head layer {k}: input {diff.value(h).shape[-1]} does not match weights {diff.value(w).shape}")
        h = diff.relu(diff.add(diff.matmul(h, w), weights[f"fc{k}_b"]))
    rho_t = diff.sigmoid(diff.add(diff.matmul(h, weights["rho_w"]), weights["rho_b"]))
    z_t = diff.sigmoid(diff.add(diff.matmul(h, weights["z_w"]), weights["z_b"]))
    return layout_decode(rho_t, z_t, bounds)


# ────────────── BACKBONES ──────────────

def _avg_pool2(x):
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    x = x[:, :2 * h2, :2 * w2]
    return x.reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


def fixed_backbone(image):
    """
    Fixed filters over a grayscale image in [0, 1]: intensity, Sobel x and y,
    and normalized x / y coordinate channels, average-pooled to stride 2.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2:
        raise InvalidArgumentError(f"backbone input must be a 2D image of at least 2x2, got {img.shape}")
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    xs, ys = np.meshgrid((np.arange(w) + 0.5) / w * 2.0 - 1.0, (np.arange(h) + 0.5) / h * 2.0 - 1.0)
    stack = np.stack([img, gx / 4.0, gy / 4.0, xs, ys])
    return FeatureMap(_avg_pool2(stack), 2.0)


def _im2col_index(channels, h, w, stride):
    """Gather indices of 3x3 patches with edge padding: (P, C*9) for each axis."""
    ho, wo = -(-h // stride), -(-w // stride)
    oi, oj = np.meshgrid(np.arange(ho) * stride, np.arange(wo) * stride, indexing="ij")
    oi, oj = oi.reshape(-1, 1), oj.reshape(-1, 1)
    dy, dx = np.meshgrid(np.arange(3) - 1, np.arange(3) - 1, indexing="ij")
    dy, dx = np.tile(dy.reshape(-1), channels), np.tile(dx.reshape(-1), channels)
    c = np.repeat(np.arange(channels), 9)
    rows = np.clip(oi + dy, 0, h - 1)
    cols = np.clip(oj + dx, 0, w - 1)
    return (np.broadcast_to(c, rows.shape), rows, cols), (ho, wo)


def conv3x3(x, w, b, stride=1):
    """3x3 convolution with edge padding; x (C, H, W), w (C*9, C_out), b (C_out,)."""
    c, h, wd = diff.value(x).shape
    if diff.value(w).shape[0] != 9 * c:
        raise InvalidArgumentError(f"conv weights {diff.value(w).shape} do not fit {c} input channels")
    index, (ho, wo) = _im2col_index(c, h, wd, stride)
    patches = diff.getitem(x, index)                              # (P, C*9)
    out = diff.add(diff.matmul(patches, w), b)                    # (P, C_out)
    return diff.reshape(diff.transpose(out), (-1, ho, wo))


def conv_backbone(image, weights):
    """Two learnable 3x3 convolutions with ReLU (stride 1, then 2)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    h = diff.relu(conv3x3(img, weights["conv0_w"], weights["conv0_b"], stride=1))
    h = diff.relu(conv3x3(h, weights["conv1_w"], weights["conv1_b"], stride=2))
    return FeatureMap(h, 2.0)


# ────────────── WEIGHT INITIALISATION ──────────────

def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def init_stage_weights(in_channels, hidden, rng, out_scale=0.0):
    """Weights of one refinement stage; out_scale 0 makes the stage start as the identity."""
    weights = {}
    dim = in_channels
    for k in range(GRAPH_CONVS_PER_STAGE):
        weights[f"gconv{k}_w0"] = _he(rng, dim + 3, hidden)
        weights[f"gconv{k}_w1"] = _he(rng, dim + 3, hidden) * 0.1
        dim = hidden
    weights["out_w"] = rng.normal(0.0, 1.0, size=(hidden + 3, 3)) * out_scale
    weights["out_b"] = np.zeros(3)
    return weights


def init_layout_weights(in_channels, rng, hidden=256, categories=1):
    weights = {}
    dim = in_channels
    for k in range(LAYOUT_HIDDEN_LAYERS):
        weights[f"fc{k}_w"] = _he(rng, dim, hidden)
        weights[f"fc{k}_b"] = np.zeros(hidden)
        dim = hidden
    for head in ("rho", "z"):
        weights[f"{head}_w"] = rng.normal(0.0, 0.01, size=(hidden, categories))
        weights[f"{head}_b"] = np.zeros(categories)
    return weights


def init_conv_weights(rng, in_channels=1, channels=(8, 16)):
    c0, c1 = channels
    return {
        "conv0_w": _he(rng, 9 * in_channels, c0), "conv0_b": np.zeros(c0),
        "conv1_w": _he(rng, 9 * c0, c1), "conv1_b": np.zeros(c1),
    }


# ────────────── CHECKPOINTS ──────────────

def save_checkpoint(path, arrays):
    """
    USLW record: magic, u16 version, then per array: u16 name length, UTF-8
    name, u8 ndim, u32 dims, little-endian f64 data.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION))
        for name in sorted(arrays):
            data = np.ascontiguousarray(diff.value(arrays[name]), dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)) + encoded)
            f.write(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())
    logger.info("Saved %d weight arrays to %s", len(arrays), path)


def load_checkpoint(path):
    if not os.path.isfile(path):
        raise InvalidArgumentError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC or len(blob) < 6:
        raise InvalidArgumentError(f"{path}: not a USLW checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported checkpoint version {version}")
    arrays, pos = {}, 6
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 8 * count > len(blob):
                raise InvalidArgumentError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise InvalidArgumentError(f"{path}: corrupt checkpoint ({exc})") from exc
    return arrays
