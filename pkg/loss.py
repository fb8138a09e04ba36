"""
Loss Module for Silhouette Lab.
Distance-transform (Chamfer) loss between silhouette point sets, gated
cross-entropy on soft silhouettes, the multi-view shape loss aggregated over
objects and views, and the shape regularizers.

Point coordinates are full-frame pixel coordinates divided by the image
diagonal; every integral is approximated by a mean so magnitudes do not
depend on resolution or point counts.
"""

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.neighbors import KDTree

import diff
from errors import BehindCameraError, EmptyMaskError, InvalidArgumentError
from geom import Box2D, Mesh, mesh_edges, project, sample_surface
from metrics import mask_iou
from render import (NEAR_PLANE, SoftSilhouette, dynamic_region, full_frame,
                    resample_mask, soft_rasterize)

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
GATE_IOU = 0.5
REG_KINDS = ("edge", "l2_offsets", "l2_offsets_plus_laplacian")


# ────────────── TYPES ──────────────

@dataclass
class PointSet2D:
    """(N, 2) points in normalized image coordinates, optionally weighted."""
    points: object
    weights: np.ndarray = None
    _tree: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = diff.value(self.points)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidArgumentError(f"point set must be (N, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point set has non-finite coordinates")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if self.weights.shape[0] != pts.shape[0]:
                raise InvalidArgumentError("one weight per point required")
            if np.any(self.weights < 0):
                raise InvalidArgumentError("point weights must be non-negative")

    def __len__(self):
        return diff.value(self.points).shape[0]

    @property
    def values(self):
        return diff.value(self.points)

    def tree(self):
        """KD-tree over the points; kept for constant sets, rebuilt for tape variables."""
        if diff.is_var(self.points):
            return KDTree(self.values)
        if self._tree is None:
            self._tree = KDTree(self.values)
        return self._tree


@dataclass(frozen=True)
class LossWeights:
    mu_3d: float = 1.0
    mu_reg: float = 0.05
    reg_kind: str = "l2_offsets"
    mu_laplacian: float = 0.0

    def __post_init__(self):
        if self.reg_kind not in REG_KINDS:
            raise InvalidArgumentError(f"unknown regularizer {self.reg_kind!r}; expected one of {REG_KINDS}")
        if min(self.mu_3d, self.mu_reg, self.mu_laplacian) < 0:
            raise InvalidArgumentError("loss weights must be non-negative")

    @classmethod
    def from_dict(cls, reg_kind, data):
        entry = data[reg_kind]
        return cls(float(entry["mu_3d"]), float(entry["mu_reg"]), reg_kind,
                   float(entry.get("mu_laplacian", 0.0)))


@dataclass
class LossTerms:
    """One (object, view) term of the multi-view loss."""
    total: object
    dist: float
    xent: float
    iou: float
    gate_open: bool
    object_index: int = -1
    view_index: int = -1


@dataclass
class ViewTarget:
    """Ground truth of one auxiliary view as seen by the loss.

    masks[o] is the full-frame mask of object o (None or empty when the
    object is not visible); points[o] the samples drawn from it.
    """
    camera: object
    transform: object
    masks: list
    points: list
    boxes: list = field(default_factory=list)


@dataclass
class ScenePrediction:
    """Per object: view-space mesh in the reference view, its normalized-space
    mesh and the raw (pre-tanh) vertex offsets, any of them tape variables."""
    meshes: list
    normalized: list
    offsets: list


@dataclass
class SceneLoss:
    total: object
    l3d: object
    reg: object
    terms: list

    @property
    def dist_share(self):
        dist = sum(t.dist for t in self.terms)
        xent = sum(t.xent for t in self.terms if t.gate_open)
        return dist / (dist + xent) if dist + xent > 0 else 0.0

    @property
    def xent_share(self):
        return 1.0 - self.dist_share if self.terms else 0.0


# ────────────── CHAMFER ──────────────

def _nearest(src, dst):
    """Index of the nearest dst point for every src point."""
    _, idx = dst.tree().query(src.values, k=1)
    return idx[:, 0]


def _weighted_mean_weights(ps):
    n = len(ps)
    if ps.weights is None:
        return np.full(n, 1.0 / n)
    total = ps.weights.sum()
    if not total > 0:
        raise InvalidArgumentError("point weights sum to zero")
    return ps.weights / total


def chamfer2d(a, b):
    """
    Bidirectional Chamfer distance: mean squared distance from a to its
    nearest point in b plus the same from b to a.

    Gradients flow to both sets through the nearest pairs.
    """
    if len(a) == 0 or len(b) == 0:
        raise InvalidArgumentError("chamfer2d needs two non-empty point sets")
    av, bv = a.values, b.values
    wa, wb = _weighted_mean_weights(a), _weighted_mean_weights(b)
    nn_ab = _nearest(a, b)
    nn_ba = _nearest(b, a)
    r_ab = av - bv[nn_ab]
    r_ba = bv - av[nn_ba]
    value = np.dot(wa, np.sum(r_ab * r_ab, axis=1)) + np.dot(wb, np.sum(r_ba * r_ba, axis=1))

    def backward(g):
        ga = 2.0 * g * wa[:, None] * r_ab
        gb = 2.0 * g * wb[:, None] * r_ba
        grad_a = ga - diff.accumulate_rows(nn_ba, gb, len(av))
        grad_b = gb - diff.accumulate_rows(nn_ab, ga, len(bv))
        return grad_a, grad_b

    return diff.custom(np.asarray(value), [a.points, b.points], backward, "chamfer2d")


# ────────────── POINT SAMPLING ──────────────

def sample_gt_silhouette(mask, n, rng, diagonal=None):
    """n points uniform over the foreground pixels of a full-frame mask, jittered inside each pixel."""
    mask = np.asarray(mask, dtype=bool)
    if n < 1:
        raise InvalidArgumentError(f"sample count must be at least 1, got {n}")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMaskError("cannot sample points from an empty mask")
    diagonal = diagonal or float(np.hypot(mask.shape[1], mask.shape[0]))
    pick = rng.integers(0, rows.size, size=n)
    jitter = rng.random((n, 2))
    points = np.stack([cols[pick] + jitter[:, 0], rows[pick] + jitter[:, 1]], axis=1) / diagonal
    return PointSet2D(points)


def project_mesh_samples(mesh, camera, transform, n, rng):
    """
    Surface samples of a reference-view mesh, moved into another view and
    projected. Samples that land behind that camera are dropped.
    """
    return project_surface_points(sample_surface(mesh, n, rng).points, camera, transform)


def project_surface_points(points, camera, transform):
    """Reference-view surface points moved into another view and projected; points behind it are dropped."""
    n = diff.value(points).shape[0]
    points = points if transform is None else transform.apply(points)
    depth = diff.value(points)[:, 2]
    front = np.flatnonzero(depth > NEAR_PLANE)
    if front.size == 0:
        raise BehindCameraError("all surface samples are behind the camera")
    if front.size < n:
        points = diff.getitem(points, front)
    pixels, _ = project(camera, points)
    return PointSet2D(diff.div(pixels, camera.diagonal))


# ────────────── SILHOUETTE LOSSES ──────────────

def xent_silhouette(pred, gt):
    """Mean binary cross-entropy of a soft silhouette against a binary mask."""
    values = pred.values if isinstance(pred, SoftSilhouette) else pred
    gt = np.asarray(gt, dtype=bool)
    if diff.value(values).shape != gt.shape:
        raise InvalidArgumentError(f"prediction {diff.value(values).shape} and mask {gt.shape} differ in shape")
    p = diff.clip(values, PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_likelihood = diff.where(gt, diff.log(p), diff.log(diff.sub(1.0, p)))
    return diff.neg(diff.mean(log_likelihood))


def l2d(pred, pred_points, gt_mask, gt_points, use_dist=True):
    """
    Loss of one predicted silhouette against its ground truth:
    Chamfer distance between point sets plus cross-entropy, the latter only
    when the binarized prediction overlaps the mask with IoU above 0.5.

    With use_dist off the distance term is dropped and cross-entropy always
    applies.
    """
    iou = mask_iou(pred.binarized(), gt_mask)
    gate_open = (iou > GATE_IOU) or not use_dist
    total = 0.0
    dist_value = xent_value = 0.0
    if use_dist:
        dist = chamfer2d(pred_points, gt_points)
        dist_value = float(diff.value(dist))
        total = dist
    if gate_open:
        xent = xent_silhouette(pred, gt_mask)
        xent_value = float(diff.value(xent))
        total = diff.add(total, xent)
    return LossTerms(total, dist_value, xent_value, iou, gate_open)


def view_mesh(mesh, transform):
    """Reference-view mesh carried into another view."""
    if transform is None:
        return mesh
    return Mesh(transform.apply(mesh.vertices), mesh.faces, "view")


def _object_rng(base_seed, mesh):
    """Sample stream of one object, keyed by its face topology so neither object nor view order changes it."""
    key = zlib.crc32(np.ascontiguousarray(mesh.faces, dtype=np.int64).tobytes())
    return np.random.default_rng(np.random.SeedSequence([base_seed, key]))


def l3d(meshes, views, render_config, n_points, rng, dynamic=False, margin=4.0, use_dist=True):
    """
    Multi-view shape loss: for each object the mean of l2d over the views in
    which it is visible, then the mean over objects.

    Returns the value and the list of per-(object, view) LossTerms.
    """
    if not meshes:
        raise InvalidArgumentError("l3d needs at least one object")
    base_seed = int(rng.integers(0, 2**32)) if use_dist else 0
    per_object, terms = [], []
    for o, mesh in enumerate(meshes):
        object_terms = []
        surface = None
        for j, view in enumerate(views):
            mask = view.masks[o] if o < len(view.masks) else None
            if mask is None or not mask.any():
                continue
            moved = view_mesh(mesh, view.transform)
            if dynamic:
                gt_box = view.boxes[o] if o < len(view.boxes) and view.boxes[o] is not None else Box2D.from_mask(mask)
                region = dynamic_region(gt_box, moved, view.camera, margin)
            else:
                region = full_frame(view.camera)
            silhouette = soft_rasterize(moved, view.camera, render_config, region)
            gt_region = resample_mask(mask, region, render_config.resolution)
            pred_points = None
            if use_dist:
                if surface is None:
                    surface = sample_surface(mesh, n_points, _object_rng(base_seed, mesh)).points
                pred_points = project_surface_points(surface, view.camera, view.transform)
            term = l2d(silhouette, pred_points, gt_region, view.points[o], use_dist=use_dist)
            term.object_index, term.view_index = o, j
            object_terms.append(term)
        if object_terms:
            per_object.append(diff.mean(diff.stack([t.total for t in object_terms])))
            terms.extend(object_terms)
    if not per_object:
        raise InvalidArgumentError("no object is visible in any view")
    return diff.mean(diff.stack(per_object)), terms


# ────────────── REGULARIZERS ──────────────

def reg_edge(mesh):
    """Mean squared edge length."""
    edges = mesh_edges(mesh)
    if edges.size == 0:
        return np.asarray(0.0)
    a = diff.getitem(mesh.vertices, edges[:, 0])
    b = diff.getitem(mesh.vertices, edges[:, 1])
    return diff.mean(diff.sqnorm(diff.sub(a, b)))


def reg_l2_offsets(offsets):
    """½ Σ ‖dV‖² over raw (pre-tanh) offsets."""
    return diff.mul(0.5, diff.sum(diff.sqnorm(offsets)))


def reg_laplacian(mesh):
    """Uniform Laplacian: mean over vertices of ‖v − mean of its neighbours‖²."""
    edges = mesh_edges(mesh)
    n = mesh.num_vertices
    if edges.size == 0:
        return np.asarray(0.0)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    degree = np.bincount(dst, minlength=n).astype(np.float64)
    neighbour_sum = diff.scatter_add(diff.getitem(mesh.vertices, src), dst, n)
    connected = np.flatnonzero(degree > 0)
    centroid = diff.div(diff.getitem(neighbour_sum, connected), degree[connected][:, None])
    lap = diff.sub(diff.getitem(mesh.vertices, connected), centroid)
    return diff.mean(diff.sqnorm(lap))


def regularizer(normalized_mesh, offsets, weights):
    """Weighted shape regularizer of one object for the configured variant."""
    if weights.reg_kind == "edge":
        return diff.mul(weights.mu_reg, reg_edge(normalized_mesh))
    reg = diff.mul(weights.mu_reg, reg_l2_offsets(offsets))
    if weights.reg_kind == "l2_offsets_plus_laplacian":
        reg = diff.add(reg, diff.mul(weights.mu_laplacian, reg_laplacian(normalized_mesh)))
    return reg


# ────────────── TOTAL ──────────────

def total_loss(prediction, views, weights, render_config, n_points, rng,
               dynamic=False, margin=4.0, use_dist=True):
    """μ3D · L_3D + regularizer summed over objects."""
    shape_loss, terms = l3d(prediction.meshes, views, render_config, n_points, rng,
                            dynamic=dynamic, margin=margin, use_dist=use_dist)
    reg = 0.0
    for normalized, offsets in zip(prediction.normalized, prediction.offsets):
        if offsets is None and weights.reg_kind != "edge":
            continue
        reg = diff.add(reg, regularizer(normalized, offsets, weights))
    total = diff.add(diff.mul(weights.mu_3d, shape_loss), reg)
    return SceneLoss(total, shape_loss, reg, terms)
