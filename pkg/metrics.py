"""
Evaluation Metrics Module for Silhouette Lab.
Mask IoU, box gIoU and nearest-depth error in the input view and in the
other views, 3D Chamfer distance and F1@0.1m between predicted and ground
truth meshes, the per-scene evaluation and the canonical JSON report.

Predicted objects are hard-rendered one at a time (no occlusion between
predicted objects) for every per-object metric.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.neighbors import KDTree

from errors import InvalidArgumentError
from geom import (Box2D, Frustum, LayoutBounds, Mesh, frustum_homography, icosphere,
                  load_obj, mesh_box, sample_surface, save_obj, view_to_world, world_to_view)
from render import NEAR_PLANE, hard_rasterize
from scene_validator import validate_layout_descriptor

logger = logging.getLogger(__name__)

METRIC_KEYS = (
    "mask2d_iou_input", "mask2d_iou_views",
    "box2d_giou_input", "box2d_giou_views",
    "depth_l1_input", "depth_l1_views",
    "chamfer3d", "f1_at_0p1",
    "mask2d_iou_heldout", "depth_l1_heldout",
    "depth_rel_error",
)

DEFAULT_FAR_DEPTH = 10.0


# ────────────── TYPES ──────────────

@dataclass
class PredictedScene:
    """Fitted (or baseline) objects of one scene; meshes in world coordinates."""
    scene_id: str
    meshes: list
    layouts: list
    views_used: int

    def view_meshes(self, camera):
        return [Mesh(world_to_view(camera, m.vertex_values), m.faces, "view") for m in self.meshes]


@dataclass
class EvalReport:
    aggregate: dict
    scenes: list = field(default_factory=list)

    def to_dict(self):
        return {"aggregate": self.aggregate, "scenes": self.scenes}


# ────────────── 2D METRICS ──────────────

def mask_iou(a, b):
    """|a ∩ b| / |a ∪ b|; 1 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def box_giou(a, b):
    """Generalized IoU of two boxes, in (-1, 1]."""
    ix0, iy0 = max(a.x0, b.x0), max(a.y0, b.y0)
    ix1, iy1 = min(a.x1, b.x1), min(a.y1, b.y1)
    inter = max(ix1 - ix0, 0.0) * max(iy1 - iy0, 0.0)
    union = a.area + b.area - inter
    hull = a.union(b).area
    return inter / union - (hull - union) / hull


def nearest_depth(depth_map, mask):
    """Minimum depth over the mask; None if the mask is empty."""
    if not np.any(mask):
        return None
    return float(np.min(depth_map[mask]))


def depth_l1(pred, bundle, j, far_depth=DEFAULT_FAR_DEPTH):
    """
    Mean absolute error of per-object nearest depth in view j.

    Objects invisible in the ground truth are skipped; predictions that
    render empty are charged |far_depth − gt|. Returns None when no object
    is visible.
    """
    camera = bundle.cameras[j]
    errors = []
    for o, (mesh, gt) in enumerate(zip(pred.view_meshes(camera), bundle.view_meshes(j))):
        gt_render = hard_rasterize([gt], camera)
        gt_depth = nearest_depth(gt_render.depth_map, bundle.masks[j][o] & gt_render.mask(1))
        if gt_depth is None:
            continue
        pred_render = hard_rasterize([mesh], camera)
        pred_depth = nearest_depth(pred_render.depth_map, pred_render.mask(1))
        errors.append(abs((far_depth if pred_depth is None else pred_depth) - gt_depth))
    return float(np.mean(errors)) if errors else None


# ────────────── 3D METRICS ──────────────

def _nearest_sq(src, dst):
    dist, _ = KDTree(dst).query(src, k=1)
    return dist[:, 0] ** 2


def _surface_samples(mesh, n, rng):
    return np.asarray(sample_surface(mesh, n, rng).points)


def chamfer3d(pred_mesh, gt_mesh, n_samples=10000, rng=None):
    """Bidirectional mean squared nearest-neighbour distance between surface samples (m²)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    p = _surface_samples(pred_mesh, n_samples, rng)
    g = _surface_samples(gt_mesh, n_samples, rng)
    return float(_nearest_sq(p, g).mean() + _nearest_sq(g, p).mean())


def f1_at(pred_mesh, gt_mesh, tau=0.1, n_samples=10000, rng=None):
    """F1 score (percent) of surface samples matched within tau metres."""
    rng = rng if rng is not None else np.random.default_rng(0)
    p = _surface_samples(pred_mesh, n_samples, rng)
    g = _surface_samples(gt_mesh, n_samples, rng)
    precision = np.mean(_nearest_sq(p, g) <= tau * tau)
    recall = np.mean(_nearest_sq(g, p) <= tau * tau)
    if precision + recall == 0:
        return 0.0
    return float(100.0 * 2.0 * precision * recall / (precision + recall))


# ────────────── PER-SCENE EVALUATION ──────────────

def _view_metrics(pred, bundle, j, far_depth):
    """Per-view means over objects visible in the ground truth: IoU, gIoU, depth L1."""
    camera = bundle.cameras[j]
    pred_view = pred.view_meshes(camera)
    ious, gious = [], []
    for o, mesh in enumerate(pred_view):
        gt_mask = bundle.masks[j][o]
        if not gt_mask.any():
            continue
        pred_mask = hard_rasterize([mesh], camera).mask(1)
        ious.append(mask_iou(pred_mask, gt_mask))
        pred_box = Box2D.from_mask(pred_mask)
        if pred_box is None and np.all(mesh.vertex_values[:, 2] > NEAR_PLANE):
            pred_box = mesh_box(mesh, camera)
        if pred_box is None:
            logger.warning("%s view %d object %d: prediction has no box, gIoU skipped", bundle.scene_id, j, o)
            continue
        gious.append(box_giou(pred_box, Box2D.from_mask(gt_mask)))
    if not ious:
        return None
    return {
        "iou": float(np.mean(ious)),
        "giou": float(np.mean(gious)) if gious else None,
        "depth_l1": depth_l1(pred, bundle, j, far_depth),
    }


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate_scene(pred, bundle, n_samples=10000, seed=0, far_depth=DEFAULT_FAR_DEPTH):
    """All metrics of one scene; keys as in METRIC_KEYS."""
    if pred.scene_id != bundle.scene_id:
        raise InvalidArgumentError(f"prediction {pred.scene_id} does not match scene {bundle.scene_id}")
    if len(pred.meshes) != bundle.num_objects:
        raise InvalidArgumentError(
            f"{bundle.scene_id}: {len(pred.meshes)} predicted objects for {bundle.num_objects} in the scene")

    per_view = [_view_metrics(pred, bundle, j, far_depth) for j in range(bundle.num_views)]
    inputs = per_view[0] or {}
    others = [v for v in per_view[1:] if v is not None]
    heldout = [v for v in per_view[pred.views_used:] if v is not None]

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), bundle.spec.index]))
    chamfers, f1s = [], []
    for pred_mesh, gt_mesh in zip(pred.meshes, bundle.gt_meshes):
        chamfers.append(chamfer3d(pred_mesh, gt_mesh, n_samples, rng))
        f1s.append(f1_at(pred_mesh, gt_mesh, 0.1, n_samples, rng))

    rel_errors = []
    for layout, gt in zip(pred.layouts, bundle.gt_layouts):
        if layout is not None and gt:
            rel_errors.append(abs(layout["z"] - gt["z"]) / gt["z"])

    return {
        "mask2d_iou_input": inputs.get("iou"),
        "mask2d_iou_views": _mean(v["iou"] for v in others),
        "box2d_giou_input": inputs.get("giou"),
        "box2d_giou_views": _mean(v["giou"] for v in others),
        "depth_l1_input": inputs.get("depth_l1"),
        "depth_l1_views": _mean(v["depth_l1"] for v in others),
        "chamfer3d": _mean(chamfers),
        "f1_at_0p1": _mean(f1s),
        "mask2d_iou_heldout": _mean(v["iou"] for v in heldout),
        "depth_l1_heldout": _mean(v["depth_l1"] for v in heldout),
        "depth_rel_error": _mean(rel_errors),
    }


def evaluate(pred_scenes, bundles, n_samples=10000, seed=0, far_depth=DEFAULT_FAR_DEPTH, n_jobs=1):
    """
    Per-scene metrics plus their means over scenes. Predictions and bundles
    are matched by scene id; output is ordered by scene id.
    """
    preds = {p.scene_id: p for p in pred_scenes}
    scenes = {b.scene_id: b for b in bundles}
    if set(preds) != set(scenes):
        missing = sorted(set(scenes) ^ set(preds))
        raise InvalidArgumentError(f"predictions and scenes do not match: {', '.join(missing)}")

    ids = sorted(scenes)
    rows = Parallel(n_jobs=n_jobs)(
        delayed(evaluate_scene)(preds[i], scenes[i], n_samples, seed, far_depth) for i in ids)

    aggregate = {key: _mean(row[key] for row in rows) for key in METRIC_KEYS}
    aggregate["num_scenes"] = len(ids)
    scene_rows = [{"scene_id": i, **row} for i, row in zip(ids, rows)]
    logger.info("Evaluated %d scenes: views IoU %s, depth L1 %s",
                len(ids), aggregate["mask2d_iou_views"], aggregate["depth_l1_views"])
    return EvalReport(aggregate, scene_rows)


# ────────────── REPORT I/O ──────────────

def _canonical(value):
    if isinstance(value, dict):
        return {k: _canonical(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_canonical(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(f"{float(value):.6f}")
    return value


def write_report_json(report, path):
    """Fixed key order, six decimals: identical inputs give identical bytes."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_canonical(report.to_dict()), f, indent=2)
        f.write("\n")


def write_report_pdf(report, path):
    from report_pdf import generate_report_pdf
    return generate_report_pdf(report, path)


# ────────────── PREDICTION I/O ──────────────

def save_prediction(pred, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for o, mesh in enumerate(pred.meshes):
        save_obj(mesh, os.path.join(out_dir, f"obj_{o}_fit.obj"))
    layout = {"scene_id": pred.scene_id, "views_used": int(pred.views_used), "objects": pred.layouts}
    with open(os.path.join(out_dir, "layout.json"), "w", encoding="utf-8") as f:
        json.dump(_canonical(layout), f, indent=2)


def load_prediction(pred_dir):
    path = os.path.join(pred_dir, "layout.json")
    if not os.path.isfile(path):
        raise InvalidArgumentError(f"layout file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: malformed JSON ({exc})") from exc
    ok, message = validate_layout_descriptor(data)
    if not ok:
        raise InvalidArgumentError(f"{path}: {message}")
    meshes = [load_obj(os.path.join(pred_dir, f"obj_{o}_fit.obj")) for o in range(len(data["objects"]))]
    return PredictedScene(data.get("scene_id", os.path.basename(os.path.normpath(pred_dir))),
                          meshes, data["objects"], data["views_used"])


# ────────────── DEPTH BASELINES ──────────────

def baseline_scene(bundle, mode, bounds, rng=None, level=3, views_used=1):
    """
    A sphere per object inside the frustum of its reference-view mask box,
    at a random depth within bounds ("random") or at mid-bounds ("fixed").
    """
    if mode not in ("random", "fixed"):
        raise InvalidArgumentError(f"unknown baseline {mode!r}; expected 'random' or 'fixed'")
    if not isinstance(bounds, LayoutBounds):
        bounds = LayoutBounds.from_dict(bounds)
    rng = rng if rng is not None else np.random.default_rng(0)
    camera = bundle.cameras[0]
    sphere = icosphere(level)
    meshes, layouts = [], []
    for o in range(bundle.num_objects):
        box = bundle.mask_box(0, o)
        if box is None:
            raise InvalidArgumentError(f"{bundle.scene_id}: object {o} is not visible in the reference view")
        z = float(rng.uniform(bounds.z0, bounds.z1)) if mode == "random" else 0.5 * (bounds.z0 + bounds.z1)
        rho = min(0.5 * (bounds.rho0 + bounds.rho1), 2.0 * (z - NEAR_PLANE))
        to_view = frustum_homography(Frustum(box, z, rho), camera)
        view_vertices = to_view(sphere.vertex_values)
        meshes.append(Mesh(view_to_world(camera, view_vertices), sphere.faces, "world"))
        layouts.append({"z": z, "rho": rho, "box": list(box.as_tuple())})
    return PredictedScene(bundle.scene_id, meshes, layouts, views_used)
