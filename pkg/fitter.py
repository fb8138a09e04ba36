"""
Multi-View Fitting Module for Silhouette Lab.
Recovers per-object shape and layout of a baked scene by optimising, with
Adam, each object's layout logits and vertex offsets against the multi-view
silhouette loss. The reference view is camera 0; every object lives in the
frustum of its reference-view mask box.
"""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

import diff
import settings
from errors import InvalidArgumentError, NumericalFailure
from geom import (Frustum, LayoutBounds, Mesh, frustum_homography, icosphere, layout_decode,
                  inverse_frustum_homography, mesh_edges, relative_transform, view_to_world,
                  world_to_view)
from loss import (LossWeights, ScenePrediction, ViewTarget, sample_gt_silhouette,
                  total_loss)
from metrics import PredictedScene, save_prediction
from net import RefinementState, fixed_backbone, init_stage_weights, refine_stage
from optimizer import AdamState, adam_step
from render import RenderConfig

logger = logging.getLogger(__name__)

INIT_MODES = ("sphere_center", "perturbed_gt")
REG_ALIASES = {"edge": "edge", "l2": "l2_offsets", "l2lap": "l2_offsets_plus_laplacian"}
OFFSET_LIMIT = 1.0 - 1e-6


# ────────────── CONFIG ──────────────

@dataclass(frozen=True)
class FitConfig:
    views: int = 5
    iterations: int = 800
    lr_layout: float = 0.05
    lr_offsets: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    points: int = 1000
    ico_level: int = 3
    render: RenderConfig = field(default_factory=lambda: RenderConfig((64, 64)))
    weights: LossWeights = field(default_factory=LossWeights)
    bounds: LayoutBounds = field(default_factory=lambda: LayoutBounds(0.05, 1.0, 1.0, 5.0))
    seed: int = 0
    init: str = "sphere_center"
    perturb: float = 0.0
    init_z_logit: float = 0.0
    init_rho_logit: float = 0.0
    dynamic_render: bool = False
    region_margin: float = 4.0
    use_dist: bool = True
    oracle_depth: bool = False
    refine: bool = False
    sampler: str = "roimap"
    roi_size: int = 14
    refine_hidden: int = 16
    log_every: int = 50
    allow_single_view: bool = False
    resample_points: bool = True
    patience: int = 0
    min_improvement: float = 1e-3
    smoothing: float = 0.9

    def __post_init__(self):
        if self.views < 1 or (self.views == 1 and not self.allow_single_view):
            raise InvalidArgumentError("fitting needs 2 or more views (single view only when explicitly allowed)")
        if self.iterations < 0 or self.points < 1:
            raise InvalidArgumentError("iterations must be >= 0 and points >= 1")
        if not (self.lr_layout > 0 and self.lr_offsets > 0):
            raise InvalidArgumentError("learning rates must be positive")
        if self.init not in INIT_MODES:
            raise InvalidArgumentError(f"unknown init mode {self.init!r}; expected one of {INIT_MODES}")
        if self.sampler not in ("roimap", "roialign"):
            raise InvalidArgumentError(f"unknown sampler {self.sampler!r}")
        if self.perturb < 0:
            raise InvalidArgumentError("perturbation must be non-negative")
        if self.patience < 0 or self.min_improvement < 0:
            raise InvalidArgumentError("patience and min_improvement must be non-negative")
        if not 0.0 <= self.smoothing < 1.0:
            raise InvalidArgumentError("trace smoothing must lie in [0, 1)")

    @classmethod
    def from_defaults(cls, reg="l2", **overrides):
        defaults = settings.load_defaults()
        fit = defaults["fit"]
        render = dict(defaults["render"])
        resolution = overrides.pop("render_resolution", None) or fit["render_resolution"]
        render["resolution"] = [int(resolution), int(resolution)]
        reg_kind = REG_ALIASES.get(reg, reg)
        values = {
            "views": fit["views"], "iterations": fit["iterations"],
            "lr_layout": fit["lr_layout"], "lr_offsets": fit["lr_offsets"],
            "adam_beta1": fit["adam_beta1"], "adam_beta2": fit["adam_beta2"], "adam_eps": fit["adam_eps"],
            "points": fit["points"], "ico_level": fit["ico_level"],
            "render": RenderConfig.from_dict(render),
            "weights": LossWeights.from_dict(reg_kind, defaults["loss_weights"]),
            "bounds": LayoutBounds.from_dict(defaults["layout_bounds"]),
            "init": fit["init"], "perturb": fit["perturb"],
            "init_z_logit": fit["init_z_logit"], "init_rho_logit": fit["init_rho_logit"],
            "region_margin": fit["region_margin"], "roi_size": fit["roi_size"],
            "log_every": fit["log_every"], "resample_points": fit["resample_points"],
            "patience": fit["patience"], "min_improvement": fit["min_improvement"],
            "smoothing": fit["smoothing"],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


# ────────────── HYPOTHESES ──────────────

def _logit(p):
    p = np.clip(p, 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


@dataclass
class ObjectHypothesis:
    """Optimisable state of one object: fixed box, layout logits, raw offsets."""
    box: object
    z_logit: np.ndarray
    rho_logit: np.ndarray
    offsets: np.ndarray

    def param_names(self, o):
        return f"obj{o}_z", f"obj{o}_rho", f"obj{o}_dv"


def layout_decode_logits(rho_logit, z_logit, bounds):
    """(rho, z) from unbounded logits."""
    return layout_decode(diff.sigmoid(rho_logit), diff.sigmoid(z_logit), bounds)


def normalized_vertices(base, offsets):
    """Base sphere moved by tanh-bounded offsets, clamped to the normalized cube."""
    return diff.clip(diff.add(base, diff.tanh(offsets)), -1.0, 1.0)


def init_hypotheses(bundle, config, rng):
    """Initial state for every object, per config.init."""
    camera = bundle.cameras[0]
    base = icosphere(config.ico_level)
    hypotheses = []
    for o in range(bundle.num_objects):
        box = bundle.mask_box(0, o)
        if box is None:
            raise InvalidArgumentError(f"{bundle.scene_id}: object {o} has an empty reference-view mask")
        if config.init == "sphere_center":
            hypotheses.append(ObjectHypothesis(
                box, np.array(float(config.init_z_logit)), np.array(float(config.init_rho_logit)),
                np.zeros_like(base.vertex_values)))
            continue

        gt = bundle.gt_layouts[o]
        bounds = config.bounds
        z_logit = _logit((gt["z"] - bounds.z0) / (bounds.z1 - bounds.z0))
        rho_logit = _logit((gt["rho"] - bounds.rho0) / (bounds.rho1 - bounds.rho0))
        gt_view = world_to_view(camera, bundle.gt_meshes[o].vertex_values)
        if gt_view.shape != base.vertex_values.shape:
            raise InvalidArgumentError(
                f"perturbed_gt init needs ground truth meshes with icosphere level {config.ico_level} topology")
        to_normalized = inverse_frustum_homography(Frustum(box, gt["z"], gt["rho"]), camera)
        delta = np.clip(to_normalized(gt_view) - base.vertex_values, -OFFSET_LIMIT, OFFSET_LIMIT)
        offsets = np.arctanh(delta)
        if config.perturb > 0:
            z_logit += config.perturb * rng.standard_normal()
            rho_logit += config.perturb * rng.standard_normal()
            offsets = offsets + config.perturb * rng.standard_normal(offsets.shape)
        hypotheses.append(ObjectHypothesis(box, np.array(z_logit), np.array(rho_logit), offsets))
    return hypotheses


# ────────────── TARGETS ──────────────

def build_targets(bundle, views, n_points, rng):
    """Ground truth of the fitted views; view 0 is the reference view itself."""
    reference = bundle.cameras[0]
    targets = []
    for j in range(views):
        camera = bundle.cameras[j]
        transform = None if j == 0 else relative_transform(reference, camera)
        masks, points, boxes = [], [], []
        for o in range(bundle.num_objects):
            mask = bundle.masks[j][o]
            visible = bool(mask.any())
            masks.append(mask if visible else None)
            points.append(sample_gt_silhouette(mask, n_points, rng, camera.diagonal) if visible else None)
            boxes.append(bundle.mask_box(j, o) if visible else None)
        targets.append(ViewTarget(camera, transform, masks, points, boxes))
    return targets


# ────────────── RESULT ──────────────

@dataclass
class FitResult:
    scene_id: str
    meshes: list
    layouts: list
    views_used: int
    trace: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def to_prediction(self):
        return PredictedScene(self.scene_id, self.meshes, self.layouts, self.views_used)


TRACE_COLUMNS = ("iteration", "l3d", "dist_share", "xent_share", "total", "smoothed", "best_l3d")


def write_fit_outputs(result, out_dir):
    """obj_{o}_fit.obj (world coordinates), layout.json and trace.csv."""
    save_prediction(result.to_prediction(), out_dir)
    with open(os.path.join(out_dir, "trace.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for row in result.trace:
            writer.writerow([row["iteration"]] + [f"{row[c]:.9g}" for c in TRACE_COLUMNS[1:]])


# ────────────── FITTING ──────────────

class SceneFitter:
    """Decodes parameters into a scene prediction and runs the Adam loop."""

    def __init__(self, bundle, config):
        if bundle.num_views < config.views:
            raise InvalidArgumentError(
                f"{bundle.scene_id}: {config.views} views requested but only {bundle.num_views} stored")
        self.bundle = bundle
        self.config = config
        self.camera = bundle.cameras[0]
        self.base = icosphere(config.ico_level)
        self.edges = mesh_edges(self.base)
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0]))
        self.hypotheses = init_hypotheses(bundle, config, rng)
        self.targets = build_targets(bundle, config.views, config.points, rng)
        self.params, self.learning_rates = self._initial_params(rng)
        self.feature_map = None
        if config.refine:
            silhouette = (bundle.instance_maps[0] > 0).astype(np.float64)
            self.feature_map = fixed_backbone(silhouette)

    def _initial_params(self, rng):
        params, lrs = {}, {}
        for o, hyp in enumerate(self.hypotheses):
            z_name, rho_name, dv_name = hyp.param_names(o)
            if not self.config.oracle_depth:
                params[z_name] = hyp.z_logit.astype(np.float64).copy()
                params[rho_name] = hyp.rho_logit.astype(np.float64).copy()
                lrs[z_name] = lrs[rho_name] = self.config.lr_layout
            if not self.config.refine:
                params[dv_name] = hyp.offsets.astype(np.float64).copy()
                lrs[dv_name] = self.config.lr_offsets
        if self.config.refine:
            channels = 5
            for name, value in init_stage_weights(channels, self.config.refine_hidden, rng).items():
                params[f"stage_{name}"] = value
                lrs[f"stage_{name}"] = self.config.lr_offsets
        return params, lrs

    def _layout(self, o, variables):
        hyp = self.hypotheses[o]
        z_name, rho_name, _ = hyp.param_names(o)
        if self.config.oracle_depth:
            gt = self.bundle.gt_layouts[o]
            return gt["rho"], gt["z"]
        return layout_decode_logits(variables[rho_name], variables[z_name], self.config.bounds)

    def decode(self, variables):
        """ScenePrediction (reference-view meshes) from parameter values or tape variables."""
        meshes, normalized, offsets = [], [], []
        stage = {k[len("stage_"):]: v for k, v in variables.items() if k.startswith("stage_")}
        for o, hyp in enumerate(self.hypotheses):
            rho, z = self._layout(o, variables)
            frustum = Frustum(hyp.box, z, rho)
            if self.config.refine:
                state = refine_stage(RefinementState(self.base.vertex_values, self.edges), self.feature_map,
                                     self.camera, frustum, stage, self.config.sampler, self.config.roi_size)
                verts, raw = state.vertices, state.offsets
            else:
                raw = variables[hyp.param_names(o)[2]]
                verts = normalized_vertices(self.base.vertex_values, raw)
            view_vertices = frustum_homography(frustum, self.camera)(verts)
            meshes.append(Mesh(view_vertices, self.base.faces, "view"))
            normalized.append(Mesh(verts, self.base.faces, "normalized"))
            offsets.append(raw)
        return ScenePrediction(meshes, normalized, offsets)

    def sample_rng(self, iteration):
        """Surface-sample stream of one iteration; the same every iteration when resampling is off."""
        key = [int(self.config.seed), 1]
        if self.config.resample_points:
            key.append(int(iteration))
        return np.random.default_rng(np.random.SeedSequence(key))

    def evaluate_loss(self, variables, iteration=0):
        rng = self.sample_rng(iteration)
        prediction = self.decode(variables)
        loss = total_loss(prediction, self.targets, self.config.weights, self.config.render,
                          self.config.points, rng, dynamic=self.config.dynamic_render,
                          margin=self.config.region_margin, use_dist=self.config.use_dist)
        return prediction, loss

    def result(self, params, trace):
        prediction = self.decode(params)
        meshes, layouts = [], []
        for o, mesh in enumerate(prediction.meshes):
            meshes.append(Mesh(view_to_world(self.camera, diff.value(mesh.vertices)), mesh.faces, "world"))
            rho, z = self._layout(o, params)
            layouts.append({"z": float(diff.value(z)), "rho": float(diff.value(rho)),
                            "box": list(self.hypotheses[o].box.as_tuple())})
        return FitResult(self.bundle.scene_id, meshes, layouts, self.config.views, trace,
                         {k: v.copy() for k, v in params.items()})

    def run(self):
        config = self.config
        params = self.params
        state = AdamState()
        trace = []
        best = np.inf
        smoothed = None
        plateau_floor, improved_at = np.inf, 0
        last_good = {k: v.copy() for k, v in params.items()}

        for it in range(config.iterations + 1):
            tape = diff.Tape()
            variables = {name: tape.leaf(value) for name, value in params.items()}
            _, loss = self.evaluate_loss(variables, it)
            total = float(diff.value(loss.total))
            l3d = float(diff.value(loss.l3d))
            if not np.isfinite(total):
                raise NumericalFailure(f"{self.bundle.scene_id}: loss became non-finite at iteration {it}",
                                       state=self.result(last_good, trace))
            best = min(best, l3d)
            smoothed = total if smoothed is None else config.smoothing * smoothed + (1.0 - config.smoothing) * total
            trace.append({"iteration": it, "l3d": l3d, "dist_share": loss.dist_share, "xent_share": loss.xent_share,
                          "total": total, "smoothed": smoothed, "best_l3d": best})
            if config.log_every and it % config.log_every == 0:
                logger.info("%s iter %d/%d: loss %.6f (L3D %.6f, dist share %.2f)",
                            self.bundle.scene_id, it, config.iterations, total, l3d, loss.dist_share)
            if it == config.iterations or not diff.is_var(loss.total):
                break
            if smoothed < plateau_floor * (1.0 - config.min_improvement):
                plateau_floor, improved_at = smoothed, it
            elif config.patience and it - improved_at >= config.patience:
                logger.info("%s: smoothed loss flat for %d iterations, stopping at %d",
                            self.bundle.scene_id, config.patience, it)
                break

            last_good = {k: v.copy() for k, v in params.items()}
            grads = diff.backward(loss.total)
            try:
                adam_step(params, {name: grads[var] for name, var in variables.items()}, state,
                          self.learning_rates, config.adam_beta1, config.adam_beta2, config.adam_eps)
            except NumericalFailure as exc:
                raise NumericalFailure(f"{self.bundle.scene_id}: {exc}", state=self.result(last_good, trace)) from exc

        return self.result(params, trace)


def fit_scene(bundle, config):
    """Fit every object of the bundle from its first config.views views."""
    logger.info("Fitting %s: %d objects, %d views, %d iterations",
                bundle.scene_id, bundle.num_objects, config.views, config.iterations)
    return SceneFitter(bundle, config).run()

