"""
Learned Mode for Silhouette Lab.
A tiny network trained across scenes with the same multi-view silhouette
loss the fitter uses: a two-layer conv backbone over the reference-view
silhouette, a layout head on RoI-pooled features and one refinement stage.
Weights are stored as USLW checkpoints.
"""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

import diff
import settings
from errors import InvalidArgumentError, NumericalFailure
from fitter import REG_ALIASES, build_targets
from geom import Frustum, LayoutBounds, Mesh, frustum_homography, icosphere, mesh_edges, view_to_world
from loss import LossWeights, ScenePrediction, total_loss
from metrics import PredictedScene
from net import (RefinementState, conv_backbone, init_conv_weights, init_layout_weights,
                 init_stage_weights, layout_head_forward, load_checkpoint, refine_stage, roi_pool,
                 save_checkpoint)
from optimizer import AdamState, adam_step
from render import RenderConfig

logger = logging.getLogger(__name__)

GROUPS = ("conv", "stage", "layout")


@dataclass(frozen=True)
class LearnConfig:
    steps: int = 2000
    lr: float = 1e-3
    views: int = 2
    points: int = 200
    ico_level: int = 2
    render: RenderConfig = field(default_factory=lambda: RenderConfig((32, 32)))
    weights: LossWeights = field(default_factory=LossWeights)
    bounds: LayoutBounds = field(default_factory=lambda: LayoutBounds(0.05, 1.0, 1.0, 5.0))
    conv_channels: tuple = (8, 16)
    refine_hidden: int = 16
    layout_hidden: int = 256
    stage_out_scale: float = 0.01
    sampler: str = "roimap"
    roi_size: int = 14
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.views < 1 or self.points < 1:
            raise InvalidArgumentError("steps, views and points must all be at least 1")
        if not self.lr > 0:
            raise InvalidArgumentError("learning rate must be positive")

    @classmethod
    def from_defaults(cls, reg="l2", **overrides):
        defaults = settings.load_defaults()
        learned = defaults["learned"]
        render = dict(defaults["render"])
        resolution = overrides.pop("render_resolution", None) or learned["render_resolution"]
        render["resolution"] = [int(resolution), int(resolution)]
        values = {
            "steps": learned["steps"], "lr": learned["lr"], "views": learned["views"],
            "points": learned["points"], "ico_level": learned["ico_level"],
            "render": RenderConfig.from_dict(render),
            "weights": LossWeights.from_dict(REG_ALIASES.get(reg, reg), defaults["loss_weights"]),
            "bounds": LayoutBounds.from_dict(defaults["layout_bounds"]),
            "conv_channels": tuple(learned["conv_channels"]),
            "refine_hidden": learned["refine_hidden"], "layout_hidden": learned["layout_hidden"],
            "stage_out_scale": learned["stage_out_scale"], "log_every": learned["log_every"],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


# ────────────── MODEL ──────────────

def init_model(config, rng):
    """Flat dict of weight arrays, names prefixed by their group."""
    channels = config.conv_channels[-1]
    arrays = {}
    for name, value in init_conv_weights(rng, 1, config.conv_channels).items():
        arrays[f"conv.{name}"] = value
    for name, value in init_stage_weights(channels, config.refine_hidden, rng, config.stage_out_scale).items():
        arrays[f"stage.{name}"] = value
    for name, value in init_layout_weights(channels, rng, config.layout_hidden).items():
        arrays[f"layout.{name}"] = value
    return arrays


def _group(weights, group):
    prefix = group + "."
    return {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}


def save_model(weights, path):
    save_checkpoint(path, weights)


def load_model(path):
    weights = load_checkpoint(path)
    missing = [g for g in GROUPS if not _group(weights, g)]
    if missing:
        raise InvalidArgumentError(f"{path}: checkpoint has no {', '.join(missing)} weights")
    return weights


@dataclass
class TrainingScene:
    """Everything a training step needs from one bundle, computed once."""
    bundle: object
    image: np.ndarray
    boxes: list
    targets: list


def prepare_scene(bundle, config, rng):
    if bundle.num_views < config.views:
        raise InvalidArgumentError(f"{bundle.scene_id}: needs {config.views} views, has {bundle.num_views}")
    boxes = [bundle.mask_box(0, o) for o in range(bundle.num_objects)]
    if any(box is None for box in boxes):
        raise InvalidArgumentError(f"{bundle.scene_id}: an object has an empty reference-view mask")
    image = (bundle.instance_maps[0] > 0).astype(np.float64)
    return TrainingScene(bundle, image, boxes, build_targets(bundle, config.views, config.points, rng))


def forward(weights, scene, config):
    """ScenePrediction for one scene; weights may be arrays or tape variables."""
    camera = scene.bundle.cameras[0]
    base = icosphere(config.ico_level)
    edges = mesh_edges(base)
    fmap = conv_backbone(scene.image, _group(weights, "conv"))
    layout_weights = _group(weights, "layout")
    stage_weights = _group(weights, "stage")
    meshes, normalized, offsets, layouts = [], [], [], []
    for box in scene.boxes:
        rho, z = layout_head_forward(roi_pool(fmap, box, config.roi_size), layout_weights, config.bounds)
        rho, z = diff.getitem(rho, 0), diff.getitem(z, 0)
        frustum = Frustum(box, z, rho)
        state = refine_stage(RefinementState(base.vertex_values, edges), fmap, camera, frustum,
                             stage_weights, config.sampler, config.roi_size)
        meshes.append(Mesh(frustum_homography(frustum, camera)(state.vertices), base.faces, "view"))
        normalized.append(Mesh(state.vertices, base.faces, "normalized"))
        offsets.append(state.offsets)
        layouts.append((rho, z))
    return ScenePrediction(meshes, normalized, offsets), layouts


def scene_loss(weights, scene, config, rng):
    prediction, _ = forward(weights, scene, config)
    return total_loss(prediction, scene.targets, config.weights, config.render, config.points, rng)


def weight_gradients(weights, scene, config, seed=0):
    """Gradient of one scene's loss for every weight array (values only)."""
    tape = diff.Tape()
    variables = {name: tape.leaf(value) for name, value in weights.items()}
    loss = scene_loss(variables, scene, config, np.random.default_rng(seed))
    grads = diff.backward(loss.total)
    return {name: grads[var] for name, var in variables.items()}


def predict_scene(weights, bundle, config):
    """PredictedScene (world-space meshes) for evaluation."""
    scene = prepare_scene(bundle, config, np.random.default_rng(0))
    prediction, layouts = forward(weights, scene, config)
    camera = bundle.cameras[0]
    meshes = [Mesh(view_to_world(camera, diff.value(m.vertices)), m.faces, "world") for m in prediction.meshes]
    layout_rows = [{"z": float(diff.value(z)), "rho": float(diff.value(rho)), "box": list(box.as_tuple())}
                   for (rho, z), box in zip(layouts, scene.boxes)]
    return PredictedScene(bundle.scene_id, meshes, layout_rows, config.views)


# ────────────── TRAINING ──────────────

@dataclass
class TrainResult:
    weights: dict
    trace: list

    def loss_drop(self, window=50):
        """Relative drop between the mean loss of the first and last `window` steps."""
        losses = np.array([row["loss"] for row in self.trace])
        window = max(1, min(window, len(losses) // 2 or 1))
        first, last = losses[:window].mean(), losses[-window:].mean()
        return float((first - last) / first) if first > 0 else 0.0


def train(bundles, config, weights=None):
    """
    Train on the bundles, one scene per step in a fixed cyclic order.
    Returns the final weights and a per-step trace.
    """
    if not bundles:
        raise InvalidArgumentError("training needs at least one scene")
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0]))
    scenes = [prepare_scene(b, config, rng) for b in sorted(bundles, key=lambda b: b.scene_id)]
    weights = {k: np.array(v, dtype=np.float64) for k, v in (weights or init_model(config, rng)).items()}
    state = AdamState()
    trace = []
    logger.info("Training on %d scenes for %d steps (%d weight arrays)", len(scenes), config.steps, len(weights))

    for step in range(config.steps):
        scene = scenes[step % len(scenes)]
        tape = diff.Tape()
        variables = {name: tape.leaf(value) for name, value in weights.items()}
        loss = scene_loss(variables, scene, config,
                          np.random.default_rng(np.random.SeedSequence([int(config.seed), 1, step])))
        value = float(diff.value(loss.total))
        if not np.isfinite(value):
            raise NumericalFailure(f"training loss became non-finite at step {step}", state=weights)
        grads = diff.backward(loss.total)
        adam_step(weights, {name: grads[var] for name, var in variables.items()}, state, config.lr)
        trace.append({"step": step, "scene_id": scene.bundle.scene_id, "loss": value,
                      "l3d": float(diff.value(loss.l3d))})
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d/%d (%s): loss %.6f", step, config.steps, scene.bundle.scene_id, value)

    return TrainResult(weights, trace)


def write_training_outputs(result, out_dir):
    """model.uslw and train_trace.csv."""
    os.makedirs(out_dir, exist_ok=True)
    save_model(result.weights, os.path.join(out_dir, "model.uslw"))
    with open(os.path.join(out_dir, "train_trace.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("step", "scene_id", "loss", "l3d"))
        for row in result.trace:
            writer.writerow((row["step"], row["scene_id"], f"{row['loss']:.9g}", f"{row['l3d']:.9g}"))
    logger.info("Model trained and saved to %s", out_dir)
