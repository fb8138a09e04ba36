"""
Scene Generation Module for Silhouette Lab.
Procedural multi-object desk scenes made of primitive shapes, a ring of
cameras around them, and the baked ground truth every other module consumes:
instance maps, depth maps, per-object masks, meshes and layouts.

World frame: +Y points down, objects rest on the Y = 0 floor. Camera 0 is the
reference view.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

import settings
from errors import InvalidArgumentError
from geom import (PRIMITIVE_KINDS, Box2D, Camera, Mesh, load_obj, primitive_mesh,
                  save_obj, world_to_view, yaw_rotation)
from render import hard_rasterize, load_depth, load_png, save_depth, save_png
from scene_validator import validate_scene_descriptor

logger = logging.getLogger(__name__)

UP = np.array([0.0, -1.0, 0.0])


# ────────────── CONFIG & TYPES ──────────────

@dataclass(frozen=True)
class SceneGenConfig:
    objects: int = 2
    kinds: tuple = PRIMITIVE_KINDS
    scale_min: float = 0.25
    scale_max: float = 0.55
    x_min: float = -0.4
    x_max: float = 0.4
    z_min: float = 1.5
    z_max: float = 1.9
    superellipsoid_exponent: tuple = (0.3, 0.9)
    mesh_level: int = 3
    camera_radius: float = 2.5
    n_azimuth: int = 8
    elevations_deg: tuple = (0.0, 20.0, 40.0)
    look_at: tuple = (0.0, -0.2, 1.7)
    fov_deg: float = 40.0
    max_attempts: int = 50
    resolution: int = 128

    def __post_init__(self):
        if self.objects < 1:
            raise InvalidArgumentError("a scene needs at least one object")
        unknown = [k for k in self.kinds if k not in PRIMITIVE_KINDS]
        if unknown:
            raise InvalidArgumentError(f"unknown primitive kinds: {unknown}")
        if not 0 < self.scale_min <= self.scale_max:
            raise InvalidArgumentError("need 0 < scale_min <= scale_max")
        if self.x_min > self.x_max or self.z_min > self.z_max:
            raise InvalidArgumentError("placement ranges are inverted")
        if self.n_azimuth < 1 or not self.elevations_deg:
            raise InvalidArgumentError("need at least one azimuth and one elevation")
        if self.resolution < 1:
            raise InvalidArgumentError("resolution must be positive")

    @property
    def num_cameras(self):
        return self.n_azimuth * len(self.elevations_deg)

    @classmethod
    def from_defaults(cls, **overrides):
        data = dict(settings.load_defaults()["scenegen"])
        data.update({k: v for k, v in overrides.items() if v is not None})
        for key in ("kinds", "superellipsoid_exponent", "elevations_deg", "look_at"):
            data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ObjectSpec:
    kind: str
    scale: np.ndarray
    yaw_deg: float
    position: np.ndarray
    exponent: float = 1.0

    def mesh(self, level=3):
        """World-space mesh of the object."""
        local = primitive_mesh(self.kind, self.scale, level, self.exponent)
        rotation = yaw_rotation(self.yaw_deg)
        return Mesh(local.vertex_values @ rotation.T + self.position, local.faces, "world")

    def to_dict(self):
        return {
            "kind": self.kind,
            "scale": [float(v) for v in self.scale],
            "yaw_deg": float(self.yaw_deg),
            "position": [float(v) for v in self.position],
            "exponent": float(self.exponent),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["kind"], np.asarray(data["scale"], dtype=np.float64), float(data["yaw_deg"]),
                   np.asarray(data["position"], dtype=np.float64), float(data.get("exponent", 1.0)))


@dataclass
class SceneSpec:
    objects: list
    cameras: list
    seed: int
    index: int = 0
    mesh_level: int = 3

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise InvalidArgumentError("a scene needs at least 2 cameras")

    @property
    def scene_id(self):
        return f"scene_{self.index:04d}"


@dataclass
class SceneBundle:
    """
    Baked views of a scene.

    masks[j][o] is the full-frame mask of object o rendered alone in view j;
    instance_maps/depth_maps hold the z-buffered composite of all objects.
    gt_layouts[o] describes object o in the reference view.
    """
    spec: SceneSpec
    cameras: list
    instance_maps: list
    depth_maps: list
    masks: list
    gt_meshes: list
    gt_layouts: list
    stats: dict = field(default_factory=dict)

    @property
    def scene_id(self):
        return self.spec.scene_id

    @property
    def num_views(self):
        return len(self.cameras)

    @property
    def num_objects(self):
        return len(self.gt_meshes)

    def view_meshes(self, j):
        camera = self.cameras[j]
        return [Mesh(world_to_view(camera, m.vertex_values), m.faces, "view") for m in self.gt_meshes]

    def mask_box(self, j, o):
        return Box2D.from_mask(self.masks[j][o])


# ────────────── CAMERAS ──────────────

def farthest_first(n):
    """Order of n evenly spaced azimuth slots, each next slot farthest from those taken."""
    order = [0]
    while len(order) < n:
        best, best_gap = None, -1
        for k in range(n):
            if k in order:
                continue
            gap = min(min(abs(k - o), n - abs(k - o)) for o in order)
            if gap > best_gap:
                best, best_gap = k, gap
        order.append(best)
    return order


def look_at_camera(position, target, fov_deg, width, height):
    """Pinhole camera at position looking at target with +Y image axis pointing down."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, UP)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise InvalidArgumentError("camera looks straight along the vertical axis")
    right /= norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    focal = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
    return Camera(focal, focal, width / 2.0, height / 2.0, int(width), int(height),
                  rotation, -rotation @ position)


def generate_cameras(n_azimuth, n_elevation, radius, look_at, elevations_deg=None,
                     fov_deg=40.0, width=128, height=128):
    """
    Cameras on a sphere around look_at, all aimed at it.

    Elevation rings go from lowest to highest; within a ring azimuths start at
    0° and follow farthest-first order, so any prefix of the list is well spread.
    """
    if n_azimuth < 1 or n_elevation < 1:
        raise InvalidArgumentError("need at least one azimuth and one elevation")
    if elevations_deg is None:
        elevations_deg = np.linspace(0.0, 40.0, n_elevation) if n_elevation > 1 else [0.0]
    if len(elevations_deg) != n_elevation:
        raise InvalidArgumentError(f"expected {n_elevation} elevations, got {len(elevations_deg)}")
    look_at = np.asarray(look_at, dtype=np.float64)
    cameras = []
    for elevation in sorted(elevations_deg):
        el = np.deg2rad(elevation)
        for k in farthest_first(n_azimuth):
            az = 2.0 * np.pi * k / n_azimuth
            offset = radius * np.array([np.sin(az) * np.cos(el), -np.sin(el), -np.cos(az) * np.cos(el)])
            cameras.append(look_at_camera(look_at + offset, look_at, fov_deg, width, height))
    return cameras


# ────────────── SCENES ──────────────

def scene_rng(seed, index):
    """Independent generator stream for scene `index` of a run seeded with `seed`."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_scene(config, rng, seed=0, index=0, cameras=None):
    """Sample object kinds, sizes, yaws and floor positions. Intersections are allowed."""
    if cameras is None:
        cameras = generate_cameras(config.n_azimuth, len(config.elevations_deg), config.camera_radius,
                                   config.look_at, config.elevations_deg, config.fov_deg,
                                   config.resolution, config.resolution)
    objects = []
    for _ in range(config.objects):
        kind = config.kinds[int(rng.integers(len(config.kinds)))]
        scale = rng.uniform(config.scale_min, config.scale_max, size=3)
        yaw = float(rng.uniform(0.0, 360.0))
        x = float(rng.uniform(config.x_min, config.x_max))
        z = float(rng.uniform(config.z_min, config.z_max))
        exponent = float(rng.uniform(*config.superellipsoid_exponent)) if kind == "superellipsoid" else 1.0
        # resting on the floor, +Y down
        position = np.array([x, -0.5 * scale[1], z])
        objects.append(ObjectSpec(kind, scale, yaw, position, exponent))
    return SceneSpec(objects, list(cameras), int(seed), int(index), config.mesh_level)


def gt_layout(mesh_view, box):
    """Reference-view layout of a view-space mesh: centre depth, depth extent and box."""
    z = mesh_view.vertex_values[:, 2]
    return {"z": float(0.5 * (z.min() + z.max())), "rho": float(z.max() - z.min()),
            "box": list(box.as_tuple()) if box is not None else None}


def bake_scene(spec, views=None):
    """Hard-render every view of the spec into a SceneBundle."""
    cameras = spec.cameras if views is None else spec.cameras[:views]
    if len(cameras) < 1:
        raise InvalidArgumentError("cannot bake a scene without cameras")
    meshes = [obj.mesh(spec.mesh_level) for obj in spec.objects]
    instance_maps, depth_maps, masks = [], [], []
    layouts = []
    for j, camera in enumerate(cameras):
        view_meshes = [Mesh(world_to_view(camera, m.vertex_values), m.faces, "view") for m in meshes]
        composite = hard_rasterize(view_meshes, camera)
        instance_maps.append(composite.instance_map)
        depth_maps.append(composite.depth_map)
        view_masks = [hard_rasterize([m], camera).mask(1) for m in view_meshes]
        masks.append(view_masks)
        if j == 0:
            layouts = [gt_layout(m, Box2D.from_mask(mask)) for m, mask in zip(view_meshes, view_masks)]
    return SceneBundle(spec, list(cameras), instance_maps, depth_maps, masks, meshes, layouts)


def _acceptable(bundle, bounds):
    """Every object visible in the reference view with a layout inside the bounds."""
    for layout in bundle.gt_layouts:
        if layout["box"] is None:
            return False
        if bounds is not None and not (bounds.rho0 < layout["rho"] < bounds.rho1
                                       and bounds.z0 < layout["z"] < bounds.z1):
            return False
    return True


def generate_bundle(config, seed, index, views=None, bounds=None):
    """
    Generate and bake scene `index`, regenerating while an object is invisible
    in the reference view (or falls outside the layout bounds).
    """
    rng = scene_rng(seed, index)
    cameras = generate_cameras(config.n_azimuth, len(config.elevations_deg), config.camera_radius,
                               config.look_at, config.elevations_deg, config.fov_deg,
                               config.resolution, config.resolution)
    if views is not None and not 2 <= views <= len(cameras):
        raise InvalidArgumentError(f"--views must be between 2 and {len(cameras)}, got {views}")
    rejected = 0
    for _ in range(config.max_attempts):
        spec = generate_scene(config, rng, seed, index, cameras)
        bundle = bake_scene(spec, views)
        if _acceptable(bundle, bounds):
            bundle.stats = {"accepted": 1, "rejected": rejected}
            if rejected:
                logger.info("%s: regenerated %d time(s) before every object was visible", spec.scene_id, rejected)
            return bundle
        rejected += 1
    raise InvalidArgumentError(
        f"scene {index}: no acceptable placement after {config.max_attempts} attempts")


# ────────────── BUNDLE I/O ──────────────

def write_bundle(bundle, scene_dir):
    os.makedirs(os.path.join(scene_dir, "gt"), exist_ok=True)
    files = []
    for j in range(bundle.num_views):
        view_dir = os.path.join(scene_dir, f"view_{j}")
        os.makedirs(view_dir, exist_ok=True)
        save_png(bundle.instance_maps[j].astype(np.uint8), os.path.join(view_dir, "instance.png"))
        save_depth(bundle.depth_maps[j], os.path.join(view_dir, "depth.dpt"))
        files += [f"view_{j}/instance.png", f"view_{j}/depth.dpt"]
        for o, mask in enumerate(bundle.masks[j]):
            save_png(mask, os.path.join(view_dir, f"obj_{o}_mask.png"))
            files.append(f"view_{j}/obj_{o}_mask.png")
    for o, mesh in enumerate(bundle.gt_meshes):
        save_obj(mesh, os.path.join(scene_dir, "gt", f"obj_{o}.obj"))
        files.append(f"gt/obj_{o}.obj")

    descriptor = {
        "scene_id": bundle.scene_id,
        "seed": bundle.spec.seed,
        "index": bundle.spec.index,
        "mesh_level": bundle.spec.mesh_level,
        "objects": [obj.to_dict() for obj in bundle.spec.objects],
        "cameras": [cam.to_dict() for cam in bundle.cameras],
        "gt_layouts": bundle.gt_layouts,
        "stats": bundle.stats,
        "files": files,
    }
    with open(os.path.join(scene_dir, "scene.json"), "w", encoding="utf-8") as f:
        json.dump(descriptor, f, indent=2)
    logger.info("Wrote %s (%d views, %d objects) to %s",
                bundle.scene_id, bundle.num_views, bundle.num_objects, scene_dir)


def read_scene_descriptor(scene_dir):
    path = os.path.join(scene_dir, "scene.json")
    if not os.path.isfile(path):
        raise InvalidArgumentError(f"scene descriptor not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: malformed JSON ({exc})") from exc
    ok, message = validate_scene_descriptor(data, PRIMITIVE_KINDS)
    if not ok:
        raise InvalidArgumentError(f"{path}: {message}")
    return data


def load_bundle(scene_dir):
    data = read_scene_descriptor(scene_dir)
    cameras = [Camera.from_dict(c) for c in data["cameras"]]
    objects = [ObjectSpec.from_dict(o) for o in data["objects"]]
    spec = SceneSpec(objects, cameras, int(data["seed"]), int(data.get("index", 0)),
                     int(data.get("mesh_level", 3)))

    instance_maps, depth_maps, masks = [], [], []
    for j in range(len(cameras)):
        view_dir = os.path.join(scene_dir, f"view_{j}")
        instance_maps.append(load_png(os.path.join(view_dir, "instance.png")).astype(np.int32))
        depth_maps.append(load_depth(os.path.join(view_dir, "depth.dpt")))
        masks.append([load_png(os.path.join(view_dir, f"obj_{o}_mask.png")) > 127
                      for o in range(len(objects))])
    meshes = [load_obj(os.path.join(scene_dir, "gt", f"obj_{o}.obj")) for o in range(len(objects))]
    layouts = data.get("gt_layouts") or []
    return SceneBundle(spec, cameras, instance_maps, depth_maps, masks, meshes, layouts,
                       data.get("stats", {}))


def list_scene_dirs(root):
    """Scene directories under root in sorted order (root itself if it is one)."""
    if os.path.isfile(os.path.join(root, "scene.json")):
        return [root]
    if not os.path.isdir(root):
        raise InvalidArgumentError(f"scene directory not found: {root}")
    return [os.path.join(root, d) for d in sorted(os.listdir(root))
            if os.path.isfile(os.path.join(root, d, "scene.json"))]
